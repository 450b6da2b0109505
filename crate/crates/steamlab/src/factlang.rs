//! Synthetic fact language.
//!
//! A corpus is a closed world of invented entities and relations. Every
//! relation is functional (one object per subject) and comes with one
//! canonical cloze template plus paraphrases that permute the carrier words.
//! The generator also emits "{s} is a {kind}" category sentences and two-hop
//! chain sentences so a model trained on the rendered text has something to
//! say for generic prompts and compositional questions.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::seeds::{self, salt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    /// Whitespace-separated surface, 1 to 3 words.
    pub surface: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Relation {
    pub id: RelationId,
    /// Noun word used in "the {noun} of {s} is".
    pub noun: String,
    /// Verb word used in the "{s} {verb}" paraphrase.
    pub verb: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Canonical,
    Paraphrase,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub relation: RelationId,
    pub kind: TemplateKind,
    /// Cloze pattern with exactly one "{s}" slot; the object is elicited at
    /// the end of the rendered prompt.
    pub pattern: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

/// Two-hop supervision: "the {noun of second} of the {noun of first} of {s}"
/// with the answer resolved through the true intermediate object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChainFact {
    pub subject: EntityId,
    pub first: RelationId,
    pub second: RelationId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub entities: usize,
    pub relations: usize,
    pub facts_per_relation: usize,
    /// Paraphrase templates per relation, 1 to 4.
    pub paraphrases_per_relation: usize,
    /// Number of two-hop chain sentences to include in the training text.
    pub multihop_pairs: usize,
    /// Size of the entity subset eligible as objects. Keeping it small
    /// concentrates incoming references so edit targets have enough support.
    pub object_pool: usize,
    /// Number of "{s} is a {kind}" category words.
    pub categories: usize,
    /// Upper bound on vocabulary size (generation fails if the world needs
    /// more words; spare budget becomes filler words).
    pub vocab_budget: usize,
    /// When false (default) object-pool entities get single-token surfaces.
    pub multi_token_objects: bool,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            entities: 50,
            relations: 8,
            facts_per_relation: 40,
            paraphrases_per_relation: 2,
            multihop_pairs: 240,
            object_pool: 10,
            categories: 6,
            vocab_budget: 360,
            multi_token_objects: false,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities < 2 {
            return Err(Error::Config("corpus needs at least 2 entities".into()));
        }
        if self.relations == 0 {
            return Err(Error::Config("corpus needs at least 1 relation".into()));
        }
        if self.facts_per_relation == 0 {
            return Err(Error::Config("facts_per_relation must be positive".into()));
        }
        if self.facts_per_relation > self.entities {
            return Err(Error::Config(format!(
                "facts_per_relation ({}) exceeds the {} available subjects per relation",
                self.facts_per_relation, self.entities
            )));
        }
        if self.paraphrases_per_relation == 0 || self.paraphrases_per_relation > PARAPHRASE_SHAPES
        {
            return Err(Error::Config(format!(
                "paraphrases_per_relation must be in 1..={}, got {}",
                PARAPHRASE_SHAPES, self.paraphrases_per_relation
            )));
        }
        if self.object_pool == 0 || self.object_pool > self.entities {
            return Err(Error::Config(format!(
                "object_pool must be in 1..={}, got {}",
                self.entities, self.object_pool
            )));
        }
        if self.categories == 0 {
            return Err(Error::Config("corpus needs at least 1 category".into()));
        }
        Ok(())
    }
}

/// The carrier words shared by all templates.
pub const CARRIERS: [&str; 4] = ["the", "of", "is", "a"];

const PARAPHRASE_SHAPES: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactCorpus {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub triples: Vec<FactTriple>,
    pub templates: Vec<Template>,
    /// Every word of the language in a fixed order; the tokenizer is built
    /// directly from this list.
    pub vocab: Vec<String>,
    pub seed: u64,
    /// Category kind words for "{s} is a {kind}" sentences.
    pub categories: Vec<String>,
    /// Entity index -> category index.
    pub category_of: Vec<usize>,
    pub chains: Vec<ChainFact>,
    pub config: CorpusConfig,
}

/// Deterministic synthetic word factory. Words are short consonant-vowel
/// strings, so they can never collide with the carrier words.
struct WordFactory {
    used: HashSet<String>,
}

impl WordFactory {
    fn new() -> Self {
        let used = CARRIERS.iter().map(|s| s.to_string()).collect();
        WordFactory { used }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> String {
        const ONSETS: [&str; 20] = [
            "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr",
            "kr", "pl", "st", "tr",
        ];
        const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ar", "el", "or"];
        const CODAS: [&str; 6] = ["", "", "n", "k", "m", "x"];
        loop {
            let syllables = rng.gen_range(1..=2);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
                w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
            }
            w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
            if w.len() >= 2 && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// Generate a corpus from a config. The same config (seed included) always
/// produces byte-identical output.
pub fn generate_corpus(config: &CorpusConfig) -> Result<FactCorpus> {
    config.validate()?;
    let mut rng = seeds::rng(config.seed, salt::CORPUS);
    let mut words = WordFactory::new();

    // Entities. The first `object_pool` entities are the object candidates;
    // they stay single-token so an answer is one next-token prediction. The
    // rest get two-word names with BOTH words drawn from shared pools, like
    // given and family names: each word belongs to two entities and only the
    // pair identifies one. No single embedding carries the identity, so the
    // network has to bind the pair into a computed state before it can
    // recall any fact about the subject.
    let named = config.entities.saturating_sub(config.object_pool);
    let pool_words = named.div_ceil(2).max(2);
    let givens: Vec<String> = (0..pool_words).map(|_| words.next(&mut rng)).collect();
    let families: Vec<String> = (0..pool_words).map(|_| words.next(&mut rng)).collect();
    let mut pairs: Vec<(usize, usize)> = (0..named)
        .map(|i| (i % pool_words, (i % pool_words + i / pool_words) % pool_words))
        .collect();
    pairs.shuffle(&mut rng);
    let mut entities = Vec::with_capacity(config.entities);
    for i in 0..config.entities {
        let in_pool = i < config.object_pool;
        let surface = if in_pool && !config.multi_token_objects {
            words.next(&mut rng)
        } else if in_pool {
            format!("{} {}", words.next(&mut rng), words.next(&mut rng))
        } else {
            let (g, f) = pairs[i - config.object_pool];
            format!("{} {}", givens[g], families[f])
        };
        entities.push(Entity {
            id: EntityId(i as u32),
            surface,
        });
    }

    let mut relations = Vec::with_capacity(config.relations);
    for i in 0..config.relations {
        relations.push(Relation {
            id: RelationId(i as u32),
            noun: words.next(&mut rng),
            verb: words.next(&mut rng),
        });
    }

    let mut templates = Vec::new();
    for rel in &relations {
        templates.push(Template {
            relation: rel.id,
            kind: TemplateKind::Canonical,
            pattern: format!("the {} of {{s}} is", rel.noun),
        });
        // Every shape keeps the subject away from the sentence start, at the
        // same depth range the canonical prompt and its sampled prefixes
        // cover, so a state rewrite keyed on the subject's position-bearing
        // activations fires across all of them.
        let shapes = [
            format!("the {} of {{s}} is", rel.verb),
            format!("the {} of {{s}}", rel.noun),
            format!("of {{s}} the {} is", rel.noun),
            format!("the {} the {{s}} is", rel.verb),
        ];
        for shape in shapes.iter().take(config.paraphrases_per_relation) {
            templates.push(Template {
                relation: rel.id,
                kind: TemplateKind::Paraphrase,
                pattern: shape.clone(),
            });
        }
    }

    // Triples: per relation, subjects drawn without replacement (functional
    // relation), objects drawn from the pool, never reflexive.
    let mut triples = Vec::new();
    for rel in &relations {
        let mut subjects: Vec<usize> = (0..config.entities).collect();
        subjects.shuffle(&mut rng);
        subjects.truncate(config.facts_per_relation);
        for &s in &subjects {
            let object = loop {
                let o = rng.gen_range(0..config.object_pool);
                if o != s {
                    break o;
                }
                if config.object_pool == 1 {
                    return Err(Error::Corpus(
                        "object pool of 1 cannot serve its own member as subject".into(),
                    ));
                }
            };
            triples.push(FactTriple {
                subject: EntityId(s as u32),
                relation: rel.id,
                object: EntityId(object as u32),
            });
        }
    }

    let categories: Vec<String> = (0..config.categories)
        .map(|_| words.next(&mut rng))
        .collect();
    let category_of: Vec<usize> = (0..config.entities)
        .map(|_| rng.gen_range(0..config.categories))
        .collect();

    // Two-hop chains over existing facts, deduplicated.
    let mut chains = Vec::new();
    let mut seen = HashSet::new();
    if config.multihop_pairs > 0 {
        let mut attempts = 0usize;
        let max_attempts = config.multihop_pairs * 64;
        while chains.len() < config.multihop_pairs && attempts < max_attempts {
            attempts += 1;
            let t1 = triples[rng.gen_range(0..triples.len())];
            let second = RelationId(rng.gen_range(0..config.relations) as u32);
            let chain = ChainFact {
                subject: t1.subject,
                first: t1.relation,
                second,
            };
            if seen.contains(&chain) {
                continue;
            }
            let mid = t1.object;
            if lookup_object(&triples, mid, second).is_none() {
                continue;
            }
            seen.insert(chain);
            chains.push(chain);
        }
        if chains.is_empty() {
            return Err(Error::Corpus(
                "no two-hop chains exist; object-pool entities never appear as subjects".into(),
            ));
        }
    }

    // Vocabulary: carriers, entity words, relation words, category words,
    // then filler words up to the budget. Family words repeat across entity
    // surfaces, so entity words are deduplicated.
    let mut vocab: Vec<String> = CARRIERS.iter().map(|s| s.to_string()).collect();
    let mut seen: HashSet<String> = vocab.iter().cloned().collect();
    for e in &entities {
        for w in e.surface.split_whitespace() {
            if seen.insert(w.to_string()) {
                vocab.push(w.to_string());
            }
        }
    }
    for r in &relations {
        vocab.push(r.noun.clone());
        vocab.push(r.verb.clone());
    }
    vocab.extend(categories.iter().cloned());
    if vocab.len() > config.vocab_budget {
        return Err(Error::Corpus(format!(
            "world needs {} words but vocab_budget is {}",
            vocab.len(),
            config.vocab_budget
        )));
    }
    while vocab.len() < config.vocab_budget {
        vocab.push(words.next(&mut rng));
    }

    Ok(FactCorpus {
        entities,
        relations,
        triples,
        templates,
        vocab,
        seed: config.seed,
        categories,
        category_of,
        chains,
        config: config.clone(),
    })
}

fn lookup_object(triples: &[FactTriple], subject: EntityId, relation: RelationId) -> Option<EntityId> {
    triples
        .iter()
        .find(|t| t.subject == subject && t.relation == relation)
        .map(|t| t.object)
}

impl FactCorpus {
    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id.idx()]
    }

    pub fn relation(&self, id: RelationId) -> &Relation {
        &self.relations[id.idx()]
    }

    pub fn surface(&self, id: EntityId) -> &str {
        &self.entities[id.idx()].surface
    }

    pub fn entity_by_surface(&self, surface: &str) -> Option<EntityId> {
        self.entities
            .iter()
            .find(|e| e.surface == surface)
            .map(|e| e.id)
    }

    pub fn relation_by_noun(&self, noun: &str) -> Option<RelationId> {
        self.relations
            .iter()
            .find(|r| r.noun == noun)
            .map(|r| r.id)
    }

    /// The object of (subject, relation), if that fact exists.
    pub fn object_of(&self, subject: EntityId, relation: RelationId) -> Option<EntityId> {
        lookup_object(&self.triples, subject, relation)
    }

    pub fn canonical_template(&self, relation: RelationId) -> &Template {
        self.templates
            .iter()
            .find(|t| t.relation == relation && t.kind == TemplateKind::Canonical)
            .expect("every relation has a canonical template")
    }

    pub fn paraphrase_templates(&self, relation: RelationId) -> Vec<&Template> {
        self.templates
            .iter()
            .filter(|t| t.relation == relation && t.kind == TemplateKind::Paraphrase)
            .collect()
    }

    pub fn render(&self, template: &Template, subject: EntityId) -> String {
        template.pattern.replace("{s}", self.surface(subject))
    }

    /// Canonical cloze prompt for (subject, relation).
    pub fn canonical_prompt(&self, subject: EntityId, relation: RelationId) -> String {
        self.render(self.canonical_template(relation), subject)
    }

    /// Generic prompt used for the KL term and for generation.
    pub fn generic_prompt(&self, subject: EntityId) -> String {
        format!("{} is a", self.surface(subject))
    }

    pub fn category_sentence(&self, subject: EntityId) -> String {
        format!(
            "{} is a {}",
            self.surface(subject),
            self.categories[self.category_of[subject.idx()]]
        )
    }

    /// Two-hop cloze question: second relation applied to the first hop.
    pub fn twohop_question(
        &self,
        subject: EntityId,
        first: RelationId,
        second: RelationId,
    ) -> String {
        format!(
            "the {} of the {} of {} is",
            self.relation(second).noun,
            self.relation(first).noun,
            self.surface(subject)
        )
    }

    /// Resolve a chain's answer through the true intermediate object.
    pub fn chain_answer(&self, chain: &ChainFact) -> Option<EntityId> {
        let mid = self.object_of(chain.subject, chain.first)?;
        self.object_of(mid, chain.second)
    }

    /// All triples whose object is `target`, ordered by (relation, subject).
    pub fn retrieve_references(&self, target: EntityId) -> Vec<FactTriple> {
        let mut refs: Vec<FactTriple> = self
            .triples
            .iter()
            .filter(|t| t.object == target)
            .copied()
            .collect();
        refs.sort_by_key(|t| (t.relation, t.subject));
        refs
    }

    /// Reference texts about subjects holding the target property: one text
    /// per referencing subject, concatenating its canonical fact sentences
    /// and its category sentence.
    pub fn reference_texts(&self, target: EntityId) -> Vec<String> {
        let refs = self.retrieve_references(target);
        let mut subjects: Vec<EntityId> = refs.iter().map(|t| t.subject).collect();
        subjects.sort();
        subjects.dedup();
        subjects
            .iter()
            .map(|&s| {
                let mut parts: Vec<String> = self
                    .triples
                    .iter()
                    .filter(|t| t.subject == s)
                    .map(|t| {
                        format!(
                            "{} {}",
                            self.canonical_prompt(t.subject, t.relation),
                            self.surface(t.object)
                        )
                    })
                    .collect();
                parts.push(self.category_sentence(s));
                parts.join(" ")
            })
            .collect()
    }

    /// The full training text: canonical and paraphrase renderings of every
    /// triple, category sentences, and chain sentences. Chains whose first
    /// hop appears in `exclude_first_hops` are left out so held-out multihop
    /// questions cannot be answered from memorized chain sentences.
    pub fn training_sentences(
        &self,
        exclude_first_hops: &HashSet<(EntityId, RelationId)>,
    ) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.triples {
            let obj = self.surface(t.object);
            out.push(format!("{} {}", self.canonical_prompt(t.subject, t.relation), obj));
            for tpl in self.paraphrase_templates(t.relation) {
                out.push(format!("{} {}", self.render(tpl, t.subject), obj));
            }
        }
        for e in &self.entities {
            out.push(self.category_sentence(e.id));
        }
        for chain in &self.chains {
            if exclude_first_hops.contains(&(chain.subject, chain.first)) {
                continue;
            }
            if let Some(answer) = self.chain_answer(chain) {
                out.push(format!(
                    "{} {}",
                    self.twohop_question(chain.subject, chain.first, chain.second),
                    self.surface(answer)
                ));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fsio::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<FactCorpus> {
        let bytes = std::fs::read(path)?;
        let corpus: FactCorpus = serde_json::from_slice(&bytes)?;
        Ok(corpus)
    }
}

/// One knowledge edit with its evaluation prompt sets.
#[derive(Debug, Clone)]
pub struct EditCase {
    pub id: u32,
    pub subject: EntityId,
    pub relation: RelationId,
    pub old_object: EntityId,
    pub new_object: EntityId,
    /// Second hop (new_object, second_relation, second_object) recalled from
    /// the corpus.
    pub second_relation: RelationId,
    pub second_object: EntityId,
    pub efficacy_prompts: Vec<String>,
    pub paraphrase_prompts: Vec<String>,
    pub neighborhood_prompts: Vec<String>,
    pub multihop_question: String,
    pub multihop_answer: String,
    pub generation_prompts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseConfig {
    pub paraphrase_prompts: usize,
    pub neighborhood_prompts: usize,
}

impl Default for CaseConfig {
    fn default() -> Self {
        CaseConfig {
            paraphrase_prompts: 2,
            neighborhood_prompts: 2,
        }
    }
}

/// Build one edit case around `triple` with the requested new object.
pub fn build_edit_case(
    corpus: &FactCorpus,
    triple: &FactTriple,
    new_object: EntityId,
    cfg: &CaseConfig,
    id: u32,
    rng: &mut ChaCha8Rng,
) -> Result<EditCase> {
    if new_object == triple.object {
        return Err(Error::Corpus(
            "edit target equals the current object".into(),
        ));
    }
    if new_object == triple.subject {
        return Err(Error::Corpus("edit target equals the subject".into()));
    }

    let paraphrases = corpus.paraphrase_templates(triple.relation);
    if paraphrases.len() < cfg.paraphrase_prompts {
        return Err(Error::Corpus(format!(
            "relation has {} paraphrase templates, case needs {}",
            paraphrases.len(),
            cfg.paraphrase_prompts
        )));
    }
    let paraphrase_prompts: Vec<String> = paraphrases
        .iter()
        .take(cfg.paraphrase_prompts)
        .map(|t| corpus.render(t, triple.subject))
        .collect();

    // Neighborhood: other facts holding the original object. Prefer the same
    // relation (the closest neighbors), never the edited subject.
    let mut candidates: Vec<FactTriple> = corpus
        .triples
        .iter()
        .filter(|t| t.object == triple.object && t.subject != triple.subject)
        .copied()
        .collect();
    candidates.shuffle(rng);
    candidates.sort_by_key(|t| t.relation != triple.relation);
    if candidates.len() < cfg.neighborhood_prompts {
        return Err(Error::Corpus(format!(
            "only {} neighborhood candidates for object {}, case needs {}",
            candidates.len(),
            corpus.surface(triple.object),
            cfg.neighborhood_prompts
        )));
    }
    let neighborhood_prompts: Vec<String> = candidates
        .iter()
        .take(cfg.neighborhood_prompts)
        .map(|t| corpus.canonical_prompt(t.subject, t.relation))
        .collect();

    // Second hop through the new object.
    let mut second: Vec<&FactTriple> = corpus
        .triples
        .iter()
        .filter(|t| t.subject == new_object)
        .collect();
    second.sort_by_key(|t| (t.relation, t.object));
    if second.is_empty() {
        return Err(Error::Corpus(format!(
            "new object {} has no outgoing facts for a second hop",
            corpus.surface(new_object)
        )));
    }
    let pick = second[rng.gen_range(0..second.len())];
    let second_relation = pick.relation;
    let second_object = pick.object;

    let generation_prompts = vec![
        corpus.generic_prompt(triple.subject),
        corpus.canonical_prompt(triple.subject, triple.relation),
    ];

    Ok(EditCase {
        id,
        subject: triple.subject,
        relation: triple.relation,
        old_object: triple.object,
        new_object,
        second_relation,
        second_object,
        efficacy_prompts: vec![corpus.canonical_prompt(triple.subject, triple.relation)],
        paraphrase_prompts,
        neighborhood_prompts,
        multihop_question: corpus.twohop_question(triple.subject, triple.relation, second_relation),
        multihop_answer: corpus.surface(second_object).to_string(),
        generation_prompts,
    })
}

/// Build a suite of edit cases with structural guarantees: the new object has
/// at least `min_refs` incoming references and a second hop, and each
/// (subject, relation) pair is edited at most once.
pub fn build_case_suite(
    corpus: &FactCorpus,
    count: usize,
    min_refs: usize,
    cfg: &CaseConfig,
    seed: u64,
) -> Result<Vec<EditCase>> {
    let mut rng = seeds::rng(seed, salt::CASES);
    let mut triples = corpus.triples.clone();
    triples.shuffle(&mut rng);

    // Objects with enough support and a second hop.
    let eligible: Vec<EntityId> = (0..corpus.config.object_pool as u32)
        .map(EntityId)
        .filter(|&o| {
            corpus.retrieve_references(o).len() >= min_refs
                && corpus.triples.iter().any(|t| t.subject == o)
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Corpus(format!(
            "no object has {} references plus a second hop; grow the corpus or lower min_refs",
            min_refs
        )));
    }

    let mut used: HashSet<(EntityId, RelationId)> = HashSet::new();
    let mut cases = Vec::new();
    for t in &triples {
        if cases.len() >= count {
            break;
        }
        if used.contains(&(t.subject, t.relation)) {
            continue;
        }
        // The editor rewrites the composed state at the subject's final word,
        // so only compound-named subjects make meaningful edit cases.
        if corpus.surface(t.subject).split(' ').count() < 2 {
            continue;
        }
        let mut options: Vec<EntityId> = eligible
            .iter()
            .copied()
            .filter(|&o| o != t.object && o != t.subject)
            .collect();
        if options.is_empty() {
            continue;
        }
        options.sort();
        let new_object = options[rng.gen_range(0..options.len())];
        match build_edit_case(corpus, t, new_object, cfg, cases.len() as u32, &mut rng) {
            Ok(case) => {
                used.insert((t.subject, t.relation));
                cases.push(case);
            }
            Err(_) => continue,
        }
    }
    if cases.is_empty() {
        return Err(Error::Corpus("could not build any edit case".into()));
    }
    Ok(cases)
}

/// First-hop pairs of a case set, for excluding chains from training text.
pub fn case_first_hops(cases: &[EditCase]) -> HashSet<(EntityId, RelationId)> {
    cases.iter().map(|c| (c.subject, c.relation)).collect()
}

#[derive(Serialize, Deserialize)]
struct EditCaseJson {
    id: u32,
    edit: EditJson,
    efficacy_prompts: Vec<String>,
    paraphrase_prompts: Vec<String>,
    neighborhood_prompts: Vec<String>,
    recalled_knowledge: [String; 3],
    multihop_question: String,
    multihop_answer: String,
    generation_prompts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct EditJson {
    subject: String,
    relation: String,
    old_object: String,
    new_object: String,
}

impl EditCase {
    fn to_json(&self, corpus: &FactCorpus) -> EditCaseJson {
        EditCaseJson {
            id: self.id,
            edit: EditJson {
                subject: corpus.surface(self.subject).to_string(),
                relation: corpus.relation(self.relation).noun.clone(),
                old_object: corpus.surface(self.old_object).to_string(),
                new_object: corpus.surface(self.new_object).to_string(),
            },
            efficacy_prompts: self.efficacy_prompts.clone(),
            paraphrase_prompts: self.paraphrase_prompts.clone(),
            neighborhood_prompts: self.neighborhood_prompts.clone(),
            recalled_knowledge: [
                corpus.surface(self.new_object).to_string(),
                corpus.relation(self.second_relation).noun.clone(),
                corpus.surface(self.second_object).to_string(),
            ],
            multihop_question: self.multihop_question.clone(),
            multihop_answer: self.multihop_answer.clone(),
            generation_prompts: self.generation_prompts.clone(),
        }
    }

    fn from_json(corpus: &FactCorpus, j: EditCaseJson) -> Result<EditCase> {
        let resolve = |s: &str| -> Result<EntityId> {
            corpus
                .entity_by_surface(s)
                .ok_or_else(|| Error::Corpus(format!("unknown entity surface '{}'", s)))
        };
        let relation = corpus
            .relation_by_noun(&j.edit.relation)
            .ok_or_else(|| Error::Corpus(format!("unknown relation '{}'", j.edit.relation)))?;
        let second_relation = corpus
            .relation_by_noun(&j.recalled_knowledge[1])
            .ok_or_else(|| {
                Error::Corpus(format!("unknown relation '{}'", j.recalled_knowledge[1]))
            })?;
        Ok(EditCase {
            id: j.id,
            subject: resolve(&j.edit.subject)?,
            relation,
            old_object: resolve(&j.edit.old_object)?,
            new_object: resolve(&j.edit.new_object)?,
            second_relation,
            second_object: resolve(&j.recalled_knowledge[2])?,
            efficacy_prompts: j.efficacy_prompts,
            paraphrase_prompts: j.paraphrase_prompts,
            neighborhood_prompts: j.neighborhood_prompts,
            multihop_question: j.multihop_question,
            multihop_answer: j.multihop_answer,
            generation_prompts: j.generation_prompts,
        })
    }
}

pub fn save_cases(path: &Path, corpus: &FactCorpus, cases: &[EditCase]) -> Result<()> {
    let json: Vec<EditCaseJson> = cases.iter().map(|c| c.to_json(corpus)).collect();
    let mut bytes = serde_json::to_vec_pretty(&json)?;
    bytes.push(b'\n');
    fsio::write_atomic(path, &bytes)
}

pub fn load_cases(path: &Path, corpus: &FactCorpus) -> Result<Vec<EditCase>> {
    let bytes = std::fs::read(path)?;
    let json: Vec<EditCaseJson> = serde_json::from_slice(&bytes)?;
    json.into_iter()
        .map(|j| EditCase::from_json(corpus, j))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            entities: 16,
            relations: 3,
            facts_per_relation: 12,
            paraphrases_per_relation: 2,
            multihop_pairs: 20,
            object_pool: 4,
            categories: 3,
            vocab_budget: 120,
            multi_token_objects: false,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let a = serde_json::to_vec(&generate_corpus(&cfg).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_corpus(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let mut cfg = small_config();
        let a = generate_corpus(&cfg).unwrap();
        cfg.seed = 12;
        let b = generate_corpus(&cfg).unwrap();
        assert_ne!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn relations_are_functional_and_objects_pooled() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let mut seen = HashSet::new();
        for t in &corpus.triples {
            assert!(seen.insert((t.subject, t.relation)), "duplicate (s, r)");
            assert!(t.object.idx() < corpus.config.object_pool);
            assert_ne!(t.subject, t.object);
        }
    }

    #[test]
    fn every_relation_has_canonical_plus_paraphrases() {
        let corpus = generate_corpus(&small_config()).unwrap();
        for rel in &corpus.relations {
            let c: Vec<_> = corpus
                .templates
                .iter()
                .filter(|t| t.relation == rel.id && t.kind == TemplateKind::Canonical)
                .collect();
            assert_eq!(c.len(), 1);
            assert_eq!(corpus.paraphrase_templates(rel.id).len(), 2);
            for t in corpus.templates.iter().filter(|t| t.relation == rel.id) {
                assert_eq!(t.pattern.matches("{s}").count(), 1);
            }
        }
    }

    #[test]
    fn surfaces_are_unique_and_short() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let mut seen = HashSet::new();
        for e in &corpus.entities {
            assert!(seen.insert(e.surface.clone()));
            let n = e.surface.split_whitespace().count();
            assert!((1..=3).contains(&n));
        }
        // object pool is single-token by default
        for i in 0..corpus.config.object_pool {
            assert_eq!(corpus.entities[i].surface.split_whitespace().count(), 1);
        }
    }

    #[test]
    fn vocab_covers_all_rendered_text() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let vocab: HashSet<&str> = corpus.vocab.iter().map(|s| s.as_str()).collect();
        for s in corpus.training_sentences(&HashSet::new()) {
            for w in s.split_whitespace() {
                assert!(vocab.contains(w), "word '{}' missing from vocab", w);
            }
        }
    }

    #[test]
    fn too_many_facts_is_an_error() {
        let mut cfg = small_config();
        cfg.facts_per_relation = cfg.entities + 1;
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn vocab_budget_too_small_is_an_error() {
        let mut cfg = small_config();
        cfg.vocab_budget = 10;
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn references_are_ordered() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let target = EntityId(0);
        let refs = corpus.retrieve_references(target);
        assert!(!refs.is_empty());
        for w in refs.windows(2) {
            assert!((w[0].relation, w[0].subject) < (w[1].relation, w[1].subject));
        }
        for r in &refs {
            assert_eq!(r.object, target);
        }
    }

    #[test]
    fn case_suite_has_sound_structure() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let cases = build_case_suite(&corpus, 6, 3, &CaseConfig::default(), 5).unwrap();
        assert!(!cases.is_empty());
        for case in &cases {
            assert_ne!(case.new_object, case.old_object);
            // closure: answer is the object of a corpus triple with subject o*
            assert_eq!(
                corpus.object_of(case.new_object, case.second_relation),
                Some(case.second_object)
            );
            assert_eq!(case.multihop_answer, corpus.surface(case.second_object));
            // neighborhood prompts never mention the edited subject
            let subj = corpus.surface(case.subject);
            for p in &case.neighborhood_prompts {
                assert!(!p.contains(subj));
            }
            assert_eq!(case.paraphrase_prompts.len(), 2);
            assert_eq!(case.neighborhood_prompts.len(), 2);
            // subject occurs in every owned prompt
            for p in case
                .efficacy_prompts
                .iter()
                .chain(&case.paraphrase_prompts)
                .chain(&case.generation_prompts)
            {
                assert!(p.contains(subj));
            }
            assert!(case.multihop_question.contains(subj));
        }
    }

    #[test]
    fn corpus_roundtrip_through_file() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.json");
        corpus.save(&p).unwrap();
        let loaded = FactCorpus::load(&p).unwrap();
        assert_eq!(
            serde_json::to_vec(&corpus).unwrap(),
            serde_json::to_vec(&loaded).unwrap()
        );
    }

    #[test]
    fn cases_roundtrip_through_file() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let cases = build_case_suite(&corpus, 4, 3, &CaseConfig::default(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cases.json");
        save_cases(&p, &corpus, &cases).unwrap();
        let loaded = load_cases(&p, &corpus).unwrap();
        assert_eq!(cases.len(), loaded.len());
        for (a, b) in cases.iter().zip(&loaded) {
            assert_eq!(a.subject, b.subject);
            assert_eq!(a.new_object, b.new_object);
            assert_eq!(a.multihop_question, b.multihop_question);
            assert_eq!(a.neighborhood_prompts, b.neighborhood_prompts);
        }
        // required field names are present in the file
        let raw: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        let first = &raw.as_array().unwrap()[0];
        for key in [
            "edit",
            "efficacy_prompts",
            "paraphrase_prompts",
            "neighborhood_prompts",
            "recalled_knowledge",
            "multihop_question",
            "multihop_answer",
            "generation_prompts",
        ] {
            assert!(first.get(key).is_some(), "missing key {}", key);
        }
    }

    #[test]
    fn chain_exclusion_removes_sentences() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let all = corpus.training_sentences(&HashSet::new());
        let chain = corpus.chains[0];
        let mut excl = HashSet::new();
        excl.insert((chain.subject, chain.first));
        let trimmed = corpus.training_sentences(&excl);
        assert!(trimmed.len() < all.len());
        let q = corpus.twohop_question(chain.subject, chain.first, chain.second);
        assert!(all.iter().any(|s| s.starts_with(&q)));
        assert!(!trimmed.iter().any(|s| s.starts_with(&q)));
    }

    #[test]
    fn rejects_degenerate_configs() {
        for f in [
            |c: &mut CorpusConfig| c.entities = 1,
            |c: &mut CorpusConfig| c.relations = 0,
            |c: &mut CorpusConfig| c.paraphrases_per_relation = 0,
            |c: &mut CorpusConfig| c.paraphrases_per_relation = 9,
            |c: &mut CorpusConfig| c.object_pool = 0,
            |c: &mut CorpusConfig| c.categories = 0,
        ] {
            let mut cfg = small_config();
            f(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }
}
