//! Semantic anchors for a target object: the reference triples that share the
//! object are filtered by model recall, stratified-sampled by relation type,
//! and their final-token hidden states averaged per layer.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::factlang::{EntityId, FactCorpus, FactTriple};
use crate::fsio;
use crate::model::{capture_residual_stream, greedy_decode, ModelCheckpoint};
use crate::seeds::{self, salt};

#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub target: EntityId,
    /// (L, width): row ℓ−1 is the mean final-token hidden state at layer ℓ.
    pub phi: Array2<f64>,
    pub sampled: Vec<FactTriple>,
    /// Reference triples sharing the target object before any filtering.
    pub total_refs: usize,
    /// References surviving the recall filter.
    pub recalled_refs: usize,
}

impl AnchorSet {
    /// Anchor vector at one layer (1-based).
    pub fn layer(&self, layer: usize) -> ArrayView1<'_, f64> {
        self.phi.row(layer - 1)
    }

    pub fn layers(&self) -> usize {
        self.phi.nrows()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Largest |T″|: at most this many sampled reference triples per edit.
    pub max_sample: usize,
    /// Refuse targets whose recalled reference count falls below this.
    pub min_support: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            max_sample: 64,
            min_support: 32,
        }
    }
}

/// Keep the triples whose object the model greedily recalls from the
/// canonical prompt. An empty result is valid.
pub fn filter_recalled(
    ckpt: &ModelCheckpoint,
    corpus: &FactCorpus,
    triples: &[FactTriple],
) -> Result<Vec<FactTriple>> {
    let tok = &ckpt.tokenizer;
    let mut kept = Vec::new();
    for t in triples {
        let prompt = tok.encode(&corpus.canonical_prompt(t.subject, t.relation))?;
        let object = tok.encode(corpus.surface(t.object))?;
        if greedy_decode(ckpt, &prompt, object.len())? == object {
            kept.push(*t);
        }
    }
    Ok(kept)
}

/// Sample up to `n` triples stratified by relation type. Groups are visited
/// in relation-id order; each gets a base quota of ⌊n/R⌋ plus a proportional
/// extra of ⌊r·|g|/|T′|⌋, and any shortfall from the floors is topped up
/// uniformly at random from the unsampled remainder.
pub fn stratified_sample(triples: &[FactTriple], n: usize, seed: u64) -> Vec<FactTriple> {
    if triples.is_empty() || n == 0 {
        return Vec::new();
    }
    if triples.len() <= n {
        return triples.to_vec();
    }
    let mut rng = seeds::rng(seed, salt::ANCHORS);
    let mut groups: BTreeMap<u32, Vec<FactTriple>> = BTreeMap::new();
    for t in triples {
        groups.entry(t.relation.0).or_default().push(*t);
    }
    let base = n / groups.len();
    let remainder = n - base * groups.len();
    let total = triples.len();
    let mut picked: Vec<FactTriple> = Vec::with_capacity(n);
    let mut leftovers: Vec<FactTriple> = Vec::new();
    for group in groups.values() {
        let extra = remainder * group.len() / total;
        let quota = (base + extra).min(group.len());
        let mut order = group.clone();
        order.shuffle(&mut rng);
        picked.extend_from_slice(&order[..quota]);
        leftovers.extend_from_slice(&order[quota..]);
    }
    if picked.len() < n {
        leftovers.shuffle(&mut rng);
        let need = n - picked.len();
        picked.extend_from_slice(&leftovers[..need.min(leftovers.len())]);
    }
    picked
}

/// Average the final-token hidden states of the sampled triples' prompts,
/// layer by layer, on the unedited model.
pub fn compute_anchors(
    ckpt: &ModelCheckpoint,
    corpus: &FactCorpus,
    target: EntityId,
    sampled: &[FactTriple],
    total_refs: usize,
    recalled_refs: usize,
) -> Result<AnchorSet> {
    if sampled.is_empty() {
        return Err(Error::Anchors(format!(
            "no reference triples to anchor '{}' with",
            corpus.surface(target)
        )));
    }
    for t in sampled {
        if t.object != target {
            return Err(Error::Anchors(format!(
                "sampled triple about '{}' does not reference target '{}'",
                corpus.surface(t.subject),
                corpus.surface(target)
            )));
        }
    }
    let mut sum: Option<Array2<f64>> = None;
    for t in sampled {
        let prompt = ckpt
            .tokenizer
            .encode(&corpus.canonical_prompt(t.subject, t.relation))?;
        let trace = capture_residual_stream(ckpt, &prompt, None, false)?;
        let states = trace.final_states();
        sum = Some(match sum {
            None => states,
            Some(acc) => acc + states,
        });
    }
    let mut phi = sum.expect("nonempty sample");
    phi.mapv_inplace(|v| v / sampled.len() as f64);
    Ok(AnchorSet {
        target,
        phi,
        sampled: sampled.to_vec(),
        total_refs,
        recalled_refs,
    })
}

/// Full pipeline for one target object: retrieve references, recall-filter,
/// enforce minimum support, sample, and average.
pub fn build_anchor_set(
    ckpt: &ModelCheckpoint,
    corpus: &FactCorpus,
    target: EntityId,
    cfg: &AnchorConfig,
    seed: u64,
) -> Result<AnchorSet> {
    let refs = corpus.retrieve_references(target);
    let recalled = filter_recalled(ckpt, corpus, &refs)?;
    if recalled.len() < cfg.min_support {
        return Err(Error::Anchors(format!(
            "target '{}' has {} recalled references, below the support threshold {}",
            corpus.surface(target),
            recalled.len(),
            cfg.min_support
        )));
    }
    let sampled = stratified_sample(&recalled, cfg.max_sample, seed);
    compute_anchors(ckpt, corpus, target, &sampled, refs.len(), recalled.len())
}

const ANCHOR_MAGIC: &[u8; 10] = b"STEAMANCH1";

#[derive(Serialize, Deserialize)]
struct ProvenanceTriple {
    subject: String,
    relation: String,
    object: String,
}

#[derive(Serialize, Deserialize)]
struct AnchorProvenance {
    target: String,
    layers: usize,
    width: usize,
    total_refs: usize,
    recalled_refs: usize,
    sampled: Vec<ProvenanceTriple>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write the anchor tensors as binary f64 plus a JSON provenance sidecar at
/// `{path}.json`.
pub fn save_anchors(path: &Path, corpus: &FactCorpus, anchors: &AnchorSet) -> Result<()> {
    let (l, d) = (anchors.phi.nrows(), anchors.phi.ncols());
    let mut bytes = Vec::with_capacity(ANCHOR_MAGIC.len() + 16 + l * d * 8);
    bytes.extend_from_slice(ANCHOR_MAGIC);
    bytes.extend_from_slice(&(l as u64).to_le_bytes());
    bytes.extend_from_slice(&(d as u64).to_le_bytes());
    for &v in anchors.phi.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fsio::write_atomic(path, &bytes)?;
    let prov = AnchorProvenance {
        target: corpus.surface(anchors.target).to_string(),
        layers: l,
        width: d,
        total_refs: anchors.total_refs,
        recalled_refs: anchors.recalled_refs,
        sampled: anchors
            .sampled
            .iter()
            .map(|t| ProvenanceTriple {
                subject: corpus.surface(t.subject).to_string(),
                relation: corpus.relation(t.relation).noun.clone(),
                object: corpus.surface(t.object).to_string(),
            })
            .collect(),
    };
    let mut js = serde_json::to_vec_pretty(&prov)?;
    js.push(b'\n');
    fsio::write_atomic(&sidecar_path(path), &js)
}

pub fn load_anchors(path: &Path, corpus: &FactCorpus) -> Result<AnchorSet> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < ANCHOR_MAGIC.len() + 16 || &bytes[..ANCHOR_MAGIC.len()] != ANCHOR_MAGIC {
        return Err(Error::Format(format!(
            "{} is not an anchor file (bad magic)",
            path.display()
        )));
    }
    let mut off = ANCHOR_MAGIC.len();
    let l = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    if bytes.len() - off != l * d * 8 {
        return Err(Error::Format(format!(
            "anchor tensor block holds {} bytes, header says {}x{}",
            bytes.len() - off,
            l,
            d
        )));
    }
    let mut phi = Array2::<f64>::zeros((l, d));
    for v in phi.iter_mut() {
        *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
    }
    let js = std::fs::read(sidecar_path(path))?;
    let prov: AnchorProvenance = serde_json::from_slice(&js)?;
    if prov.layers != l || prov.width != d {
        return Err(Error::Format(
            "anchor sidecar disagrees with tensor block dimensions".into(),
        ));
    }
    let target = corpus
        .entity_by_surface(&prov.target)
        .ok_or_else(|| Error::Anchors(format!("unknown anchor target '{}'", prov.target)))?;
    let mut sampled = Vec::with_capacity(prov.sampled.len());
    for pt in &prov.sampled {
        let subject = corpus
            .entity_by_surface(&pt.subject)
            .ok_or_else(|| Error::Anchors(format!("unknown subject '{}'", pt.subject)))?;
        let relation = corpus
            .relation_by_noun(&pt.relation)
            .ok_or_else(|| Error::Anchors(format!("unknown relation '{}'", pt.relation)))?;
        let object = corpus
            .entity_by_surface(&pt.object)
            .ok_or_else(|| Error::Anchors(format!("unknown object '{}'", pt.object)))?;
        sampled.push(FactTriple {
            subject,
            relation,
            object,
        });
    }
    Ok(AnchorSet {
        target,
        phi,
        sampled,
        total_refs: prov.total_refs,
        recalled_refs: prov.recalled_refs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factlang::{generate_corpus, CorpusConfig, RelationId};
    use crate::model::{ModelConfig, ModelCheckpoint, TrainMeta, Tokenizer, Weights};

    fn corpus() -> FactCorpus {
        generate_corpus(&CorpusConfig {
            entities: 12,
            relations: 2,
            facts_per_relation: 8,
            paraphrases_per_relation: 1,
            multihop_pairs: 4,
            object_pool: 4,
            categories: 2,
            vocab_budget: 80,
            multi_token_objects: false,
            seed: 5,
        })
        .unwrap()
    }

    fn untrained_ckpt(corpus: &FactCorpus) -> ModelCheckpoint {
        let tokenizer = Tokenizer::from_corpus(corpus).unwrap();
        let cfg = ModelConfig {
            layers: 6,
            width: 16,
            heads: 2,
            mlp_width: 32,
            context: 16,
            vocab: tokenizer.vocab_size(),
            local_layers: 0,
            local_window: 0,
            learned_positions: true,
        };
        let weights = Weights::init(&cfg, 9).unwrap();
        ModelCheckpoint::new(cfg, tokenizer, weights, TrainMeta::default())
    }

    fn fake_triples(sizes: &[usize]) -> Vec<FactTriple> {
        let mut out = Vec::new();
        let mut s = 0u32;
        for (r, &count) in sizes.iter().enumerate() {
            for _ in 0..count {
                out.push(FactTriple {
                    subject: EntityId(s),
                    relation: RelationId(r as u32),
                    object: EntityId(999),
                });
                s += 1;
            }
        }
        out
    }

    #[test]
    fn filter_is_subset_and_deterministic() {
        let corpus = corpus();
        let ckpt = untrained_ckpt(&corpus);
        let refs = corpus.retrieve_references(corpus.triples[0].object);
        let a = filter_recalled(&ckpt, &corpus, &refs).unwrap();
        let b = filter_recalled(&ckpt, &corpus, &refs).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= refs.len());
        assert!(filter_recalled(&ckpt, &corpus, &[]).unwrap().is_empty());
    }

    #[test]
    fn symmetric_groups_split_evenly() {
        let triples = fake_triples(&[10, 10]);
        let picked = stratified_sample(&triples, 10, 3);
        assert_eq!(picked.len(), 10);
        let r0 = picked.iter().filter(|t| t.relation.0 == 0).count();
        assert_eq!(r0, 5);
    }

    #[test]
    fn floor_allocation_tops_up_from_large_group() {
        let triples = fake_triples(&[8, 2]);
        let picked = stratified_sample(&triples, 5, 7);
        assert_eq!(picked.len(), 5);
        let r0 = picked.iter().filter(|t| t.relation.0 == 0).count();
        let r1 = picked.iter().filter(|t| t.relation.0 == 1).count();
        // base 2 each, no proportional extras, top-up must come from the
        // only group with leftovers
        assert_eq!((r0, r1), (3, 2));
    }

    #[test]
    fn sampling_edge_cases_and_determinism() {
        assert!(stratified_sample(&[], 5, 1).is_empty());
        let triples = fake_triples(&[3, 2]);
        assert_eq!(stratified_sample(&triples, 10, 1), triples);
        let big = fake_triples(&[30, 10, 5]);
        let a = stratified_sample(&big, 12, 42);
        let b = stratified_sample(&big, 12, 42);
        assert_eq!(a, b);
        let c = stratified_sample(&big, 12, 43);
        assert_ne!(a, c);
        assert_eq!(a.len(), 12);
        for r in 0..3u32 {
            let count = a.iter().filter(|t| t.relation.0 == r).count();
            let group = big.iter().filter(|t| t.relation.0 == r).count();
            assert!(count <= group);
        }
        // no duplicates
        let mut seen: Vec<u32> = a.iter().map(|t| t.subject.0).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn single_triple_anchor_equals_its_trace() {
        let corpus = corpus();
        let ckpt = untrained_ckpt(&corpus);
        let t = corpus.triples[0];
        let anchors = compute_anchors(&ckpt, &corpus, t.object, &[t], 1, 1).unwrap();
        let prompt = ckpt
            .tokenizer
            .encode(&corpus.canonical_prompt(t.subject, t.relation))
            .unwrap();
        let trace = capture_residual_stream(&ckpt, &prompt, None, false).unwrap();
        let states = trace.final_states();
        assert_eq!(anchors.phi, states);
        assert_eq!(anchors.layer(1).to_owned(), states.row(0).to_owned());
    }

    #[test]
    fn anchors_are_size_weighted_means() {
        let corpus = corpus();
        let ckpt = untrained_ckpt(&corpus);
        let target = (0..corpus.config.object_pool as u32)
            .map(EntityId)
            .max_by_key(|&o| corpus.retrieve_references(o).len())
            .unwrap();
        let refs = corpus.retrieve_references(target);
        assert!(refs.len() >= 4, "test corpus too sparse: {}", refs.len());
        let quad = &refs[..4];
        let whole = compute_anchors(&ckpt, &corpus, target, quad, 4, 4).unwrap();
        let left = compute_anchors(&ckpt, &corpus, target, &quad[..2], 2, 2).unwrap();
        let right = compute_anchors(&ckpt, &corpus, target, &quad[2..], 2, 2).unwrap();
        let blended = (&left.phi + &right.phi) / 2.0;
        let diff = (&whole.phi - &blended).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-6));
    }

    #[test]
    fn anchor_rejects_mismatched_target() {
        let corpus = corpus();
        let ckpt = untrained_ckpt(&corpus);
        let t = corpus.triples[0];
        let other = corpus
            .triples
            .iter()
            .find(|x| x.object != t.object)
            .unwrap();
        assert!(compute_anchors(&ckpt, &corpus, t.object, &[*other], 1, 1).is_err());
        assert!(compute_anchors(&ckpt, &corpus, t.object, &[], 0, 0).is_err());
    }

    #[test]
    fn support_threshold_is_enforced() {
        let corpus = corpus();
        let ckpt = untrained_ckpt(&corpus);
        let target = corpus.triples[0].object;
        let err = build_anchor_set(&ckpt, &corpus, target, &AnchorConfig::default(), 1)
            .unwrap_err();
        assert!(err.to_string().contains("support"), "got: {}", err);
    }

    #[test]
    fn anchor_files_round_trip() {
        let corpus = corpus();
        let ckpt = untrained_ckpt(&corpus);
        let target = corpus.triples[0].object;
        let refs = corpus.retrieve_references(target);
        let anchors =
            compute_anchors(&ckpt, &corpus, target, &refs, refs.len(), refs.len()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("anchors.bin");
        save_anchors(&path, &corpus, &anchors).unwrap();
        assert!(path.with_extension("bin.json").exists());
        let loaded = load_anchors(&path, &corpus).unwrap();
        assert_eq!(loaded.phi, anchors.phi);
        assert_eq!(loaded.target, target);
        assert_eq!(loaded.sampled, anchors.sampled);
        assert_eq!(loaded.recalled_refs, anchors.recalled_refs);

        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"nope").unwrap();
        assert!(load_anchors(&junk, &corpus).is_err());
    }
}
