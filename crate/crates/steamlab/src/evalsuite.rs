//! Edit-quality metrics: indicator scores for efficacy, paraphrase and
//! neighborhood, fuzzy-matched multi-hop portability, n-gram entropy fluency,
//! TF-IDF consistency, and the harmonic-mean edit score, assembled into a
//! serializable report.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::factlang::{EditCase, FactCorpus};
use crate::fsio;
use crate::model::{forward_batch, greedy_decode, log_softmax, sample_generate, ModelCheckpoint};
use crate::seeds::{self, salt};

/// Mean per-token log-probability of `object` as the continuation of
/// `prompt`.
pub fn object_logprob(ckpt: &ModelCheckpoint, prompt: &str, object: &str) -> Result<f64> {
    let prompt_tokens = ckpt.tokenizer.encode(prompt)?;
    let object_tokens = ckpt.tokenizer.encode(object)?;
    if object_tokens.is_empty() {
        return Err(Error::Eval(format!("object '{}' encodes to nothing", object)));
    }
    let mut tokens = prompt_tokens.clone();
    tokens.extend_from_slice(&object_tokens);
    let cache = forward_batch(ckpt, &[&tokens], &[])?;
    let mut total = 0.0;
    for (k, &target) in object_tokens.iter().enumerate() {
        let ls = log_softmax(cache.logits.row(prompt_tokens.len() + k - 1));
        total += ls[target as usize];
    }
    Ok(total / object_tokens.len() as f64)
}

/// Percentage of prompts on which `preferred` strictly outscores `against`.
pub fn indicator_score(
    ckpt: &ModelCheckpoint,
    prompts: &[String],
    preferred: &str,
    against: &str,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Eval("indicator needs at least one prompt".into()));
    }
    let mut passes = 0usize;
    for prompt in prompts {
        let lp_pref = object_logprob(ckpt, prompt, preferred)?;
        let lp_against = object_logprob(ckpt, prompt, against)?;
        if lp_pref > lp_against {
            passes += 1;
        }
    }
    Ok(passes as f64 / prompts.len() as f64 * 100.0)
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Best window match between the shorter string and every equal-length
/// window of the longer one, as 1 minus the normalized edit distance.
pub fn partial_ratio(a: &str, b: &str) -> Result<f64> {
    let ac: Vec<char> = a.chars().collect();
    let bc: Vec<char> = b.chars().collect();
    let (short, long) = if ac.len() <= bc.len() { (&ac, &bc) } else { (&bc, &ac) };
    if short.is_empty() {
        return Err(Error::Eval("partial ratio of an empty string is undefined".into()));
    }
    let n = short.len();
    let mut best = 0.0f64;
    for start in 0..=(long.len() - n) {
        let window = &long[start..start + n];
        let dist = levenshtein(short, window);
        let ratio = 1.0 - dist as f64 / n as f64;
        best = best.max(ratio);
        if best == 1.0 {
            break;
        }
    }
    Ok(best)
}

/// Whether a greedy continuation of the multi-hop question fuzzily contains
/// the expected answer.
pub fn portability_indicator(
    ckpt: &ModelCheckpoint,
    question: &str,
    answer: &str,
    budget: usize,
) -> Result<bool> {
    let prompt = ckpt.tokenizer.encode(question)?;
    let generated = greedy_decode(ckpt, &prompt, budget)?;
    if generated.is_empty() {
        return Ok(false);
    }
    let text = ckpt.tokenizer.decode(&generated)?;
    Ok(partial_ratio(&text, answer)? > 0.7)
}

/// Percentage of cases whose multi-hop question is answered under fuzzy
/// matching, using a 12-token greedy budget.
pub fn portability_score(ckpt: &ModelCheckpoint, cases: &[EditCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Eval("portability needs at least one case".into()));
    }
    let mut passes = 0usize;
    for case in cases {
        if portability_indicator(ckpt, &case.multihop_question, &case.multihop_answer, 12)? {
            passes += 1;
        }
    }
    Ok(passes as f64 / cases.len() as f64 * 100.0)
}

fn ngram_entropy(tokens: &[&str], n: usize) -> f64 {
    let total = tokens.len() + 1 - n;
    let mut counts: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    let mut h = 0.0;
    for &c in counts.values() {
        let f = c as f64 / total as f64;
        h -= f * f.log2();
    }
    h
}

/// Weighted bi-/tri-gram entropy of whitespace tokens, in bits.
pub fn fluency_weighted(text: &str, bigram_weight: f64, trigram_weight: f64) -> Result<f64> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() < 3 {
        return Err(Error::Eval(format!(
            "fluency needs at least 3 tokens, got {}",
            tokens.len()
        )));
    }
    Ok(bigram_weight * ngram_entropy(&tokens, 2) + trigram_weight * ngram_entropy(&tokens, 3))
}

/// Entropy fluency with the default 1/3 bigram, 2/3 trigram weighting.
pub fn fluency(text: &str) -> Result<f64> {
    fluency_weighted(text, 1.0 / 3.0, 2.0 / 3.0)
}

/// How the generated text is compared against the references.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyMode {
    /// Cosine against the mean of the reference vectors.
    Mean,
    /// Best cosine over individual references.
    Max,
}

fn tfidf_vectors(docs: &[Vec<&str>]) -> Vec<BTreeMap<String, f64>> {
    let d = docs.len();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let unique: BTreeSet<&str> = doc.iter().copied().collect();
        for term in unique {
            *df.entry(term).or_insert(0) += 1;
        }
    }
    docs.iter()
        .map(|doc| {
            let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
            for term in doc {
                *tf.entry(term).or_insert(0) += 1;
            }
            let mut vec: BTreeMap<String, f64> = tf
                .into_iter()
                .map(|(term, count)| {
                    let idf = (((1 + d) as f64) / ((1 + df[term]) as f64)).ln() + 1.0;
                    (term.to_string(), count as f64 * idf)
                })
                .collect();
            let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in vec.values_mut() {
                    *v /= norm;
                }
            }
            vec
        })
        .collect()
}

fn sparse_cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(k, v)| b.get(k).map(|w| v * w))
        .sum();
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot / (na * nb)
}

/// TF-IDF cosine in [0, 1] between the generated text and the references.
pub fn consistency_with(
    generated: &str,
    references: &[String],
    mode: ConsistencyMode,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Eval("consistency needs at least one reference text".into()));
    }
    let gen_tokens: Vec<&str> = generated.split_whitespace().collect();
    if gen_tokens.is_empty() {
        return Ok(0.0);
    }
    let mut docs: Vec<Vec<&str>> = references
        .iter()
        .map(|r| r.split_whitespace().collect())
        .collect();
    docs.push(gen_tokens);
    let vectors = tfidf_vectors(&docs);
    let gen_vec = &vectors[vectors.len() - 1];
    let ref_vecs = &vectors[..vectors.len() - 1];
    let value = match mode {
        ConsistencyMode::Mean => {
            let mut mean: BTreeMap<String, f64> = BTreeMap::new();
            for v in ref_vecs {
                for (k, x) in v {
                    *mean.entry(k.clone()).or_insert(0.0) += x / ref_vecs.len() as f64;
                }
            }
            sparse_cosine(gen_vec, &mean)
        }
        ConsistencyMode::Max => ref_vecs
            .iter()
            .map(|v| sparse_cosine(gen_vec, v))
            .fold(0.0, f64::max),
    };
    Ok(value)
}

/// TF-IDF cosine against the mean reference vector.
pub fn consistency(generated: &str, references: &[String]) -> Result<f64> {
    consistency_with(generated, references, ConsistencyMode::Mean)
}

/// Harmonic mean of the four indicator aggregates; zero if any is zero.
pub fn edit_score(efficacy: f64, paraphrase: f64, neighborhood: f64, portability: f64) -> f64 {
    let parts = [efficacy, paraphrase, neighborhood, portability];
    if parts.iter().any(|&x| x <= 0.0) {
        return 0.0;
    }
    4.0 / parts.iter().map(|x| 1.0 / x).sum::<f64>()
}

/// Per-case metric values; indicator fields are 0/100 for single cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: u32,
    pub efficacy: f64,
    pub paraphrase: f64,
    pub neighborhood: f64,
    pub portability: f64,
    /// Entropy fluency of the sampled generations, in bits.
    pub fluency: f64,
    /// TF-IDF consistency, scaled to 0..100.
    pub consistency: f64,
}

/// Identifies the editing run a report belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub editor: String,
    pub lambda: f64,
    pub layer: usize,
    pub band_start: usize,
    pub band_end: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub base_digest: String,
    pub edited_digest: String,
    pub cases: Vec<CaseScores>,
    pub efficacy: f64,
    pub paraphrase: f64,
    pub neighborhood: f64,
    pub portability: f64,
    pub fluency: f64,
    pub consistency: f64,
    pub edit: f64,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "editor,lambda,effi,para,neigh,port,edit,flu,cons,seed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.1},{:.1},{:.1},{:.1},{:.1},{:.3},{:.1},{}",
            self.meta.editor,
            self.meta.lambda,
            self.efficacy,
            self.paraphrase,
            self.neighborhood,
            self.portability,
            self.edit,
            self.fluency,
            self.consistency,
            self.meta.seed
        )
    }
}

pub fn save_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    fsio::write_atomic(path, &bytes)
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Sampled continuations of the case's generation prompts, concatenated into
/// one document. Deterministic per (seed, case, prompt index).
fn case_generation(ckpt: &ModelCheckpoint, case: &EditCase, seed: u64) -> Result<String> {
    let base = seeds::derive(seed, salt::GENERATION);
    let mut parts = Vec::with_capacity(case.generation_prompts.len());
    for (pi, prompt) in case.generation_prompts.iter().enumerate() {
        let tokens = ckpt.tokenizer.encode(prompt)?;
        let gen_seed = base ^ ((case.id as u64) << 16) ^ pi as u64;
        let continuation = sample_generate(ckpt, &tokens, 24, 1.0, gen_seed)?;
        let mut text = prompt.clone();
        if !continuation.is_empty() {
            text.push(' ');
            text.push_str(&ckpt.tokenizer.decode(&continuation)?);
        }
        parts.push(text);
    }
    Ok(parts.join(" "))
}

/// Score one case against the checkpoint that carries its edit.
pub fn evaluate_case(
    edited: &ModelCheckpoint,
    corpus: &FactCorpus,
    case: &EditCase,
    seed: u64,
) -> Result<CaseScores> {
    let new_surface = corpus.surface(case.new_object);
    let old_surface = corpus.surface(case.old_object);
    let efficacy = indicator_score(edited, &case.efficacy_prompts, new_surface, old_surface)?;
    let paraphrase = indicator_score(edited, &case.paraphrase_prompts, new_surface, old_surface)?;
    // neighbors hold the original object; the edit must not leak onto them
    let neighborhood =
        indicator_score(edited, &case.neighborhood_prompts, old_surface, new_surface)?;
    let portability = if portability_indicator(
        edited,
        &case.multihop_question,
        &case.multihop_answer,
        12,
    )? {
        100.0
    } else {
        0.0
    };
    let generated = case_generation(edited, case, seed)?;
    let fluency = fluency(&generated)?;
    let references = corpus.reference_texts(case.new_object);
    let consistency = consistency(&generated, &references)? * 100.0;
    Ok(CaseScores {
        case_id: case.id,
        efficacy,
        paraphrase,
        neighborhood,
        portability,
        fluency,
        consistency,
    })
}

/// Combine per-case scores into a report with aggregate means and the edit
/// score.
pub fn aggregate_report(
    meta: RunMeta,
    base_digest: String,
    edited_digest: String,
    cases: Vec<CaseScores>,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Eval("report needs at least one case".into()));
    }
    let n = cases.len() as f64;
    let mean = |f: fn(&CaseScores) -> f64| cases.iter().map(f).sum::<f64>() / n;
    let efficacy = mean(|c| c.efficacy);
    let paraphrase = mean(|c| c.paraphrase);
    let neighborhood = mean(|c| c.neighborhood);
    let portability = mean(|c| c.portability);
    let fluency = mean(|c| c.fluency);
    let consistency = mean(|c| c.consistency);
    let edit = edit_score(efficacy, paraphrase, neighborhood, portability);
    Ok(MetricsReport {
        meta,
        base_digest,
        edited_digest,
        cases,
        efficacy,
        paraphrase,
        neighborhood,
        portability,
        fluency,
        consistency,
        edit,
    })
}

/// Evaluate one edited checkpoint on a case suite.
pub fn evaluate(
    edited: &ModelCheckpoint,
    base: &ModelCheckpoint,
    corpus: &FactCorpus,
    cases: &[EditCase],
    meta: RunMeta,
) -> Result<MetricsReport> {
    let seed = meta.seed;
    let scored: Vec<CaseScores> = cases
        .iter()
        .map(|c| evaluate_case(edited, corpus, c, seed))
        .collect::<Result<_>>()?;
    aggregate_report(meta, base.digest(), edited.digest(), scored)
}
