//! Next-token training on the corpus sentences: AdamW with linear warmup
//! into cosine decay, global-norm gradient clipping, length-bucketed batches
//! (so no padding is ever needed) and an early stop once fact recall reaches
//! its target.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

use super::backward::{backward_batch, BackwardRequest};
use super::forward::{argmax, forward_batch, greedy_decode, log_softmax};
use super::{ModelCheckpoint, ModelConfig, TrainMeta, Tokenizer, Weights};
use crate::error::{Error, Result};
use crate::factlang::FactCorpus;
use crate::seeds::{rng_for, salt};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Cosine floor as a fraction of the peak.
    pub min_lr_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop once fact recall reaches this fraction.
    pub target_recall: f64,
    /// Epochs between recall probes.
    pub recall_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 3e-3,
            min_lr_frac: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            max_epochs: 240,
            grad_clip: 1.0,
            target_recall: 0.98,
            recall_every: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.recall_every == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and recall_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(Error::Config(format!(
                "bad learning-rate settings (lr {}, min_lr_frac {})",
                self.lr, self.min_lr_frac
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config(
                "weight_decay and grad_clip must be non-negative, eps positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.target_recall) {
            return Err(Error::Config(format!(
                "target_recall must lie in [0, 1], got {}",
                self.target_recall
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
    pub wall_seconds: f64,
}

pub(crate) fn lr_at(step: usize, cfg: &TrainConfig, total_steps: usize) -> f64 {
    let warmup = cfg.warmup_steps;
    if warmup > 0 && step <= warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1);
    let done = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = cfg.lr * cfg.min_lr_frac;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * done).cos())
}

/// Mean next-token cross entropy over a batch plus the matching d_logits
/// (already scaled by 1/positions).
fn batch_loss_grad(
    logits: &Array2<f64>,
    seqs: &[&[u32]],
    seq_len: usize,
) -> (f64, usize, Array2<f64>) {
    let v = logits.ncols();
    let mut d_logits = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let mut positions = 0usize;
    for (bi, seq) in seqs.iter().enumerate() {
        for p in 0..seq_len - 1 {
            let r = bi * seq_len + p;
            let target = seq[p + 1] as usize;
            let ls = log_softmax(logits.row(r));
            loss -= ls[target];
            positions += 1;
            let mut drow = d_logits.row_mut(r);
            for j in 0..v {
                drow[j] = (ls[j]).exp();
            }
            drow[target] -= 1.0;
        }
    }
    let n = positions.max(1) as f64;
    d_logits.mapv_inplace(|x| x / n);
    (loss / n, positions, d_logits)
}

struct AdamW {
    m: Weights,
    v: Weights,
    step: usize,
}

impl AdamW {
    fn new(cfg: &ModelConfig) -> AdamW {
        AdamW {
            m: Weights::zeros(cfg),
            v: Weights::zeros(cfg),
            step: 0,
        }
    }

    fn apply(&mut self, weights: &mut Weights, grads: &mut Weights, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        // global-norm clip first
        if cfg.grad_clip > 0.0 {
            let mut total = 0.0;
            for t in grads.tensors() {
                for &g in t.data {
                    total += g * g;
                }
            }
            let norm = total.sqrt();
            if norm > cfg.grad_clip {
                let scale = cfg.grad_clip / norm;
                for t in grads.tensors_mut() {
                    for g in t.data.iter_mut() {
                        *g *= scale;
                    }
                }
            }
        }
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let mut ps = weights.tensors_mut();
        let gs = grads.tensors();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        for i in 0..ps.len() {
            let decay = ps[i].decay;
            let p = &mut ps[i].data;
            let g = &gs[i].data;
            let m = &mut ms[i].data;
            let v = &mut vs[i].data;
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut upd = mhat / (vhat.sqrt() + cfg.eps);
                if decay {
                    upd += cfg.weight_decay * p[j];
                }
                p[j] -= lr * upd;
            }
        }
    }
}

/// Train a fresh model on `texts`. The tokenizer comes from the corpus
/// vocabulary; `model_cfg.vocab` is overridden to match it.
pub fn train_model(
    corpus: &FactCorpus,
    texts: &[String],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelCheckpoint, TrainLog)> {
    cfg.validate()?;
    if texts.is_empty() {
        return Err(Error::Model("no training sentences".into()));
    }
    let tokenizer = Tokenizer::from_corpus(corpus)?;
    let mut mc = model_cfg.clone();
    mc.vocab = tokenizer.vocab_size();
    mc.validate()?;

    let mut encoded = Vec::with_capacity(texts.len());
    for text in texts {
        let toks = tokenizer.encode(text)?;
        if toks.len() < 2 {
            return Err(Error::Model(format!(
                "training sentence '{}' is too short to predict from",
                text
            )));
        }
        if toks.len() > mc.context {
            return Err(Error::Model(format!(
                "training sentence '{}' has {} tokens, context window is {}",
                text,
                toks.len(),
                mc.context
            )));
        }
        encoded.push(toks);
    }

    // length buckets, deterministic order
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, toks) in encoded.iter().enumerate() {
        buckets.entry(toks.len()).or_default().push(i);
    }
    let steps_per_epoch: usize = buckets
        .values()
        .map(|b| b.len().div_ceil(cfg.batch_size))
        .sum();
    let total_steps = steps_per_epoch * cfg.max_epochs;

    let weights = Weights::init(&mc, seed)?;
    let mut ckpt = ModelCheckpoint::new(mc.clone(), tokenizer, weights, TrainMeta::default());
    let mut opt = AdamW::new(&mc);
    let started = Instant::now();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let mut final_loss = f64::NAN;
    let mut recall = 0.0;
    let mut epochs_run = 0;

    'epochs: for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut rng = rng_for(seed, salt::SHUFFLE, epoch as u64);
        let mut batches: Vec<Vec<usize>> = Vec::with_capacity(steps_per_epoch);
        for bucket in buckets.values() {
            let mut order = bucket.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                batches.push(chunk.to_vec());
            }
        }
        batches.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_positions = 0usize;
        let mut last_lr = 0.0;
        for batch in &batches {
            step += 1;
            let seqs: Vec<&[u32]> = batch.iter().map(|&i| encoded[i].as_slice()).collect();
            let cache = forward_batch(&ckpt, &seqs, &[])?;
            let (loss, positions, d_logits) = batch_loss_grad(&cache.logits, &seqs, cache.seq);
            if !loss.is_finite() {
                return Err(Error::Model(format!(
                    "training diverged at step {} (loss {})",
                    step, loss
                )));
            }
            epoch_loss += loss * positions as f64;
            epoch_positions += positions;
            let grads = backward_batch(
                &ckpt,
                &cache,
                &BackwardRequest {
                    d_logits: &d_logits,
                    resid_injections: &[],
                    want_params: true,
                    want_deltas: false,
                },
            )?;
            let mut g = grads.params.expect("param grads requested");
            last_lr = lr_at(step, cfg, total_steps);
            let w = std::sync::Arc::get_mut(&mut ckpt.weights)
                .expect("training holds the only weight reference");
            opt.apply(w, &mut g, last_lr, cfg);
        }
        final_loss = epoch_loss / epoch_positions.max(1) as f64;
        let mut row = TrainRow {
            epoch,
            step,
            lr: last_lr,
            loss: final_loss,
            recall: None,
        };
        if epoch % cfg.recall_every == 0 || epoch == cfg.max_epochs {
            recall = fact_recall(&ckpt, corpus)?;
            row.recall = Some(recall);
            log.rows.push(row);
            if recall >= cfg.target_recall {
                break 'epochs;
            }
        } else {
            log.rows.push(row);
        }
    }

    log.wall_seconds = started.elapsed().as_secs_f64();
    ckpt.meta = TrainMeta {
        steps: step,
        epochs: epochs_run,
        final_loss,
        recall,
        seed,
    };
    Ok((ckpt, log))
}

/// Fraction of corpus triples whose object is greedily recalled from the
/// canonical prompt.
pub fn fact_recall(ckpt: &ModelCheckpoint, corpus: &FactCorpus) -> Result<f64> {
    if corpus.triples.is_empty() {
        return Err(Error::Corpus("corpus has no triples".into()));
    }
    let tok = &ckpt.tokenizer;
    let mut singles: BTreeMap<usize, Vec<(Vec<u32>, u32)>> = BTreeMap::new();
    let mut multi: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
    for t in &corpus.triples {
        let prompt = tok.encode(&corpus.canonical_prompt(t.subject, t.relation))?;
        let object = tok.encode(corpus.surface(t.object))?;
        if object.len() == 1 {
            singles.entry(prompt.len()).or_default().push((prompt, object[0]));
        } else {
            multi.push((prompt, object));
        }
    }
    let mut hits = 0usize;
    for group in singles.values() {
        for chunk in group.chunks(64) {
            let seqs: Vec<&[u32]> = chunk.iter().map(|(p, _)| p.as_slice()).collect();
            let cache = forward_batch(ckpt, &seqs, &[])?;
            for (i, (_, obj)) in chunk.iter().enumerate() {
                let row = cache.item_logits(i);
                if argmax(row.row(row.nrows() - 1)) as u32 == *obj {
                    hits += 1;
                }
            }
        }
    }
    for (prompt, object) in &multi {
        if greedy_decode(ckpt, prompt, object.len())? == *object {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.triples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factlang::{generate_corpus, CorpusConfig};
    use std::collections::HashSet;

    fn tiny_corpus() -> FactCorpus {
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

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            layers: 6,
            width: 16,
            heads: 2,
            mlp_width: 32,
            context: 16,
            vocab: 0,
            local_layers: 0,
            local_window: 0,
            learned_positions: true,
        }
    }

    fn quick_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            lr: 4e-3,
            warmup_steps: 10,
            max_epochs: epochs,
            recall_every: 100,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_and_training_is_deterministic() {
        let corpus = tiny_corpus();
        let texts = corpus.training_sentences(&HashSet::new());
        let (ckpt_a, log_a) =
            train_model(&corpus, &texts, &tiny_model_cfg(), &quick_train_cfg(8), 11).unwrap();
        assert!(log_a.rows.len() == 8);
        assert!(
            log_a.rows.last().unwrap().loss < log_a.rows[0].loss,
            "loss failed to decrease: {} -> {}",
            log_a.rows[0].loss,
            log_a.rows.last().unwrap().loss
        );
        let (ckpt_b, log_b) =
            train_model(&corpus, &texts, &tiny_model_cfg(), &quick_train_cfg(8), 11).unwrap();
        assert_eq!(ckpt_a.digest(), ckpt_b.digest());
        assert_eq!(
            log_a.rows.last().unwrap().loss,
            log_b.rows.last().unwrap().loss
        );
        let (ckpt_c, _) =
            train_model(&corpus, &texts, &tiny_model_cfg(), &quick_train_cfg(8), 12).unwrap();
        assert_ne!(ckpt_a.digest(), ckpt_c.digest());
    }

    #[test]
    fn divergence_reports_step() {
        let corpus = tiny_corpus();
        let texts = corpus.training_sentences(&HashSet::new());
        let cfg = TrainConfig {
            lr: 1e6,
            warmup_steps: 0,
            max_epochs: 20,
            grad_clip: 0.0,
            ..quick_train_cfg(20)
        };
        let err = train_model(&corpus, &texts, &tiny_model_cfg(), &cfg, 1).unwrap_err();
        assert!(err.to_string().contains("step"), "got: {}", err);
    }

    #[test]
    fn schedule_warms_up_then_decays_to_floor() {
        let cfg = TrainConfig {
            lr: 1.0,
            min_lr_frac: 0.1,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert!((lr_at(1, &cfg, 100) - 0.1).abs() < 1e-12);
        assert!((lr_at(10, &cfg, 100) - 1.0).abs() < 1e-12);
        let mut prev = lr_at(10, &cfg, 100);
        for s in 11..=100 {
            let now = lr_at(s, &cfg, 100);
            assert!(now <= prev + 1e-12, "lr rose at step {}", s);
            prev = now;
        }
        assert!((lr_at(100, &cfg, 100) - 0.1).abs() < 1e-9);
        assert!((lr_at(500, &cfg, 100) - 0.1).abs() < 1e-9);
    }

    #[test]
    fn recall_is_a_fraction_and_low_before_training() {
        let corpus = tiny_corpus();
        let tokenizer = Tokenizer::from_corpus(&corpus).unwrap();
        let mut mc = tiny_model_cfg();
        mc.vocab = tokenizer.vocab_size();
        let weights = Weights::init(&mc, 3).unwrap();
        let ckpt = ModelCheckpoint::new(mc, tokenizer, weights, TrainMeta::default());
        let r = fact_recall(&ckpt, &corpus).unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert!(r < 0.5, "untrained recall suspiciously high: {}", r);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.beta1 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.target_recall = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_overlong_and_trivial_sentences() {
        let corpus = tiny_corpus();
        let long = vec![["the"; 40].join(" ")];
        assert!(train_model(&corpus, &long, &tiny_model_cfg(), &quick_train_cfg(1), 1).is_err());
        let single = vec!["the".to_string()];
        assert!(train_model(&corpus, &single, &tiny_model_cfg(), &quick_train_cfg(1), 1).is_err());
        let none: Vec<String> = Vec::new();
        assert!(train_model(&corpus, &none, &tiny_model_cfg(), &quick_train_cfg(1), 1).is_err());
    }
}
