//! Locate-and-edit: extract the key activation for a subject, estimate key
//! covariance, optimize the value vector against a composite of negative
//! log-likelihood, next-token KL and (optionally) latent alignment against
//! semantic anchors, then commit a closed-form rank-one update to the edit
//! layer's MLP projection.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::factlang::{EditCase, FactCorpus};
use crate::fsio;
use crate::linalg::{cholesky, cholesky_solve, l2_norm};
use crate::model::{
    backward_batch, forward_batch, last_subword_position, log_softmax, BackwardRequest,
    Intervention, InterventionMode, ModelCheckpoint, ResidInjection,
};
use crate::seeds::{self, salt};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueOptConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the KL term in the composite loss.
    pub kl_factor: f64,
    /// Norm clamp: after each step project onto ‖δ‖ ≤ clamp_factor·‖δ₀‖.
    pub clamp_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for ValueOptConfig {
    fn default() -> Self {
        ValueOptConfig {
            steps: 20,
            lr: 0.1,
            weight_decay: 0.05,
            kl_factor: 0.0625,
            clamp_factor: 4.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ValueOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("value optimization needs at least 1 step".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.kl_factor < 0.0 {
            return Err(Error::Config(format!(
                "bad value-optimizer settings (lr {}, weight_decay {}, kl_factor {})",
                self.lr, self.weight_decay, self.kl_factor
            )));
        }
        if !(self.clamp_factor > 0.0) {
            return Err(Error::Config("clamp_factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything one edit needs, rendered to plain strings so the editor only
/// depends on the tokenizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRequest {
    pub case_id: u32,
    pub subject: String,
    pub relation_noun: String,
    pub old_object: String,
    pub new_object: String,
    /// Factual cloze prompt p whose continuation should become the new object.
    pub prompt: String,
    /// Generic prompt p′ whose next-token distribution must not drift.
    pub generic_prompt: String,
    /// Prefix contexts; the empty string is the un-prefixed prompt itself.
    pub prefixes: Vec<String>,
    /// Edit layer ℓ* (1-based).
    pub layer: usize,
    /// Alignment weight λ; 0 disables the alignment term.
    pub lambda: f64,
    /// Alignment band, inclusive 1-based layer range.
    pub band_start: usize,
    pub band_end: usize,
    pub opt: ValueOptConfig,
}

impl EditRequest {
    pub fn validate(&self, ckpt: &ModelCheckpoint) -> Result<()> {
        self.opt.validate()?;
        let layers = ckpt.config.layers;
        if self.layer == 0 || self.layer > layers {
            return Err(Error::Edit(format!(
                "edit layer {} out of range 1..={}",
                self.layer, layers
            )));
        }
        if self.band_start == 0 || self.band_start > self.band_end || self.band_end > layers {
            return Err(Error::Edit(format!(
                "alignment band [{}, {}] invalid for {} layers",
                self.band_start, self.band_end, layers
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Edit(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.prefixes.is_empty() {
            return Err(Error::Edit("at least one prefix context is required".into()));
        }
        if self.new_object.trim().is_empty() {
            return Err(Error::Edit("new object surface is empty".into()));
        }
        Ok(())
    }
}

/// Sample `count` corpus fact sentences as prefix contexts and prepend the
/// empty prefix. Deterministic per (seed, case_id).
pub fn default_prefixes(corpus: &FactCorpus, count: usize, seed: u64, case_id: u32) -> Vec<String> {
    use rand::Rng;
    let mut rng = seeds::rng_for(seed, salt::PREFIXES, case_id as u64);
    let mut out = vec![String::new()];
    for _ in 0..count {
        let t = corpus.triples[rng.gen_range(0..corpus.triples.len())];
        out.push(format!(
            "{} {}",
            corpus.canonical_prompt(t.subject, t.relation),
            corpus.surface(t.object)
        ));
    }
    out
}

/// Render an edit case into a request with the given editing knobs.
pub fn request_from_case(
    corpus: &FactCorpus,
    case: &EditCase,
    layer: usize,
    lambda: f64,
    band: (usize, usize),
    opt: &ValueOptConfig,
    prefix_count: usize,
    seed: u64,
) -> EditRequest {
    EditRequest {
        case_id: case.id,
        subject: corpus.surface(case.subject).to_string(),
        relation_noun: corpus.relation(case.relation).noun.clone(),
        old_object: corpus.surface(case.old_object).to_string(),
        new_object: corpus.surface(case.new_object).to_string(),
        prompt: corpus.canonical_prompt(case.subject, case.relation),
        generic_prompt: corpus.generic_prompt(case.subject),
        prefixes: default_prefixes(corpus, prefix_count, seed, case.id),
        layer,
        lambda,
        band_start: band.0,
        band_end: band.1,
        opt: opt.clone(),
    }
}

fn join_prefixed(prefix: &str, prompt: &str) -> String {
    if prefix.is_empty() {
        prompt.to_string()
    } else {
        format!("{} {}", prefix, prompt)
    }
}

/// Locate the last subject subword inside the prompt portion of a prefixed
/// sequence. Returns the absolute position.
fn subject_position(
    ckpt: &ModelCheckpoint,
    prefix_len: usize,
    prompt_tokens: &[u32],
    subject: &str,
    context: &str,
) -> Result<usize> {
    let subj_tokens = ckpt.tokenizer.encode(subject)?;
    let pos = last_subword_position(prompt_tokens, &subj_tokens).ok_or_else(|| {
        Error::Edit(format!(
            "subject '{}' does not occur in context '{}'",
            subject, context
        ))
    })?;
    Ok(prefix_len + pos)
}

/// Mean MLP-input activation at the last subject subword over all prefixed
/// prompts; this is the key the rank-one update preserves.
pub fn compute_key(
    ckpt: &ModelCheckpoint,
    subject: &str,
    prefixes: &[String],
    prompt: &str,
    layer: usize,
) -> Result<Array1<f64>> {
    if prefixes.is_empty() {
        return Err(Error::Edit("at least one prefix context is required".into()));
    }
    let prompt_tokens = ckpt.tokenizer.encode(prompt)?;
    let mut sum: Option<Array1<f64>> = None;
    for prefix in prefixes {
        let full = join_prefixed(prefix, prompt);
        let tokens = ckpt.tokenizer.encode(&full)?;
        let prefix_len = tokens.len() - prompt_tokens.len();
        let pos = subject_position(ckpt, prefix_len, &prompt_tokens, subject, &full)?;
        let cache = forward_batch(ckpt, &[&tokens], &[])?;
        let act = cache.mlp_act(0, layer).row(pos).to_owned();
        sum = Some(match sum {
            None => act,
            Some(acc) => acc + act,
        });
    }
    Ok(sum.expect("nonempty prefixes") / prefixes.len() as f64)
}

/// Second-order key statistics at one layer, with the Cholesky factor cached
/// for repeated solves.
#[derive(Debug, Clone)]
pub struct KeyCovariance {
    pub layer: usize,
    pub matrix: Array2<f64>,
    chol: Array2<f64>,
    pub samples: usize,
    pub ridge: f64,
}

impl KeyCovariance {
    pub fn new(layer: usize, matrix: Array2<f64>, samples: usize, ridge: f64) -> Result<KeyCovariance> {
        let chol = cholesky(&matrix).map_err(|e| {
            Error::Edit(format!(
                "key covariance at layer {} is not positive definite ({}); increase the ridge",
                layer, e
            ))
        })?;
        Ok(KeyCovariance {
            layer,
            matrix,
            chol,
            samples,
            ridge,
        })
    }

    /// C⁻¹ b via the cached factorization.
    pub fn solve(&self, b: &Array1<f64>) -> Result<Array1<f64>> {
        cholesky_solve(&self.chol, b)
    }
}

/// C = (1/M) Σ k kᵀ + ridge·I over the rows of `keys`.
pub fn covariance_from_keys(keys: &Array2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let m = keys.nrows();
    if m == 0 {
        return Err(Error::Edit("covariance needs at least one key sample".into()));
    }
    let mut c = keys.t().dot(keys) / m as f64;
    for i in 0..c.nrows() {
        c[[i, i]] += ridge;
    }
    Ok(c)
}

/// Accumulate MLP-input activations at `layer` over randomly drawn corpus
/// sentences (every token position counts) until at least `target_samples`
/// vectors contribute.
pub fn estimate_covariance(
    ckpt: &ModelCheckpoint,
    corpus: &FactCorpus,
    layer: usize,
    ridge: f64,
    target_samples: usize,
    seed: u64,
) -> Result<KeyCovariance> {
    use rand::Rng;
    if target_samples == 0 {
        return Err(Error::Edit("covariance sample budget is zero".into()));
    }
    if ridge <= 0.0 {
        return Err(Error::Edit("covariance ridge must be positive".into()));
    }
    let texts = corpus.training_sentences(&HashSet::new());
    if texts.is_empty() {
        return Err(Error::Corpus("corpus yields no sentences to sample".into()));
    }
    let encoded: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| ckpt.tokenizer.encode(t))
        .collect::<Result<_>>()?;
    let dk = ckpt.config.mlp_width;
    let mut rng = seeds::rng(seed, salt::COVARIANCE);
    let mut acc = Array2::<f64>::zeros((dk, dk));
    let mut count = 0usize;
    while count < target_samples {
        // draw a same-length batch to share one forward
        let mut batch: Vec<&[u32]> = Vec::with_capacity(16);
        let first = &encoded[rng.gen_range(0..encoded.len())];
        batch.push(first);
        while batch.len() < 16 {
            let cand = &encoded[rng.gen_range(0..encoded.len())];
            if cand.len() == first.len() {
                batch.push(cand);
            } else {
                break;
            }
        }
        let cache = forward_batch(ckpt, &batch, &[])?;
        for item in 0..batch.len() {
            let act = cache.mlp_act(item, layer);
            acc += &act.t().dot(&act);
            count += act.nrows();
        }
    }
    if count < dk {
        return Err(Error::Edit(format!(
            "covariance sample produced {} activations, need at least the key width {}",
            count, dk
        )));
    }
    let mut c = acc / count as f64;
    for i in 0..dk {
        c[[i, i]] += ridge;
    }
    KeyCovariance::new(layer, c, count, ridge)
}

/// One row of the optimization trajectory; losses are evaluated at the start
/// of the step, before its update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub nll: f64,
    pub kl: f64,
    pub align: f64,
    pub composite: f64,
    pub delta_norm: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRecord {
    pub request: EditRequest,
    /// Position within a sequential batch; 0 for single edits.
    pub batch_index: usize,
    pub trajectory: Vec<StepRow>,
    pub v_star: Vec<f64>,
    /// Λ of the rank-one update.
    pub lambda_coeff: Vec<f64>,
    /// C⁻¹k*, the other factor of Ŵ − W.
    pub update_direction: Vec<f64>,
    /// Surface of the anchor target when alignment was active.
    pub anchor_target: Option<String>,
    pub anchor_sample_size: usize,
    pub clamped_steps: usize,
    pub checkpoint_digest: String,
}

pub fn save_records(path: &Path, records: &[EditRecord]) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(records)?;
    bytes.push(b'\n');
    fsio::write_atomic(path, &bytes)
}

pub fn load_records(path: &Path) -> Result<Vec<EditRecord>> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// A sequence taking part in value optimization.
struct OptSeq {
    tokens: Vec<u32>,
    /// Intervention position (last subject subword).
    subject_pos: usize,
    /// Where the target object tokens start; NLL sequences only.
    target_start: usize,
    in_nll: bool,
    /// The un-prefixed sequence that alignment states are read from.
    is_align: bool,
    /// Final token of the prompt p (the o*-prediction position).
    align_pos: usize,
}

struct ValueProblem {
    seqs: Vec<OptSeq>,
    target_tokens: Vec<u32>,
    nll_count: usize,
    kl_tokens: Vec<u32>,
    kl_pos: usize,
    /// log ℙ(x|p′) of the unedited model at p′'s final position.
    base_log_q: Array1<f64>,
    delta0: Array1<f64>,
}

impl ValueProblem {
    fn new(ckpt: &ModelCheckpoint, req: &EditRequest) -> Result<ValueProblem> {
        let tok = &ckpt.tokenizer;
        let prompt_tokens = tok.encode(&req.prompt)?;
        let target_tokens = tok.encode(&req.new_object)?;
        let mut seqs = Vec::with_capacity(req.prefixes.len() + 1);
        let mut have_align = false;
        for prefix in &req.prefixes {
            let full = join_prefixed(prefix, &req.prompt);
            let mut tokens = tok.encode(&full)?;
            let prefix_len = tokens.len() - prompt_tokens.len();
            let subject_pos =
                subject_position(ckpt, prefix_len, &prompt_tokens, &req.subject, &full)?;
            let target_start = tokens.len();
            tokens.extend_from_slice(&target_tokens);
            if tokens.len() > ckpt.config.context {
                return Err(Error::Edit(format!(
                    "prefixed prompt '{}' plus target exceeds the context window",
                    full
                )));
            }
            let is_align = prefix.is_empty() && !have_align;
            have_align |= is_align;
            seqs.push(OptSeq {
                tokens,
                subject_pos,
                target_start,
                in_nll: true,
                is_align,
                align_pos: prefix_len + prompt_tokens.len() - 1,
            });
        }
        let nll_count = seqs.len();
        if !have_align {
            // alignment (and δ₀) read from the un-prefixed prompt
            let subject_pos =
                subject_position(ckpt, 0, &prompt_tokens, &req.subject, &req.prompt)?;
            seqs.push(OptSeq {
                tokens: prompt_tokens.clone(),
                subject_pos,
                target_start: prompt_tokens.len(),
                in_nll: false,
                is_align: true,
                align_pos: prompt_tokens.len() - 1,
            });
        }

        let kl_tokens = tok.encode(&req.generic_prompt)?;
        let kl_prompt_copy = kl_tokens.clone();
        let kl_pos = subject_position(ckpt, 0, &kl_prompt_copy, &req.subject, &req.generic_prompt)?;
        let kl_cache = forward_batch(ckpt, &[&kl_tokens], &[])?;
        let base_log_q = log_softmax(kl_cache.logits.row(kl_tokens.len() - 1));

        // δ₀ = the original MLP output at the subject position of the
        // un-prefixed prompt (identity intervention)
        let align_seq = seqs.iter().find(|s| s.is_align).expect("alignment sequence");
        let plain = forward_batch(ckpt, &[&align_seq.tokens], &[])?;
        let delta0 = plain
            .mlp_out(0, req.layer)
            .row(align_seq.subject_pos)
            .to_owned();

        Ok(ValueProblem {
            seqs,
            target_tokens,
            nll_count,
            kl_tokens,
            kl_pos,
            base_log_q,
            delta0,
        })
    }

    /// Forward all sequences under δ, compute the three loss components, and
    /// (when `want_grad`) the total gradient of the composite w.r.t. δ.
    fn evaluate(
        &self,
        ckpt: &ModelCheckpoint,
        req: &EditRequest,
        anchors: Option<&AnchorSet>,
        delta: &Array1<f64>,
        want_grad: bool,
    ) -> Result<(f64, f64, f64, Option<Array1<f64>>)> {
        let d = ckpt.config.width;
        let mut grad = want_grad.then(|| Array1::<f64>::zeros(d));
        let mut nll = 0.0;
        let mut align = 0.0;

        // group same-length sequences into shared forwards
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.seqs.iter().enumerate() {
            groups.entry(s.tokens.len()).or_default().push(i);
        }
        for group in groups.values() {
            let seqs: Vec<&[u32]> = group.iter().map(|&i| self.seqs[i].tokens.as_slice()).collect();
            let ivs: Vec<Option<Intervention>> = group
                .iter()
                .map(|&i| {
                    Some(Intervention {
                        layer: req.layer,
                        position: self.seqs[i].subject_pos,
                        mode: InterventionMode::Replace,
                        delta: delta.clone(),
                    })
                })
                .collect();
            let cache = forward_batch(ckpt, &seqs, &ivs)?;
            let t = cache.seq;
            let mut d_logits = Array2::<f64>::zeros(cache.logits.raw_dim());
            let mut injections: Vec<ResidInjection> = Vec::new();
            for (item, &si) in group.iter().enumerate() {
                let s = &self.seqs[si];
                if s.in_nll {
                    for (k, &target) in self.target_tokens.iter().enumerate() {
                        let row = item * t + s.target_start + k - 1;
                        let ls = log_softmax(cache.logits.row(row));
                        nll -= ls[target as usize] / self.nll_count as f64;
                        if want_grad {
                            let mut drow = d_logits.row_mut(row);
                            for j in 0..drow.len() {
                                drow[j] = ls[j].exp() / self.nll_count as f64;
                            }
                            drow[target as usize] -= 1.0 / self.nll_count as f64;
                        }
                    }
                }
                if s.is_align && req.lambda > 0.0 {
                    let anchors = anchors.expect("validated by optimize_value");
                    let n_align = (req.band_end - req.band_start + 1) as f64;
                    for layer in req.band_start..=req.band_end {
                        let h = cache.resid_post(item, layer).row(s.align_pos).to_owned();
                        let phi = anchors.layer(layer);
                        let hn = l2_norm(&h);
                        let pn = phi.dot(&phi).sqrt();
                        if hn < 1e-12 || pn < 1e-12 {
                            return Err(Error::Edit(format!(
                                "cosine undefined at layer {}: zero-norm {}",
                                layer,
                                if hn < 1e-12 { "hidden state" } else { "anchor" }
                            )));
                        }
                        let h_hat = &h / hn;
                        let phi_hat = &phi.to_owned() / pn;
                        let cos = h_hat.dot(&phi_hat);
                        align += (1.0 - cos) / n_align;
                        if want_grad {
                            // d(1−cos)/dh = −(φ̂ − ĥ·cos)/‖h‖
                            let mut g = (&phi_hat - &(&h_hat * cos)) / -hn;
                            g.mapv_inplace(|v| v * req.lambda / n_align);
                            injections.push(ResidInjection {
                                item,
                                layer,
                                position: s.align_pos,
                                grad: g,
                            });
                        }
                    }
                }
            }
            if want_grad {
                let grads = backward_batch(
                    ckpt,
                    &cache,
                    &BackwardRequest {
                        d_logits: &d_logits,
                        resid_injections: &injections,
                        want_params: false,
                        want_deltas: true,
                    },
                )?;
                let g = grad.as_mut().expect("grad accumulator");
                for slot in grads.deltas.into_iter().flatten() {
                    *g += &slot;
                }
            }
        }

        // KL on the generic prompt
        let kl_iv = Intervention {
            layer: req.layer,
            position: self.kl_pos,
            mode: InterventionMode::Replace,
            delta: delta.clone(),
        };
        let kl_cache = forward_batch(ckpt, &[&self.kl_tokens], &[Some(kl_iv)])?;
        let last = self.kl_tokens.len() - 1;
        let log_p = log_softmax(kl_cache.logits.row(last));
        let p = log_p.mapv(f64::exp);
        let mut kl = 0.0;
        for j in 0..p.len() {
            kl += p[j] * (log_p[j] - self.base_log_q[j]);
        }
        if want_grad && req.opt.kl_factor > 0.0 {
            let mut d_logits = Array2::<f64>::zeros(kl_cache.logits.raw_dim());
            for j in 0..p.len() {
                d_logits[[last, j]] =
                    req.opt.kl_factor * p[j] * ((log_p[j] - self.base_log_q[j]) - kl);
            }
            let grads = backward_batch(
                ckpt,
                &kl_cache,
                &BackwardRequest {
                    d_logits: &d_logits,
                    resid_injections: &[],
                    want_params: false,
                    want_deltas: true,
                },
            )?;
            let g = grad.as_mut().expect("grad accumulator");
            for slot in grads.deltas.into_iter().flatten() {
                *g += &slot;
            }
        }

        Ok((nll, kl, align, grad))
    }
}

/// Direct KL divergence Σ p ln(p/q) between two distributions.
pub fn kl_divergence(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    let mut total = 0.0;
    for (pi, qi) in p.iter().zip(q.iter()) {
        if *pi > 0.0 {
            total += pi * (pi.ln() - qi.ln());
        }
    }
    total
}

/// −(1/N) Σ_j log ℙ(o* | x_j + p; δ) under the replace intervention.
pub fn nll_loss(ckpt: &ModelCheckpoint, req: &EditRequest, delta: &Array1<f64>) -> Result<f64> {
    let problem = ValueProblem::new(ckpt, req)?;
    let (nll, _, _, _) = problem.evaluate(ckpt, req, None, delta, false)?;
    Ok(nll)
}

/// D_KL( ℙ(x|p′; δ) ‖ ℙ(x|p′) ) at the generic prompt's final position.
pub fn kl_loss(ckpt: &ModelCheckpoint, req: &EditRequest, delta: &Array1<f64>) -> Result<f64> {
    let problem = ValueProblem::new(ckpt, req)?;
    let (_, kl, _, _) = problem.evaluate(ckpt, req, None, delta, false)?;
    Ok(kl)
}

/// Mean over the band of 1 − cos(h_δ^ℓ, φ^ℓ) at the o*-prediction position.
pub fn alignment_loss(
    ckpt: &ModelCheckpoint,
    req: &EditRequest,
    delta: &Array1<f64>,
    anchors: &AnchorSet,
) -> Result<f64> {
    if anchors.layers() < req.band_end {
        return Err(Error::Edit(format!(
            "anchor set covers {} layers, band ends at {}",
            anchors.layers(),
            req.band_end
        )));
    }
    let mut req = req.clone();
    if req.lambda == 0.0 {
        req.lambda = 1.0; // evaluation only: force the term on
    }
    let problem = ValueProblem::new(ckpt, &req)?;
    let (_, _, align, _) = problem.evaluate(ckpt, &req, Some(anchors), delta, false)?;
    Ok(align)
}

/// The identity-intervention starting point δ₀ for a request.
pub fn initial_delta(ckpt: &ModelCheckpoint, req: &EditRequest) -> Result<Array1<f64>> {
    Ok(ValueProblem::new(ckpt, req)?.delta0)
}

/// Minimize the composite loss over δ. Returns the final δ as v*, the
/// per-step trajectory (losses evaluated before each update), and how many
/// steps ended clamped.
pub fn optimize_value(
    ckpt: &ModelCheckpoint,
    req: &EditRequest,
    anchors: Option<&AnchorSet>,
) -> Result<(Array1<f64>, Vec<StepRow>, usize)> {
    req.validate(ckpt)?;
    if req.lambda > 0.0 {
        match anchors {
            None => {
                return Err(Error::Edit(format!(
                    "lambda {} needs an anchor set",
                    req.lambda
                )))
            }
            Some(a) if a.layers() < req.band_end => {
                return Err(Error::Edit(format!(
                    "anchor set covers {} layers, band ends at {}",
                    a.layers(),
                    req.band_end
                )));
            }
            _ => {}
        }
    }
    let problem = ValueProblem::new(ckpt, req)?;
    let mut delta = problem.delta0.clone();
    let base_norm = l2_norm(&problem.delta0);
    let clamp_limit = if base_norm > 1e-12 {
        req.opt.clamp_factor * base_norm
    } else {
        req.opt.clamp_factor
    };

    let d = delta.len();
    let mut m = Array1::<f64>::zeros(d);
    let mut v = Array1::<f64>::zeros(d);
    let mut trajectory = Vec::with_capacity(req.opt.steps);
    let mut clamped_steps = 0usize;

    for step in 1..=req.opt.steps {
        let (nll, kl, align, grad) = problem.evaluate(ckpt, req, anchors, &delta, true)?;
        let composite = nll + req.opt.kl_factor * kl + req.lambda * align;
        if !composite.is_finite() {
            return Err(Error::Edit(format!(
                "value optimization diverged at step {} (loss {})",
                step, composite
            )));
        }
        let grad = grad.expect("gradient requested");

        // adam moments with decoupled weight decay
        let b1 = req.opt.beta1;
        let b2 = req.opt.beta2;
        for j in 0..d {
            m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
            v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
        }
        let bc1 = 1.0 - b1.powi(step as i32);
        let bc2 = 1.0 - b2.powi(step as i32);
        for j in 0..d {
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            delta[j] -= req.opt.lr * (mhat / (vhat.sqrt() + req.opt.eps)
                + req.opt.weight_decay * delta[j]);
        }
        let norm = l2_norm(&delta);
        if !norm.is_finite() {
            return Err(Error::Edit(format!(
                "value optimization diverged at step {} (delta norm {})",
                step, norm
            )));
        }
        let clamped = norm > clamp_limit;
        if clamped {
            let scale = clamp_limit / norm;
            delta.mapv_inplace(|x| x * scale);
            clamped_steps += 1;
        }
        trajectory.push(StepRow {
            step,
            nll,
            kl,
            align,
            composite,
            delta_norm: l2_norm(&delta),
            clamped,
        });
    }
    Ok((delta, trajectory, clamped_steps))
}

#[derive(Debug, Clone)]
pub struct RankOneUpdate {
    pub key: Array1<f64>,
    pub value: Array1<f64>,
    /// Λ = (v* − W k*) / ((C⁻¹k*)ᵀ k*).
    pub lambda_coeff: Array1<f64>,
    /// C⁻¹k*; Ŵ = W + Λ (C⁻¹k*)ᵀ.
    pub direction: Array1<f64>,
    pub updated: Array2<f64>,
}

pub fn apply_rank_one_update(
    w: &Array2<f64>,
    key: &Array1<f64>,
    value: &Array1<f64>,
    cov: &KeyCovariance,
) -> Result<RankOneUpdate> {
    if w.ncols() != key.len() || w.nrows() != value.len() {
        return Err(Error::Edit(format!(
            "shape mismatch: W is {}x{}, key {}, value {}",
            w.nrows(),
            w.ncols(),
            key.len(),
            value.len()
        )));
    }
    let direction = cov.solve(key)?;
    let denom = direction.dot(key);
    let key_scale = key.dot(key).max(1e-300);
    if denom.abs() < 1e-12 * key_scale {
        return Err(Error::Edit(format!(
            "degenerate update: (C⁻¹k*)ᵀk* = {:e}; increase the ridge",
            denom
        )));
    }
    let residual = value - &w.dot(key);
    let lambda_coeff = residual / denom;
    let mut updated = w.clone();
    for i in 0..updated.nrows() {
        let li = lambda_coeff[i];
        let mut row = updated.row_mut(i);
        for j in 0..row.len() {
            row[j] += li * direction[j];
        }
    }
    Ok(RankOneUpdate {
        key: key.clone(),
        value: value.clone(),
        lambda_coeff,
        direction,
        updated,
    })
}

/// Run one edit end to end; the base checkpoint is untouched.
pub fn edit(
    ckpt: &ModelCheckpoint,
    req: &EditRequest,
    anchors: Option<&AnchorSet>,
    cov: &KeyCovariance,
) -> Result<(ModelCheckpoint, EditRecord)> {
    req.validate(ckpt)?;
    if cov.layer != req.layer {
        return Err(Error::Edit(format!(
            "covariance was estimated at layer {}, request edits layer {}",
            cov.layer, req.layer
        )));
    }
    let key = compute_key(ckpt, &req.subject, &req.prefixes, &req.prompt, req.layer)?;
    let (v_star, trajectory, clamped_steps) = optimize_value(ckpt, req, anchors)?;
    let w = &ckpt.weights.blocks[req.layer - 1].w_proj;
    let update = apply_rank_one_update(w, &key, &v_star, cov)?;
    let edited = ckpt.with_proj(req.layer, update.updated)?;
    let record = EditRecord {
        request: req.clone(),
        batch_index: 0,
        trajectory,
        v_star: v_star.to_vec(),
        lambda_coeff: update.lambda_coeff.to_vec(),
        update_direction: update.direction.to_vec(),
        anchor_target: anchors.map(|_| req.new_object.clone()),
        anchor_sample_size: anchors.map(|a| a.sampled.len()).unwrap_or(0),
        clamped_steps,
        checkpoint_digest: edited.digest(),
    };
    Ok((edited, record))
}

/// Apply several edits sequentially, each on the previous result. Requests
/// must not share a (subject, relation) pair.
pub fn edit_batch(
    ckpt: &ModelCheckpoint,
    requests: &[(EditRequest, Option<AnchorSet>)],
    covariances: &BTreeMap<usize, KeyCovariance>,
) -> Result<(ModelCheckpoint, Vec<EditRecord>)> {
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (i, (req, _)) in requests.iter().enumerate() {
        if let Some(first) = seen.insert((req.subject.clone(), req.relation_noun.clone()), i) {
            return Err(Error::Edit(format!(
                "conflicting edits: requests {} and {} both target ({}, {})",
                first, i, req.subject, req.relation_noun
            )));
        }
    }
    let mut current = ckpt.clone();
    let mut records = Vec::with_capacity(requests.len());
    for (i, (req, anch)) in requests.iter().enumerate() {
        let cov = covariances.get(&req.layer).ok_or_else(|| {
            Error::Edit(format!("no covariance estimated for layer {}", req.layer))
        })?;
        let (next, mut record) = edit(&current, req, anch.as_ref(), cov)?;
        record.batch_index = i;
        records.push(record);
        current = next;
    }
    Ok((current, records))
}
