//! The subject model: a small decoder-only transformer with pre-norm blocks,
//! learned positional embeddings and a final layer norm before the
//! unembedding. Compute is f64 end to end; checkpoints store f32 on disk.
//!
//! Layer indices in the public API are 1-based (1..=L), matching how the
//! editor and analysis talk about "layer 2 of 6".

mod backward;
mod checkpoint;
mod forward;
mod train;

pub use backward::{backward_batch, BackwardRequest, Gradients, ParamGrads, ResidInjection};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    argmax, capture_residual_stream, forward, forward_batch, forward_with_intervention,
    greedy_decode, log_softmax, sample_generate, FwdCache, Intervention, InterventionMode,
    ResidualTrace,
};
pub use train::{fact_recall, train_model, TrainConfig, TrainLog, TrainRow};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::factlang::FactCorpus;
use crate::seeds::{self, salt};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub context: usize,
    pub vocab: usize,
    /// Leading layers whose attention only reaches `local_window` positions
    /// back. Far-away tokens must then relay through intermediate states
    /// before a global layer can read them, which keeps multi-word subject
    /// representations in the residual stream instead of letting the output
    /// position re-read raw embeddings directly.
    #[serde(default)]
    pub local_layers: usize,
    /// Window length (including the position itself) for the local layers.
    #[serde(default)]
    pub local_window: usize,
    /// Train an absolute position embedding table. Off by default: the causal
    /// mask and the local windows already encode order, and keys read at a
    /// subject's last word stay comparable across prompt offsets only when no
    /// absolute-position component is mixed into the stream.
    #[serde(default = "default_true")]
    pub learned_positions: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 6 {
            return Err(Error::Config(format!(
                "model needs at least 6 layers for a mid-layer band, got {}",
                self.layers
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.mlp_width <= self.width {
            return Err(Error::Config(format!(
                "mlp_width {} must exceed width {}",
                self.mlp_width, self.width
            )));
        }
        if self.context < 4 {
            return Err(Error::Config("context window is too small".into()));
        }
        if self.vocab == 0 {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        if self.local_layers >= self.layers {
            return Err(Error::Config(format!(
                "local_layers {} leaves no global layer (model has {})",
                self.local_layers, self.layers
            )));
        }
        if self.local_layers > 0 && self.local_window < 2 {
            return Err(Error::Config(format!(
                "local_window {} blocks all attention in the local layers",
                self.local_window
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 6,
            width: 128,
            heads: 4,
            mlp_width: 256,
            context: 32,
            vocab: 0, // filled from the tokenizer
            local_layers: 5,
            local_window: 2,
            learned_positions: true,
        }
    }
}

/// Word-level tokenizer over the corpus vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn from_vocab(words: Vec<String>) -> Result<Tokenizer> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate word '{}'", w)));
            }
        }
        Ok(Tokenizer { words, index })
    }

    pub fn from_corpus(corpus: &FactCorpus) -> Result<Tokenizer> {
        Tokenizer::from_vocab(corpus.vocab.clone())
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::Tokenizer(format!("word '{}' is not in the vocabulary", w)))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&i| {
                self.words
                    .get(i as usize)
                    .map(|s| s.as_str())
                    .ok_or_else(|| Error::Tokenizer(format!("token id {} out of range", i)))
            })
            .collect();
        Ok(words?.join(" "))
    }
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    /// Key encoder, (mlp_width, width) plus bias.
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    /// Value projection, (width, mlp_width), bias-free so the rank-one edit
    /// target is exactly the MLP output.
    pub w_proj: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub tok_embed: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_un: Array2<f64>,
}

/// Borrowed view of one weight tensor in the fixed wire order.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Whether weight decay applies (projection matrices yes; embeddings,
    /// gains and biases no).
    pub decay: bool,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub decay: bool,
}

impl Weights {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Weights> {
        config.validate()?;
        let mut rng = seeds::rng(seed, salt::INIT);
        let d = config.width;
        let m = config.mlp_width;
        let v = config.vocab;
        // residual-branch projections get the depth-scaled init
        let resid_scale = 0.02 / (2.0 * config.layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(BlockWeights {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_q: normal(&mut rng, d, d, 0.02),
                w_k: normal(&mut rng, d, d, 0.02),
                w_v: normal(&mut rng, d, d, 0.02),
                w_o: normal(&mut rng, d, d, resid_scale),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_fc: normal(&mut rng, m, d, 0.02),
                b_fc: Array1::zeros(m),
                w_proj: normal(&mut rng, d, m, resid_scale),
            });
        }
        let pos_embed = if config.learned_positions {
            normal(&mut rng, config.context, d, 0.01)
        } else {
            Array2::zeros((config.context, d))
        };
        Ok(Weights {
            tok_embed: normal(&mut rng, v, d, 0.02),
            pos_embed,
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w_un: normal(&mut rng, v, d, 0.02),
        })
    }

    pub fn zeros(config: &ModelConfig) -> Weights {
        let d = config.width;
        let m = config.mlp_width;
        Weights {
            tok_embed: Array2::zeros((config.vocab, d)),
            pos_embed: Array2::zeros((config.context, d)),
            blocks: (0..config.layers)
                .map(|_| BlockWeights {
                    ln1_g: Array1::zeros(d),
                    ln1_b: Array1::zeros(d),
                    w_q: Array2::zeros((d, d)),
                    w_k: Array2::zeros((d, d)),
                    w_v: Array2::zeros((d, d)),
                    w_o: Array2::zeros((d, d)),
                    ln2_g: Array1::zeros(d),
                    ln2_b: Array1::zeros(d),
                    w_fc: Array2::zeros((m, d)),
                    b_fc: Array1::zeros(m),
                    w_proj: Array2::zeros((d, m)),
                })
                .collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            w_un: Array2::zeros((config.vocab, d)),
        }
    }

    /// All tensors in the fixed wire order. The optimizer, the checkpoint
    /// codec and the weight digest walk this same list.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn t2<'a>(name: String, a: &'a Array2<f64>, decay: bool) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: vec![a.nrows(), a.ncols()],
                data: a.as_slice().unwrap(),
                decay,
            }
        }
        fn t1<'a>(name: String, a: &'a Array1<f64>, decay: bool) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: vec![a.len()],
                data: a.as_slice().unwrap(),
                decay,
            }
        }
        let mut out = Vec::with_capacity(5 + 11 * self.blocks.len());
        out.push(t2("tok_embed".into(), &self.tok_embed, false));
        out.push(t2("pos_embed".into(), &self.pos_embed, false));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(t1(format!("block{}.ln1_g", i), &b.ln1_g, false));
            out.push(t1(format!("block{}.ln1_b", i), &b.ln1_b, false));
            out.push(t2(format!("block{}.w_q", i), &b.w_q, true));
            out.push(t2(format!("block{}.w_k", i), &b.w_k, true));
            out.push(t2(format!("block{}.w_v", i), &b.w_v, true));
            out.push(t2(format!("block{}.w_o", i), &b.w_o, true));
            out.push(t1(format!("block{}.ln2_g", i), &b.ln2_g, false));
            out.push(t1(format!("block{}.ln2_b", i), &b.ln2_b, false));
            out.push(t2(format!("block{}.w_fc", i), &b.w_fc, true));
            out.push(t1(format!("block{}.b_fc", i), &b.b_fc, false));
            out.push(t2(format!("block{}.w_proj", i), &b.w_proj, true));
        }
        out.push(t1("lnf_g".into(), &self.lnf_g, false));
        out.push(t1("lnf_b".into(), &self.lnf_b, false));
        out.push(t2("w_un".into(), &self.w_un, true));
        out
    }

    /// Mutable variant of [`Weights::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        fn t2<'a>(name: String, a: &'a mut Array2<f64>, decay: bool) -> TensorMut<'a> {
            let shape = vec![a.nrows(), a.ncols()];
            TensorMut {
                name,
                shape,
                data: a.as_slice_mut().unwrap(),
                decay,
            }
        }
        fn t1<'a>(name: String, a: &'a mut Array1<f64>, decay: bool) -> TensorMut<'a> {
            let shape = vec![a.len()];
            TensorMut {
                name,
                shape,
                data: a.as_slice_mut().unwrap(),
                decay,
            }
        }
        let mut out = Vec::with_capacity(5 + 11 * self.blocks.len());
        out.push(t2("tok_embed".into(), &mut self.tok_embed, false));
        out.push(t2("pos_embed".into(), &mut self.pos_embed, false));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push(t1(format!("block{}.ln1_g", i), &mut b.ln1_g, false));
            out.push(t1(format!("block{}.ln1_b", i), &mut b.ln1_b, false));
            out.push(t2(format!("block{}.w_q", i), &mut b.w_q, true));
            out.push(t2(format!("block{}.w_k", i), &mut b.w_k, true));
            out.push(t2(format!("block{}.w_v", i), &mut b.w_v, true));
            out.push(t2(format!("block{}.w_o", i), &mut b.w_o, true));
            out.push(t1(format!("block{}.ln2_g", i), &mut b.ln2_g, false));
            out.push(t1(format!("block{}.ln2_b", i), &mut b.ln2_b, false));
            out.push(t2(format!("block{}.w_fc", i), &mut b.w_fc, true));
            out.push(t1(format!("block{}.b_fc", i), &mut b.b_fc, false));
            out.push(t2(format!("block{}.w_proj", i), &mut b.w_proj, true));
        }
        out.push(t1("lnf_g".into(), &mut self.lnf_g, false));
        out.push(t1("lnf_b".into(), &mut self.lnf_b, false));
        out.push(t2("w_un".into(), &mut self.w_un, true));
        out
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    // Box-Muller keeps us off rand_distr for one distribution.
    let mut a = Array2::<f64>::zeros((rows, cols));
    for x in a.iter_mut() {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *x = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    a
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub recall: f64,
    pub seed: u64,
}

/// An immutable trained model. Edits clone the weights and return a new
/// checkpoint; the tokenizer and config ride along via `Arc`.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub tokenizer: Arc<Tokenizer>,
    pub weights: Arc<Weights>,
    pub meta: TrainMeta,
}

impl ModelCheckpoint {
    pub fn new(
        config: ModelConfig,
        tokenizer: Tokenizer,
        weights: Weights,
        meta: TrainMeta,
    ) -> ModelCheckpoint {
        ModelCheckpoint {
            config,
            tokenizer: Arc::new(tokenizer),
            weights: Arc::new(weights),
            meta,
        }
    }

    /// A copy with one block's value projection swapped out.
    pub fn with_proj(&self, layer: usize, w_proj: Array2<f64>) -> Result<ModelCheckpoint> {
        if layer == 0 || layer > self.config.layers {
            return Err(Error::Model(format!(
                "layer {} out of range 1..={}",
                layer, self.config.layers
            )));
        }
        let mut weights = (*self.weights).clone();
        weights.blocks[layer - 1].w_proj = w_proj;
        Ok(ModelCheckpoint {
            config: self.config.clone(),
            tokenizer: Arc::clone(&self.tokenizer),
            weights: Arc::new(weights),
            meta: self.meta.clone(),
        })
    }

    /// Content digest of the weights (first 12 hex chars of sha256 over the
    /// f32 wire encoding).
    pub fn digest(&self) -> String {
        checkpoint::weights_digest(self)
    }

    pub fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Model("empty token sequence".into()));
        }
        if tokens.len() > self.config.context {
            return Err(Error::Model(format!(
                "sequence length {} exceeds context window {}",
                tokens.len(),
                self.config.context
            )));
        }
        for &t in tokens {
            if (t as usize) >= self.config.vocab {
                return Err(Error::Model(format!(
                    "token id {} out of vocabulary ({} words)",
                    t, self.config.vocab
                )));
            }
        }
        Ok(())
    }
}

/// Index of the last subword of the first occurrence of `needle` in `hay`.
pub fn last_subword_position(hay: &[u32], needle: &[u32]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len())
        .find(|&i| &hay[i..i + needle.len()] == needle)
        .map(|i| i + needle.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_catches_bad_shapes() {
        let ok = ModelConfig {
            layers: 6,
            width: 8,
            heads: 2,
            mlp_width: 16,
            context: 16,
            vocab: 10,
            local_layers: 0,
            local_window: 0,
            learned_positions: true,
        };
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.layers = 4;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.mlp_width = 8;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.vocab = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tokenizer_round_trips_and_rejects_unknown() {
        let t = Tokenizer::from_vocab(vec!["a".into(), "b".into(), "see".into()]).unwrap();
        let ids = t.encode("see b a").unwrap();
        assert_eq!(ids, vec![2, 1, 0]);
        assert_eq!(t.decode(&ids).unwrap(), "see b a");
        let err = t.encode("see q").unwrap_err();
        assert!(err.to_string().contains("'q'"));
        assert!(t.decode(&[9]).is_err());
    }

    #[test]
    fn tokenizer_rejects_duplicates() {
        assert!(Tokenizer::from_vocab(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn subword_position_finds_first_occurrence() {
        let hay = [5, 1, 2, 3, 1, 2];
        assert_eq!(last_subword_position(&hay, &[1, 2]), Some(2));
        assert_eq!(last_subword_position(&hay, &[3]), Some(3));
        assert_eq!(last_subword_position(&hay, &[9]), None);
        assert_eq!(last_subword_position(&hay, &[]), None);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig {
            layers: 6,
            width: 8,
            heads: 2,
            mlp_width: 16,
            context: 8,
            vocab: 12,
            local_layers: 0,
            local_window: 0,
            learned_positions: true,
        };
        let a = Weights::init(&cfg, 3).unwrap();
        let b = Weights::init(&cfg, 3).unwrap();
        assert_eq!(a.tok_embed, b.tok_embed);
        assert_eq!(a.blocks[5].w_proj, b.blocks[5].w_proj);
        let c = Weights::init(&cfg, 4).unwrap();
        assert_ne!(a.tok_embed, c.tok_embed);
    }
}
