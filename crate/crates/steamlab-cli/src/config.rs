//! Line-oriented `key = value` configuration with `[section]` headers.
//! Parse errors carry the offending line number; unknown keys are rejected
//! so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use steamlab::editor::ValueOptConfig;
use steamlab::factlang::CorpusConfig;
use steamlab::model::{ModelConfig, TrainConfig};
use steamlab::{Error, Result};

/// Parsed but untyped config: section -> key -> (value, line).
#[derive(Debug, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut cfg = RawConfig::default();
        let mut current: Option<String> = None;
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unclosed section header", line_no))
                })?;
                if name.is_empty() || name.contains(['[', ']', '=']) {
                    return Err(Error::Config(format!(
                        "line {}: bad section name '{}'",
                        line_no, name
                    )));
                }
                cfg.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected 'key = value' or '[section]', got '{}'",
                    line_no, line
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", line_no)));
            }
            if value.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key '{}' has no value",
                    line_no, key
                )));
            }
            let section = current.clone().ok_or_else(|| {
                Error::Config(format!(
                    "line {}: key '{}' appears before any [section]",
                    line_no, key
                ))
            })?;
            let entries = cfg.sections.get_mut(&section).expect("section exists");
            if let Some((_, first)) = entries.get(key) {
                return Err(Error::Config(format!(
                    "line {}: key '{}' already set on line {}",
                    line_no, key, first
                )));
            }
            entries.insert(key.to_string(), (value.to_string(), line_no));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config '{}': {}", path.display(), e))
        })?;
        RawConfig::parse(&text)
    }
}

/// Tracks which keys a section reader consumed so leftovers can be reported.
struct SectionReader<'a> {
    name: &'a str,
    entries: Option<&'a BTreeMap<String, (String, usize)>>,
    consumed: Vec<&'a str>,
}

impl<'a> SectionReader<'a> {
    fn new(cfg: &'a RawConfig, name: &'a str) -> SectionReader<'a> {
        SectionReader {
            name,
            entries: cfg.sections.get(name),
            consumed: Vec::new(),
        }
    }

    fn raw(&mut self, key: &'a str) -> Option<&'a (String, usize)> {
        self.consumed.push(key);
        self.entries.and_then(|e| e.get(key))
    }

    fn parse_with<T>(&mut self, key: &'a str, default: T, kind: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some((value, line)) => f(value).ok_or_else(|| {
                Error::Config(format!(
                    "line {}: [{}] {} = '{}' is not {}",
                    line, self.name, key, value, kind
                ))
            }),
        }
    }

    fn usize(&mut self, key: &'a str, default: usize) -> Result<usize> {
        self.parse_with(key, default, "a non-negative integer", |v| v.parse().ok())
    }

    fn f64(&mut self, key: &'a str, default: f64) -> Result<f64> {
        self.parse_with(key, default, "a number", |v| v.parse().ok())
    }

    fn bool(&mut self, key: &'a str, default: bool) -> Result<bool> {
        self.parse_with(key, default, "true or false", |v| match v {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    /// Comma-separated numbers, e.g. `0, 1, 3.5`.
    fn f64_list(&mut self, key: &'a str, default: &[f64]) -> Result<Vec<f64>> {
        self.parse_with(key, default.to_vec(), "a comma-separated number list", |v| {
            v.split(',').map(|p| p.trim().parse().ok()).collect()
        })
    }

    /// Comma-separated inclusive ranges, e.g. `2-3, 3-4`.
    fn band_list(&mut self, key: &'a str, default: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
        self.parse_with(
            key,
            default.to_vec(),
            "a comma-separated list of start-end ranges",
            |v| {
                v.split(',')
                    .map(|p| {
                        let (a, b) = p.trim().split_once('-')?;
                        Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
                    })
                    .collect()
            },
        )
    }

    fn finish(self) -> Result<()> {
        if let Some(entries) = self.entries {
            for (key, (_, line)) in entries {
                if !self.consumed.iter().any(|k| k == key) {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{}' in [{}]",
                        line, key, self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Editing knobs shared by the edit, sweep, and analyze commands.
#[derive(Debug, Clone)]
pub struct EditParams {
    pub layer: usize,
    pub lambda: f64,
    pub band: (usize, usize),
    pub opt: ValueOptConfig,
    pub prefixes: usize,
    pub cov_ridge: f64,
    pub cov_samples: usize,
    pub min_support: usize,
    pub anchor_sample: usize,
    pub cases: usize,
}

#[derive(Debug, Clone)]
pub struct SweepParams {
    pub lambdas: Vec<f64>,
    pub bands: Vec<(usize, usize)>,
    pub cases: usize,
}

#[derive(Debug, Clone)]
pub struct AnalyzeParams {
    pub dims: usize,
}

/// Fully typed laboratory configuration.
#[derive(Debug, Clone)]
pub struct LabConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub edit: EditParams,
    pub sweep: SweepParams,
    pub analyze: AnalyzeParams,
}

impl LabConfig {
    /// The built-in defaults, sized for the desk-scale model.
    pub fn defaults() -> LabConfig {
        LabConfig::from_raw(&RawConfig::default()).expect("defaults are valid")
    }

    pub fn load(path: &Path) -> Result<LabConfig> {
        LabConfig::from_raw(&RawConfig::load(path)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<LabConfig> {
        let mut s = SectionReader::new(raw, "corpus");
        let corpus = CorpusConfig {
            entities: s.usize("entities", 50)?,
            relations: s.usize("relations", 8)?,
            facts_per_relation: s.usize("facts_per_relation", 40)?,
            paraphrases_per_relation: s.usize("paraphrases_per_relation", 2)?,
            multihop_pairs: s.usize("multihop_pairs", 240)?,
            object_pool: s.usize("object_pool", 10)?,
            categories: s.usize("categories", 6)?,
            vocab_budget: s.usize("vocab_budget", 360)?,
            multi_token_objects: s.bool("multi_token_objects", false)?,
            seed: 0,
        };
        s.finish()?;

        let mut s = SectionReader::new(raw, "model");
        let model = ModelConfig {
            layers: s.usize("layers", 6)?,
            width: s.usize("width", 128)?,
            heads: s.usize("heads", 4)?,
            mlp_width: s.usize("mlp_width", 256)?,
            context: s.usize("context", 48)?,
            vocab: 0,
            local_layers: s.usize("local_layers", 5)?,
            local_window: s.usize("local_window", 2)?,
            learned_positions: s.bool("learned_positions", true)?,
        };
        s.finish()?;

        let mut s = SectionReader::new(raw, "train");
        let train = TrainConfig {
            batch_size: s.usize("batch_size", 32)?,
            lr: s.f64("lr", 3e-3)?,
            min_lr_frac: s.f64("min_lr_frac", 0.1)?,
            weight_decay: s.f64("weight_decay", 0.01)?,
            beta1: s.f64("beta1", 0.9)?,
            beta2: s.f64("beta2", 0.999)?,
            eps: s.f64("eps", 1e-8)?,
            warmup_steps: s.usize("warmup_steps", 100)?,
            max_epochs: s.usize("max_epochs", 240)?,
            grad_clip: s.f64("grad_clip", 1.0)?,
            target_recall: s.f64("target_recall", 0.98)?,
            recall_every: s.usize("recall_every", 4)?,
        };
        s.finish()?;

        let mut s = SectionReader::new(raw, "edit");
        let band_start = s.usize("band_start", 3)?;
        let band_end = s.usize("band_end", 4)?;
        let edit = EditParams {
            layer: s.usize("layer", 2)?,
            lambda: s.f64("lambda", 5.0)?,
            band: (band_start, band_end),
            opt: ValueOptConfig {
                steps: s.usize("steps", 20)?,
                lr: s.f64("value_lr", 0.1)?,
                weight_decay: s.f64("value_weight_decay", 0.05)?,
                kl_factor: s.f64("kl_factor", 0.0625)?,
                clamp_factor: s.f64("clamp_factor", 4.0)?,
                ..ValueOptConfig::default()
            },
            prefixes: s.usize("prefixes", 3)?,
            cov_ridge: s.f64("cov_ridge", 1e-4)?,
            cov_samples: s.usize("cov_samples", 4096)?,
            min_support: s.usize("min_support", 8)?,
            anchor_sample: s.usize("anchor_sample", 64)?,
            cases: s.usize("cases", 50)?,
        };
        s.finish()?;

        let mut s = SectionReader::new(raw, "sweep");
        let sweep = SweepParams {
            lambdas: s.f64_list("lambdas", &[0.0, 1.0, 3.0, 5.0, 10.0])?,
            bands: s.band_list("bands", &[(2, 3), (3, 4), (4, 5)])?,
            cases: s.usize("cases", 20)?,
        };
        s.finish()?;

        let mut s = SectionReader::new(raw, "analyze");
        let analyze = AnalyzeParams {
            dims: s.usize("dims", 3)?,
        };
        s.finish()?;

        for section in raw.sections.keys() {
            if !["corpus", "model", "train", "edit", "sweep", "analyze"].contains(&section.as_str())
            {
                return Err(Error::Config(format!("unknown section [{}]", section)));
            }
        }

        let cfg = LabConfig {
            corpus,
            model,
            train,
            edit,
            sweep,
            analyze,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.edit.opt.validate()?;
        let layers = self.model.layers;
        let (bs, be) = self.edit.band;
        if bs == 0 || bs > be || be > layers {
            return Err(Error::Config(format!(
                "[edit] band {}-{} invalid for {} layers",
                bs, be, layers
            )));
        }
        if self.edit.layer == 0 || self.edit.layer > layers {
            return Err(Error::Config(format!(
                "[edit] layer {} out of range 1..={}",
                self.edit.layer, layers
            )));
        }
        if self.edit.lambda < 0.0 {
            return Err(Error::Config("[edit] lambda must be non-negative".into()));
        }
        if self.edit.cases == 0 || self.sweep.cases == 0 {
            return Err(Error::Config("case counts must be positive".into()));
        }
        for &(a, b) in &self.sweep.bands {
            if a == 0 || a > b || b > layers {
                return Err(Error::Config(format!(
                    "[sweep] band {}-{} invalid for {} layers",
                    a, b, layers
                )));
            }
        }
        if self.sweep.lambdas.iter().any(|&l| l < 0.0) {
            return Err(Error::Config("[sweep] lambdas must be non-negative".into()));
        }
        if !(2..=3).contains(&self.analyze.dims) {
            return Err(Error::Config("[analyze] dims must be 2 or 3".into()));
        }
        Ok(())
    }
}
