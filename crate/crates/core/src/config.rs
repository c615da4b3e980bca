//! Run configuration, named presets and the flat `key = value` config format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional
//! and overrides the preset it is applied to. Booleans are `true`/`false`;
//! `ablation_seeds` is a comma-separated list.
//!
//! | key | meaning |
//! |---|---|
//! | `d_f`, `heads`, `depth`, `d_ff` | feature width, attention heads, stacked blocks, feed-forward width |
//! | `backbone_depth` | per-modality self-attention layers before the stack (may be 0) |
//! | `d_h`, `d_p` | projection head hidden and output widths |
//! | `use_inter`, `use_intra` | enable the cross-attention and self-attention modules |
//! | `tau`, `lambda`, `include_own_pair` | contrastive loss settings |
//! | `lr`, `steps`, `warmup_fraction` | pre-training schedule |
//! | `beta1`, `beta2`, `eps`, `weight_decay` | AdamW settings |
//! | `batch_size`, `seed`, `log_every`, `checkpoint_every` | training loop |
//! | `probe_steps`, `probe_lr`, `probe_weight_decay` | linear probe |
//! | `ablation_seeds` | seeds averaged by the ablation runner |
//! | `corpus_path` | read the corpus from a file instead of generating it |
//! | `corpus.<field>` | synthetic corpus fields, e.g. `corpus.pixel_noise` |
//! | `out_dir` | output directory |

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::cross_modal::StackConfig;
use crate::data::SyntheticCorpusSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::optim::{AdamWConfig, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_f: usize,
    /// Per-modality self-attention layers applied before the cross-modal stack.
    pub backbone_depth: usize,
    pub heads: usize,
    pub depth: usize,
    pub d_ff: usize,
    pub d_h: usize,
    pub d_p: usize,
    pub use_inter: bool,
    pub use_intra: bool,
}

impl ModelConfig {
    pub fn stack(&self) -> StackConfig {
        StackConfig {
            d_f: self.d_f,
            heads: self.heads,
            d_ff: self.d_ff,
            depth: self.depth,
            use_inter: self.use_inter,
            use_intra: self.use_intra,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_f == 0 || !self.d_f.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_f {} must be a positive multiple of heads {}",
                self.d_f, self.heads
            )));
        }
        if self.depth == 0 || self.d_ff == 0 || self.d_h == 0 || self.d_p < 2 {
            return Err(Error::Config("depth, d_ff and d_h must be positive and d_p at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub corpus: SyntheticCorpusSpec,
    pub corpus_path: Option<PathBuf>,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub probe: ProbeConfig,
    pub ablation_seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected desk or paper)"))),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small enough to pre-train in well under a minute on one core.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                d_f: 32,
                backbone_depth: 1,
                heads: 4,
                depth: 2,
                d_ff: 64,
                d_h: 32,
                d_p: 16,
                use_inter: true,
                use_intra: true,
            },
            loss: LossConfig::default(),
            corpus: SyntheticCorpusSpec::default(),
            corpus_path: None,
            schedule: Schedule {
                base_lr: 1e-3,
                total_steps: 500,
                warmup_fraction: 0.1,
            },
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
            probe: ProbeConfig {
                steps: 300,
                lr: 1e-2,
                weight_decay: 0.0,
            },
            ablation_seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
        }
    }

    /// Published model width, batch size, learning rate and input geometry.
    /// Far too large for a desk CPU run; kept as a reference configuration.
    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            model: ModelConfig {
                d_f: 768,
                backbone_depth: 12,
                heads: 4,
                depth: 2,
                d_ff: 3072,
                d_h: 768,
                d_p: 128,
                ..desk.model
            },
            corpus: SyntheticCorpusSpec {
                height: 224,
                width: 224,
                channels: 3,
                patch: 16,
                n_max: 197,
                vocab_size: 30522,
                content_max: 195,
                ..desk.corpus
            },
            schedule: Schedule {
                base_lr: 2e-5,
                ..desk.schedule
            },
            batch_size: 64,
            ..desk
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if self.corpus_path.is_none() {
            self.corpus.validate()?;
        }
        self.corpus.encoder_config(self.model.d_f).validate()?;
        if self.batch_size < 4 {
            return Err(Error::Config(format!("batch_size must be at least 4, got {}", self.batch_size)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if !(self.probe.lr.is_finite() && self.probe.lr > 0.0) || self.probe.weight_decay < 0.0 {
            return Err(Error::Config("probe lr must be positive and weight decay non-negative".into()));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation_seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Applies `key = value` overrides from config text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn from_text(base: Preset, text: &str) -> Result<Self> {
        let mut cfg = Self::preset(base);
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        let m = &mut self.model;
        let c = &mut self.corpus;
        match key {
            "d_f" => m.d_f = p(key, value)?,
            "backbone_depth" => m.backbone_depth = p(key, value)?,
            "heads" => m.heads = p(key, value)?,
            "depth" => m.depth = p(key, value)?,
            "d_ff" => m.d_ff = p(key, value)?,
            "d_h" => m.d_h = p(key, value)?,
            "d_p" => m.d_p = p(key, value)?,
            "use_inter" => m.use_inter = p(key, value)?,
            "use_intra" => m.use_intra = p(key, value)?,
            "tau" => self.loss.tau = p(key, value)?,
            "lambda" => self.loss.lambda = p(key, value)?,
            "include_own_pair" => self.loss.include_own_pair = p(key, value)?,
            "lr" => self.schedule.base_lr = p(key, value)?,
            "steps" => self.schedule.total_steps = p(key, value)?,
            "warmup_fraction" => self.schedule.warmup_fraction = p(key, value)?,
            "beta1" => self.optimizer.beta1 = p(key, value)?,
            "beta2" => self.optimizer.beta2 = p(key, value)?,
            "eps" => self.optimizer.eps = p(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "log_every" => self.log_every = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "probe_steps" => self.probe.steps = p(key, value)?,
            "probe_lr" => self.probe.lr = p(key, value)?,
            "probe_weight_decay" => self.probe.weight_decay = p(key, value)?,
            "ablation_seeds" => {
                self.ablation_seeds = value
                    .split(',')
                    .map(|s| p(key, s.trim()))
                    .collect::<Result<Vec<u64>>>()?
            }
            "corpus_path" => self.corpus_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "corpus.classes" => c.classes = p(key, value)?,
            "corpus.samples_per_class" => c.samples_per_class = p(key, value)?,
            "corpus.height" => c.height = p(key, value)?,
            "corpus.width" => c.width = p(key, value)?,
            "corpus.channels" => c.channels = p(key, value)?,
            "corpus.patch" => c.patch = p(key, value)?,
            "corpus.vocab_size" => c.vocab_size = p(key, value)?,
            "corpus.n_max" => c.n_max = p(key, value)?,
            "corpus.content_min" => c.content_min = p(key, value)?,
            "corpus.content_max" => c.content_max = p(key, value)?,
            "corpus.pixel_noise" => c.pixel_noise = p(key, value)?,
            "corpus.token_corruption" => c.token_corruption = p(key, value)?,
            "corpus.weak_modality_rate" => c.weak_modality_rate = p(key, value)?,
            "corpus.seed" => c.seed = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Complete `key = value` rendering; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let c = &self.corpus;
        let seeds: Vec<String> = self.ablation_seeds.iter().map(u64::to_string).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("d_f", m.d_f.to_string());
        kv("backbone_depth", m.backbone_depth.to_string());
        kv("heads", m.heads.to_string());
        kv("depth", m.depth.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("d_h", m.d_h.to_string());
        kv("d_p", m.d_p.to_string());
        kv("use_inter", m.use_inter.to_string());
        kv("use_intra", m.use_intra.to_string());
        kv("tau", self.loss.tau.to_string());
        kv("lambda", self.loss.lambda.to_string());
        kv("include_own_pair", self.loss.include_own_pair.to_string());
        kv("lr", self.schedule.base_lr.to_string());
        kv("steps", self.schedule.total_steps.to_string());
        kv("warmup_fraction", self.schedule.warmup_fraction.to_string());
        kv("beta1", self.optimizer.beta1.to_string());
        kv("beta2", self.optimizer.beta2.to_string());
        kv("eps", self.optimizer.eps.to_string());
        kv("weight_decay", self.optimizer.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("log_every", self.log_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("probe_steps", self.probe.steps.to_string());
        kv("probe_lr", self.probe.lr.to_string());
        kv("probe_weight_decay", self.probe.weight_decay.to_string());
        kv("ablation_seeds", seeds.join(","));
        kv(
            "corpus_path",
            self.corpus_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("out_dir", self.out_dir.display().to_string());
        kv("corpus.classes", c.classes.to_string());
        kv("corpus.samples_per_class", c.samples_per_class.to_string());
        kv("corpus.height", c.height.to_string());
        kv("corpus.width", c.width.to_string());
        kv("corpus.channels", c.channels.to_string());
        kv("corpus.patch", c.patch.to_string());
        kv("corpus.vocab_size", c.vocab_size.to_string());
        kv("corpus.n_max", c.n_max.to_string());
        kv("corpus.content_min", c.content_min.to_string());
        kv("corpus.content_max", c.content_max.to_string());
        kv("corpus.pixel_noise", c.pixel_noise.to_string());
        kv("corpus.token_corruption", c.token_corruption.to_string());
        kv("corpus.weak_modality_rate", c.weak_modality_rate.to_string());
        kv("corpus.seed", c.seed.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        let c = RunConfig::desk();
        c.validate().unwrap();
        assert_eq!((c.loss.tau, c.loss.lambda), (0.1, 0.5));
        assert_eq!((c.model.heads, c.model.depth), (4, 2));
        assert_eq!(c.schedule.warmup_fraction, 0.1);
    }

    #[test]
    fn paper_preset_values() {
        let c = RunConfig::paper();
        c.validate().unwrap();
        assert_eq!((c.model.d_f, c.batch_size, c.schedule.base_lr), (768, 64, 2e-5));
        assert_eq!(c.corpus.n_max, 197);
        assert_eq!(c.corpus.encoder_config(768).seq_len(), 197);
    }

    #[test]
    fn text_round_trip() {
        for base in [RunConfig::desk(), RunConfig::paper()] {
            let mut c = base.clone();
            c.loss.tau = 0.07;
            c.ablation_seeds = vec![4, 5];
            c.corpus_path = Some("x/y.xclc".into());
            let back = RunConfig::from_text(Preset::Desk, &c.to_text()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::from_text(Preset::Desk, "# comment\n\nsteps = 20\nuse_inter=false\ncorpus.pixel_noise = 0.5\n").unwrap();
        assert_eq!(c.schedule.total_steps, 20);
        assert!(!c.model.use_inter);
        assert_eq!(c.corpus.pixel_noise, 0.5);
    }

    #[test]
    fn errors_are_config_errors() {
        for text in ["nonsense", "steps = -3", "bogus = 1", "tau = 0", "heads = 3", "warmup_fraction = 1"] {
            let e = RunConfig::from_text(Preset::Desk, text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e:?}");
            assert_eq!(e.exit_code(), 1);
        }
    }
}
