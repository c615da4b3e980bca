//! Contrastive pre-training loop, metrics log and frozen-feature linear probing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_corpus, make_batch, read_corpus, Corpus};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, LossReport};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probe_vision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probe_language: Option<f64>,
    /// Seconds since the run started.
    pub wall_time: f64,
}

impl MetricsRecord {
    /// The record with timing removed, for comparing runs.
    pub fn timeless(&self) -> Self {
        Self {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

/// Generates the configured synthetic corpus or reads it from `corpus_path`.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus_path {
        Some(path) => read_corpus(path),
        None => generate_corpus(&cfg.corpus),
    }
}

/// Fresh model for `cfg`, shaped for `corpus`, initialized from `cfg.seed`.
pub fn init_model(cfg: &RunConfig, corpus: &Corpus) -> Result<Model> {
    Model::new(cfg.model, corpus.spec.encoder_config(cfg.model.d_f), cfg.seed)
}

pub struct PretrainRun {
    pub model: Model,
    pub optimizer: AdamW,
    pub metrics: Vec<MetricsRecord>,
}

impl PretrainRun {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            step: self.optimizer.step,
            params: self.model.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

struct Outputs {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(File::create(dir.join(METRICS_FILE))?),
        })
    }

    fn log(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Data(format!("metrics: {e}")))?;
        writeln!(self.metrics, "{line}")?;
        self.metrics.flush()?;
        Ok(())
    }

    fn checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        ck.save(self.dir.join(CHECKPOINT_FILE))
    }
}

/// Optimizes the contrastive objective on class-balanced training batches.
///
/// With `out_dir`, writes the config echo, a line-delimited JSON metrics log
/// and `checkpoint.ckpt` (at the configured cadence and at the end). If a step
/// fails numerically the pre-step state is saved before the error is returned.
pub fn pretrain(cfg: &RunConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<PretrainRun> {
    cfg.validate()?;
    let start = Instant::now();
    let mut outputs = out_dir.map(|d| Outputs::create(d, cfg)).transpose()?;
    let mut run = PretrainRun {
        optimizer: AdamW::new(cfg.optimizer, &ParamStore::new()),
        model: init_model(cfg, corpus)?,
        metrics: Vec::new(),
    };
    run.optimizer = AdamW::new(cfg.optimizer, &run.model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let total = cfg.schedule.total_steps;
    for step in 0..total {
        let lr = cfg.schedule.lr_at(step)?;
        let report = match train_step(cfg, corpus, &mut run, &mut rng, lr) {
            Ok(r) => r,
            Err(e) => {
                if let Some(out) = &outputs {
                    out.checkpoint(&run.checkpoint(cfg))?;
                }
                return Err(e);
            }
        };
        let done = step + 1;
        if done % cfg.log_every == 0 || done == total {
            let rec = MetricsRecord {
                step: done,
                lr,
                loss: report,
                probe_vision: None,
                probe_language: None,
                wall_time: start.elapsed().as_secs_f64(),
            };
            if let Some(out) = &mut outputs {
                out.log(&rec)?;
            }
            run.metrics.push(rec);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
            if let Some(out) = &outputs {
                out.checkpoint(&run.checkpoint(cfg))?;
            }
        }
    }
    if let Some(out) = &outputs {
        out.checkpoint(&run.checkpoint(cfg))?;
    }
    Ok(run)
}

fn train_step(cfg: &RunConfig, corpus: &Corpus, run: &mut PretrainRun, rng: &mut ChaCha8Rng, lr: f64) -> Result<LossReport> {
    let batch = make_batch(&corpus.train, cfg.batch_size, rng)?;
    let tape = Tape::new();
    let p = run.model.params.bind(&tape);
    let terms = run.model.loss(&p, &tape, &batch, &cfg.loss)?;
    tape.backward(terms.total)?;
    let grads: Vec<Tensor> = p.vars().iter().map(|&v| tape.grad(v)).collect();
    let report = terms.report();
    drop(p);
    run.optimizer.step(&mut run.model.params, &grads, lr)?;
    Ok(report)
}

/// Test accuracy of the two uni-modal linear probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub vision: f64,
    pub language: f64,
}

/// Multinomial logistic regression on fixed features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `[d, K]` weights and `[K]` bias.
    pub params: ParamStore,
}

impl LinearProbe {
    /// Full-batch AdamW on standardized features, starting from zero weights.
    pub fn fit(features: &Tensor, labels: &[usize], classes: usize, cfg: &RunConfig) -> Result<Self> {
        let (n, d) = (features.shape()[0], features.shape()[1]);
        if labels.len() != n {
            return Err(Error::Data(format!("{n} feature rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} outside {classes} classes")));
        }
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for row in features.data().chunks(d) {
            row.iter().zip(&mut mean).for_each(|(x, m)| *m += x / n as f64);
        }
        for row in features.data().chunks(d) {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2) / n as f64;
            }
        }
        let inv_std = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
        let mut probe = Self {
            mean,
            inv_std,
            params: ParamStore::new(),
        };
        probe.params.add("probe.weight", Tensor::zeros(&[d, classes]));
        probe.params.add("probe.bias", Tensor::zeros(&[classes]));
        let x = probe.standardize(features)?;
        let schedule = Schedule {
            base_lr: cfg.probe.lr,
            total_steps: cfg.probe.steps,
            warmup_fraction: 0.0,
        };
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: cfg.probe.weight_decay,
                ..cfg.optimizer
            },
            &probe.params,
        );
        for step in 0..cfg.probe.steps {
            let tape = Tape::new();
            let p = probe.params.bind(&tape);
            let logits = tape.constant(x.clone()).matmul(p.vars()[0])?.add(p.vars()[1])?;
            let loss = cross_entropy(logits, labels)?;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = p.vars().iter().map(|&v| tape.grad(v)).collect();
            drop(p);
            opt.step(&mut probe.params, &grads, schedule.lr_at(step)?)?;
        }
        Ok(probe)
    }

    fn standardize(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if features.rank() != 2 || features.shape()[1] != d {
            return Err(Error::shape("linear_probe", features.shape(), &[0, d]));
        }
        let mut out = features.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) * self.inv_std[j];
            }
        }
        Ok(out)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let x = self.standardize(features)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let logits = tape.constant(x).matmul(p.vars()[0])?.add(p.vars()[1])?.value();
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
            .collect())
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Trains one linear classifier per modality on frozen pooled features of the
/// training split and reports test accuracy. `model` is only read.
pub fn probe(cfg: &RunConfig, model: &Model, corpus: &Corpus) -> Result<ProbeReport> {
    let classes = corpus.spec.classes;
    for r in corpus.train.iter().chain(&corpus.test) {
        if r.label >= classes {
            return Err(Error::Data(format!("label {} but the corpus declares {classes} classes", r.label)));
        }
    }
    let train_labels: Vec<usize> = corpus.train.iter().map(|r| r.label).collect();
    let test_labels: Vec<usize> = corpus.test.iter().map(|r| r.label).collect();
    let (train_v, train_l) = model.features(&corpus.train, 64)?;
    let (test_v, test_l) = model.features(&corpus.test, 64)?;
    let vision = LinearProbe::fit(&train_v, &train_labels, classes, cfg)?.accuracy(&test_v, &test_labels)?;
    let language = LinearProbe::fit(&train_l, &train_labels, classes, cfg)?.accuracy(&test_l, &test_labels)?;
    Ok(ProbeReport { vision, language })
}

/// Rebuilds the model saved in `ck` for `corpus`'s input shapes.
pub fn model_from_checkpoint(ck: &Checkpoint, corpus: &Corpus) -> Result<Model> {
    let mut model = init_model(&ck.config, corpus)?;
    ck.restore_into(&mut model.params)?;
    Ok(model)
}

/// Appends one record to a metrics log, creating the file if needed.
pub fn append_metrics(path: impl AsRef<Path>, rec: &MetricsRecord) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Data(format!("metrics: {e}")))?;
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{line}")?;
    Ok(())
}

/// Parses a metrics log; every non-empty line must be a record.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("metrics line {}: {e}", i + 1))))
        .collect()
}
