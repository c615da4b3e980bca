//! Deterministic fixtures shared by the benchmarks.

use xmodal_core::train::load_corpus;
use xmodal_core::{Corpus, RunConfig, Tensor};

/// A smooth pseudo-random tensor; no RNG so every run sees the same values.
pub fn wave(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (0.37 * i as f64 + phase).sin()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Rows of `wave` scaled to unit length.
pub fn unit_rows(rows: usize, dim: usize, phase: f64) -> Tensor {
    let mut t = wave(&[rows, dim], phase);
    for row in t.data_mut().chunks_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Desk preset with its default corpus.
pub fn desk() -> (RunConfig, Corpus) {
    let cfg = RunConfig::desk();
    let corpus = load_corpus(&cfg).expect("desk corpus");
    (cfg, corpus)
}
