//! Independent scalar oracles and invariant probes shared by the integration
//! tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use xmodal_core::losses::{cross_cl, cross_cl_terms, LabeledEmbeddingBatch, LossConfig, LossReport};
use xmodal_core::nn::{l2_normalize, KeyMask, MultiHeadAttention, ParamStore};
use xmodal_core::{Tape, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize_rows(rows: &Rows) -> Rows {
    rows.iter()
        .map(|r| {
            let n = dot(r, r).sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

pub fn to_tensor(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn gaussian_rows(rng: &mut impl Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// One contrastive term written as the plain double loop over anchors and
/// candidates, with no log-sum-exp tricks.
pub fn oracle_term(anchors: &Rows, others: &Rows, labels: &[usize], tau: f64, keep_own: bool) -> f64 {
    let n = anchors.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            if k != i || keep_own {
                denom += (dot(&anchors[i], &others[k]) / tau).exp();
            }
        }
        let positives: Vec<usize> = (0..n)
            .filter(|&j| labels[j] == labels[i] && (j != i || keep_own))
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &j in &positives {
            acc += ((dot(&anchors[i], &others[j]) / tau).exp() / denom).ln();
        }
        total += -acc / positives.len() as f64;
    }
    total
}

/// `[total, vision_vision, language_vision, language_language, vision_language]`.
pub fn oracle_cross_cl(vision: &Rows, language: &Rows, labels: &[usize], cfg: &LossConfig) -> [f64; 5] {
    let vv = oracle_term(vision, vision, labels, cfg.tau, false);
    let lv = oracle_term(vision, language, labels, cfg.tau, cfg.include_own_pair);
    let ll = oracle_term(language, language, labels, cfg.tau, false);
    let vl = oracle_term(language, vision, labels, cfg.tau, cfg.include_own_pair);
    [vv + lv * cfg.lambda + ll + vl * cfg.lambda, vv, lv, ll, vl]
}

pub fn terms(r: &LossReport) -> [f64; 5] {
    [r.total, r.vision_vision, r.language_vision, r.language_language, r.vision_language]
}

pub fn vectorized(vision: &Rows, language: &Rows, labels: &[usize], cfg: LossConfig) -> LossReport {
    let batch = LabeledEmbeddingBatch::new(to_tensor(vision), to_tensor(language), labels.to_vec(), cfg).unwrap();
    cross_cl(&batch).unwrap()
}

pub fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A random batch: `n` unit pairs with labels drawn from `k` classes.
#[derive(Debug, Clone)]
pub struct RandomBatch {
    pub vision: Rows,
    pub language: Rows,
    pub labels: Vec<usize>,
    pub config: LossConfig,
}

pub fn random_batch(rng: &mut impl Rng, max_n: usize, max_k: usize) -> RandomBatch {
    let n = rng.random_range(2..=max_n);
    let k = rng.random_range(1..=max_k);
    let d = rng.random_range(2..=6);
    RandomBatch {
        vision: normalize_rows(&gaussian_rows(rng, n, d)),
        language: normalize_rows(&gaussian_rows(rng, n, d)),
        labels: (0..n).map(|_| rng.random_range(0..k)).collect(),
        config: LossConfig {
            tau: rng.random_range(0.05..1.0),
            lambda: rng.random_range(0.0..2.0),
            include_own_pair: rng.random_bool(0.5),
        },
    }
}

/// Largest oracle disagreement over `count` random batches.
pub fn oracle_sweep(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let b = random_batch(&mut rng, 8, 4);
        let got = terms(&vectorized(&b.vision, &b.language, &b.labels, b.config));
        let want = oracle_cross_cl(&b.vision, &b.language, &b.labels, &b.config);
        worst = worst.max(max_gap(&got, &want));
    }
    worst
}

/// Exchanging the modalities swaps the intra terms with each other and the
/// inter terms with each other, leaving the total unchanged.
pub fn swap_gap(b: &RandomBatch) -> f64 {
    let r = terms(&vectorized(&b.vision, &b.language, &b.labels, b.config));
    let s = terms(&vectorized(&b.language, &b.vision, &b.labels, b.config));
    max_gap(&[r[0], r[1], r[2], r[3], r[4]], &[s[0], s[3], s[4], s[1], s[2]])
}

pub fn permutation_gap(b: &RandomBatch, perm: &[usize]) -> f64 {
    let pick = |rows: &Rows| perm.iter().map(|&i| rows[i].clone()).collect::<Rows>();
    let labels: Vec<usize> = perm.iter().map(|&i| b.labels[i]).collect();
    let r = terms(&vectorized(&b.vision, &b.language, &b.labels, b.config));
    let p = terms(&vectorized(&pick(&b.vision), &pick(&b.language), &labels, b.config));
    max_gap(&r, &p)
}

fn loss_after_normalizing(vision: &Rows, language: &Rows, labels: &[usize], cfg: &LossConfig) -> [f64; 5] {
    let tape = Tape::new();
    let v = l2_normalize(tape.constant(to_tensor(vision))).unwrap();
    let l = l2_normalize(tape.constant(to_tensor(language))).unwrap();
    terms(&cross_cl_terms(v, l, labels, cfg).unwrap().report())
}

/// Scaling raw embeddings by positive per-row factors before normalization
/// leaves the loss unchanged.
pub fn scale_gap(raw_vision: &Rows, raw_language: &Rows, labels: &[usize], cfg: &LossConfig, scales: &[f64]) -> f64 {
    let scale = |rows: &Rows| {
        rows.iter()
            .zip(scales.iter().cycle())
            .map(|(r, s)| r.iter().map(|v| v * s).collect())
            .collect::<Rows>()
    };
    let base = loss_after_normalizing(raw_vision, raw_language, labels, cfg);
    let scaled = loss_after_normalizing(&scale(raw_vision), &scale(raw_language), labels, cfg);
    max_gap(&base, &scaled)
}

/// Worst deviation from row-stochastic attention weights, counting any
/// probability mass on masked keys or any negative weight as deviation.
pub fn attention_stochastic_gap(seed: u64, batch: usize, len: usize, heads: usize, masked_tail: usize) -> f64 {
    let d = 4 * heads;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", d, heads, &mut rng).unwrap();
    let x: Vec<f64> = (0..batch * len * d).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let valid: Vec<Vec<bool>> = (0..batch).map(|_| (0..len).map(|j| j + masked_tail < len).collect()).collect();
    let mask = KeyMask::new(&valid).unwrap();
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let xv = tape.constant(Tensor::new(vec![batch, len, d], x).unwrap());
    let (_, weights) = mha.forward_with_weights(&p, xv, xv, Some(&mask)).unwrap();
    let mut worst: f64 = 0.0;
    for w in weights {
        let w = w.value();
        for (r, row) in w.data().chunks(len).enumerate() {
            let b = r / len;
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            for (j, &v) in row.iter().enumerate() {
                if v < 0.0 {
                    worst = worst.max(-v);
                }
                if !valid[b][j] {
                    worst = worst.max(v.abs());
                }
            }
        }
    }
    worst
}

/// `softmax(x + c) - softmax(x)` over the last axis.
pub fn softmax_shift_gap(x: &Tensor, shift: f64) -> f64 {
    let tape = Tape::new();
    let a = tape.constant(x.clone()).softmax_last().value();
    let b = tape.constant(x.clone()).add_scalar(shift).softmax_last().value();
    a.max_abs_diff(&b)
}

/// Four identical unit embeddings of one class, shared by both modalities.
pub fn identical_one_class() -> LossReport {
    let row = normalize_rows(&vec![vec![0.3, -1.2, 0.5]])[0].clone();
    let rows = vec![row; 4];
    vectorized(&rows, &rows, &[2, 2, 2, 2], LossConfig::default())
}

/// Random unit embeddings with every label distinct.
pub fn all_distinct(seed: u64, n: usize) -> LossReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = normalize_rows(&gaussian_rows(&mut rng, n, 5));
    let l = normalize_rows(&gaussian_rows(&mut rng, n, 5));
    let labels: Vec<usize> = (0..n).collect();
    vectorized(&v, &l, &labels, LossConfig::default())
}
