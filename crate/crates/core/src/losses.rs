//! Supervised contrastive objectives over paired vision/language embeddings.
//!
//! For anchors `a_i`, candidates `b_k`, labels `y` and temperature `τ`, one
//! contrastive term is
//!
//! ```text
//! Σ_i −1/|P(i)| Σ_{j ∈ P(i)} log( exp(a_i·b_j/τ) / Σ_{k ≠ i} exp(a_i·b_k/τ) )
//! ```
//!
//! with `P(i) = { j ≠ i : y_j = y_i }`. Anchors with an empty positive set
//! contribute zero. The cross-modal objective combines two intra-modality
//! terms (`a = b`) and two inter-modality terms (`a`, `b` from different
//! modalities), the latter weighted by `λ`. Sums run over the batch with no
//! `1/N` factor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    /// Count the paired sample of the other modality as a positive (and keep
    /// it in the denominator) in the inter-modality terms.
    pub include_own_pair: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.5,
            include_own_pair: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Per-term values of one cross-modal loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub vision_vision: f64,
    pub language_vision: f64,
    pub language_language: f64,
    pub vision_language: f64,
}

impl LossReport {
    pub fn per_anchor_mean(&self, batch_size: usize) -> f64 {
        self.total / batch_size as f64
    }
}

/// Unit-norm paired embeddings with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingBatch {
    pub vision: Tensor,
    pub language: Tensor,
    pub labels: Vec<usize>,
    pub config: LossConfig,
}

impl LabeledEmbeddingBatch {
    pub const NORM_TOLERANCE: f64 = 1e-9;

    pub fn new(vision: Tensor, language: Tensor, labels: Vec<usize>, config: LossConfig) -> Result<Self> {
        config.validate()?;
        if vision.rank() != 2 || vision.shape() != language.shape() {
            return Err(Error::shape("embedding batch", vision.shape(), language.shape()));
        }
        let (n, d) = (vision.shape()[0], vision.shape()[1]);
        if n < 2 || labels.len() != n {
            return Err(Error::Data(format!(
                "need at least 2 pairs with one label each, got {n} pairs and {} labels",
                labels.len()
            )));
        }
        for (name, t) in [("vision", &vision), ("language", &language)] {
            for (i, row) in t.data().chunks(d).enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > Self::NORM_TOLERANCE {
                    return Err(Error::Data(format!("{name} embedding {i} has norm {norm}")));
                }
            }
        }
        Ok(Self {
            vision,
            language,
            labels,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Positive-weight matrix: `W[i][j] = 1/|P(i)|` for `j ∈ P(i)`.
fn positive_weights(labels: &[usize], include_self: bool) -> Tensor {
    let n = labels.len();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&j| labels[j] == labels[i] && (include_self || j != i))
            .collect();
        for &j in &pos {
            w[i * n + j] = 1.0 / pos.len() as f64;
        }
    }
    Tensor::new(vec![n, n], w).expect("n x n")
}

fn diagonal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        m.data_mut()[i * n + i] = f64::NEG_INFINITY;
    }
    m
}

fn contrastive_term<'t>(
    anchors: Var<'t>,
    others: Var<'t>,
    labels: &[usize],
    tau: f64,
    include_self: bool,
) -> Result<Var<'t>> {
    check_tau(tau)?;
    let (sa, sb) = (anchors.shape(), others.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("contrastive term", &sa, &sb));
    }
    let n = sa[0];
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} embeddings", labels.len())));
    }
    let tape = anchors.tape();
    let logits = anchors.matmul(others.transpose_last()?)?.scale(1.0 / tau);
    let denom_logits = if include_self {
        logits
    } else {
        logits.add(tape.constant(diagonal_mask(n)))?
    };
    let log_prob = logits.sub(denom_logits.logsumexp_last())?;
    let weights = tape.constant(positive_weights(labels, include_self));
    Ok(weights.mul(log_prob)?.sum().neg())
}

/// Same-modality term (e.g. vision anchors against vision candidates).
pub fn intra_term<'t>(anchors: Var<'t>, labels: &[usize], tau: f64) -> Result<Var<'t>> {
    contrastive_term(anchors, anchors, labels, tau, false)
}

/// Cross-modality term: `anchors` from one modality, `others` from the other.
pub fn inter_term<'t>(
    anchors: Var<'t>,
    others: Var<'t>,
    labels: &[usize],
    tau: f64,
    include_own_pair: bool,
) -> Result<Var<'t>> {
    contrastive_term(anchors, others, labels, tau, include_own_pair)
}

/// Single-modality supervised contrastive baseline; identical to [`intra_term`].
pub fn scl<'t>(anchors: Var<'t>, labels: &[usize], tau: f64) -> Result<Var<'t>> {
    intra_term(anchors, labels, tau)
}

/// The four recorded terms and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct CrossClTerms<'t> {
    pub total: Var<'t>,
    pub vision_vision: Var<'t>,
    pub language_vision: Var<'t>,
    pub language_language: Var<'t>,
    pub vision_language: Var<'t>,
}

impl CrossClTerms<'_> {
    pub fn report(&self) -> LossReport {
        LossReport {
            total: self.total.item(),
            vision_vision: self.vision_vision.item(),
            language_vision: self.language_vision.item(),
            language_language: self.language_language.item(),
            vision_language: self.vision_language.item(),
        }
    }
}

/// `L_VV + λ L_LV + L_LL + λ L_VL`, summed as `(L_VV + L_LL) + λ (L_LV + L_VL)`
/// so that exchanging the modalities is bit-exact.
pub fn cross_cl_terms<'t>(
    vision: Var<'t>,
    language: Var<'t>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<CrossClTerms<'t>> {
    cfg.validate()?;
    let vision_vision = intra_term(vision, labels, cfg.tau)?;
    let language_vision = inter_term(vision, language, labels, cfg.tau, cfg.include_own_pair)?;
    let language_language = intra_term(language, labels, cfg.tau)?;
    let vision_language = inter_term(language, vision, labels, cfg.tau, cfg.include_own_pair)?;
    let total = vision_vision
        .add(language_language)?
        .add(language_vision.add(vision_language)?.scale(cfg.lambda))?;
    Ok(CrossClTerms {
        total,
        vision_vision,
        language_vision,
        language_language,
        vision_language,
    })
}

/// Evaluates the cross-modal loss on a validated batch.
pub fn cross_cl(batch: &LabeledEmbeddingBatch) -> Result<LossReport> {
    let tape = Tape::new();
    let x = tape.constant(batch.vision.clone());
    let t = tape.constant(batch.language.clone());
    Ok(cross_cl_terms(x, t, &batch.labels, &batch.config)?.report())
}

/// Mean negative log-softmax of the true class over `[N, K]` logits.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len(), 2]));
    }
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} rows of logits", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let mut onehot = Tensor::zeros(&[n, k]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * k + y] = 1.0;
    }
    let picked = logits.tape().constant(onehot).mul(logits)?.sum();
    Ok(logits.logsumexp_last().sum().sub(picked)?.scale(1.0 / n as f64))
}
