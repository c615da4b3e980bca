//! Parameterized blocks shared by the encoders and the cross-modal stack.
//!
//! Parameter values live in a [`ParamStore`]; blocks only hold [`ParamId`]s.
//! A forward pass binds the store onto a tape ([`ParamStore::bind`]) and the
//! blocks read their leaves from the resulting [`Bound`] set.

use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (inference, frozen features).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    /// Replaces all values, checking names' count and shapes.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, (old, new)) in self.values.iter().zip(&values).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Data(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// Parameters registered on one tape, indexable by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps leaves created elsewhere; must follow store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Identity => x,
        }
    }
}

fn last_dim(x: &Var<'_>) -> usize {
    *x.shape().last().unwrap_or(&1)
}

/// `x · W + b` with `W: d_in × d_out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), xavier_uniform(rng, d_in, d_out)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if last_dim(&x) != self.d_in {
            return Err(Error::shape("linear", &x.shape(), &[self.d_in, self.d_out]));
        }
        x.matmul(p[self.weight])?.add(p[self.bias])
    }
}

/// Per-row normalization over the last axis followed by `γ ⊙ · + β`.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub dim: usize,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: Self::DEFAULT_EPS,
            dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.dim) || self.dim < 2 {
            return Err(Error::shape("layer_norm", &shape, &[self.dim]));
        }
        let axis = shape.len() - 1;
        let centered = x.sub(x.mean_axis(axis)?)?;
        let var = centered.mul(centered)?.mean_axis(axis)?;
        let normed = centered.div(var.add_scalar(self.eps).sqrt()?)?;
        normed.mul(p[self.gamma])?.add(p[self.beta])
    }
}

/// Position-wise `linear → GELU → linear`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), d_hidden, d_model, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.down.forward(p, self.up.forward(p, x)?.gelu())
    }
}

/// Valid-key flags for attention, one row per batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMask {
    valid: Vec<bool>,
    batch: usize,
    len: usize,
}

impl KeyMask {
    pub fn new(rows: &[Vec<bool>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != len) {
            return Err(Error::Contract("key mask rows must be non-empty and equal length".into()));
        }
        Ok(Self {
            valid: rows.concat(),
            batch: rows.len(),
            len,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.valid[b * self.len..(b + 1) * self.len]
    }

    /// Additive logit bias (`0` or `-inf`) broadcastable over query rows.
    fn additive<'t>(&self, tape: &'t Tape, rank: usize) -> Result<Var<'t>> {
        for b in 0..self.batch {
            if !self.row(b).iter().any(|&v| v) {
                return Err(Error::Contract(format!("every key is masked for batch element {b}")));
            }
        }
        let data = self
            .valid
            .iter()
            .map(|&v| if v { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let shape = if rank == 3 {
            vec![self.batch, 1, self.len]
        } else {
            if self.batch != 1 {
                return Err(Error::Contract("unbatched attention with a batched mask".into()));
            }
            vec![1, self.len]
        };
        Ok(tape.constant(Tensor::new(shape, data)?))
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/O projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_k: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "feature width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
            d_k: d_model / heads,
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        q_src: Var<'t>,
        kv_src: Var<'t>,
        mask: Option<&KeyMask>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(p, q_src, kv_src, mask)?.0)
    }

    /// Also returns the per-head attention weight matrices `[.., m, n]`.
    pub fn forward_with_weights<'t>(
        &self,
        p: &Bound<'t>,
        q_src: Var<'t>,
        kv_src: Var<'t>,
        mask: Option<&KeyMask>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let (qs, ks) = (q_src.shape(), kv_src.shape());
        let rank = qs.len();
        let d_model = self.heads * self.d_k;
        let batch_ok = rank == ks.len() && (rank == 2 || (rank == 3 && qs[0] == ks[0]));
        if !batch_ok || qs[rank - 1] != d_model || ks[rank - 1] != d_model {
            return Err(Error::shape("multi_head_attention", &qs, &ks));
        }
        let bias = match mask {
            Some(m) => {
                if m.len() != ks[rank - 2] || (rank == 3 && m.batch() != ks[0]) {
                    return Err(Error::shape("attention mask", &[m.batch(), m.len()], &ks));
                }
                Some(m.additive(q_src.tape(), rank)?)
            }
            None => None,
        };
        let q = self.query.forward(p, q_src)?;
        let k = self.key.forward(p, kv_src)?;
        let v = self.value.forward(p, kv_src)?;
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * self.d_k, (h + 1) * self.d_k);
            let qh = q.slice_last(lo, hi)?;
            let kh = k.slice_last(lo, hi)?;
            let vh = v.slice_last(lo, hi)?;
            let mut logits = qh.matmul(kh.transpose_last()?)?.scale(scale);
            if let Some(b) = bias {
                logits = logits.add(b)?;
            }
            let w = logits.softmax_last();
            outs.push(w.matmul(vh)?);
            weights.push(w);
        }
        let merged = crate::autodiff::concat(&outs, rank - 1)?;
        Ok((self.output.forward(p, merged)?, weights))
    }
}

/// One-hidden-layer projection MLP.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub out: Linear,
    pub activation: Activation,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        if d_hidden < 1 || d_out < 2 {
            return Err(Error::Config(format!(
                "projection head needs hidden >= 1 and output >= 2, got {d_hidden}/{d_out}"
            )));
        }
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), d_hidden, d_out, rng),
            activation: Activation::Gelu,
        })
    }

    pub fn project<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.activation.apply(self.hidden.forward(p, x)?);
        self.out.forward(p, h)
    }

    /// Projects and L2-normalizes over the last axis.
    pub fn project_and_normalize<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        l2_normalize(self.project(p, x)?)
    }
}

/// Scales every last-axis row to unit Euclidean norm.
pub fn l2_normalize(x: Var<'_>) -> Result<Var<'_>> {
    let axis = x.shape().len() - 1;
    let sq = x.mul(x)?.sum_axis(axis)?;
    if let Some(pos) = sq.value().data().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Numeric(format!("degenerate embedding: row {pos} has zero norm")));
    }
    x.div(sq.sqrt()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 3, &mut rng());
        *store.get_mut(lin.weight) = Tensor::eye(3);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        assert_eq!(lin.forward(&p, x).unwrap().value(), x.value());

        *store.get_mut(lin.weight) = Tensor::zeros(&[3, 3]);
        *store.get_mut(lin.bias) = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        assert_eq!(lin.forward(&p, x).unwrap().value().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn linear_hand_case() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng());
        *store.get_mut(lin.weight) = Tensor::new(vec![3, 2], vec![1.0, 2.0, 0.0, -1.0, 3.0, 0.5]).unwrap();
        *store.get_mut(lin.bias) = Tensor::new(vec![2], vec![0.25, -0.75]).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 2.0]).unwrap());
        // row0: [1+0+9, 2-2+1.5] + b ; row1: [-1+0+6, -2+0+1] + b
        let y = lin.forward(&p, x).unwrap().value();
        assert_eq!(y.data(), &[10.25, 0.75, 5.25, -1.75]);
        let bad = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(lin.forward(&p, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn layer_norm_cases() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 3);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let flat = tape.constant(Tensor::full(&[1, 3], 5.0));
        assert_eq!(ln.forward(&p, flat).unwrap().value().data(), &[0.0; 3]);
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = ln.forward(&p, x).unwrap().value();
        // var = 2/3, (x - 2)/sqrt(2/3 + 1e-5)
        let expect = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12 && y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - 1.2247).abs() < 1e-3);

        *store.get_mut(ln.gamma) = Tensor::zeros(&[3]);
        *store.get_mut(ln.beta) = Tensor::full(&[3], 7.0);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::new(vec![1, 3], vec![-4.0, 2.0, 9.0]).unwrap());
        assert_eq!(ln.forward(&p, x).unwrap().value().data(), &[7.0; 3]);
    }

    #[test]
    fn feed_forward_zero_weights_gives_bias() {
        let mut store = ParamStore::new();
        let ff = FeedForward::new(&mut store, "ff", 4, 8, &mut rng());
        *store.get_mut(ff.up.weight) = Tensor::zeros(&[4, 8]);
        *store.get_mut(ff.down.weight) = Tensor::zeros(&[8, 4]);
        *store.get_mut(ff.down.bias) = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::full(&[3, 4], 0.7));
        let y = ff.forward(&p, x).unwrap().value();
        assert_eq!(y.shape(), &[3, 4]);
        for row in y.data().chunks(4) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    fn identity_attention(store: &mut ParamStore, d: usize, heads: usize) -> MultiHeadAttention {
        let mha = MultiHeadAttention::new(store, "a", d, heads, &mut rng()).unwrap();
        for lin in [mha.query, mha.key, mha.value, mha.output] {
            *store.get_mut(lin.weight) = Tensor::eye(d);
        }
        mha
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut store = ParamStore::new();
        let mha = identity_attention(&mut store, 4, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let q = tape.constant(Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.1, 5.0, 5.0, -5.0, 1.0]).unwrap());
        let kv = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = mha.forward(&p, q, kv, None).unwrap().value();
        for row in y.data().chunks(4) {
            for (a, b) in row.iter().zip([1.0, 2.0, 3.0, 4.0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 2, 1, &mut rng()).unwrap();
        for lin in [mha.query, mha.value, mha.output] {
            *store.get_mut(lin.weight) = Tensor::eye(2);
        }
        // Key projection ignores the input, so both keys coincide.
        *store.get_mut(mha.key.weight) = Tensor::zeros(&[2, 2]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let q = tape.constant(Tensor::new(vec![1, 2], vec![0.4, -0.9]).unwrap());
        let kv = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, -1.0]).unwrap());
        let y = mha.forward(&p, q, kv, None).unwrap().value();
        assert!((y.data()[0] - 3.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_fully_masked_is_contract_error() {
        let mut store = ParamStore::new();
        let mha = identity_attention(&mut store, 4, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let q = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let mask = KeyMask::new(&[vec![false, false]]).unwrap();
        assert!(matches!(mha.forward(&p, q, q, Some(&mask)), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng()).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let q = tape.constant(Tensor::new(vec![1, 3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let mask = KeyMask::new(&[vec![true, false, true]]).unwrap();
        let (_, weights) = mha.forward_with_weights(&p, q, q, Some(&mask)).unwrap();
        for w in weights {
            for row in w.value().data().chunks(3) {
                assert_eq!(row[1], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_output_has_unit_norm() {
        let mut store = ParamStore::new();
        let head = ProjectionHead::new(&mut store, "h", 6, 6, 3, &mut rng()).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::new(vec![2, 6], (0..12).map(|i| i as f64 - 5.5).collect()).unwrap());
        let y = head.project_and_normalize(&p, x).unwrap().value();
        for row in y.data().chunks(3) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_is_degenerate() {
        let mut store = ParamStore::new();
        let head = ProjectionHead::new(&mut store, "h", 2, 2, 2, &mut rng()).unwrap();
        *store.get_mut(head.out.weight) = Tensor::zeros(&[2, 2]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::ones(&[1, 2]));
        assert!(matches!(head.project_and_normalize(&p, x), Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_bad_head_dims() {
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng()).is_err());
        assert!(ProjectionHead::new(&mut store, "h", 4, 4, 1, &mut rng()).is_err());
    }
}
