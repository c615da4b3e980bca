//! Inter-modality cross-attention and intra-modality gated self-attention
//! blocks, and their stacked composition.
//!
//! One stacked block runs, for features `V` (vision) and `L` (language):
//!
//! ```text
//! V_att  = LN(CrossAttn(q = V, kv = L) + V)      L_att  = LN(CrossAttn(q = L, kv = V) + L)
//! V'     = LN(FF(V_att) + V_att)                 L'     = LN(FF(L_att) + L_att)
//! V_hat  = FC(V' ⊙ V + V)                        L_hat  = FC(L' ⊙ L + L)
//! V_sa   = LN(SelfAttn(V_hat) + V_hat)           L_sa   = LN(SelfAttn(L_hat) + L_hat)
//! V_out  = LN(FF(V_sa) + V_sa)                   L_out  = LN(FF(L_sa) + L_sa)
//! ```
//!
//! Padded text positions are masked whenever text rows act as keys.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, FeedForward, KeyMask, LayerNorm, Linear, MultiHeadAttention, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackConfig {
    pub d_f: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub depth: usize,
    pub use_inter: bool,
    pub use_intra: bool,
}

/// Attention sub-layer followed by a feed-forward sub-layer, each wrapped
/// in a residual connection and layer norm.
#[derive(Debug, Clone)]
pub struct AttentionUnit {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ff: FeedForward,
    pub ln_ff: LayerNorm,
}

impl AttentionUnit {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &StackConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_f, cfg.heads, rng)?,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), cfg.d_f),
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.d_f, cfg.d_ff, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), cfg.d_f),
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        queries: Var<'t>,
        keys: Var<'t>,
        key_mask: Option<&KeyMask>,
    ) -> Result<Var<'t>> {
        let attended = self.attn.forward(p, queries, keys, key_mask)?;
        let att = self.ln_attn.forward(p, attended.add(queries)?)?;
        self.ln_ff.forward(p, self.ff.forward(p, att)?.add(att)?)
    }
}

/// Cross-attention in both directions.
#[derive(Debug, Clone)]
pub struct InterMca {
    /// Vision queries over language keys/values.
    pub vision: AttentionUnit,
    /// Language queries over vision keys/values.
    pub language: AttentionUnit,
}

impl InterMca {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &StackConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            vision: AttentionUnit::new(store, &format!("{name}.v"), cfg, rng)?,
            language: AttentionUnit::new(store, &format!("{name}.l"), cfg, rng)?,
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        v: Var<'t>,
        l: Var<'t>,
        text_mask: Option<&KeyMask>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (vs, ls) = (v.shape(), l.shape());
        if vs.last() != ls.last() {
            return Err(Error::shape("inter_mca", &vs, &ls));
        }
        let v_next = self.vision.forward(p, v, l, text_mask)?;
        let l_next = self.language.forward(p, l, v, None)?;
        Ok((v_next, l_next))
    }
}

/// Hadamard gating of the cross-attended features against the block input,
/// fused by a linear layer, then a self-attention unit.
#[derive(Debug, Clone)]
pub struct IntraBranch {
    pub fuse: Linear,
    pub unit: AttentionUnit,
}

impl IntraBranch {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &StackConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fuse: Linear::new(store, &format!("{name}.fuse"), cfg.d_f, cfg.d_f, rng),
            unit: AttentionUnit::new(store, &format!("{name}.self"), cfg, rng)?,
        })
    }

    /// `FC(next ⊙ prev + prev)`.
    pub fn fuse<'t>(&self, p: &Bound<'t>, prev: Var<'t>, next: Var<'t>) -> Result<Var<'t>> {
        if prev.shape() != next.shape() {
            return Err(Error::shape("intra_msa", &prev.shape(), &next.shape()));
        }
        self.fuse.forward(p, next.mul(prev)?.add(prev)?)
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        prev: Var<'t>,
        next: Var<'t>,
        mask: Option<&KeyMask>,
    ) -> Result<Var<'t>> {
        let fused = self.fuse(p, prev, next)?;
        self.unit.forward(p, fused, fused, mask)
    }
}

#[derive(Debug, Clone)]
pub struct IntraMsa {
    pub vision: IntraBranch,
    pub language: IntraBranch,
}

impl IntraMsa {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &StackConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            vision: IntraBranch::new(store, &format!("{name}.v"), cfg, rng)?,
            language: IntraBranch::new(store, &format!("{name}.l"), cfg, rng)?,
        })
    }
}

/// One stacked block; a disabled module is an identity pass-through.
#[derive(Debug, Clone)]
pub struct CrossModalBlock {
    pub inter: Option<InterMca>,
    pub intra: Option<IntraMsa>,
}

impl CrossModalBlock {
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        v: Var<'t>,
        l: Var<'t>,
        text_mask: Option<&KeyMask>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (v_next, l_next) = match &self.inter {
            Some(inter) => inter.forward(p, v, l, text_mask)?,
            None => (v, l),
        };
        match &self.intra {
            Some(intra) => Ok((
                intra.vision.forward(p, v, v_next, None)?,
                intra.language.forward(p, l, l_next, text_mask)?,
            )),
            None => Ok((v_next, l_next)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossModalStack {
    pub blocks: Vec<CrossModalBlock>,
}

impl CrossModalStack {
    /// Blocks do not share parameters.
    pub fn new(store: &mut ParamStore, name: &str, cfg: &StackConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config("stack depth must be at least 1".into()));
        }
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let inter = if cfg.use_inter {
                Some(InterMca::new(store, &format!("{name}.{i}.inter"), cfg, rng)?)
            } else {
                None
            };
            let intra = if cfg.use_intra {
                Some(IntraMsa::new(store, &format!("{name}.{i}.intra"), cfg, rng)?)
            } else {
                None
            };
            blocks.push(CrossModalBlock { inter, intra });
        }
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        mut v: Var<'t>,
        mut l: Var<'t>,
        text_mask: Option<&KeyMask>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        for block in &self.blocks {
            (v, l) = block.forward(p, v, l, text_mask)?;
        }
        Ok((v, l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> StackConfig {
        StackConfig {
            d_f: 8,
            heads: 4,
            d_ff: 16,
            depth: 2,
            use_inter: true,
            use_intra: true,
        }
    }

    fn features(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn inter_preserves_shapes() {
        let mut store = ParamStore::new();
        let inter = InterMca::new(&mut store, "x", &cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.constant(features(1, &[5, 8]));
        let l = tape.constant(features(2, &[5, 8]));
        let (vn, ln) = inter.forward(&p, v, l, None).unwrap();
        assert_eq!(vn.shape(), vec![5, 8]);
        assert_eq!(ln.shape(), vec![5, 8]);
    }

    #[test]
    fn inter_rejects_width_mismatch() {
        let mut store = ParamStore::new();
        let inter = InterMca::new(&mut store, "x", &cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.constant(features(1, &[5, 8]));
        let l = tape.constant(features(2, &[5, 6]));
        assert!(matches!(inter.forward(&p, v, l, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_branches_reduce_to_double_layer_norm() {
        let mut store = ParamStore::new();
        let inter = InterMca::new(&mut store, "x", &cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for unit in [&inter.vision, &inter.language] {
            for lin in [unit.attn.value, unit.attn.output, unit.ff.up, unit.ff.down] {
                let shape = store.get(lin.weight).shape().to_vec();
                *store.get_mut(lin.weight) = Tensor::zeros(&shape);
            }
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.constant(features(1, &[5, 8]));
        let l = tape.constant(features(2, &[5, 8]));
        let (vn, _) = inter.forward(&p, v, l, None).unwrap();
        let ln = &inter.vision.ln_attn;
        let twice = ln.forward(&p, ln.forward(&p, v).unwrap()).unwrap();
        assert!(vn.value().max_abs_diff(&twice.value()) < 1e-12);
    }

    #[test]
    fn fusion_with_ones_and_zeros() {
        let mut store = ParamStore::new();
        let branch = IntraBranch::new(&mut store, "b", &cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *store.get_mut(branch.fuse.weight) = Tensor::eye(8);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let prev = tape.constant(features(3, &[5, 8]));
        let ones = tape.constant(Tensor::ones(&[5, 8]));
        let zeros = tape.constant(Tensor::zeros(&[5, 8]));
        let doubled = prev.value().data().iter().map(|x| 2.0 * x).collect::<Vec<_>>();
        assert_eq!(branch.fuse(&p, prev, ones).unwrap().value().data(), &doubled[..]);
        assert_eq!(branch.fuse(&p, prev, zeros).unwrap().value(), prev.value());
    }

    #[test]
    fn stack_rejects_zero_depth() {
        let mut store = ParamStore::new();
        let c = StackConfig { depth: 0, ..cfg() };
        assert!(CrossModalStack::new(&mut store, "s", &c, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn disabled_modules_pass_through() {
        let mut store = ParamStore::new();
        let c = StackConfig {
            use_inter: false,
            use_intra: false,
            ..cfg()
        };
        let stack = CrossModalStack::new(&mut store, "s", &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.is_empty());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.constant(features(1, &[5, 8]));
        let l = tape.constant(features(2, &[5, 8]));
        let (vo, lo) = stack.forward(&p, v, l, None).unwrap();
        assert_eq!(vo.value(), v.value());
        assert_eq!(lo.value(), l.value());
    }
}
