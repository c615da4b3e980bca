//! Finite-difference audit of every primitive op, block and loss at tiny sizes.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{check_gradients, concat, AdjointFault, Tape, Var};
use crate::cross_modal::{InterMca, IntraMsa, StackConfig};
use crate::data::CorpusRecord;
use crate::encoders::{DocumentImage, EncoderConfig, TokenSequence};
use crate::error::Result;
use crate::losses::{cross_cl_terms, cross_entropy, scl, LossConfig};
use crate::model::Model;
use crate::config::ModelConfig;
use crate::nn::{l2_normalize, Bound, FeedForward, KeyMask, LayerNorm, Linear, MultiHeadAttention, ParamStore, ProjectionHead};
use crate::tensor::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
    /// Why the check could not be evaluated, if it could not.
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub fault: Option<String>,
    pub entries: Vec<GradCheckEntry>,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(fault) = &self.fault {
            writeln!(f, "injected adjoint fault: {fault}")?;
        }
        for e in &self.entries {
            let status = if e.passed { "ok  " } else { "FAIL" };
            write!(f, "{status} {:<18} max rel error {:.3e} over {} coords", e.name, e.max_rel_error, e.coords_checked)?;
            if let Some(d) = &e.detail {
                write!(f, " ({d})")?;
            }
            writeln!(f)?;
        }
        write!(
            f,
            "{} of {} checks passed (tolerance {:e}) in {:.1}s",
            self.entries.iter().filter(|e| e.passed).count(),
            self.entries.len(),
            self.tolerance,
            self.seconds
        )
    }
}

/// Fixed non-uniform weights so that summing a block output still exercises
/// every coordinate's adjoint differently.
fn readout(out: Var<'_>) -> Result<Var<'_>> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    out.mul(out.tape().constant(Tensor::new(shape, w)?)).map(|v| v.sum())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("non-empty shape")
}

/// Moves every parameter off its initialization (zero biases, unit gains).
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
}

struct Audit {
    fault: Option<AdjointFault>,
    entries: Vec<GradCheckEntry>,
}

impl Audit {
    fn record(&mut self, name: &str, outcome: Result<crate::autodiff::GradCheckOutcome>) {
        let entry = match outcome {
            Ok(o) => GradCheckEntry {
                name: name.to_string(),
                max_rel_error: o.max_rel_error,
                coords_checked: o.coords_checked,
                passed: o.passed(GRADCHECK_TOLERANCE),
                detail: o.non_finite.map(|(i, j)| format!("non-finite at input {i}, coordinate {j}")),
            },
            Err(e) => GradCheckEntry {
                name: name.to_string(),
                max_rel_error: f64::INFINITY,
                coords_checked: 0,
                passed: false,
                detail: Some(e.to_string()),
            },
        };
        self.entries.push(entry);
    }

    fn op<F>(&mut self, name: &str, inputs: &[Tensor], f: F)
    where
        F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
    {
        let outcome = check_gradients(|_, v| readout(f(v)?), inputs, STEP, self.fault);
        self.record(name, outcome);
    }

    /// Checks gradients with respect to both `inputs` and every parameter in `store`.
    fn block<F>(&mut self, name: &str, store: &ParamStore, inputs: &[Tensor], f: F)
    where
        F: for<'t> Fn(&Bound<'t>, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let n_in = inputs.len();
        let mut all = inputs.to_vec();
        all.extend(store.values().iter().cloned());
        let outcome = check_gradients(
            |_, v| {
                let p = Bound::from_vars(v[n_in..].to_vec());
                readout(f(&p, &v[..n_in])?)
            },
            &all,
            STEP,
            self.fault,
        );
        self.record(name, outcome);
    }
}

/// Runs the full audit. `fault` corrupts one op's adjoint in the analytic pass.
pub fn gradcheck_report(seed: u64, fault: Option<AdjointFault>) -> GradCheckReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Audit {
        fault,
        entries: Vec::new(),
    };
    let r = &mut rng;

    let x23 = random(r, &[2, 3], -1.0, 1.0);
    let y23 = random(r, &[2, 3], -1.0, 1.0);
    let row3 = random(r, &[3], -1.0, 1.0);
    let pos23 = random(r, &[2, 3], 0.5, 2.0);
    a.op("add", &[x23.clone(), row3.clone()], |v| v[0].add(v[1]));
    a.op("sub", &[x23.clone(), y23.clone()], |v| v[0].sub(v[1]));
    a.op("mul", &[x23.clone(), row3.clone()], |v| v[0].mul(v[1]));
    a.op("div", &[x23.clone(), pos23.clone()], |v| v[0].div(v[1]));
    a.op("scale", std::slice::from_ref(&x23), |v| Ok(v[0].scale(-1.7).add_scalar(0.3)));
    a.op("exp", std::slice::from_ref(&x23), |v| Ok(v[0].exp()));
    a.op("log", std::slice::from_ref(&pos23), |v| v[0].log());
    a.op("sqrt", std::slice::from_ref(&pos23), |v| v[0].sqrt());
    a.op("gelu", &[random(r, &[2, 3], -3.0, 3.0)], |v| Ok(v[0].gelu()));
    a.op("matmul", &[random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)], |v| {
        v[0].matmul(v[1])
    });
    a.op("transpose", &[random(r, &[2, 3, 4], -1.0, 1.0)], |v| v[0].transpose_last());
    a.op("softmax", &[random(r, &[2, 4], -2.0, 2.0)], |v| Ok(v[0].softmax_last()));
    a.op("logsumexp", &[random(r, &[2, 4], -2.0, 2.0)], |v| Ok(v[0].logsumexp_last()));
    a.op("sum_axis", &[random(r, &[2, 3, 2], -1.0, 1.0)], |v| v[0].sum_axis(1));
    a.op("mean_axis", &[random(r, &[2, 3, 2], -1.0, 1.0)], |v| v[0].mean_axis(2));
    a.op("reshape", std::slice::from_ref(&x23), |v| v[0].reshape(&[3, 2]));
    a.op("expand", &[random(r, &[1, 3], -1.0, 1.0)], |v| v[0].expand(&[4, 3]));
    a.op("slice", &[random(r, &[3, 4], -1.0, 1.0)], |v| v[0].slice(1, 1, 3));
    a.op("concat", &[x23.clone(), random(r, &[2, 2], -1.0, 1.0)], |v| concat(&[v[0], v[1]], 1));
    a.op("gather", &[random(r, &[4, 3], -1.0, 1.0)], |v| v[0].gather_rows(&[2, 0, 2, 3]));

    let (b, m, n, d) = (2, 3, 4, 8);
    let cfg = StackConfig {
        d_f: d,
        heads: 4,
        d_ff: 12,
        depth: 1,
        use_inter: true,
        use_intra: true,
    };
    let mask = KeyMask::new(&[vec![true, true, true, false], vec![true, true, false, false]]).expect("valid mask");
    let vis = random(r, &[b, m, d], -1.0, 1.0);
    let txt = random(r, &[b, n, d], -1.0, 1.0);

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "linear", d, 5, r);
    jitter(&mut s, r);
    a.block("linear", &s, std::slice::from_ref(&vis), |p, v| lin.forward(p, v[0]));

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", d);
    jitter(&mut s, r);
    a.block("layer_norm", &s, std::slice::from_ref(&vis), |p, v| ln.forward(p, v[0]));

    let mut s = ParamStore::new();
    let ff = FeedForward::new(&mut s, "ff", d, 12, r);
    jitter(&mut s, r);
    a.block("feed_forward", &s, std::slice::from_ref(&vis), |p, v| ff.forward(p, v[0]));

    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "attn", d, 4, r).expect("heads divide width");
    jitter(&mut s, r);
    a.block("attention", &s, &[vis.clone(), txt.clone()], |p, v| mha.forward(p, v[0], v[1], Some(&mask)));

    let mut s = ParamStore::new();
    let inter = InterMca::new(&mut s, "inter", &cfg, r).expect("valid config");
    jitter(&mut s, r);
    a.block("inter_mca", &s, &[vis.clone(), txt.clone()], |p, v| {
        let (vn, ln) = inter.forward(p, v[0], v[1], Some(&mask))?;
        concat(&[vn, ln], 1)
    });

    let mut s = ParamStore::new();
    let intra = IntraMsa::new(&mut s, "intra", &cfg, r).expect("valid config");
    jitter(&mut s, r);
    let vis_next = random(r, &[b, m, d], -1.0, 1.0);
    let txt_next = random(r, &[b, n, d], -1.0, 1.0);
    a.block("intra_msa", &s, &[vis.clone(), vis_next, txt.clone(), txt_next], |p, v| {
        let vo = intra.vision.forward(p, v[0], v[1], None)?;
        let lo = intra.language.forward(p, v[2], v[3], Some(&mask))?;
        concat(&[vo, lo], 1)
    });

    let mut s = ParamStore::new();
    let head = ProjectionHead::new(&mut s, "head", d, 6, 4, r).expect("valid dims");
    jitter(&mut s, r);
    a.block("projection_head", &s, &[random(r, &[5, d], -1.0, 1.0)], |p, v| {
        head.project_and_normalize(p, v[0])
    });

    let labels = [0, 1, 0, 2, 1, 0];
    let loss_cfg = LossConfig::default();
    let emb_v = random(r, &[6, 4], -1.0, 1.0);
    let emb_l = random(r, &[6, 4], -1.0, 1.0);
    a.op("cross_cl", &[emb_v.clone(), emb_l.clone()], |v| {
        Ok(cross_cl_terms(l2_normalize(v[0])?, l2_normalize(v[1])?, &labels, &loss_cfg)?.total)
    });
    let own_pair = LossConfig {
        include_own_pair: true,
        ..loss_cfg
    };
    a.op("cross_cl_own_pair", &[emb_v.clone(), emb_l], |v| {
        Ok(cross_cl_terms(l2_normalize(v[0])?, l2_normalize(v[1])?, &labels, &own_pair)?.total)
    });
    a.op("scl", &[emb_v], |v| scl(l2_normalize(v[0])?, &labels, 0.1));
    a.op("cross_entropy", &[random(r, &[6, 3], -2.0, 2.0)], |v| cross_entropy(v[0], &labels));

    model_entry(&mut a, r);

    GradCheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        fault: fault.map(|f| format!("{:?} adjoint scaled by {}", f.op, f.scale)),
        entries: a.entries,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// End to end through the whole encoder and loss, with respect to every parameter.
fn model_entry(a: &mut Audit, r: &mut ChaCha8Rng) {
    let enc = EncoderConfig {
        patch: 2,
        height: 4,
        width: 2,
        channels: 1,
        vocab_size: 7,
        n_max: 3,
        d_f: 4,
    };
    let cfg = ModelConfig {
        d_f: 4,
        backbone_depth: 1,
        heads: 2,
        depth: 1,
        d_ff: 4,
        d_h: 4,
        d_p: 3,
        use_inter: true,
        use_intra: true,
    };
    let built = Model::new(cfg, enc, r.random()).map(|mut model| {
        jitter(&mut model.params, r);
        model
    });
    let model = match built {
        Ok(m) => m,
        Err(e) => return a.record("model", Err(e)),
    };
    let mut records = Vec::new();
    for (i, content) in [[3u32], [4], [5], [3]].iter().enumerate() {
        let pixels = (0..8).map(|_| r.random_range(0.0..1.0)).collect();
        records.push(CorpusRecord {
            image: DocumentImage::new(4, 2, 1, pixels).expect("valid pixels"),
            tokens: TokenSequence::from_content(content, 3).expect("valid tokens"),
            label: i % 2,
        });
    }
    let refs: Vec<&CorpusRecord> = records.iter().collect();
    let loss_cfg = LossConfig::default();
    let outcome = check_gradients(
        |tape: &Tape, v| {
            let p = Bound::from_vars(v.to_vec());
            Ok(model.loss(&p, tape, &refs, &loss_cfg)?.total)
        },
        model.params.values(),
        STEP,
        a.fault,
    );
    a.record("model", outcome);
}
