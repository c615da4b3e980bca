use super::{accumulate, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_index_map, broadcast_shapes, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c += a @ b` for row-major `a: m×k`, `b: k×n`.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents passed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += a @ bᵀ` for `a: m×n`, `b: k×n`, `c: m×k`.
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    // SAFETY: as in `gemm`; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            1.0, c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `c += aᵀ @ b` for `a: m×k`, `b: m×n`, `c: k×n`.
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    // SAFETY: as in `gemm`; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

struct MatMulLayout {
    batch: Vec<usize>,
    a_map: Vec<usize>,
    b_map: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_layout(a: &[usize], b: &[usize]) -> Result<MatMulLayout> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch = broadcast_shapes(a_batch, b_batch).ok_or_else(|| Error::shape("matmul", a, b))?;
    Ok(MatMulLayout {
        a_map: broadcast_index_map(a_batch, &batch),
        b_map: broadcast_index_map(b_batch, &batch),
        batch,
        m,
        k,
        n,
    })
}

/// (outer, len, inner) split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    out
}

fn logsumexp_rows(x: &[f64], n: usize) -> Vec<f64> {
    x.chunks(n)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    fn op(self, a: usize, b: usize) -> Op {
        match self {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
            Binary::Div => Op::Div(a, b),
        }
    }
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let nodes = self.tape.nodes();
        let src = &nodes[self.id];
        let data = src.value.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.value.shape().to_vec(), data).expect("same shape");
        let rg = src.requires_grad;
        drop(nodes);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(&other);
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let (sa, sb) = (a.value.shape(), b.value.shape());
        let value = if sa == sb {
            let data = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect();
            Tensor::new(sa.to_vec(), data)?
        } else {
            let out = broadcast_shapes(sa, sb).ok_or_else(|| Error::shape(kind.name(), sa, sb))?;
            let am = broadcast_index_map(sa, &out);
            let bm = broadcast_index_map(sb, &out);
            let (ad, bd) = (a.value.data(), b.value.data());
            let data = am
                .iter()
                .zip(&bm)
                .map(|(&i, &j)| kind.apply(ad[i], bd[j]))
                .collect();
            Tensor::new(out, data)?
        };
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.tape.push(value, kind.op(self.id, other.id), rg))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    /// Hadamard product with right-aligned broadcasting.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log; nonpositive entries are a domain error.
    pub fn log(&self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes();
            if let Some(pos) = nodes[self.id].value.data().iter().position(|&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("nonpositive value at flat index {pos}"),
                });
            }
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes();
            if let Some(pos) = nodes[self.id].value.data().iter().position(|&v| v < 0.0 || v.is_nan()) {
                return Err(Error::Domain {
                    op: "sqrt",
                    detail: format!("negative value at flat index {pos}"),
                });
            }
        }
        Ok(self.unary(Op::Sqrt(self.id), f64::sqrt))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let l = matmul_layout(a.value.shape(), b.value.shape())?;
        let nb = l.a_map.len();
        let (sa, sb, sc) = (l.m * l.k, l.k * l.n, l.m * l.n);
        let mut out = vec![0.0; nb * sc];
        for bi in 0..nb {
            gemm(
                &a.value.data()[l.a_map[bi] * sa..][..sa],
                &b.value.data()[l.b_map[bi] * sb..][..sb],
                &mut out[bi * sc..(bi + 1) * sc],
                l.m,
                l.k,
                l.n,
            );
        }
        let mut shape = l.batch;
        shape.extend([l.m, l.n]);
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self
            .tape
            .push(Tensor::new(shape, out)?, Op::MatMul(self.id, other.id), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let src = &nodes[self.id];
        let shape = src.value.shape();
        if shape.len() < 2 {
            return Err(Error::shape("transpose_last", shape, &[]));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out = vec![0.0; src.value.numel()];
        for (blk, oblk) in src.value.data().chunks(r * c).zip(out.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    oblk[j * r + i] = blk[i * c + j];
                }
            }
        }
        let mut oshape = shape.to_vec();
        let len = oshape.len();
        oshape.swap(len - 2, len - 1);
        let rg = src.requires_grad;
        drop(nodes);
        Ok(self
            .tape
            .push(Tensor::new(oshape, out)?, Op::TransposeLast(self.id), rg))
    }

    /// Max-stabilized softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t> {
        let nodes = self.tape.nodes();
        let src = &nodes[self.id];
        let n = *src.value.shape().last().unwrap_or(&1);
        let out = softmax_rows(src.value.data(), n);
        let value = Tensor::new(src.value.shape().to_vec(), out).expect("same shape");
        let rg = src.requires_grad;
        drop(nodes);
        self.tape.push(value, Op::Softmax(self.id), rg)
    }

    /// log Σ exp over the last axis, keeping it as size 1. `-inf` entries
    /// are excluded from the sum and receive zero gradient.
    pub fn logsumexp_last(&self) -> Var<'t> {
        let nodes = self.tape.nodes();
        let src = &nodes[self.id];
        let shape = src.value.shape();
        let n = *shape.last().unwrap_or(&1);
        let out = logsumexp_rows(src.value.data(), n);
        let mut oshape = shape.to_vec();
        if let Some(last) = oshape.last_mut() {
            *last = 1;
        }
        let rg = src.requires_grad;
        drop(nodes);
        self.tape
            .push(Tensor::new(oshape, out).expect("row count"), Op::LogSumExp(self.id), rg)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t> {
        let nodes = self.tape.nodes();
        let src = &nodes[self.id];
        let total = src.value.data().iter().sum();
        let rg = src.requires_grad;
        drop(nodes);
        self.tape.push(Tensor::scalar(total), Op::Sum(self.id), rg)
    }

    /// Sum over `axis`, keeping it as size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let src = &nodes[self.id];
        let shape = src.value.shape();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let d = src.value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &d[(o * len + i) * inner..][..inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = 1;
        let rg = src.requires_grad;
        drop(nodes);
        Ok(self
            .tape
            .push(Tensor::new(oshape, out)?, Op::SumAxis(self.id, axis), rg))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let src = &nodes[self.id];
        let value = src.value.clone().reshape(shape)?;
        let rg = src.requires_grad;
        drop(nodes);
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Broadcasts to `shape` under right-aligned rules.
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let src = &nodes[self.id];
        let sshape = src.value.shape();
        match broadcast_shapes(sshape, shape) {
            Some(out) if out == shape => {}
            _ => return Err(Error::shape("expand", sshape, shape)),
        }
        let map = broadcast_index_map(sshape, shape);
        let d = src.value.data();
        let out = map.iter().map(|&i| d[i]).collect();
        let rg = src.requires_grad;
        drop(nodes);
        Ok(self
            .tape
            .push(Tensor::new(shape.to_vec(), out)?, Op::Expand(self.id), rg))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let src = &nodes[self.id];
        let shape = src.value.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", shape, &[axis, start, end]));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let width = (end - start) * inner;
        let d = src.value.data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..][..width]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = end - start;
        let rg = src.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            Tensor::new(oshape, out)?,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn slice_last(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let axis = self.shape().len().saturating_sub(1);
        self.slice(axis, start, end)
    }

    /// Looks up rows of a `[vocab, d]` table; output is `[ids.len(), d]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let src = &nodes[self.id];
        let shape = src.value.shape();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", shape, &[]));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("row id {bad} out of range for table of {rows} rows")));
        }
        let data = src.value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        let rg = src.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let tape = first.tape;
    let nodes = tape.nodes();
    let base = nodes[first.id].value.shape().to_vec();
    if axis >= base.len() {
        return Err(Error::shape("concat", &base, &[axis]));
    }
    let mut total = 0;
    for p in parts {
        first.same_tape(p);
        let s = nodes[p.id].value.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", &base, s));
        }
        total += s[axis];
    }
    let (outer, _, inner) = axis_split(&base, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let v = &nodes[p.id].value;
            let w = v.shape()[axis] * inner;
            out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
    drop(nodes);
    Ok(tape.push(
        Tensor::new(shape, out)?,
        Op::Concat {
            srcs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        rg,
    ))
}

fn reduce_broadcast(grad: &[f64], out_shape: &[usize], src_shape: &[usize], f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let n: usize = src_shape.iter().product();
    let mut acc = vec![0.0; n];
    if out_shape == src_shape {
        for (i, (a, g)) in acc.iter_mut().zip(grad).enumerate() {
            *a += g * f(i, i);
        }
    } else {
        let map = broadcast_index_map(src_shape, out_shape);
        for (i, (&j, g)) in map.iter().zip(grad).enumerate() {
            acc[j] += g * f(i, j);
        }
    }
    acc
}

/// Pushes the adjoint of node `id` into its inputs.
pub(crate) fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(*a) {
                let d = reduce_broadcast(g, out.shape(), nodes[*a].value.shape(), |_, _| 1.0);
                accumulate(&mut grads[*a], &d);
            }
            if needs(*b) {
                let d = reduce_broadcast(g, out.shape(), nodes[*b].value.shape(), |_, _| sign);
                accumulate(&mut grads[*b], &d);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let is_div = matches!(node.op, Op::Div(..));
            let am = (va.shape() != out.shape()).then(|| broadcast_index_map(va.shape(), out.shape()));
            let bm = (vb.shape() != out.shape()).then(|| broadcast_index_map(vb.shape(), out.shape()));
            let at = |i: usize| am.as_ref().map_or(i, |m| m[i]);
            let bt = |i: usize| bm.as_ref().map_or(i, |m| m[i]);
            if needs(*a) {
                let d = reduce_broadcast(g, out.shape(), va.shape(), |i, _| {
                    let y = vb.data()[bt(i)];
                    if is_div {
                        1.0 / y
                    } else {
                        y
                    }
                });
                accumulate(&mut grads[*a], &d);
            }
            if needs(*b) {
                let d = reduce_broadcast(g, out.shape(), vb.shape(), |i, _| {
                    let x = va.data()[at(i)];
                    if is_div {
                        let y = vb.data()[bt(i)];
                        -x / (y * y)
                    } else {
                        x
                    }
                });
                accumulate(&mut grads[*b], &d);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if needs(*a) {
                accumulate(&mut grads[*a], g);
            }
        }
        Op::Scale(a, c) => {
            if needs(*a) {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::Exp(a) => {
            if needs(*a) {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::Log(a) => {
            if needs(*a) {
                let x = nodes[*a].value.data();
                let d: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::Sqrt(a) => {
            if needs(*a) {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * 0.5 / y).collect();
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::Gelu(a) => {
            if needs(*a) {
                let x = nodes[*a].value.data();
                let d: Vec<f64> = g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let l = matmul_layout(va.shape(), vb.shape()).expect("validated in forward");
            let (sa, sb, sc) = (l.m * l.k, l.k * l.n, l.m * l.n);
            if needs(*a) {
                let mut d = vec![0.0; va.numel()];
                for bi in 0..l.a_map.len() {
                    let off = l.a_map[bi] * sa;
                    gemm_nt(
                        &g[bi * sc..(bi + 1) * sc],
                        &vb.data()[l.b_map[bi] * sb..][..sb],
                        &mut d[off..off + sa],
                        l.m,
                        l.n,
                        l.k,
                    );
                }
                accumulate(&mut grads[*a], &d);
            }
            if needs(*b) {
                let mut d = vec![0.0; vb.numel()];
                for bi in 0..l.b_map.len() {
                    let off = l.b_map[bi] * sb;
                    gemm_tn(
                        &va.data()[l.a_map[bi] * sa..][..sa],
                        &g[bi * sc..(bi + 1) * sc],
                        &mut d[off..off + sb],
                        l.m,
                        l.k,
                        l.n,
                    );
                }
                accumulate(&mut grads[*b], &d);
            }
        }
        Op::TransposeLast(a) => {
            if needs(*a) {
                let shape = nodes[*a].value.shape();
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let mut d = vec![0.0; g.len()];
                for (gblk, dblk) in g.chunks(r * c).zip(d.chunks_mut(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            dblk[i * c + j] = gblk[j * r + i];
                        }
                    }
                }
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::Softmax(a) => {
            if needs(*a) {
                let n = *out.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; g.len()];
                for ((grow, yrow), drow) in g.chunks(n).zip(out.data().chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::LogSumExp(a) => {
            if needs(*a) {
                let x = &nodes[*a].value;
                let n = *x.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; x.numel()];
                for (r, (xrow, drow)) in x.data().chunks(n).zip(d.chunks_mut(n)).enumerate() {
                    let lse = out.data()[r];
                    for (dv, xv) in drow.iter_mut().zip(xrow) {
                        *dv = g[r] * (xv - lse).exp();
                    }
                }
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                let d = vec![g[0]; nodes[*a].value.numel()];
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::SumAxis(a, axis) => {
            if needs(*a) {
                let (outer, len, inner) = axis_split(nodes[*a].value.shape(), *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for i in 0..len {
                        d[(o * len + i) * inner..][..inner].copy_from_slice(grow);
                    }
                }
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::Expand(a) => {
            if needs(*a) {
                let d = reduce_broadcast(g, out.shape(), nodes[*a].value.shape(), |_, _| 1.0);
                accumulate(&mut grads[*a], &d);
            }
        }
        Op::Slice { src, axis, start } => {
            if needs(*src) {
                let shape = nodes[*src].value.shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let width = out.shape()[*axis] * inner;
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    d[(o * len + start) * inner..][..width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                accumulate(&mut grads[*src], &d);
            }
        }
        Op::Concat { srcs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &s in srcs {
                let w = nodes[s].value.shape()[*axis] * inner;
                if needs(s) {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total * inner + offset..][..w]);
                    }
                    accumulate(&mut grads[s], &d);
                }
                offset += w;
            }
        }
        Op::Gather { table, ids } => {
            if needs(*table) {
                let t = &nodes[*table].value;
                let dcols = t.shape()[1];
                let mut d = vec![0.0; t.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for (dv, gv) in d[i * dcols..(i + 1) * dcols].iter_mut().zip(&g[r * dcols..]) {
                        *dv += gv;
                    }
                }
                accumulate(&mut grads[*table], &d);
            }
        }
    }
}
