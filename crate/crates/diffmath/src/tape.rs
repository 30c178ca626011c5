use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::params::{fresh_id, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param { set: u64, id: ParamId },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    GatherRows(usize, Arc<[usize]>),
    ScatterAddRows(usize, Arc<[usize]>),
    ScaleRows(usize, Arc<[T]>),
    ConcatRows(Vec<usize>),
    Sum(usize),
    Mean(usize),
    Exp(usize),
    Log(usize, T),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize, T),
    LogSoftmax(usize, T),
    CircCorr(usize, usize),
    KlDiv(usize, usize, T),
    SoftCrossEntropy(usize, usize, T),
    BceWithLogits(usize, Arc<Tensor<T>>),
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive operations, rebuilt for every step.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and reverse iteration is a valid reverse topological order.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(DiffError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn node(&self, v: Var) -> Result<(usize, &Tensor<T>, bool)> {
        let i = self.check(v)?;
        let n = &self.nodes[i];
        Ok((i, &n.value, n.needs_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("var from this tape")].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable free input whose gradient can be read back through
    /// [`Tape::gradients`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; [`Tape::backward`] accumulates into the owning set.
    pub fn param(&mut self, set: &ParamSet<T>, id: ParamId) -> Var {
        let value = set.shared(id);
        self.push_shared(value, Op::Param { set: set.id(), id }, true)
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.check(v)?;
        let value = Arc::clone(&self.nodes[i].value);
        Ok(self.push_shared(value, Op::Leaf, false))
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, va, ga) = self.node(a)?;
        let (ib, vb, gb) = self.node(b)?;
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op(ia, ib), ga || gb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let (ia, va, ga) = self.node(a)?;
        let out = va.map(|x| x * c);
        Ok(self.push(out, Op::Scale(ia, c), ga))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, va, ga) = self.node(a)?;
        let (ib, vb, gb) = self.node(row)?;
        let (rows, cols) = va.dims2();
        if vb.numel() != cols {
            return Err(shape_err("add_row", va, vb));
        }
        let mut out = va.clone();
        for r in 0..rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(ia, ib), ga || gb))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, va, ga) = self.node(a)?;
        let (ib, vb, gb) = self.node(b)?;
        let (m, k) = va.dims2();
        let (k2, n) = vb.dims2();
        if k != k2 || vb.shape().len() != 2 {
            return Err(shape_err("matmul", va, vb));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(ia, ib), ga || gb))
    }

    /// `[m×k] · [n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, va, ga) = self.node(a)?;
        let (ib, vb, gb) = self.node(b)?;
        let (m, k) = va.dims2();
        let (n, k2) = vb.dims2();
        if k != k2 {
            return Err(shape_err("matmul_nt", va, vb));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(va.data(), vb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMulNT(ia, ib), ga || gb))
    }

    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let (ia, va, ga) = self.node(a)?;
        let out = va.gather_rows(&idx)?;
        Ok(self.push(out, Op::GatherRows(ia, idx), ga))
    }

    /// `out[idx[i]] += a[i]` over an `[n_rows, cols]` zero matrix.
    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        idx: impl Into<Arc<[usize]>>,
        n_rows: usize,
    ) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let (ia, va, ga) = self.node(a)?;
        let (rows, cols) = va.dims2();
        if idx.len() != rows {
            return Err(DiffError::LengthMismatch(idx.len(), rows));
        }
        let mut out = Tensor::zeros(&[n_rows, cols]);
        for (r, &dst) in idx.iter().enumerate() {
            if dst >= n_rows {
                return Err(DiffError::InvalidArgument(format!(
                    "scatter target {dst} out of bounds for {n_rows} rows"
                )));
            }
            let src = va.row(r);
            for (o, &x) in out.row_mut(dst).iter_mut().zip(src) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::ScatterAddRows(ia, idx), ga))
    }

    /// Multiplies row `i` of `a` by `coeffs[i]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: impl Into<Arc<[T]>>) -> Result<Var> {
        let coeffs: Arc<[T]> = coeffs.into();
        let (ia, va, ga) = self.node(a)?;
        let rows = va.rows();
        if coeffs.len() != rows {
            return Err(DiffError::LengthMismatch(coeffs.len(), rows));
        }
        let mut out = va.clone();
        for (r, &c) in coeffs.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x *= c);
        }
        Ok(self.push(out, Op::ScaleRows(ia, coeffs), ga))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DiffError::InvalidArgument("concat of nothing".into()));
        }
        let mut idx = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        let mut needs = false;
        for &p in parts {
            let (i, v, g) = self.node(p)?;
            let (r, c) = v.dims2();
            match cols {
                None => cols = Some(c),
                Some(c0) if c0 != c => {
                    return Err(DiffError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: vec![c0],
                        rhs: vec![c],
                    })
                }
                _ => {}
            }
            data.extend_from_slice(v.data());
            rows += r;
            needs |= g;
            idx.push(i);
        }
        let out = Tensor::new(vec![rows, cols.unwrap()], data)?;
        Ok(self.push(out, Op::ConcatRows(idx), needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let (ia, va, ga) = self.node(a)?;
        let out = Tensor::scalar(va.sum());
        Ok(self.push(out, Op::Sum(ia), ga))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let (ia, va, ga) = self.node(a)?;
        let out = Tensor::scalar(va.sum() / T::of(va.numel() as f64));
        Ok(self.push(out, Op::Mean(ia), ga))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<Var> {
        let (ia, va, ga) = self.node(a)?;
        let out = va.map(f);
        Ok(self.push(out, op(ia), ga))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp)
    }

    /// `ln(max(x, eps))`.
    pub fn log(&mut self, a: Var, eps: T) -> Result<Var> {
        let (ia, va, ga) = self.node(a)?;
        let out = va.map(|x| x.max(eps).ln());
        Ok(self.push(out, Op::Log(ia, eps), ga))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(T::zero()), Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    /// Row-wise `softmax(a / temperature)`.
    pub fn softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        check_temperature(temperature)?;
        let (ia, va, ga) = self.node(a)?;
        let mut out = va.clone();
        for r in 0..out.rows() {
            softmax_row(out.row_mut(r), temperature);
        }
        Ok(self.push(out, Op::Softmax(ia, temperature), ga))
    }

    /// Row-wise `log_softmax(a / temperature)`.
    pub fn log_softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        check_temperature(temperature)?;
        let (ia, va, ga) = self.node(a)?;
        let mut out = va.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max) / temperature;
                z += x.exp();
            }
            let lz = z.ln();
            row.iter_mut().for_each(|x| *x -= lz);
        }
        Ok(self.push(out, Op::LogSoftmax(ia, temperature), ga))
    }

    /// Row-wise circular correlation: `out_k = Σ_i a_i · b_{(i+k) mod d}`.
    pub fn circ_corr(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, va, ga) = self.node(a)?;
        let (ib, vb, gb) = self.node(b)?;
        if va.shape() != vb.shape() {
            return Err(shape_err("circ_corr", va, vb));
        }
        let (rows, d) = va.dims2();
        let mut out = Tensor::zeros(va.shape());
        for r in 0..rows {
            let (x, y) = (va.row(r), vb.row(r));
            let o = out.row_mut(r);
            for (k, ok) in o.iter_mut().enumerate() {
                let mut acc = T::zero();
                for i in 0..d {
                    acc += x[i] * y[(i + k) % d];
                }
                *ok = acc;
            }
        }
        Ok(self.push(out, Op::CircCorr(ia, ib), ga || gb))
    }

    /// `Σ_rows Σ_i p_i · ln(p_i / max(q_i, eps))` with `0 · ln 0 = 0`.
    pub fn kl_div(&mut self, p: Var, q: Var, eps: T) -> Result<Var> {
        let (ip, vp, gp) = self.node(p)?;
        let (iq, vq, gq) = self.node(q)?;
        if vp.shape() != vq.shape() {
            return Err(shape_err("kl_div", vp, vq));
        }
        let mut acc = T::zero();
        for (&pi, &qi) in vp.data().iter().zip(vq.data()) {
            if pi > T::zero() {
                acc += pi * (pi.ln() - qi.max(eps).ln());
            }
        }
        Ok(self.push(Tensor::scalar(acc), Op::KlDiv(ip, iq, eps), gp || gq))
    }

    /// `-Σ target_i · ln(max(p_i, eps))`.
    pub fn soft_cross_entropy(&mut self, target: Var, p: Var, eps: T) -> Result<Var> {
        let (it, vt, gt) = self.node(target)?;
        let (ip, vp, gp) = self.node(p)?;
        if vt.shape() != vp.shape() {
            return Err(shape_err("soft_cross_entropy", vt, vp));
        }
        let mut acc = T::zero();
        for (&ti, &pi) in vt.data().iter().zip(vp.data()) {
            if ti != T::zero() {
                acc -= ti * pi.max(eps).ln();
            }
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::SoftCrossEntropy(it, ip, eps),
            gt || gp,
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and constant
    /// targets, over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let (il, vl, gl) = self.node(logits)?;
        if vl.shape() != targets.shape() {
            return Err(shape_err("bce_with_logits", vl, &targets));
        }
        let mut acc = T::zero();
        for (&x, &y) in vl.data().iter().zip(targets.data()) {
            // max(x,0) - x*y + ln(1 + e^{-|x|})
            acc += x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p();
        }
        let out = Tensor::scalar(acc / T::of(vl.numel() as f64));
        Ok(self.push(out, Op::BceWithLogits(il, Arc::new(targets)), gl))
    }

    /// Reverse accumulation from a scalar loss; returns every node's
    /// gradient.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        let lv = &self.nodes[root].value;
        if !lv.is_scalar() {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=root).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    /// Reverse accumulation into the gradient buffers of `sets`. Buffers
    /// accumulate across calls; zero them explicitly between steps.
    /// Gradients reaching parameters of a set not listed are dropped.
    pub fn backward(&self, loss: Var, sets: &mut [&mut ParamSet<T>]) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads.grads) {
            if let (Op::Param { set, id }, Some(g)) = (&node.op, g) {
                if let Some(ps) = sets.iter_mut().find(|s| s.id() == *set) {
                    ps.grad_mut(*id).add_assign(&g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| -> &Tensor<T> { &self.nodes[j].value };
        let needs = |j: usize| self.nodes[j].needs_grad;
        let mut acc = |j: usize, delta: Tensor<T>| match &mut grads[j] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, zip_map(g, val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, zip_map(g, val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|x| x * c));
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    let vb = val(*b);
                    let mut gb = Tensor::zeros(vb.shape());
                    for r in 0..g.rows() {
                        for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = va.dims2();
                let n = vb.cols();
                if needs(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    matmul_nt_into(g.data(), vb.data(), &mut ga, m, n, k);
                    acc(*a, Tensor::new(va.shape().to_vec(), ga).unwrap());
                }
                if needs(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![T::zero(); k * n];
                    matmul_tn_into(va.data(), g.data(), &mut gb, m, k, n);
                    acc(*b, Tensor::new(vb.shape().to_vec(), gb).unwrap());
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = va.dims2();
                let n = vb.rows();
                if needs(*a) {
                    // dA = G · B
                    let mut ga = vec![T::zero(); m * k];
                    matmul_into(g.data(), vb.data(), &mut ga, m, n, k);
                    acc(*a, Tensor::new(va.shape().to_vec(), ga).unwrap());
                }
                if needs(*b) {
                    // dB = Gᵀ · A
                    let mut gb = vec![T::zero(); n * k];
                    matmul_tn_into(g.data(), va.data(), &mut gb, m, n, k);
                    acc(*b, Tensor::new(vb.shape().to_vec(), gb).unwrap());
                }
            }
            Op::GatherRows(a, idx) => {
                let va = val(*a);
                let mut ga = Tensor::zeros(va.shape());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::ScatterAddRows(a, idx) => {
                let va = val(*a);
                let cols = va.cols();
                let mut data = Vec::with_capacity(va.numel());
                for &dst in idx.iter() {
                    data.extend_from_slice(&g.data()[dst * cols..(dst + 1) * cols]);
                }
                acc(*a, Tensor::new(va.shape().to_vec(), data).unwrap());
            }
            Op::ScaleRows(a, coeffs) => {
                let mut ga = g.clone();
                for (r, &c) in coeffs.iter().enumerate() {
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= c);
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = val(p);
                    let n = vp.numel();
                    if needs(p) {
                        let data = g.data()[offset..offset + n].to_vec();
                        acc(p, Tensor::new(vp.shape().to_vec(), data).unwrap());
                    }
                    offset += n;
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let va = val(*a);
                let gv = g.item() / T::of(va.numel() as f64);
                acc(*a, Tensor::full(va.shape(), gv));
            }
            Op::Exp(a) => {
                acc(*a, zip_map(g, &node.value, |x, y| x * y));
            }
            Op::Log(a, eps) => {
                let eps = *eps;
                acc(
                    *a,
                    zip_map(g, val(*a), |x, y| if y > eps { x / y } else { T::zero() }),
                );
            }
            Op::Tanh(a) => {
                acc(*a, zip_map(g, &node.value, |x, y| x * (T::one() - y * y)));
            }
            Op::Relu(a) => {
                acc(
                    *a,
                    zip_map(g, val(*a), |x, y| if y > T::zero() { x } else { T::zero() }),
                );
            }
            Op::Sigmoid(a) => {
                acc(*a, zip_map(g, &node.value, |x, s| x * s * (T::one() - s)));
            }
            Op::Softmax(a, t) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot) / *t;
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmax(a, t) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: T = gr.iter().copied().sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gi - yi.exp() * gsum) / *t;
                    }
                }
                acc(*a, ga);
            }
            Op::CircCorr(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (rows, d) = va.dims2();
                if needs(*a) {
                    // d/da_i = Σ_k g_k b_{(i+k) mod d}
                    let mut ga = Tensor::zeros(va.shape());
                    for r in 0..rows {
                        let (gr, y) = (g.row(r), vb.row(r));
                        for (i, o) in ga.row_mut(r).iter_mut().enumerate() {
                            let mut s = T::zero();
                            for k in 0..d {
                                s += gr[k] * y[(i + k) % d];
                            }
                            *o = s;
                        }
                    }
                    acc(*a, ga);
                }
                if needs(*b) {
                    // d/db_j = Σ_k g_k a_{(j-k) mod d}
                    let mut gb = Tensor::zeros(vb.shape());
                    for r in 0..rows {
                        let (gr, x) = (g.row(r), va.row(r));
                        for (j, o) in gb.row_mut(r).iter_mut().enumerate() {
                            let mut s = T::zero();
                            for k in 0..d {
                                s += gr[k] * x[(j + d - k) % d];
                            }
                            *o = s;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::KlDiv(p, q, eps) => {
                let (gv, eps) = (g.item(), *eps);
                let (vp, vq) = (val(*p), val(*q));
                if needs(*p) {
                    acc(
                        *p,
                        zip_map(vp, vq, |pi, qi| {
                            gv * (pi.max(eps).ln() - qi.max(eps).ln() + T::one())
                        }),
                    );
                }
                if needs(*q) {
                    acc(
                        *q,
                        zip_map(
                            vp,
                            vq,
                            |pi, qi| {
                                if qi > eps {
                                    -gv * pi / qi
                                } else {
                                    T::zero()
                                }
                            },
                        ),
                    );
                }
            }
            Op::SoftCrossEntropy(t, p, eps) => {
                let (gv, eps) = (g.item(), *eps);
                let (vt, vp) = (val(*t), val(*p));
                if needs(*t) {
                    acc(*t, vp.map(|pi| -gv * pi.max(eps).ln()));
                }
                if needs(*p) {
                    acc(
                        *p,
                        zip_map(
                            vt,
                            vp,
                            |ti, pi| {
                                if pi > eps {
                                    -gv * ti / pi
                                } else {
                                    T::zero()
                                }
                            },
                        ),
                    );
                }
            }
            Op::BceWithLogits(l, targets) => {
                let vl = val(*l);
                let scale = g.item() / T::of(vl.numel() as f64);
                acc(*l, zip_map(vl, targets, |x, y| scale * (sigmoid(x) - y)));
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_temperature<T: Scalar>(t: T) -> Result<()> {
    if !(t > T::zero()) || !t.is_finite() {
        return Err(DiffError::InvalidArgument(format!(
            "temperature must be positive, got {t}"
        )));
    }
    Ok(())
}

/// In-place stabilized `softmax(row / t)`.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], t: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = ((*x - max) / t).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.gradients(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_matrix_vector_product_broadcasts_v() {
        let mut params = ParamSet::<f64>::new();
        let w = params
            .add(
                "w",
                Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            )
            .unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&params, w);
        let v = tape.constant(Tensor::matrix(3, 1, vec![0.5, -1.0, 2.0]).unwrap());
        let out = tape.matmul(wv, v).unwrap();
        let loss = tape.sum(out).unwrap();
        tape.backward(loss, &mut [&mut params]).unwrap();
        assert_eq!(params.grad(w).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        // a second call accumulates
        tape.backward(loss, &mut [&mut params]).unwrap();
        assert_eq!(params.grad(w).data(), &[1.0, -2.0, 4.0, 1.0, -2.0, 4.0]);
        params.zero_grad();
        assert!(params.grad(w).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.gradients(x), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let x = a.input(Tensor::scalar(1.0));
        assert!(matches!(b.gradients(x), Err(DiffError::ForeignVar)));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(2.0));
        let d = tape.detach(x).unwrap();
        let y = tape.mul(x, d).unwrap();
        let g = tape.gradients(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 2.0);
        assert!(g.wrt(d).is_none());
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.matmul_nt(a, b).is_err());
    }

    #[test]
    fn circ_corr_matches_definition() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = tape.constant(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let c = tape.circ_corr(a, b).unwrap();
        // k=0: 1*4+2*5+3*6=32; k=1: 1*5+2*6+3*4=29; k=2: 1*6+2*4+3*5=29
        assert_eq!(tape.value(c).data(), &[32.0, 29.0, 29.0]);
    }

    #[test]
    fn bce_is_ln2_at_zero_logits() {
        let mut tape = Tape::<f64>::new();
        let l = tape.input(Tensor::vector(vec![0.0, 0.0]));
        let loss = tape
            .bce_with_logits(l, Tensor::vector(vec![1.0, 0.0]))
            .unwrap();
        assert_relative_eq!(tape.value(loss).item(), 2f64.ln(), epsilon = 1e-12);
    }
}
