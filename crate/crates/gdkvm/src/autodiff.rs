//! Reverse-mode differentiation over tensor-level primitives.
//!
//! A [`Tape`] records each primitive with its inputs and eagerly computed
//! output. [`Tape::backward`] walks the record in reverse, accumulating
//! vector-Jacobian products into per-node gradients and collecting the
//! gradients of registered parameters. One tape per training step; replay
//! order is the recording order, so forward values are exact and gradient
//! accumulation is plain summation.

use crate::element::Element;
use crate::tensor::{
    avg_pool, conv2d_check, conv2d_stride, phi_prime_scalar, sigmoid_scalar,
    upsample2x, Tensor,
};
use std::fmt;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum AutodiffError {
    NonScalarRoot { shape: Vec<usize> },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AutodiffError::NonScalarRoot { shape } => {
                write!(f, "backward root must be scalar, got shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for AutodiffError {}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// scalar `[1]` node times tensor
    MulScalar(Var, Var),
    Matmul(Var, Var),
    MatVec(Var, Var),
    Outer(Var, Var),
    Dot(Var, Var),
    Sigmoid(Var),
    Phi(Var),
    Relu(Var),
    Mean(Var),
    RowMean(Var),
    ColMean(Var),
    ConcatVec(Var, Var),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Upsample2x(Var),
    AvgPool(Var, usize),
    ConcatChannels(Var, Var),
    NormalizeVec { x: Var, full_grad: bool },
    Recip(Var),
    /// mean binary cross-entropy from logits; target in `aux`
    BceMean(Var),
    /// two-class soft dice loss from logits; target in `aux`
    SoftDice(Var, f64),
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
    aux: Option<Tensor<E>>,
    param: Option<ParamId>,
}

/// Gradients keyed by [`ParamId`].
pub struct Gradients<E> {
    by_param: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    /// Dense gradient list aligned with parameter ids; missing gradients
    /// (parameters the loss does not reach) come back as zeros.
    pub fn dense(&self, shapes: &[Vec<usize>]) -> Vec<Tensor<E>> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| match self.by_param.get(i) {
                Some(Some(g)) => g.clone(),
                _ => Tensor::zeros(shape.clone()),
            })
            .collect()
    }
}

pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    max_param: usize,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), max_param: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op) -> Var {
        self.push_aux(value, op, None)
    }

    fn push_aux(&mut self, value: Tensor<E>, op: Op, aux: Option<Tensor<E>>) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node { value, op, aux, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<E>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, aux: None, param: Some(id) });
        self.max_param = self.max_param.max(id.0 + 1);
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add shapes");
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b)).expect("sub shapes");
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b)).expect("mul shapes");
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(E::from_f64(c));
        self.push(value, Op::Scale(a, c))
    }

    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Var {
        debug_assert_eq!(self.value(s).len(), 1, "mul_scalar needs [1] scalar");
        let sv = self.value(s).item();
        let value = self.value(x).scale(sv);
        self.push(value, Op::MulScalar(s, x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(value, Op::Matmul(a, b))
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Var {
        let value = self.value(a).matvec(self.value(x)).expect("matvec shapes");
        self.push(value, Op::MatVec(a, x))
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Var {
        let (un, vn) = (self.value(u).len(), self.value(v).len());
        debug_assert!(self.value(u).rank() == 1 && self.value(v).rank() == 1);
        let mut out = Tensor::zeros(vec![un, vn]);
        for i in 0..un {
            for j in 0..vn {
                out.set2(i, j, self.value(u).data()[i] * self.value(v).data()[j]);
            }
        }
        self.push(out, Op::Outer(u, v))
    }

    pub fn dot(&mut self, u: Var, v: Var) -> Var {
        debug_assert_eq!(self.value(u).len(), self.value(v).len());
        let mut acc = E::ZERO;
        for (a, b) in self.value(u).data().iter().zip(self.value(v).data()) {
            acc += *a * *b;
        }
        self.push(Tensor::scalar(acc), Op::Dot(u, v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).sigmoid();
        self.push(value, Op::Sigmoid(x))
    }

    pub fn phi(&mut self, x: Var) -> Var {
        let value = self.value(x).phi();
        self.push(value, Op::Phi(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(E::ZERO));
        self.push(value, Op::Relu(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mut acc = E::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(
            Tensor::scalar(acc * E::from_f64(1.0 / n as f64)),
            Op::Mean(x),
        )
    }

    /// Matrix `m x n` to per-row means, length `m`.
    pub fn row_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let inv = E::from_f64(1.0 / n as f64);
        let mut out = Tensor::zeros(vec![m]);
        for i in 0..m {
            let mut acc = E::ZERO;
            for j in 0..n {
                acc += t.at2(i, j);
            }
            out.data_mut()[i] = acc * inv;
        }
        self.push(out, Op::RowMean(x))
    }

    /// Matrix `m x n` to per-column means, length `n`.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let inv = E::from_f64(1.0 / m as f64);
        let mut out = Tensor::zeros(vec![n]);
        for j in 0..n {
            let mut acc = E::ZERO;
            for i in 0..m {
                acc += t.at2(i, j);
            }
            out.data_mut()[j] = acc * inv;
        }
        self.push(out, Op::ColMean(x))
    }

    pub fn concat_vec(&mut self, a: Var, b: Var) -> Var {
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let n = data.len();
        self.push(Tensor::new(vec![n], data).unwrap(), Op::ConcatVec(a, b))
    }

    /// Row `p` of a rank-2 node as a vector.
    pub fn row(&mut self, x: Var, p: usize) -> Var {
        let t = self.value(x);
        let n = t.shape()[1];
        let data = t.data()[p * n..(p + 1) * n].to_vec();
        self.push(Tensor::new(vec![n], data).unwrap(), Op::Row(x, p))
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        assert!(!rows.is_empty());
        let n = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(self.value(r).data());
        }
        let m = rows.len();
        self.push(Tensor::new(vec![m, n], data).unwrap(), Op::StackRows(rows))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).reshape(shape).expect("reshape count");
        self.push(value, Op::Reshape(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let value = conv2d_stride(self.value(x), self.value(w), self.value(b), stride)
            .expect("conv2d shapes");
        self.push(value, Op::Conv2d { x, w, b, stride })
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let value = upsample2x(self.value(x)).expect("upsample shapes");
        self.push(value, Op::Upsample2x(x))
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let value = avg_pool(self.value(x), factor).expect("avg_pool shapes");
        self.push(value, Op::AvgPool(x, factor))
    }

    /// Concatenate two `H x W x C` maps along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (h, w, ca) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let cb = tb.shape()[2];
        debug_assert_eq!(&tb.shape()[0..2], &[h, w]);
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        for p in 0..h * w {
            data.extend_from_slice(&ta.data()[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&tb.data()[p * cb..(p + 1) * cb]);
        }
        self.push(
            Tensor::new(vec![h, w, ca + cb], data).unwrap(),
            Op::ConcatChannels(a, b),
        )
    }

    /// L2 normalization of a vector, with the norm floored at 1e-12 so a
    /// degenerate all-zero input degrades instead of dividing by zero.
    /// With `full_grad` the true Jacobian is used; otherwise the cached
    /// norm is treated as a constant (straight-through on the
    /// normalization scale).
    pub fn normalize_vec(&mut self, x: Var, full_grad: bool) -> Var {
        let t = self.value(x);
        let norm = floored_norm(t);
        let value = t.scale(E::ONE / norm);
        self.push(value, Op::NormalizeVec { x, full_grad })
    }

    /// Elementwise reciprocal; inputs must be nonzero.
    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| E::ONE / v);
        self.push(value, Op::Recip(x))
    }

    /// Mean binary cross-entropy over all elements, from logits, computed
    /// with the overflow-safe `max(z,0) - z t + ln(1 + exp(-|z|))` form.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: &Tensor<E>) -> Var {
        let z = self.value(logits);
        debug_assert_eq!(z.shape(), target.shape());
        let mut acc = 0.0f64;
        for (&zv, &tv) in z.data().iter().zip(target.data()) {
            let zf = zv.to_f64();
            let tf = tv.to_f64();
            acc += zf.max(0.0) - zf * tf + (-zf.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(E::from_f64(acc / z.len() as f64));
        self.push_aux(value, Op::BceMean(logits), Some(target.clone()))
    }

    /// Two-class soft dice loss from logits:
    /// `1 - mean_c 2 sum(p_c g_c) / (sum p_c + sum g_c + eps)` over the
    /// foreground and background classes. Symmetric under a consistent
    /// swap of classes in prediction and target.
    pub fn soft_dice_loss(&mut self, logits: Var, target: &Tensor<E>, eps: f64) -> Var {
        let z = self.value(logits);
        debug_assert_eq!(z.shape(), target.shape());
        let (fg, bg) = dice_scores(z, target, eps);
        let value = Tensor::scalar(E::from_f64(1.0 - 0.5 * (fg + bg)));
        self.push_aux(value, Op::SoftDice(logits, eps), Some(target.clone()))
    }

    /// Reverse pass from a scalar root; returns gradients of all
    /// registered parameters.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>, AutodiffError> {
        if self.value(root).len() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(E::ONE));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.apply_vjp(idx, &g, &mut grads);
            if self.nodes[idx].param.is_some() {
                grads[idx] = Some(g); // keep parameter gradients
            }
        }

        let mut by_param: Vec<Option<Tensor<E>>> = (0..self.max_param).map(|_| None).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = grads[idx].take() {
                    by_param[pid.0] = Some(match by_param[pid.0].take() {
                        Some(prev) => prev.add(&g).expect("param grad shape"),
                        None => g,
                    });
                }
            }
        }
        Ok(Gradients { by_param })
    }

    fn apply_vjp(&self, idx: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let node = &self.nodes[idx];
        let send = |var: Var, contrib: Tensor<E>, grads: &mut [Option<Tensor<E>>]| {
            match &mut grads[var.0] {
                Some(existing) => {
                    *existing = existing.add(&contrib).expect("grad accumulation shape")
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.scale(-E::ONE), grads);
            }
            Op::Mul(a, b) => {
                send(*a, g.hadamard(self.value(*b)).unwrap(), grads);
                send(*b, g.hadamard(self.value(*a)).unwrap(), grads);
            }
            Op::Scale(a, c) => {
                send(*a, g.scale(E::from_f64(*c)), grads);
            }
            Op::MulScalar(s, x) => {
                let sv = self.value(*s).item();
                let mut ds = E::ZERO;
                for (gv, xv) in g.data().iter().zip(self.value(*x).data()) {
                    ds += *gv * *xv;
                }
                send(*s, Tensor::scalar(ds), grads);
                send(*x, g.scale(sv), grads);
            }
            Op::Matmul(a, b) => {
                let bt = self.value(*b).transpose().unwrap();
                let at = self.value(*a).transpose().unwrap();
                send(*a, g.matmul(&bt).unwrap(), grads);
                send(*b, at.matmul(g).unwrap(), grads);
            }
            Op::MatVec(a, x) => {
                let (m, n) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let mut da = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    for j in 0..n {
                        da.set2(i, j, g.data()[i] * self.value(*x).data()[j]);
                    }
                }
                send(*a, da, grads);
                let at = self.value(*a).transpose().unwrap();
                send(*x, at.matvec(g).unwrap(), grads);
            }
            Op::Outer(u, v) => {
                let (m, n) = (self.value(*u).len(), self.value(*v).len());
                let mut du = Tensor::zeros(vec![m]);
                let mut dv = Tensor::zeros(vec![n]);
                for i in 0..m {
                    let mut acc = E::ZERO;
                    for j in 0..n {
                        acc += g.at2(i, j) * self.value(*v).data()[j];
                    }
                    du.data_mut()[i] = acc;
                }
                for j in 0..n {
                    let mut acc = E::ZERO;
                    for i in 0..m {
                        acc += g.at2(i, j) * self.value(*u).data()[i];
                    }
                    dv.data_mut()[j] = acc;
                }
                send(*u, du, grads);
                send(*v, dv, grads);
            }
            Op::Dot(u, v) => {
                let g0 = g.item();
                send(*u, self.value(*v).scale(g0), grads);
                send(*v, self.value(*u).scale(g0), grads);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let dx = Tensor::from_fn(y.shape().to_vec(), |i| {
                    g.data()[i] * y.data()[i] * (E::ONE - y.data()[i])
                });
                send(*x, dx, grads);
            }
            Op::Phi(x) => {
                let xv = self.value(*x);
                let dx = Tensor::from_fn(xv.shape().to_vec(), |i| {
                    g.data()[i] * phi_prime_scalar(xv.data()[i])
                });
                send(*x, dx, grads);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = Tensor::from_fn(xv.shape().to_vec(), |i| {
                    if xv.data()[i] > E::ZERO {
                        g.data()[i]
                    } else {
                        E::ZERO
                    }
                });
                send(*x, dx, grads);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gv = g.item() * E::from_f64(1.0 / n as f64);
                send(*x, Tensor::filled(self.value(*x).shape().to_vec(), gv), grads);
            }
            Op::RowMean(x) => {
                let (m, n) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                let inv = E::from_f64(1.0 / n as f64);
                let dx = Tensor::from_fn(vec![m, n], |i| g.data()[i / n] * inv);
                send(*x, dx, grads);
            }
            Op::ColMean(x) => {
                let (m, n) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                let inv = E::from_f64(1.0 / m as f64);
                let dx = Tensor::from_fn(vec![m, n], |i| g.data()[i % n] * inv);
                send(*x, dx, grads);
            }
            Op::ConcatVec(a, b) => {
                let na = self.value(*a).len();
                let da = Tensor::new(vec![na], g.data()[..na].to_vec()).unwrap();
                let db =
                    Tensor::new(vec![g.len() - na], g.data()[na..].to_vec()).unwrap();
                send(*a, da, grads);
                send(*b, db, grads);
            }
            Op::Row(x, p) => {
                let (m, n) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                let mut dx = Tensor::zeros(vec![m, n]);
                dx.data_mut()[p * n..(p + 1) * n].copy_from_slice(g.data());
                send(*x, dx, grads);
            }
            Op::StackRows(rows) => {
                let n = g.shape()[1];
                for (i, &r) in rows.iter().enumerate() {
                    let dr = Tensor::new(vec![n], g.data()[i * n..(i + 1) * n].to_vec()).unwrap();
                    send(r, dr, grads);
                }
            }
            Op::Reshape(x) => {
                let dx = g.reshape(self.value(*x).shape().to_vec()).unwrap();
                send(*x, dx, grads);
            }
            Op::Conv2d { x, w, b, stride } => {
                let (dx, dw, db) = conv2d_vjp(self.value(*x), self.value(*w), g, *stride);
                send(*x, dx, grads);
                send(*w, dw, grads);
                send(*b, db, grads);
            }
            Op::Upsample2x(x) => {
                let (h, w, c) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1], s[2])
                };
                let mut dx = Tensor::zeros(vec![h, w, c]);
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let src = (y * 2 * w + xx) * c;
                        let dst = ((y / 2) * w + xx / 2) * c;
                        for k in 0..c {
                            dx.data_mut()[dst + k] += g.data()[src + k];
                        }
                    }
                }
                send(*x, dx, grads);
            }
            Op::AvgPool(x, f) => {
                let (h, w, c) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1], s[2])
                };
                let (ow, inv) = (w / f, E::from_f64(1.0 / (f * f) as f64));
                let mut dx = Tensor::zeros(vec![h, w, c]);
                for y in 0..h {
                    for xx in 0..w {
                        let src = ((y / f) * ow + xx / f) * c;
                        let dst = (y * w + xx) * c;
                        for k in 0..c {
                            dx.data_mut()[dst + k] = g.data()[src + k] * inv;
                        }
                    }
                }
                send(*x, dx, grads);
            }
            Op::ConcatChannels(a, b) => {
                let (h, w, ca) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1], s[2])
                };
                let cb = self.value(*b).shape()[2];
                let mut da = Tensor::zeros(vec![h, w, ca]);
                let mut db = Tensor::zeros(vec![h, w, cb]);
                for p in 0..h * w {
                    let base = p * (ca + cb);
                    da.data_mut()[p * ca..(p + 1) * ca]
                        .copy_from_slice(&g.data()[base..base + ca]);
                    db.data_mut()[p * cb..(p + 1) * cb]
                        .copy_from_slice(&g.data()[base + ca..base + ca + cb]);
                }
                send(*a, da, grads);
                send(*b, db, grads);
            }
            Op::Recip(x) => {
                let y = &node.value;
                let dx = Tensor::from_fn(y.shape().to_vec(), |i| {
                    -g.data()[i] * y.data()[i] * y.data()[i]
                });
                send(*x, dx, grads);
            }
            Op::NormalizeVec { x, full_grad } => {
                let xv = self.value(*x);
                let norm = floored_norm(xv);
                let inv = E::ONE / norm;
                if *full_grad {
                    // dx = (g - y (y . g)) / ||x||
                    let y = &node.value;
                    let mut ydotg = E::ZERO;
                    for (a, b) in y.data().iter().zip(g.data()) {
                        ydotg += *a * *b;
                    }
                    let dx = Tensor::from_fn(xv.shape().to_vec(), |i| {
                        (g.data()[i] - y.data()[i] * ydotg) * inv
                    });
                    send(*x, dx, grads);
                } else {
                    send(*x, g.scale(inv), grads);
                }
            }
            Op::BceMean(logits) => {
                let z = self.value(*logits);
                let target = node.aux.as_ref().unwrap();
                let g0 = g.item();
                let inv_n = E::from_f64(1.0 / z.len() as f64);
                let dx = Tensor::from_fn(z.shape().to_vec(), |i| {
                    g0 * (sigmoid_scalar(z.data()[i]) - target.data()[i]) * inv_n
                });
                send(*logits, dx, grads);
            }
            Op::SoftDice(logits, eps) => {
                let z = self.value(*logits);
                let target = node.aux.as_ref().unwrap();
                let dx = soft_dice_vjp(z, target, *eps, g.item());
                send(*logits, dx, grads);
            }
        }
    }
}

fn floored_norm<E: Element>(t: &Tensor<E>) -> E {
    t.frobenius_norm().max(E::from_f64(1e-12))
}

/// Foreground and background soft dice scores from logits.
fn dice_scores<E: Element>(z: &Tensor<E>, target: &Tensor<E>, eps: f64) -> (f64, f64) {
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    let mut sum_pt = 0.0;
    let n = z.len() as f64;
    for (&zv, &tv) in z.data().iter().zip(target.data()) {
        let p = sigmoid_scalar(zv.to_f64());
        let t = tv.to_f64();
        sum_p += p;
        sum_t += t;
        sum_pt += p * t;
    }
    let fg = 2.0 * sum_pt / (sum_p + sum_t + eps);
    // background sums follow from the foreground ones
    let sum_pb = n - sum_p;
    let sum_tb = n - sum_t;
    let sum_ptb = n - sum_p - sum_t + sum_pt;
    let bg = 2.0 * sum_ptb / (sum_pb + sum_tb + eps);
    (fg, bg)
}

fn soft_dice_vjp<E: Element>(z: &Tensor<E>, target: &Tensor<E>, eps: f64, g0: E) -> Tensor<E> {
    let n = z.len() as f64;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    let mut sum_pt = 0.0;
    let probs: Vec<f64> = z.data().iter().map(|&zv| sigmoid_scalar(zv.to_f64())).collect();
    for (&p, &tv) in probs.iter().zip(target.data()) {
        sum_p += p;
        sum_t += tv.to_f64();
        sum_pt += p * tv.to_f64();
    }
    let d_f = sum_p + sum_t + eps;
    let num_f = 2.0 * sum_pt;
    let sum_pb = n - sum_p;
    let sum_tb = n - sum_t;
    let num_b = 2.0 * (n - sum_p - sum_t + sum_pt);
    let d_b = sum_pb + sum_tb + eps;
    Tensor::from_fn(z.shape().to_vec(), |i| {
        let p = probs[i];
        let t = target.data()[i].to_f64();
        // d(score_f)/dp_i and d(score_b)/dp_i by the quotient rule
        let ds_f = (2.0 * t * d_f - num_f) / (d_f * d_f);
        let ds_b = (-2.0 * (1.0 - t) * d_b + num_b) / (d_b * d_b);
        let dl_dp = -0.5 * (ds_f + ds_b);
        E::from_f64(dl_dp * p * (1.0 - p)) * g0
    })
}

/// Shared fused backward for convolution: gradients for input, weight, bias.
fn conv2d_vjp<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &Tensor<E>,
    stride: usize,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let b_dummy = Tensor::zeros(vec![w.shape()[3]]);
    let (h, wd, cin, k, cout) =
        conv2d_check(x, w, &b_dummy, stride).expect("conv vjp shapes");
    let pad = (k - 1) / 2;
    let (oh, ow) = (g.shape()[0], g.shape()[1]);
    let mut dx = Tensor::zeros(vec![h, wd, cin]);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            let gbase = (oy * ow + ox) * cout;
            for co in 0..cout {
                db.data_mut()[co] += g.data()[gbase + co];
            }
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xoff = ((iy as usize) * wd + ix as usize) * cin;
                    let woff = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data()[xoff + ci];
                        for co in 0..cout {
                            let gv = g.data()[gbase + co];
                            dx.data_mut()[xoff + ci] += w.data()[woff + ci * cout + co] * gv;
                            dw.data_mut()[woff + ci * cout + co] += xv * gv;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{phi_scalar, Tensor64};

    fn rand_t(rng: &mut Rng, shape: Vec<usize>) -> Tensor64 {
        Tensor64::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    /// Central finite differences for a scalar function of one parameter
    /// tensor, against the tape gradient; relative error with a floor on
    /// the denominator.
    fn fd_check(
        mut build: impl FnMut(&mut Tape<f64>, Var) -> Var,
        x0: &Tensor64,
    ) -> f64 {
        let eval = |x: &Tensor64, build: &mut dyn FnMut(&mut Tape<f64>, Var) -> Var| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.param(ParamId(0), x.clone());
            let loss = build(&mut tape, xv);
            tape.value(loss).item()
        };
        let mut tape = Tape::new();
        let xv = tape.param(ParamId(0), x0.clone());
        let loss = build(&mut tape, xv);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(ParamId(0)).unwrap().clone();

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp, &mut build) - eval(&xm, &mut build)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(1e-7);
            max_rel = max_rel.max((fd - a).abs() / denom);
        }
        max_rel
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let mut rng = Rng::new(1);
        let x0 = rand_t(&mut rng, vec![6]);
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), x0.clone());
        let sq = tape.dot(x, x);
        let loss = tape.scale(sq, 0.5);
        let grads = tape.backward(loss).unwrap();
        for (g, w) in grads.get(ParamId(0)).unwrap().data().iter().zip(x0.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor64::zeros(vec![2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn delta_write_readout_matches_hand_derived_rank_one_gradient() {
        // S1 = beta v k^T (S0 = 0, unit k); loss = sum(S1 phi(q)).
        // dL/dv = beta (k . phi(q)) * ones
        let mut rng = Rng::new(2);
        let k = {
            let raw = rand_t(&mut rng, vec![4]);
            let n = raw.frobenius_norm();
            raw.scale(1.0 / n)
        };
        let q = rand_t(&mut rng, vec![4]);
        let v0 = rand_t(&mut rng, vec![3]);
        let beta = 0.7;

        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), v0.clone());
        let kc = tape.constant(k.clone());
        let qc = tape.constant(q.clone());
        let vk = tape.outer(v, kc);
        let s1 = tape.scale(vk, beta);
        let phi_q = tape.phi(qc);
        let read = tape.matvec(s1, phi_q);
        let ones = tape.constant(Tensor64::filled(vec![3], 1.0));
        let loss = tape.dot(read, ones);
        let grads = tape.backward(loss).unwrap();

        let k_dot_phi_q: f64 = k
            .data()
            .iter()
            .zip(q.data())
            .map(|(&kv, &qv)| kv * phi_scalar(qv))
            .sum();
        for &g in grads.get(ParamId(0)).unwrap().data() {
            assert!((g - beta * k_dot_phi_q).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_matmul_chain() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let x0 = rand_t(&mut rng, vec![3, 4]);
            let b = rand_t(&mut rng, vec![4, 2]);
            let rel = fd_check(
                |tape, x| {
                    let bc = tape.constant(b.clone());
                    let y = tape.matmul(x, bc);
                    let y2 = tape.mul(y, y);
                    tape.mean(y2)
                },
                &x0,
            );
            assert!(rel <= 1e-4, "matmul rel err {rel}");
        }
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut rng = Rng::new(4);
        for _ in 0..10 {
            let x0 = rand_t(&mut rng, vec![8]);
            let rel = fd_check(
                |tape, x| {
                    let s = tape.sigmoid(x);
                    let p = tape.phi(x);
                    let r = tape.relu(x);
                    let sp = tape.mul(s, p);
                    let all = tape.add(sp, r);
                    tape.mean(all)
                },
                &x0,
            );
            assert!(rel <= 1e-4, "elementwise rel err {rel}");
        }
    }

    #[test]
    fn fd_outer_dot_rows() {
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let x0 = rand_t(&mut rng, vec![2, 5]);
            let w = rand_t(&mut rng, vec![10]);
            let rel = fd_check(
                |tape, x| {
                    let r0 = tape.row(x, 0);
                    let r1 = tape.row(x, 1);
                    let o = tape.outer(r0, r1);
                    let rm = tape.row_mean(o);
                    let cm = tape.col_mean(o);
                    let cat = tape.concat_vec(rm, cm);
                    let wc = tape.constant(w.clone());
                    let stacked = tape.stack_rows(vec![cat, wc]);
                    let m = tape.mul(stacked, stacked);
                    tape.mean(m)
                },
                &x0,
            );
            assert!(rel <= 1e-4, "outer/dot/rows rel err {rel}");
        }
    }

    #[test]
    fn fd_conv_stride1_and_stride2() {
        let mut rng = Rng::new(6);
        for &stride in &[1usize, 2] {
            for _ in 0..5 {
                let x = rand_t(&mut rng, vec![5, 6, 2]);
                let w0 = rand_t(&mut rng, vec![3, 3, 2, 3]);
                let b = rand_t(&mut rng, vec![3]);
                // grad wrt weights
                let rel = fd_check(
                    |tape, wv| {
                        let xc = tape.constant(x.clone());
                        let bc = tape.constant(b.clone());
                        let y = tape.conv2d(xc, wv, bc, stride);
                        let y2 = tape.mul(y, y);
                        tape.mean(y2)
                    },
                    &w0,
                );
                assert!(rel <= 1e-4, "conv w rel err {rel} (stride {stride})");
                // grad wrt input
                let w1 = rand_t(&mut rng, vec![3, 3, 2, 3]);
                let rel = fd_check(
                    |tape, xv| {
                        let wc = tape.constant(w1.clone());
                        let bc = tape.constant(b.clone());
                        let y = tape.conv2d(xv, wc, bc, stride);
                        let y2 = tape.mul(y, y);
                        tape.mean(y2)
                    },
                    &x,
                );
                assert!(rel <= 1e-4, "conv x rel err {rel} (stride {stride})");
            }
        }
    }

    #[test]
    fn fd_spatial_ops() {
        let mut rng = Rng::new(7);
        for _ in 0..5 {
            let x0 = rand_t(&mut rng, vec![4, 4, 2]);
            let other = rand_t(&mut rng, vec![8, 8, 2]);
            let rel = fd_check(
                |tape, x| {
                    let up = tape.upsample2x(x);
                    let oc = tape.constant(other.clone());
                    let cat = tape.concat_channels(up, oc);
                    let down = tape.avg_pool(cat, 2);
                    let sq = tape.mul(down, down);
                    tape.mean(sq)
                },
                &x0,
            );
            assert!(rel <= 1e-4, "spatial rel err {rel}");
        }
    }

    #[test]
    fn fd_recip() {
        let mut rng = Rng::new(12);
        for _ in 0..10 {
            let x0 = Tensor64::from_fn(vec![4], |_| rng.uniform(0.5, 2.0));
            let rel = fd_check(
                |tape, x| {
                    let r = tape.recip(x);
                    let sq = tape.mul(r, r);
                    tape.mean(sq)
                },
                &x0,
            );
            assert!(rel <= 1e-4, "recip rel err {rel}");
        }
    }

    #[test]
    fn fd_normalize_full_gradient() {
        let mut rng = Rng::new(8);
        for _ in 0..10 {
            let x0 = rand_t(&mut rng, vec![5]);
            let w = rand_t(&mut rng, vec![5]);
            let rel = fd_check(
                |tape, x| {
                    let y = tape.normalize_vec(x, true);
                    let wc = tape.constant(w.clone());
                    tape.dot(y, wc)
                },
                &x0,
            );
            assert!(rel <= 1e-4, "normalize rel err {rel}");
        }
    }

    #[test]
    fn fd_losses() {
        let mut rng = Rng::new(9);
        for _ in 0..10 {
            let z0 = rand_t(&mut rng, vec![4, 4, 1]).scale(2.0);
            let target = Tensor64::from_fn(vec![4, 4, 1], |_| {
                if rng.next_f64() < 0.5 {
                    0.0
                } else {
                    1.0
                }
            });
            let rel = fd_check(
                |tape, z| tape.bce_with_logits_mean(z, &target),
                &z0,
            );
            assert!(rel <= 1e-4, "bce rel err {rel}");
            let rel = fd_check(
                |tape, z| tape.soft_dice_loss(z, &target, 1e-6),
                &z0,
            );
            assert!(rel <= 1e-4, "dice rel err {rel}");
        }
    }

    #[test]
    fn fd_mul_scalar_gate_path() {
        let mut rng = Rng::new(10);
        for _ in 0..10 {
            let x0 = rand_t(&mut rng, vec![3]);
            let m = rand_t(&mut rng, vec![4, 3]);
            let rel = fd_check(
                |tape, x| {
                    let mc = tape.constant(m.clone());
                    let pre = tape.matvec(mc, x);
                    let r0 = tape.row(mc, 0);
                    let d = tape.dot(r0, x);
                    let a = tape.sigmoid(d);
                    let scaled = tape.mul_scalar(a, pre);
                    let sq = tape.mul(scaled, scaled);
                    tape.mean(sq)
                },
                &x0,
            );
            assert!(rel <= 1e-4, "mul_scalar rel err {rel}");
        }
    }

    #[test]
    fn parameter_reuse_accumulates_gradients() {
        // same parameter registered twice: gradients must sum
        let mut rng = Rng::new(11);
        let x0 = rand_t(&mut rng, vec![3]);
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), x0.clone());
        let b = tape.param(ParamId(0), x0.clone());
        let s = tape.add(a, b);
        let d = tape.dot(s, s);
        let grads = tape.backward(d).unwrap();
        // d = dot(2x, 2x) = 4 x.x -> dd/dx = 8x
        for (g, x) in grads.get(ParamId(0)).unwrap().data().iter().zip(x0.data()) {
            assert!((g - 8.0 * x).abs() < 1e-10);
        }
    }

    #[test]
    fn bce_closed_form_value() {
        // logits 0 -> p = 0.5 -> BCE = ln 2 per element
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor64::zeros(vec![2, 2, 1]));
        let target = Tensor64::new(vec![2, 2, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = tape.bce_with_logits_mean(z, &target);
        assert!((tape.value(loss).item() - (2.0f64).ln()).abs() < 1e-12);
    }
}
