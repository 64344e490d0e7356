//! Dense row-major tensors and the primitive kernels built on them.
//!
//! Everything is generic over [`Element`] so the same code runs in f32 for
//! deployment and f64 for oracles and gradient checks. Layout conventions:
//!
//! - matrix `m x n`: index `(i, j) = i*n + j`
//! - feature map `H x W x C`: index `(y, x, c) = (y*W + x)*C + c`
//! - conv kernel `k x k x Cin x Cout`: index `((ky*k + kx)*Cin + ci)*Cout + co`

use crate::element::Element;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    InvalidShape {
        op: &'static str,
        detail: String,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            TensorError::InvalidShape { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "new",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::InvalidShape {
                op: "new",
                detail: format!("shape {shape:?} implies {expected} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Single element of a `[1]`-shaped tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> E {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: E) {
        self.data[i * self.shape[1] + j] = v;
    }

    #[inline]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> E {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    #[inline]
    pub fn set3(&mut self, y: usize, x: usize, c: usize, v: E) {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c] = v;
    }

    /// Same storage reinterpreted under a new shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| F::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip("hadamard", other, |a, b| a * b)
    }

    pub fn scale(&self, c: E) -> Self {
        self.map(|x| x * c)
    }

    pub fn frobenius_norm(&self) -> E {
        let mut acc = E::ZERO;
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn zip(&self, op: &'static str, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Standard matrix product `(m x k) . (k x n)`.
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (o, &b) in dst.iter_mut().zip(row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Matrix-vector product `(m x n) . (n)`.
    pub fn matvec(&self, v: &Self) -> Result<Self, TensorError> {
        if self.rank() != 2 || v.rank() != 1 || self.shape[1] != v.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![E::ZERO; m];
        for i in 0..m {
            let mut acc = E::ZERO;
            for j in 0..n {
                acc += self.data[i * n + j] * v.data[j];
            }
            out[i] = acc;
        }
        Ok(Tensor {
            shape: vec![m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Row-wise softmax of a matrix; rows sum to 1. Stable under large
    /// inputs (row max is subtracted before exponentiation).
    pub fn softmax_rows(&self) -> Result<Self, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "softmax_rows",
                detail: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &x in row {
                mx = mx.max(x);
            }
            let mut sum = E::ZERO;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / sum;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid_scalar)
    }

    pub fn phi(&self) -> Self {
        self.map(phi_scalar)
    }

    /// Per-channel spatial mean of an `H x W x C` map.
    ///
    /// Accumulates in f64 so that `gap(expand(v)) == v` holds exactly in
    /// 32-bit mode.
    pub fn gap_spatial(&self) -> Result<Self, TensorError> {
        if self.rank() != 3 {
            return Err(TensorError::InvalidShape {
                op: "gap_spatial",
                detail: format!("expected H x W x C, got {:?}", self.shape),
            });
        }
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut acc = vec![0.0f64; c];
        for p in 0..h * w {
            for (k, a) in acc.iter_mut().enumerate() {
                *a += self.data[p * c + k].to_f64();
            }
        }
        let inv = 1.0 / (h * w) as f64;
        Ok(Tensor {
            shape: vec![c],
            data: acc.iter().map(|&a| E::from_f64(a * inv)).collect(),
        })
    }
}

/// Numerically safe logistic function, strictly inside (0, 1).
pub fn sigmoid_scalar<E: Element>(x: E) -> E {
    // clamp keeps the output representable strictly between 0 and 1 in f32
    let cap = E::from_f64(15.0);
    let x = x.max(-cap).min(cap);
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

/// Positive kernel feature map: `x + 1` for `x >= 0`, `exp(x)` for `x < 0`.
/// Strictly positive, monotone, and C1 at the origin. The exponent is
/// floored at -80 so the output never underflows to zero.
pub fn phi_scalar<E: Element>(x: E) -> E {
    if x >= E::ZERO {
        x + E::ONE
    } else {
        x.max(E::from_f64(-80.0)).exp()
    }
}

/// Derivative of [`phi_scalar`].
pub fn phi_prime_scalar<E: Element>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE
    } else {
        x.max(E::from_f64(-80.0)).exp()
    }
}

/// Broadcast a per-channel vector back to an `H x W x C` map.
pub fn expand_spatial<E: Element>(v: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>, TensorError> {
    if v.rank() != 1 {
        return Err(TensorError::InvalidShape {
            op: "expand_spatial",
            detail: format!("expected rank-1 channel vector, got {:?}", v.shape()),
        });
    }
    let c = v.shape()[0];
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        data.extend_from_slice(v.data());
    }
    Tensor::new(vec![h, w, c], data)
}

/// Same-size 2D convolution: odd kernel, zero padding `(k-1)/2`, stride 1.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<Tensor<E>, TensorError> {
    conv2d_stride(x, w, b, 1)
}

/// 2D convolution with stride; zero padding `(k-1)/2`, output `ceil(H/s) x ceil(W/s)`.
pub fn conv2d_stride<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
) -> Result<Tensor<E>, TensorError> {
    let (h, wd, cin, k, cout) = conv2d_check(x, w, b, stride)?;
    let pad = (k - 1) / 2;
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let mut out = vec![E::ZERO; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * cout;
            out[base..base + cout].copy_from_slice(b.data());
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
                        let wrow = &w.data()[woff + ci * cout..woff + (ci + 1) * cout];
                        let dst = &mut out[base..base + cout];
                        for (o, &wv) in dst.iter_mut().zip(wrow.iter()) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

pub(crate) fn conv2d_check<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize), TensorError> {
    if x.rank() != 3 || w.rank() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, k2, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if k != k2 || k % 2 == 0 {
        return Err(TensorError::InvalidShape {
            op: "conv2d",
            detail: format!("kernel must be square with odd size, got {k}x{k2}"),
        });
    }
    if wcin != cin || b.rank() != 1 || b.shape()[0] != cout {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidShape {
            op: "conv2d",
            detail: "stride must be >= 1".into(),
        });
    }
    Ok((h, wd, cin, k, cout))
}

/// Average pooling by an integer factor; spatial dims must divide evenly.
pub fn avg_pool<E: Element>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>, TensorError> {
    if x.rank() != 3 || x.shape()[0] % factor != 0 || x.shape()[1] % factor != 0 {
        return Err(TensorError::InvalidShape {
            op: "avg_pool",
            detail: format!("cannot pool {:?} by {factor}", x.shape()),
        });
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / factor, w / factor);
    let inv = E::from_f64(1.0 / (factor * factor) as f64);
    let mut out = vec![E::ZERO; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..factor {
                for dx in 0..factor {
                    let src = ((oy * factor + dy) * w + ox * factor + dx) * c;
                    let dst = (oy * ow + ox) * c;
                    for k in 0..c {
                        out[dst + k] += x.data()[src + k];
                    }
                }
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample2x<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    if x.rank() != 3 {
        return Err(TensorError::InvalidShape {
            op: "upsample2x",
            detail: format!("expected H x W x C, got {:?}", x.shape()),
        });
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![E::ZERO; 4 * h * w * c];
    for y in 0..2 * h {
        for x_ in 0..2 * w {
            let src = ((y / 2) * w + x_ / 2) * c;
            let dst = (y * 2 * w + x_) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::new(vec![2 * h, 2 * w, c], out)
}
