//! The three matching formulations over a growing key-value memory, plus
//! their cross-form equivalence hooks.
//!
//! For per-frame keys/queries `HW x C_k` and values `HW x C_v`:
//!
//! - quadratic softmax matching: every query pixel attends over all `t*HW`
//!   stored positions with exp-dot weights, cost O(t^2) per sequence,
//! - parallel linear matching: the exp kernel is replaced by a positive
//!   feature map `phi`, and the weighted sum factors through
//!   `S_t = sum_i v_i phi(k_i)^T` and `Z_t = sum_i phi(k_i)`, recomputed
//!   from scratch at each frame,
//! - recurrent matching: the same `S_t`/`Z_t` carried as a running
//!   matrix-form state, cost O(t).
//!
//! Per query pixel the readout is `S phi(q) / (Z^T phi(q))`; the
//! denominator is optional in the recurrent form (`normalize` flag) because
//! the plain state-form recurrence drops it.

use crate::element::Element;
use crate::tensor::{phi_scalar, Tensor};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionError {
    FrameOutOfRange { t: usize, frames: usize },
    DimMismatch(String),
    DegenerateNormalizer { pixel: usize },
    EmptySequence,
}

impl fmt::Display for AttentionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionError::FrameOutOfRange { t, frames } => {
                write!(f, "frame index {t} outside 1..={frames}")
            }
            AttentionError::DimMismatch(m) => write!(f, "dimension mismatch: {m}"),
            AttentionError::DegenerateNormalizer { pixel } => {
                write!(f, "non-positive readout normalizer at pixel {pixel}")
            }
            AttentionError::EmptySequence => write!(f, "sequence has no frames"),
        }
    }
}

impl std::error::Error for AttentionError {}

/// Per-frame query/key/value tensors with shared dimensions.
#[derive(Debug, Clone)]
pub struct QKVSequence<E> {
    queries: Vec<Tensor<E>>,
    keys: Vec<Tensor<E>>,
    values: Vec<Tensor<E>>,
}

impl<E: Element> QKVSequence<E> {
    pub fn new(
        queries: Vec<Tensor<E>>,
        keys: Vec<Tensor<E>>,
        values: Vec<Tensor<E>>,
    ) -> Result<Self, AttentionError> {
        if keys.is_empty() || queries.len() != keys.len() || values.len() != keys.len() {
            return Err(AttentionError::EmptySequence);
        }
        let hw = keys[0].shape()[0];
        let c_k = keys[0].shape()[1];
        let c_v = values[0].shape()[1];
        for t in 0..keys.len() {
            let ok = queries[t].shape() == [hw, c_k]
                && keys[t].shape() == [hw, c_k]
                && values[t].shape() == [hw, c_v];
            if !ok {
                return Err(AttentionError::DimMismatch(format!(
                    "frame {t}: q {:?} k {:?} v {:?}",
                    queries[t].shape(),
                    keys[t].shape(),
                    values[t].shape()
                )));
            }
            if !(queries[t].all_finite() && keys[t].all_finite() && values[t].all_finite()) {
                return Err(AttentionError::DimMismatch(format!("frame {t}: non-finite entries")));
            }
        }
        Ok(QKVSequence { queries, keys, values })
    }

    pub fn frames(&self) -> usize {
        self.keys.len()
    }

    pub fn hw(&self) -> usize {
        self.keys[0].shape()[0]
    }

    pub fn c_k(&self) -> usize {
        self.keys[0].shape()[1]
    }

    pub fn c_v(&self) -> usize {
        self.values[0].shape()[1]
    }

    pub fn queries(&self, t: usize) -> &Tensor<E> {
        &self.queries[t]
    }

    pub fn keys(&self, t: usize) -> &Tensor<E> {
        &self.keys[t]
    }

    pub fn values(&self, t: usize) -> &Tensor<E> {
        &self.values[t]
    }
}

/// Matrix-form recurrent memory: `S` is `C_v x C_k`, `Z` the optional
/// normalizer vector, both accumulated over all frames seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<E> {
    pub s: Tensor<E>,
    pub z: Option<Tensor<E>>,
    pub frame_index: usize,
}

impl<E: Element> MemoryState<E> {
    pub fn zeros(c_v: usize, c_k: usize, with_normalizer: bool) -> Self {
        MemoryState {
            s: Tensor::zeros(vec![c_v, c_k]),
            z: with_normalizer.then(|| Tensor::zeros(vec![c_k])),
            frame_index: 0,
        }
    }

    pub fn c_v(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn c_k(&self) -> usize {
        self.s.shape()[1]
    }
}

fn check_frame<E: Element>(seq: &QKVSequence<E>, t: usize) -> Result<(), AttentionError> {
    if t < 1 || t > seq.frames() {
        return Err(AttentionError::FrameOutOfRange { t, frames: seq.frames() });
    }
    Ok(())
}

/// Quadratic softmax matching: frame `t` (1-based) attends over all
/// `t*HW` stored key/value rows.
pub fn softmax_matching<E: Element>(
    seq: &QKVSequence<E>,
    t: usize,
) -> Result<Tensor<E>, AttentionError> {
    check_frame(seq, t)?;
    let (hw, c_k, c_v) = (seq.hw(), seq.c_k(), seq.c_v());
    let mem = t * hw;
    let q = seq.queries(t - 1);
    let mut out = Tensor::zeros(vec![hw, c_v]);
    let mut scores = vec![E::ZERO; mem];
    for p in 0..hw {
        // scores over every stored position, then a stable softmax
        let mut mx = E::from_f64(f64::NEG_INFINITY);
        for i in 0..t {
            let keys = seq.keys(i);
            for m in 0..hw {
                let mut dot = E::ZERO;
                for c in 0..c_k {
                    dot += keys.at2(m, c) * q.at2(p, c);
                }
                scores[i * hw + m] = dot;
                mx = mx.max(dot);
            }
        }
        let mut denom = E::ZERO;
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            denom += *s;
        }
        for i in 0..t {
            let values = seq.values(i);
            for m in 0..hw {
                let w = scores[i * hw + m] / denom;
                for c in 0..c_v {
                    let cur = out.at2(p, c);
                    out.set2(p, c, cur + w * values.at2(m, c));
                }
            }
        }
    }
    Ok(out)
}

/// Linear matching by explicit summation over history: builds
/// `S_t = sum v phi(k)^T` and `Z_t = sum phi(k)` from scratch, then reads
/// out `S phi(q) / (Z^T phi(q))` per query pixel.
pub fn linear_matching_parallel<E: Element>(
    seq: &QKVSequence<E>,
    t: usize,
) -> Result<Tensor<E>, AttentionError> {
    check_frame(seq, t)?;
    let (hw, c_k, c_v) = (seq.hw(), seq.c_k(), seq.c_v());
    let mut s = Tensor::zeros(vec![c_v, c_k]);
    let mut z = Tensor::zeros(vec![c_k]);
    for i in 0..t {
        accumulate_frame(&mut s, &mut z, seq.keys(i), seq.values(i));
    }
    let q = seq.queries(t - 1);
    let mut out = Tensor::zeros(vec![hw, c_v]);
    let mut phi_q = vec![E::ZERO; c_k];
    for p in 0..hw {
        for (c, slot) in phi_q.iter_mut().enumerate() {
            *slot = phi_scalar(q.at2(p, c));
        }
        let mut denom = E::ZERO;
        for c in 0..c_k {
            denom += z.data()[c] * phi_q[c];
        }
        if !(denom > E::ZERO) || !denom.is_finite() {
            return Err(AttentionError::DegenerateNormalizer { pixel: p });
        }
        for cv in 0..c_v {
            let mut num = E::ZERO;
            for c in 0..c_k {
                num += s.at2(cv, c) * phi_q[c];
            }
            out.set2(p, cv, num / denom);
        }
    }
    Ok(out)
}

/// Diagnostic form of linear matching: the similarity between a stored key
/// and a query is supplied as a closure and the weighted sum over history
/// is evaluated directly, without the factored state. With
/// `sim = exp(dot)` this reproduces [`softmax_matching`]; with
/// `sim = phi(k)^T phi(q)` it reproduces [`linear_matching_parallel`].
pub fn linear_matching_weighted<E: Element>(
    seq: &QKVSequence<E>,
    t: usize,
    sim: impl Fn(&[E], &[E]) -> E,
) -> Result<Tensor<E>, AttentionError> {
    check_frame(seq, t)?;
    let (hw, c_k, c_v) = (seq.hw(), seq.c_k(), seq.c_v());
    let q = seq.queries(t - 1);
    let mut out = Tensor::zeros(vec![hw, c_v]);
    let mut qrow = vec![E::ZERO; c_k];
    let mut krow = vec![E::ZERO; c_k];
    for p in 0..hw {
        for c in 0..c_k {
            qrow[c] = q.at2(p, c);
        }
        let mut denom = E::ZERO;
        let mut num = vec![E::ZERO; c_v];
        for i in 0..t {
            let keys = seq.keys(i);
            let values = seq.values(i);
            for m in 0..hw {
                for c in 0..c_k {
                    krow[c] = keys.at2(m, c);
                }
                let w = sim(&krow, &qrow);
                denom += w;
                for c in 0..c_v {
                    num[c] += w * values.at2(m, c);
                }
            }
        }
        if !(denom > E::ZERO) || !denom.is_finite() {
            return Err(AttentionError::DegenerateNormalizer { pixel: p });
        }
        for c in 0..c_v {
            out.set2(p, c, num[c] / denom);
        }
    }
    Ok(out)
}

/// One recurrent step: fold a frame's keys/values into the running state,
/// then read out with the frame's queries. Readout divides by
/// `Z^T phi(q)` only when `normalize` is set (the plain state-form
/// recurrence omits the denominator).
pub fn linear_matching_recurrent<E: Element>(
    state: &MemoryState<E>,
    keys: &Tensor<E>,
    values: &Tensor<E>,
    queries: &Tensor<E>,
    normalize: bool,
) -> Result<(MemoryState<E>, Tensor<E>), AttentionError> {
    let (c_v, c_k) = (state.c_v(), state.c_k());
    if keys.rank() != 2 || keys.shape()[1] != c_k {
        return Err(AttentionError::DimMismatch(format!(
            "keys {:?} vs state C_k {c_k}",
            keys.shape()
        )));
    }
    let hw = keys.shape()[0];
    if values.shape() != [hw, c_v] || queries.shape() != [hw, c_k] {
        return Err(AttentionError::DimMismatch(format!(
            "values {:?} / queries {:?} vs HW {hw}, C_v {c_v}, C_k {c_k}",
            values.shape(),
            queries.shape()
        )));
    }
    if normalize && state.z.is_none() {
        return Err(AttentionError::DimMismatch(
            "normalize requested but state has no Z".into(),
        ));
    }
    let mut next = state.clone();
    {
        let mut z_holder = Tensor::zeros(vec![c_k]);
        let z_ref = next.z.as_mut().unwrap_or(&mut z_holder);
        accumulate_frame(&mut next.s, z_ref, keys, values);
    }
    next.frame_index = state.frame_index + 1;

    let mut out = Tensor::zeros(vec![hw, c_v]);
    let mut phi_q = vec![E::ZERO; c_k];
    for p in 0..hw {
        for (c, slot) in phi_q.iter_mut().enumerate() {
            *slot = phi_scalar(queries.at2(p, c));
        }
        let denom = if normalize {
            let z = next.z.as_ref().unwrap();
            let mut d = E::ZERO;
            for c in 0..c_k {
                d += z.data()[c] * phi_q[c];
            }
            if !(d > E::ZERO) || !d.is_finite() {
                return Err(AttentionError::DegenerateNormalizer { pixel: p });
            }
            d
        } else {
            E::ONE
        };
        for cv in 0..c_v {
            let mut num = E::ZERO;
            for c in 0..c_k {
                num += next.s.at2(cv, c) * phi_q[c];
            }
            out.set2(p, cv, num / denom);
        }
    }
    Ok((next, out))
}

/// Cross-form equivalence harness: random instances with `T <= max_t`,
/// `HW <= max_hw`, channel widths up to 8, folded through the recurrent
/// form with the normalizer enabled and compared frame-by-frame against
/// the parallel form in 32-bit. Returns the maximum absolute deviation.
pub fn equivalence_max_deviation(trials: usize, seed: u64, max_t: usize, max_hw: usize) -> f64 {
    let mut rng = crate::rng::Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let t = 1 + rng.next_below(max_t as u64) as usize;
        let hw = 1 + rng.next_below(max_hw as u64) as usize;
        let c_k = 1 + rng.next_below(8) as usize;
        let c_v = 1 + rng.next_below(8) as usize;
        let mk = |rng: &mut crate::rng::Rng, r: usize, c: usize| {
            Tensor::<f32>::from_fn(vec![r, c], |_| rng.uniform(-1.0, 1.0) as f32)
        };
        let queries: Vec<_> = (0..t).map(|_| mk(&mut rng, hw, c_k)).collect();
        let keys: Vec<_> = (0..t).map(|_| mk(&mut rng, hw, c_k)).collect();
        let values: Vec<_> = (0..t).map(|_| mk(&mut rng, hw, c_v)).collect();
        let seq = QKVSequence::new(queries, keys, values).expect("random sequence");
        let mut state = MemoryState::<f32>::zeros(c_v, c_k, true);
        for frame in 0..t {
            let (next, out) = linear_matching_recurrent(
                &state,
                seq.keys(frame),
                seq.values(frame),
                seq.queries(frame),
                true,
            )
            .expect("recurrent step");
            state = next;
            let reference = linear_matching_parallel(&seq, frame + 1).expect("parallel form");
            for (a, b) in out.data().iter().zip(reference.data()) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    }
    worst
}

/// `S += sum_p v_p phi(k_p)^T`, `Z += sum_p phi(k_p)`, pixels in raster order.
fn accumulate_frame<E: Element>(
    s: &mut Tensor<E>,
    z: &mut Tensor<E>,
    keys: &Tensor<E>,
    values: &Tensor<E>,
) {
    let hw = keys.shape()[0];
    let c_k = keys.shape()[1];
    let c_v = values.shape()[1];
    for p in 0..hw {
        for c in 0..c_k {
            let pk = phi_scalar(keys.at2(p, c));
            z.data_mut()[c] += pk;
            for cv in 0..c_v {
                let cur = s.at2(cv, c);
                s.set2(cv, c, cur + values.at2(p, cv) * pk);
            }
        }
    }
}
