//! State-update policies for the matrix-form memory.
//!
//! All policies write one (key, value) token into `S` (`C_v x C_k`); keys
//! are L2-normalized before the write so `I - beta k k^T` acts as a true
//! projection blend. With unit `k` and scalar gates `alpha, beta` in (0,1):
//!
//! ```text
//! Baseline     S <- S + v k^T
//! SanityCheck  S <- S - (S k) k^T + v k^T            (hard overwrite)
//! NoAlpha      S <- S (I - beta k k^T) + beta v k^T  (delta rule)
//! NoBeta       S <- alpha S + v k^T
//! Gdr          S <- alpha (S (I - beta k k^T)) + beta v k^T
//! ```
//!
//! The delta rule removes the old association `V_old = S k` for the
//! incoming key and writes the interpolation `beta v + (1 - beta) V_old`
//! back; the decay `alpha` in Gdr additionally forgets the remaining state
//! before the write. Gates are projected per token from a summary of the
//! previous state (concatenated row and column means of `S`).

use crate::attention::MemoryState;
use crate::element::Element;
use crate::tensor::{phi_scalar, sigmoid_scalar, Tensor};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum MemoryError {
    DegenerateKey,
    DimMismatch(String),
    EmptyTrace,
}

impl fmt::Display for MemoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryError::DegenerateKey => write!(f, "zero key cannot be normalized"),
            MemoryError::DimMismatch(m) => write!(f, "dimension mismatch: {m}"),
            MemoryError::EmptyTrace => write!(f, "gate trace is empty"),
        }
    }
}

impl std::error::Error for MemoryError {}

/// Per-token scalar gates, both strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateValues<E> {
    pub alpha: E,
    pub beta: E,
}

/// Linear projection from the state summary to the two gates.
///
/// Bias init puts `sigmoid(b_alpha)` at 0.95 (slow forgetting) and
/// `sigmoid(b_beta)` at 0.5 (even writing).
#[derive(Debug, Clone, PartialEq)]
pub struct GateProjection<E> {
    pub w_alpha: Tensor<E>,
    pub w_beta: Tensor<E>,
    pub b_alpha: E,
    pub b_beta: E,
}

impl<E: Element> GateProjection<E> {
    pub fn init(c_v: usize, c_k: usize) -> Self {
        GateProjection {
            w_alpha: Tensor::zeros(vec![c_v + c_k]),
            w_beta: Tensor::zeros(vec![c_v + c_k]),
            // ln(0.95 / 0.05)
            b_alpha: E::from_f64(2.9444389791664403),
            b_beta: E::ZERO,
        }
    }
}

/// The five state-update strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateStrategy {
    Baseline,
    SanityCheck,
    NoAlpha,
    NoBeta,
    Gdr,
}

impl UpdateStrategy {
    pub const ALL: [UpdateStrategy; 5] = [
        UpdateStrategy::Baseline,
        UpdateStrategy::SanityCheck,
        UpdateStrategy::NoAlpha,
        UpdateStrategy::NoBeta,
        UpdateStrategy::Gdr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UpdateStrategy::Baseline => "baseline",
            UpdateStrategy::SanityCheck => "sanity",
            UpdateStrategy::NoAlpha => "noalpha",
            UpdateStrategy::NoBeta => "nobeta",
            UpdateStrategy::Gdr => "gdr",
        }
    }
}

impl std::str::FromStr for UpdateStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" => Ok(UpdateStrategy::Baseline),
            "sanity" => Ok(UpdateStrategy::SanityCheck),
            "noalpha" => Ok(UpdateStrategy::NoAlpha),
            "nobeta" => Ok(UpdateStrategy::NoBeta),
            "gdr" => Ok(UpdateStrategy::Gdr),
            other => Err(format!(
                "unknown strategy '{other}' (expected baseline|sanity|noalpha|nobeta|gdr)"
            )),
        }
    }
}

/// State summary for the gate projection: row means then column means of S.
pub fn state_summary<E: Element>(state: &MemoryState<E>) -> Tensor<E> {
    let (c_v, c_k) = (state.c_v(), state.c_k());
    let mut out = vec![E::ZERO; c_v + c_k];
    let inv_k = E::from_f64(1.0 / c_k as f64);
    let inv_v = E::from_f64(1.0 / c_v as f64);
    for i in 0..c_v {
        let mut acc = E::ZERO;
        for j in 0..c_k {
            acc += state.s.at2(i, j);
        }
        out[i] = acc * inv_k;
    }
    for j in 0..c_k {
        let mut acc = E::ZERO;
        for i in 0..c_v {
            acc += state.s.at2(i, j);
        }
        out[c_v + j] = acc * inv_v;
    }
    Tensor::new(vec![c_v + c_k], out).expect("summary shape")
}

/// Project gates from the previous state.
pub fn project_gates<E: Element>(
    proj: &GateProjection<E>,
    state: &MemoryState<E>,
) -> GateValues<E> {
    let summary = state_summary(state);
    let dot = |w: &Tensor<E>| -> E {
        let mut acc = E::ZERO;
        for (a, b) in w.data().iter().zip(summary.data().iter()) {
            acc += *a * *b;
        }
        acc
    };
    GateValues {
        alpha: sigmoid_scalar(dot(&proj.w_alpha) + proj.b_alpha),
        beta: sigmoid_scalar(dot(&proj.w_beta) + proj.b_beta),
    }
}

/// L2-normalize a key vector; a zero key is a degenerate-key error.
pub fn normalize_key<E: Element>(k: &Tensor<E>) -> Result<Tensor<E>, MemoryError> {
    let norm = k.frobenius_norm();
    if !(norm > E::from_f64(1e-30)) {
        return Err(MemoryError::DegenerateKey);
    }
    Ok(k.scale(E::ONE / norm))
}

fn check_token<E: Element>(
    state: &MemoryState<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<(), MemoryError> {
    if k.rank() != 1 || k.shape()[0] != state.c_k() || v.rank() != 1 || v.shape()[0] != state.c_v()
    {
        return Err(MemoryError::DimMismatch(format!(
            "k {:?} v {:?} vs state {:?}",
            k.shape(),
            v.shape(),
            state.s.shape()
        )));
    }
    Ok(())
}

/// Delta rule write: `S <- S (I - beta k k^T) + beta v k^T`.
pub fn delta_rule_step<E: Element>(
    state: &MemoryState<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    beta: E,
) -> Result<MemoryState<E>, MemoryError> {
    gdr_step(state, k, v, GateValues { alpha: E::ONE, beta })
}

/// Gated delta rule write: `S <- alpha (S (I - beta k k^T)) + beta v k^T`.
pub fn gdr_step<E: Element>(
    state: &MemoryState<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    gates: GateValues<E>,
) -> Result<MemoryState<E>, MemoryError> {
    check_token(state, k, v)?;
    let k = normalize_key(k)?;
    let (c_v, c_k) = (state.c_v(), state.c_k());
    let sk = state.s.matvec(&k).expect("checked dims");
    let mut next = state.clone();
    for i in 0..c_v {
        for j in 0..c_k {
            let decayed =
                gates.alpha * (state.s.at2(i, j) - gates.beta * sk.data()[i] * k.data()[j]);
            next.s.set2(i, j, decayed + gates.beta * v.data()[i] * k.data()[j]);
        }
    }
    Ok(next)
}

/// Apply one of the five update strategies to a single token.
pub fn apply_strategy<E: Element>(
    strategy: UpdateStrategy,
    state: &MemoryState<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    gates: GateValues<E>,
) -> Result<MemoryState<E>, MemoryError> {
    check_token(state, k, v)?;
    match strategy {
        UpdateStrategy::Gdr => return gdr_step(state, k, v, gates),
        UpdateStrategy::NoAlpha => return gdr_step(state, k, v, GateValues { alpha: E::ONE, beta: gates.beta }),
        _ => {}
    }
    let k = normalize_key(k)?;
    let (c_v, c_k) = (state.c_v(), state.c_k());
    let mut next = state.clone();
    match strategy {
        UpdateStrategy::Baseline => {
            for i in 0..c_v {
                for j in 0..c_k {
                    next.s.set2(i, j, state.s.at2(i, j) + v.data()[i] * k.data()[j]);
                }
            }
        }
        UpdateStrategy::SanityCheck => {
            let sk = state.s.matvec(&k).expect("checked dims");
            for i in 0..c_v {
                for j in 0..c_k {
                    let val = state.s.at2(i, j) - sk.data()[i] * k.data()[j]
                        + v.data()[i] * k.data()[j];
                    next.s.set2(i, j, val);
                }
            }
        }
        UpdateStrategy::NoBeta => {
            for i in 0..c_v {
                for j in 0..c_k {
                    next.s
                        .set2(i, j, gates.alpha * state.s.at2(i, j) + v.data()[i] * k.data()[j]);
                }
            }
        }
        UpdateStrategy::NoAlpha | UpdateStrategy::Gdr => unreachable!(),
    }
    Ok(next)
}

/// Per-pixel readout `S phi(q_p)` for queries `HW x C_k`.
pub fn readout<E: Element>(
    state: &MemoryState<E>,
    q: &Tensor<E>,
) -> Result<Tensor<E>, MemoryError> {
    if q.rank() != 2 || q.shape()[1] != state.c_k() {
        return Err(MemoryError::DimMismatch(format!(
            "queries {:?} vs state C_k {}",
            q.shape(),
            state.c_k()
        )));
    }
    let (hw, c_k, c_v) = (q.shape()[0], state.c_k(), state.c_v());
    let mut out = Tensor::zeros(vec![hw, c_v]);
    for p in 0..hw {
        for cv in 0..c_v {
            let mut acc = E::ZERO;
            for c in 0..c_k {
                acc += state.s.at2(cv, c) * phi_scalar(q.at2(p, c));
            }
            out.set2(p, cv, acc);
        }
    }
    Ok(out)
}

pub const GATE_HIST_BINS: usize = 64;

/// Fixed-bin histograms of a gate trace: gate values over (0,1), their
/// step-to-step differences over [-1,1], and the Pearson correlation of
/// the two difference streams.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStats {
    pub alpha_hist: Vec<u64>,
    pub beta_hist: Vec<u64>,
    pub grad_alpha_hist: Vec<u64>,
    pub grad_beta_hist: Vec<u64>,
    pub grad_correlation: Option<f64>,
}

pub fn gate_statistics<E: Element>(trace: &[GateValues<E>]) -> Result<GateStats, MemoryError> {
    if trace.is_empty() {
        return Err(MemoryError::EmptyTrace);
    }
    let mut alpha_hist = vec![0u64; GATE_HIST_BINS];
    let mut beta_hist = vec![0u64; GATE_HIST_BINS];
    let unit_bin = |v: f64| -> usize {
        ((v * GATE_HIST_BINS as f64) as usize).min(GATE_HIST_BINS - 1)
    };
    for g in trace {
        alpha_hist[unit_bin(g.alpha.to_f64())] += 1;
        beta_hist[unit_bin(g.beta.to_f64())] += 1;
    }
    if trace.len() < 2 {
        // gradients undefined: empty gradient table
        return Ok(GateStats {
            alpha_hist,
            beta_hist,
            grad_alpha_hist: Vec::new(),
            grad_beta_hist: Vec::new(),
            grad_correlation: None,
        });
    }
    let mut grad_alpha_hist = vec![0u64; GATE_HIST_BINS];
    let mut grad_beta_hist = vec![0u64; GATE_HIST_BINS];
    let signed_bin = |v: f64| -> usize {
        let clamped = v.clamp(-1.0, 1.0);
        (((clamped + 1.0) / 2.0 * GATE_HIST_BINS as f64) as usize).min(GATE_HIST_BINS - 1)
    };
    let mut da = Vec::with_capacity(trace.len() - 1);
    let mut db = Vec::with_capacity(trace.len() - 1);
    for w in trace.windows(2) {
        let ga = w[1].alpha.to_f64() - w[0].alpha.to_f64();
        let gb = w[1].beta.to_f64() - w[0].beta.to_f64();
        grad_alpha_hist[signed_bin(ga)] += 1;
        grad_beta_hist[signed_bin(gb)] += 1;
        da.push(ga);
        db.push(gb);
    }
    Ok(GateStats {
        alpha_hist,
        beta_hist,
        grad_alpha_hist,
        grad_beta_hist,
        grad_correlation: pearson(&da, &db),
    })
}

/// Pearson correlation; `None` when undefined (length < 2 or zero variance).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// `gatestats` CSV: step, alpha, beta, grad_alpha, grad_beta. Gradient
/// columns hold the step-to-step difference; the first row carries zeros.
pub fn write_gatestats_csv<E: Element>(
    path: &Path,
    trace: &[GateValues<E>],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,alpha,beta,grad_alpha,grad_beta")?;
    let mut prev: Option<(f64, f64)> = None;
    for (i, g) in trace.iter().enumerate() {
        let (a, b) = (g.alpha.to_f64(), g.beta.to_f64());
        let (ga, gb) = match prev {
            Some((pa, pb)) => (a - pa, b - pb),
            None => (0.0, 0.0),
        };
        writeln!(w, "{i},{a:.6},{b:.6},{ga:.6},{gb:.6}")?;
        prev = Some((a, b));
    }
    Ok(())
}
