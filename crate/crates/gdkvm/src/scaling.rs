//! Sequence-length cost measurement: quadratic softmax matching against
//! the recurrent matrix-state form, with log-log slope fits.
//!
//! Each timing processes a full sequence (all frames in order). Short
//! runs are repeated in an inner loop until a measurement spans at least
//! a couple of milliseconds; the best of `reps` outer repetitions is
//! kept, which is robust against scheduler noise.

use crate::attention::{linear_matching_recurrent, softmax_matching, MemoryState, QKVSequence};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::hint::black_box;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub frames: usize,
    pub softmax_secs: f64,
    pub recurrent_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub softmax_slope: f64,
    pub recurrent_slope: f64,
}

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

fn random_sequence(rng: &mut Rng, t: usize, hw: usize, c_k: usize, c_v: usize) -> QKVSequence<f32> {
    let mk = |rng: &mut Rng, r: usize, c: usize| {
        Tensor::<f32>::from_fn(vec![r, c], |_| rng.uniform(-1.0, 1.0) as f32)
    };
    let queries = (0..t).map(|_| mk(rng, hw, c_k)).collect();
    let keys = (0..t).map(|_| mk(rng, hw, c_k)).collect();
    let values = (0..t).map(|_| mk(rng, hw, c_v)).collect();
    QKVSequence::new(queries, keys, values).expect("bench sequence")
}

fn run_softmax(seq: &QKVSequence<f32>) -> f32 {
    let mut sink = 0.0f32;
    for t in 1..=seq.frames() {
        let out = softmax_matching(seq, t).expect("bench softmax");
        sink += out.data()[0];
    }
    sink
}

fn run_recurrent(seq: &QKVSequence<f32>) -> f32 {
    let mut state = MemoryState::zeros(seq.c_v(), seq.c_k(), true);
    let mut sink = 0.0f32;
    for t in 0..seq.frames() {
        let (next, out) =
            linear_matching_recurrent(&state, seq.keys(t), seq.values(t), seq.queries(t), true)
                .expect("bench recurrent");
        state = next;
        sink += out.data()[0];
    }
    sink
}

fn time_best_of(reps: usize, mut f: impl FnMut() -> f32) -> f64 {
    // calibrate an inner repeat count so one measurement spans ~10 ms;
    // uniform measurement spans keep cache warmth comparable across
    // sequence lengths
    let probe = Instant::now();
    black_box(f());
    let once = probe.elapsed().as_secs_f64();
    let inner = ((1e-2 / once.max(1e-9)).ceil() as usize).clamp(1, 50_000);
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        for _ in 0..inner {
            black_box(f());
        }
        best = best.min(start.elapsed().as_secs_f64() / inner as f64);
    }
    best
}

/// Measure both matching forms over the given sequence lengths.
pub fn measure_scaling(
    lengths: &[usize],
    hw: usize,
    c_k: usize,
    c_v: usize,
    reps: usize,
    seed: u64,
) -> ScalingReport {
    let mut rng = Rng::new(seed);
    // spin for a moment so clock ramp-up does not skew the small-T points
    {
        let warm = random_sequence(&mut rng, lengths.iter().copied().max().unwrap_or(8), hw, c_k, c_v);
        let start = Instant::now();
        while start.elapsed().as_secs_f64() < 0.3 {
            black_box(run_recurrent(&warm));
            black_box(run_softmax(&warm));
        }
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let seq = random_sequence(&mut rng, t, hw, c_k, c_v);
        let softmax_secs = time_best_of(reps, || run_softmax(&seq));
        let recurrent_secs = time_best_of(reps, || run_recurrent(&seq));
        rows.push(ScalingRow { frames: t, softmax_secs, recurrent_secs });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.frames as f64).collect();
    let soft: Vec<f64> = rows.iter().map(|r| r.softmax_secs).collect();
    let rec: Vec<f64> = rows.iter().map(|r| r.recurrent_secs).collect();
    ScalingReport {
        softmax_slope: loglog_slope(&xs, &soft),
        recurrent_slope: loglog_slope(&xs, &rec),
        rows,
    }
}

/// `bench` CSV: per-length times then the fitted slopes.
pub fn write_scaling_csv(path: &std::path::Path, report: &ScalingReport) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "frames,softmax_secs,recurrent_secs")?;
    for r in &report.rows {
        writeln!(w, "{},{:.9},{:.9}", r.frames, r.softmax_secs, r.recurrent_secs)?;
    }
    writeln!(w, "slope,{:.4},{:.4}", report.softmax_slope, report.recurrent_slope)?;
    Ok(())
}
