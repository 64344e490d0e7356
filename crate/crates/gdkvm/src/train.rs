//! Training loop, evaluation harness, and the strategy/component
//! ablation driver over the synthetic benchmark.
//!
//! Supervision mirrors sparse key-frame annotation: only the first and
//! last frames contribute to the loss. Evaluation scores every frame of
//! held-out sequences with overlap and surface metrics. All randomness
//! flows from the run seed through named substreams, so a run is
//! reproducible bit-for-bit; worker threads (`GDKVM_THREADS`) change
//! wall time only.

use crate::io::{read_checkpoint, write_checkpoint, IoError};
use crate::memory::{GateValues, UpdateStrategy};
use crate::metrics::{dice, iou, surface_distances_spaced};
use crate::model::{
    infer_masks, loss_and_gradients, ModelConfig, ModelError, ToyModel,
};
use crate::optim::{clip_global_norm, AdamW};
use crate::rng::Rng;
use crate::synth::{augment, generate, mask_to_tensor, SyntheticSpec, SynthError};
use crate::tensor::Tensor;
use std::fmt;
use std::path::{Path, PathBuf};

// rng substream tags
const STREAM_DATA: u64 = 1;
const STREAM_AUG: u64 = 2;
const STREAM_EVAL: u64 = 3;

#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    Synth(SynthError),
    Io(IoError),
    Diverged { step: usize, loss: f64 },
    BadConfig(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Synth(e) => write!(f, "{e}"),
            TrainError::Io(e) => write!(f, "{e}"),
            TrainError::Diverged { step, loss } => {
                write!(f, "training diverged at step {step}: loss {loss}")
            }
            TrainError::BadConfig(m) => write!(f, "bad training config: {m}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<SynthError> for TrainError {
    fn from(e: SynthError) -> Self {
        TrainError::Synth(e)
    }
}

impl From<IoError> for TrainError {
    fn from(e: IoError) -> Self {
        TrainError::Io(e)
    }
}

/// Full run description; see `Default` for the desk-scale settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub resolution: usize,
    pub frames: usize,
    pub c_k: usize,
    pub c_v: usize,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub strategy: UpdateStrategy,
    pub kpff: bool,
    pub normalize: bool,
    pub augment: bool,
    pub speckle: f64,
    pub drift: f64,
    pub amp: f64,
    pub eval_every: usize,
    pub eval_sequences: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 300,
            batch: 4,
            resolution: 64,
            frames: 10,
            c_k: 16,
            c_v: 16,
            hidden: 8,
            lr: 7e-3,
            weight_decay: 0.01,
            clip: 3.0,
            strategy: UpdateStrategy::Gdr,
            kpff: true,
            normalize: false,
            augment: true,
            speckle: 0.6,
            drift: 0.4,
            amp: 0.3,
            eval_every: 50,
            eval_sequences: 8,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// The default ablation benchmark: small enough that the six-variant,
    /// five-seed suite fits a CPU budget, hard enough (speckle, drift,
    /// one-quarter-period contraction sweep, look-alike distractor) that
    /// update strategies separate.
    pub fn ablation_benchmark() -> Self {
        TrainConfig {
            steps: 800,
            batch: 2,
            resolution: 32,
            frames: 8,
            c_k: 12,
            c_v: 12,
            hidden: 6,
            lr: 5e-3,
            speckle: 0.7,
            drift: 0.5,
            amp: 0.35,
            eval_every: 0,
            eval_sequences: 8,
            ..TrainConfig::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            resolution: self.resolution,
            c_k: self.c_k,
            c_v: self.c_v,
            hidden: self.hidden,
            kpff: self.kpff,
            normalize_readout: self.normalize,
            full_norm_grad: false,
        }
    }

    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            frames: self.frames,
            resolution: self.resolution,
            axis_a: self.resolution as f64 * 0.20,
            axis_b: self.resolution as f64 * 0.14,
            pulsation_amp: self.amp,
            // one quarter period: the sequence sweeps from the base shape
            // at the first frame to the extreme at the last, like an
            // end-diastole to end-systole clip
            pulsation_period: 4.0 * (self.frames.max(2) as f64 - 1.0),
            speckle: self.speckle,
            drift: self.drift,
            seed,
        }
    }

    pub fn supervised_frames(&self) -> Vec<usize> {
        if self.frames == 1 {
            vec![0]
        } else {
            vec![0, self.frames - 1]
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch == 0 {
            return Err(TrainError::BadConfig("batch must be >= 1".into()));
        }
        if self.lr <= 0.0 || self.clip <= 0.0 {
            return Err(TrainError::BadConfig("lr and clip must be positive".into()));
        }
        self.model_config().validate()?;
        self.synthetic_spec(0).validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sequence: usize,
    pub frame: usize,
    pub dice: f64,
    pub iou: f64,
    /// NaN when a mask is empty and the surface metrics are undefined
    pub hd: f64,
    pub asd: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hd: f64,
    pub mean_asd: f64,
}

pub struct TrainResult {
    pub model: ToyModel<f32>,
    pub loss_trace: Vec<f64>,
    /// per-step mean gates of the first batch element
    pub gate_trace: Vec<GateValues<f64>>,
    pub eval_trace: Vec<(usize, f64)>,
    pub final_eval: EvalSummary,
}

/// Train a model from scratch (or from `config.checkpoint`) on freshly
/// generated synthetic sequences.
pub fn train(config: &TrainConfig) -> Result<TrainResult, TrainError> {
    config.validate()?;
    let mut model: ToyModel<f32> = ToyModel::init(config.model_config(), config.seed)?;
    if let Some(path) = &config.checkpoint {
        let entries = read_checkpoint(path)?;
        model
            .params
            .load_checkpoint_entries(&entries)
            .map_err(TrainError::BadConfig)?;
    }
    let mut opt = AdamW::new(&model.params.shapes(), config.lr, config.weight_decay);
    let base = Rng::new(config.seed);
    let supervised = config.supervised_frames();

    let mut loss_trace = Vec::with_capacity(config.steps);
    let mut gate_trace = Vec::with_capacity(config.steps);
    let mut eval_trace = Vec::new();

    // linear learning-rate warmup over the first tenth of the run guards
    // against early divergence while the state scale settles
    let warmup = (config.steps / 10).max(1);

    for step in 0..config.steps {
        opt.lr = if step < warmup {
            config.lr * (step + 1) as f64 / warmup as f64
        } else {
            config.lr
        };
        let mut grad_acc: Option<Vec<Tensor<f32>>> = None;
        let mut loss_acc = 0.0;
        let mut first_gates: Option<Vec<GateValues<f64>>> = None;
        for b in 0..config.batch {
            let sample_seed = base
                .split(STREAM_DATA)
                .split(step as u64)
                .split(b as u64)
                .seed();
            let mut sample = generate(&config.synthetic_spec(sample_seed))?;
            if config.augment {
                let mut aug_rng = base.split(STREAM_AUG).split(step as u64).split(b as u64);
                sample = augment(&sample, &mut aug_rng);
            }
            let frames = sample.frames.clone();
            let first_mask = mask_to_tensor::<f32>(&sample.masks[0]);
            let truth: Vec<Tensor<f32>> = sample.masks.iter().map(mask_to_tensor).collect();
            let (loss, grads, gates) = loss_and_gradients(
                &model,
                config.strategy,
                &frames,
                &first_mask,
                &truth,
                &supervised,
            )?;
            loss_acc += loss;
            if first_gates.is_none() {
                first_gates = Some(gates);
            }
            let dense = grads.dense(&model.params.shapes());
            grad_acc = Some(match grad_acc {
                None => dense,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(dense.iter()) {
                        *a = a.add(g).expect("grad shapes");
                    }
                    acc
                }
            });
        }
        let mut grads = grad_acc.expect("batch >= 1");
        let inv_batch = 1.0 / config.batch as f32;
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= inv_batch;
            }
        }
        let mean_loss = loss_acc / config.batch as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::Diverged { step, loss: mean_loss });
        }
        clip_global_norm(&mut grads, config.clip);
        opt.step(&mut model.params, &grads);

        loss_trace.push(mean_loss);
        let gates = first_gates.expect("batch >= 1");
        let n = gates.len().max(1) as f64;
        gate_trace.push(GateValues {
            alpha: gates.iter().map(|g| g.alpha).sum::<f64>() / n,
            beta: gates.iter().map(|g| g.beta).sum::<f64>() / n,
        });

        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            let summary = evaluate(&model, config)?;
            eval_trace.push((step + 1, summary.mean_dice));
        }
    }

    let final_eval = evaluate(&model, config)?;
    Ok(TrainResult { model, loss_trace, gate_trace, eval_trace, final_eval })
}

/// Score the model on held-out synthetic sequences, every frame.
pub fn evaluate(model: &ToyModel<f32>, config: &TrainConfig) -> Result<EvalSummary, TrainError> {
    let base = Rng::new(config.seed);
    let mut rows = Vec::new();
    for s in 0..config.eval_sequences {
        let eval_seed = base.split(STREAM_EVAL).split(s as u64).seed();
        let sample = generate(&config.synthetic_spec(eval_seed))?;
        let (pred, _) = infer_masks(model, config.strategy, &sample)?;
        for (t, (p, g)) in pred.iter().zip(sample.masks.iter()).enumerate() {
            let (hd, asd) = match surface_distances_spaced(p, g, 1.0) {
                Ok(d) => (d.hausdorff, d.asd),
                Err(_) => (f64::NAN, f64::NAN),
            };
            rows.push(EvalRow {
                sequence: s,
                frame: t,
                dice: dice(p, g).expect("same dims"),
                iou: iou(p, g).expect("same dims"),
                hd,
                asd,
            });
        }
    }
    Ok(summarize(rows))
}

pub fn summarize(rows: Vec<EvalRow>) -> EvalSummary {
    let n = rows.len().max(1) as f64;
    let mean_dice = rows.iter().map(|r| r.dice).sum::<f64>() / n;
    let mean_iou = rows.iter().map(|r| r.iou).sum::<f64>() / n;
    let finite_hd: Vec<f64> = rows.iter().map(|r| r.hd).filter(|v| v.is_finite()).collect();
    let finite_asd: Vec<f64> = rows.iter().map(|r| r.asd).filter(|v| v.is_finite()).collect();
    let mean_hd = if finite_hd.is_empty() {
        f64::NAN
    } else {
        finite_hd.iter().sum::<f64>() / finite_hd.len() as f64
    };
    let mean_asd = if finite_asd.is_empty() {
        f64::NAN
    } else {
        finite_asd.iter().sum::<f64>() / finite_asd.len() as f64
    };
    EvalSummary { rows, mean_dice, mean_iou, mean_hd, mean_asd }
}

/// `eval` CSV: per-frame rows plus a trailing mean row.
pub fn write_eval_csv(path: &Path, summary: &EvalSummary) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "sequence_id,frame,dice,iou,hd,asd")?;
    for r in &summary.rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.sequence, r.frame, r.dice, r.iou, r.hd, r.asd
        )?;
    }
    writeln!(
        w,
        "mean,,{:.6},{:.6},{:.6},{:.6}",
        summary.mean_dice, summary.mean_iou, summary.mean_hd, summary.mean_asd
    )?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &ToyModel<f32>) -> Result<(), IoError> {
    write_checkpoint(path, &model.params.to_checkpoint_entries())
}

/// One ablation variant: a strategy, optionally with fusion disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub strategy: UpdateStrategy,
    pub kpff: bool,
}

impl AblationVariant {
    pub fn name(&self) -> String {
        if self.kpff {
            self.strategy.name().to_string()
        } else {
            format!("{}_nokpff", self.strategy.name())
        }
    }

    /// The five update strategies plus the fusion-off row.
    pub fn suite() -> Vec<AblationVariant> {
        let mut v: Vec<AblationVariant> = UpdateStrategy::ALL
            .iter()
            .map(|&strategy| AblationVariant { strategy, kpff: true })
            .collect();
        v.push(AblationVariant { strategy: UpdateStrategy::Gdr, kpff: false });
        v
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub dice: f64,
    pub iou: f64,
    pub hd: f64,
    pub asd: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

impl AblationTable {
    pub fn mean_dice(&self, variant: &str) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.dice)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn variant_means(&self) -> Vec<(String, f64, f64, f64, f64)> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        names
            .into_iter()
            .map(|name| {
                let rows: Vec<&AblationRow> =
                    self.rows.iter().filter(|r| r.variant == name).collect();
                let n = rows.len().max(1) as f64;
                (
                    name,
                    rows.iter().map(|r| r.dice).sum::<f64>() / n,
                    rows.iter().map(|r| r.iou).sum::<f64>() / n,
                    rows.iter().map(|r| r.hd).sum::<f64>() / n,
                    rows.iter().map(|r| r.asd).sum::<f64>() / n,
                )
            })
            .collect()
    }
}

/// Train and evaluate every variant under identical seeds and budgets.
/// `GDKVM_THREADS` (or the `threads` argument) parallelizes across runs;
/// results are deterministic regardless of the thread count.
pub fn ablation_suite(
    config: &TrainConfig,
    n_seeds: usize,
    threads: usize,
) -> Result<AblationTable, TrainError> {
    config.validate()?;
    let variants = AblationVariant::suite();
    let seeds: Vec<u64> = (0..n_seeds).map(|i| config.seed + i as u64).collect();
    let jobs: Vec<(AblationVariant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();

    let run_job = |&(variant, seed): &(AblationVariant, u64)| -> Result<AblationRow, String> {
        let cfg = TrainConfig {
            seed,
            strategy: variant.strategy,
            kpff: variant.kpff,
            ..config.clone()
        };
        let result = train(&cfg).map_err(|e| e.to_string())?;
        Ok(AblationRow {
            variant: variant.name(),
            seed,
            dice: result.final_eval.mean_dice,
            iou: result.final_eval.mean_iou,
            hd: result.final_eval.mean_hd,
            asd: result.final_eval.mean_asd,
        })
    };

    let threads = threads.max(1);
    let results: Vec<Result<AblationRow, String>> = if threads == 1 {
        jobs.iter().map(run_job).collect()
    } else {
        let mut slots: Vec<Option<Result<AblationRow, String>>> = Vec::new();
        slots.resize_with(jobs.len(), || None);
        let slots_ref = std::sync::Mutex::new(&mut slots);
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..threads.min(jobs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let row = run_job(&jobs[i]);
                    slots_ref.lock().unwrap()[i] = Some(row);
                });
            }
        });
        slots.into_iter().map(|s| s.expect("job ran")).collect()
    };

    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r.map_err(TrainError::BadConfig)?);
    }
    Ok(AblationTable { rows, seeds })
}

/// Ablation CSV: one row per (variant, seed), then per-variant means.
pub fn write_ablation_csv(path: &Path, table: &AblationTable) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "variant,seed,dice,iou,hd,asd")?;
    for r in &table.rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.variant, r.seed, r.dice, r.iou, r.hd, r.asd
        )?;
    }
    for (name, d, i, h, a) in table.variant_means() {
        writeln!(w, "mean_{name},,{d:.6},{i:.6},{h:.6},{a:.6}")?;
    }
    Ok(())
}

/// Thread-count override from the environment; 1 when unset or invalid.
pub fn thread_count_from_env() -> usize {
    std::env::var("GDKVM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
