//! Command-line entry point for the memory kernels, training harness,
//! and evaluation stack.
//!
//! Every command is reproducible from its flags and `--seed` alone; the
//! only environment dependence is `GDKVM_THREADS`, which parallelizes
//! the ablation suite without changing its results. Exit codes: 0 on
//! success, 1 on validation errors, 2 on runtime errors.

use clap::{Parser, Subcommand};
use gdkvm::attention::equivalence_max_deviation;
use gdkvm::clinical::{agreement_stats, ejection_fraction, extract_disks, simpson_single, DiskProfile};
use gdkvm::config::{apply_to_train_config, parse_config_file};
use gdkvm::io::{read_tensor, write_tensor, GdkvTensor};
use gdkvm::memory::{gate_statistics, write_gatestats_csv, UpdateStrategy};
use gdkvm::metrics::MaskGrid;
use gdkvm::model::{grad_check, infer_masks, ToyModel};
use gdkvm::rng::Rng;
use gdkvm::scaling::{measure_scaling, write_scaling_csv};
use gdkvm::synth::generate;
use gdkvm::train::{
    ablation_suite, evaluate, save_checkpoint, thread_count_from_env, train, write_ablation_csv,
    write_eval_csv, TrainConfig,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gdkvm",
    about = "Gated delta-rule key-value memory: kernels, training harness, and evaluation stack",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence: video to --out (GDKV-T f32,
    /// T x H x W x 1), masks to <out>.masks (GDKV-T u8, T x H x W)
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on synthetic data; writes checkpoint.gdkvt, loss.csv,
    /// gatestats.csv, and eval.csv into --out
    Train {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// state update strategy override
        #[arg(long)]
        strategy: Option<UpdateStrategy>,
        /// normalized readout override
        #[arg(long, value_parser = ["on", "off"])]
        normalize: Option<String>,
    },
    /// Evaluate a model (fresh or from `checkpoint =` in the config) on
    /// held-out synthetic sequences; writes the eval CSV to --out
    Eval {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strategy: Option<UpdateStrategy>,
        #[arg(long, value_parser = ["on", "off"])]
        normalize: Option<String>,
    },
    /// Measure sequence-length scaling of softmax vs recurrent matching
    Bench {
        #[arg(long, default_value = "8,16,32,64,128", value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify reverse-mode gradients of the full model against central
    /// finite differences (64-bit)
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "gdr")]
        strategy: UpdateStrategy,
    },
    /// Verify parallel vs recurrent linear matching on random instances
    Equiv {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ejection fraction from mask files: <case>_{pred,truth}_{ed,es}.gdkv
    /// under --cases; emits per-case volumes/EF and an agreement summary
    Ef {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// number of disks for the volume integration
        #[arg(long, default_value_t = 20)]
        disks: usize,
    },
    /// Export per-token gate traces of a model rollout plus histogram
    /// statistics
    Gatestats {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strategy: Option<UpdateStrategy>,
    },
    /// Train and evaluate all update strategies plus the fusion-off
    /// variant; --trials seeds per variant
    Ablate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_train_config(
    seed: u64,
    config: &Option<PathBuf>,
    strategy: &Option<UpdateStrategy>,
    normalize: &Option<String>,
) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(path) = config {
        let map = parse_config_file(path).map_err(CliError::validation)?;
        cfg = apply_to_train_config(&map, cfg).map_err(CliError::validation)?;
    }
    if let Some(s) = strategy {
        cfg.strategy = *s;
    }
    if let Some(n) = normalize {
        cfg.normalize = n == "on";
    }
    cfg.validate().map_err(CliError::validation)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { seed, out, config } => {
            let cfg = load_train_config(seed, &config, &None, &None)?;
            let sample = generate(&cfg.synthetic_spec(seed)).map_err(CliError::validation)?;
            let video = GdkvTensor::from_tensor32(&sample.stacked());
            write_tensor(&out, &video).map_err(CliError::runtime)?;
            let (dims, data) = sample.stacked_masks();
            let masks = GdkvTensor::U8 { dims, data };
            let mask_path = mask_path_for(&out);
            write_tensor(&mask_path, &masks).map_err(CliError::runtime)?;
            println!(
                "wrote {} frames at {}x{} to {} (masks: {})",
                sample.frames.len(),
                cfg.resolution,
                cfg.resolution,
                out.display(),
                mask_path.display()
            );
            Ok(())
        }
        Command::Train { seed, config, out, strategy, normalize } => {
            let cfg = load_train_config(seed, &config, &strategy, &normalize)?;
            std::fs::create_dir_all(&out).map_err(CliError::runtime)?;
            let probe: ToyModel<f32> =
                ToyModel::init(cfg.model_config(), cfg.seed).map_err(CliError::validation)?;
            println!("model parameters: {}", probe.parameter_count());
            drop(probe);
            let result = train(&cfg).map_err(CliError::runtime)?;
            save_checkpoint(&out.join("checkpoint.gdkvt"), &result.model)
                .map_err(CliError::runtime)?;
            write_loss_csv(&out.join("loss.csv"), &result.loss_trace, &result.eval_trace)
                .map_err(CliError::runtime)?;
            write_gatestats_csv(&out.join("gatestats.csv"), &result.gate_trace)
                .map_err(CliError::runtime)?;
            write_eval_csv(&out.join("eval.csv"), &result.final_eval).map_err(CliError::runtime)?;
            println!(
                "trained {} steps; final mean dice {:.4}",
                result.loss_trace.len(),
                result.final_eval.mean_dice
            );
            Ok(())
        }
        Command::Eval { seed, config, out, strategy, normalize } => {
            let cfg = load_train_config(seed, &config, &strategy, &normalize)?;
            let mut model: ToyModel<f32> =
                ToyModel::init(cfg.model_config(), cfg.seed).map_err(CliError::validation)?;
            if let Some(path) = &cfg.checkpoint {
                let entries = gdkvm::io::read_checkpoint(path).map_err(CliError::runtime)?;
                model
                    .params
                    .load_checkpoint_entries(&entries)
                    .map_err(CliError::runtime)?;
            }
            let summary = evaluate(&model, &cfg).map_err(CliError::runtime)?;
            write_eval_csv(&out, &summary).map_err(CliError::runtime)?;
            println!(
                "evaluated {} sequences: mean dice {:.4}, mean iou {:.4}",
                cfg.eval_sequences, summary.mean_dice, summary.mean_iou
            );
            Ok(())
        }
        Command::Bench { lengths, out, trials, seed } => {
            if lengths.len() < 2 {
                return Err(CliError::Validation("need at least two lengths".into()));
            }
            if lengths.iter().any(|&l| l == 0) {
                return Err(CliError::Validation("lengths must be positive".into()));
            }
            let report = measure_scaling(&lengths, 64, 8, 8, trials, seed);
            write_scaling_csv(&out, &report).map_err(CliError::runtime)?;
            for row in &report.rows {
                println!(
                    "T={:4}  softmax {:>12.6} ms  recurrent {:>12.6} ms",
                    row.frames,
                    row.softmax_secs * 1e3,
                    row.recurrent_secs * 1e3
                );
            }
            println!(
                "log-log slopes: softmax {:.3}, recurrent {:.3}",
                report.softmax_slope, report.recurrent_slope
            );
            Ok(())
        }
        Command::Gradcheck { seed, strategy } => {
            let report = grad_check(seed, strategy, 1e-4);
            for row in &report.rows {
                println!(
                    "{:24} {:5} elements  max rel err {:.3e}  {}",
                    row.name,
                    row.checked,
                    row.max_rel_err,
                    if row.pass { "pass" } else { "FAIL" }
                );
            }
            if report.pass {
                println!("gradcheck passed at threshold {:.0e}", report.threshold);
                Ok(())
            } else {
                Err(CliError::Runtime("gradient check failed".into()))
            }
        }
        Command::Equiv { trials, seed } => {
            if trials == 0 {
                return Err(CliError::Validation("trials must be >= 1".into()));
            }
            let worst = equivalence_max_deviation(trials, seed, 16, 64);
            println!("max parallel-vs-recurrent deviation over {trials} trials: {worst:.3e}");
            if worst < 1e-5 {
                Ok(())
            } else {
                Err(CliError::Runtime(format!("deviation {worst:.3e} exceeds 1e-5")))
            }
        }
        Command::Ef { cases, out, disks } => run_ef(&cases, &out, disks),
        Command::Gatestats { seed, config, out, strategy } => {
            let cfg = load_train_config(seed, &config, &strategy, &None)?;
            let mut model: ToyModel<f32> =
                ToyModel::init(cfg.model_config(), cfg.seed).map_err(CliError::validation)?;
            if let Some(path) = &cfg.checkpoint {
                let entries = gdkvm::io::read_checkpoint(path).map_err(CliError::runtime)?;
                model
                    .params
                    .load_checkpoint_entries(&entries)
                    .map_err(CliError::runtime)?;
            }
            let mut trace = Vec::new();
            let base = Rng::new(cfg.seed);
            for s in 0..cfg.eval_sequences {
                let sample = generate(&cfg.synthetic_spec(base.split(3).split(s as u64).seed()))
                    .map_err(CliError::runtime)?;
                let (_, gates) =
                    infer_masks(&model, cfg.strategy, &sample).map_err(CliError::runtime)?;
                trace.extend(gates);
            }
            write_gatestats_csv(&out, &trace).map_err(CliError::runtime)?;
            let stats = gate_statistics(&trace).map_err(CliError::runtime)?;
            let occupied = |h: &[u64]| h.iter().filter(|&&c| c > 0).count();
            println!(
                "{} gate samples; occupied bins alpha {}, beta {}",
                trace.len(),
                occupied(&stats.alpha_hist),
                occupied(&stats.beta_hist)
            );
            match stats.grad_correlation {
                Some(r) => println!("gradient stream correlation: {r:.4}"),
                None => println!("gradient stream correlation: undefined"),
            }
            Ok(())
        }
        Command::Ablate { seed, config, out, trials } => {
            if trials == 0 {
                return Err(CliError::Validation("trials must be >= 1".into()));
            }
            let mut cfg = TrainConfig { seed, ..TrainConfig::ablation_benchmark() };
            if let Some(path) = &config {
                let map = parse_config_file(path).map_err(CliError::validation)?;
                cfg = apply_to_train_config(&map, cfg).map_err(CliError::validation)?;
            }
            cfg.validate().map_err(CliError::validation)?;
            std::fs::create_dir_all(&out).map_err(CliError::runtime)?;
            let threads = thread_count_from_env();
            let table = ablation_suite(&cfg, trials, threads).map_err(CliError::runtime)?;
            write_ablation_csv(&out.join("ablation.csv"), &table).map_err(CliError::runtime)?;
            println!("variant       mean_dice  mean_iou   mean_hd    mean_asd");
            for (name, d, i, h, a) in table.variant_means() {
                println!("{name:12}  {d:.4}     {i:.4}     {h:.4}     {a:.4}");
            }
            Ok(())
        }
    }
}

fn mask_path_for(video: &Path) -> PathBuf {
    let mut os = video.as_os_str().to_os_string();
    os.push(".masks");
    PathBuf::from(os)
}

fn write_loss_csv(
    path: &Path,
    losses: &[f64],
    evals: &[(usize, f64)],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss,eval_dice")?;
    for (i, loss) in losses.iter().enumerate() {
        let eval = evals
            .iter()
            .find(|(s, _)| *s == i + 1)
            .map(|(_, d)| format!("{d:.6}"))
            .unwrap_or_default();
        writeln!(w, "{},{loss:.6},{eval}", i)?;
    }
    Ok(())
}

fn read_mask_file(path: &Path) -> Result<Vec<MaskGrid>, CliError> {
    let t = read_tensor(path).map_err(CliError::runtime)?;
    match t {
        GdkvTensor::U8 { dims, data } => match dims.len() {
            2 => {
                let (h, w) = (dims[0] as usize, dims[1] as usize);
                MaskGrid::from_u8(w, h, &data)
                    .map(|m| vec![m])
                    .ok_or_else(|| CliError::Runtime(format!("{}: bad mask size", path.display())))
            }
            3 => {
                // multiple views: dims are views x H x W
                let (v, h, w) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
                let mut out = Vec::with_capacity(v);
                for i in 0..v {
                    let slice = &data[i * h * w..(i + 1) * h * w];
                    out.push(MaskGrid::from_u8(w, h, slice).ok_or_else(|| {
                        CliError::Runtime(format!("{}: bad mask size", path.display()))
                    })?);
                }
                Ok(out)
            }
            r => Err(CliError::Runtime(format!(
                "{}: expected rank 2 or 3 mask, got rank {r}",
                path.display()
            ))),
        },
        GdkvTensor::F32 { .. } => Err(CliError::Runtime(format!(
            "{}: expected u8 mask tensor",
            path.display()
        ))),
    }
}

/// Volume from one or two mask views using the method of disks.
fn mask_volume(views: &[MaskGrid], disks: usize) -> Result<f64, CliError> {
    match views {
        [single] => {
            let profile = extract_disks(single, disks).map_err(CliError::runtime)?;
            simpson_single(&profile).map_err(CliError::runtime)
        }
        [a4c, a2c] => {
            let p4 = extract_disks(a4c, disks).map_err(CliError::runtime)?;
            let p2 = extract_disks(a2c, disks).map_err(CliError::runtime)?;
            let profile = DiskProfile::biplane(p4, p2).map_err(CliError::runtime)?;
            gdkvm::clinical::simpson_biplane(&profile).map_err(CliError::runtime)
        }
        _ => Err(CliError::Runtime(format!("expected 1 or 2 views, got {}", views.len()))),
    }
}

fn run_ef(cases: &Path, out: &Path, disks: usize) -> Result<(), CliError> {
    if disks == 0 {
        return Err(CliError::Validation("disk count must be >= 1".into()));
    }
    if !cases.is_dir() {
        return Err(CliError::Validation(format!("{} is not a directory", cases.display())));
    }
    let mut case_ids: Vec<String> = std::fs::read_dir(cases)
        .map_err(CliError::runtime)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_pred_ed.gdkv").map(str::to_string))
        })
        .collect();
    case_ids.sort();
    if case_ids.is_empty() {
        return Err(CliError::Validation(format!(
            "no '<case>_pred_ed.gdkv' files under {}",
            cases.display()
        )));
    }

    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out).map_err(CliError::runtime)?);
    writeln!(w, "case_id,v_ed,v_es,ef_pred,ef_truth").map_err(CliError::runtime)?;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for id in &case_ids {
        let load = |tag: &str| read_mask_file(&cases.join(format!("{id}_{tag}.gdkv")));
        let v_ed = mask_volume(&load("pred_ed")?, disks)?;
        let v_es = mask_volume(&load("pred_es")?, disks)?;
        let ef_pred = ejection_fraction(v_ed, v_es).map_err(CliError::runtime)?;
        let t_ed = mask_volume(&load("truth_ed")?, disks)?;
        let t_es = mask_volume(&load("truth_es")?, disks)?;
        let ef_truth = ejection_fraction(t_ed, t_es).map_err(CliError::runtime)?;
        writeln!(w, "{id},{v_ed:.6},{v_es:.6},{ef_pred:.6},{ef_truth:.6}")
            .map_err(CliError::runtime)?;
        preds.push(ef_pred);
        truths.push(ef_truth);
    }
    let stats = agreement_stats(&preds, &truths).map_err(CliError::runtime)?;
    writeln!(w, "summary,corr,{:.6},bias,{:.6},std,{:.6}", stats.corr, stats.bias, stats.std)
        .map_err(CliError::runtime)?;
    println!(
        "{} cases: corr {:.4}, bias {:.4}, std {:.4}",
        case_ids.len(),
        stats.corr,
        stats.bias,
        stats.std
    );
    Ok(())
}
