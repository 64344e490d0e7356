//! Acceptance suite: one test per exit criterion, each printing a
//! `criterion N: PASS` line with the measured quantity. Run with
//! `cargo test -p gdkvm-cli --test acceptance -- --nocapture`.

use gdkvm::attention::equivalence_max_deviation;
use gdkvm::clinical::{ejection_fraction, simpson_biplane, simpson_single, DiskProfile};
use gdkvm::memory::{
    apply_strategy, delta_rule_step, gdr_step, normalize_key, GateValues, UpdateStrategy,
};
use gdkvm::attention::MemoryState;
use gdkvm::metrics::{dice, iou, surface_distances_spaced, MaskGrid};
use gdkvm::model::grad_check;
use gdkvm::rng::Rng;
use gdkvm::scaling::measure_scaling;
use gdkvm::tensor::{Tensor, Tensor64};
use gdkvm::train::{ablation_suite, AblationTable, TrainConfig};
use std::f64::consts::PI;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

/// Criterion 1: parallel linear matching vs the recurrent form with the
/// normalizer agree within 1e-5 in 32-bit on 1000 random instances
/// (T <= 16, HW <= 64) in under 10 seconds.
#[test]
fn acceptance_01_equivalence_oracle() {
    let start = Instant::now();
    let worst = equivalence_max_deviation(1000, 0xEC0, 16, 64);
    let secs = start.elapsed().as_secs_f64();
    assert!(worst < 1e-5, "max deviation {worst:.3e}");
    assert!(secs < 10.0, "equivalence sweep took {secs:.1}s");
    println!("criterion 1: PASS - max deviation {worst:.3e} over 1000 instances in {secs:.2}s");
}

/// Criterion 2: GDR(alpha=1) reduces to the delta rule and
/// GDR(alpha=1, beta=1) to the hard overwrite, bitwise in 64-bit over
/// 100 random steps.
#[test]
fn acceptance_02_reduction_chain() {
    let mut rng = Rng::new(0xC2);
    for _ in 0..100 {
        let mut state = MemoryState::<f64>::zeros(4, 5, false);
        state.s = Tensor64::from_fn(vec![4, 5], |_| rng.uniform(-1.0, 1.0));
        let k = Tensor64::from_fn(vec![5], |_| rng.uniform(-1.0, 1.0));
        let v = Tensor64::from_fn(vec![4], |_| rng.uniform(-1.0, 1.0));
        let beta = rng.next_f64();

        let gdr = gdr_step(&state, &k, &v, GateValues { alpha: 1.0, beta }).unwrap();
        let delta = delta_rule_step(&state, &k, &v, beta).unwrap();
        assert_eq!(gdr.s.data(), delta.s.data(), "alpha=1 reduction not bitwise");

        let hard = gdr_step(&state, &k, &v, GateValues { alpha: 1.0, beta: 1.0 }).unwrap();
        let sanity = apply_strategy(
            UpdateStrategy::SanityCheck,
            &state,
            &k,
            &v,
            GateValues { alpha: 1.0, beta: 1.0 },
        )
        .unwrap();
        assert_eq!(hard.s.data(), sanity.s.data(), "alpha=beta=1 reduction not bitwise");
    }
    println!("criterion 2: PASS - both reductions bitwise over 100 random steps");
}

/// Criterion 3: exact retrieval after a full-strength delta write, and
/// the closed-form decay product after subsequent orthogonal GDR writes.
#[test]
fn acceptance_03_exact_retrieval() {
    let mut rng = Rng::new(0xC3);
    let mut worst_direct = 0.0f64;
    let mut worst_decayed = 0.0f64;
    for _ in 0..50 {
        let c_k = 8;
        let c_v = 4;
        let mut state = MemoryState::<f32>::zeros(c_v, c_k, false);
        state.s = Tensor::from_fn(vec![c_v, c_k], |_| rng.uniform(-1.0, 1.0) as f32);
        let k = Tensor::<f32>::from_fn(vec![c_k], |_| rng.uniform(-1.0, 1.0) as f32);
        let v = Tensor::<f32>::from_fn(vec![c_v], |_| rng.uniform(-1.0, 1.0) as f32);
        let written = delta_rule_step(&state, &k, &v, 1.0).unwrap();
        let k_hat = normalize_key(&k).unwrap();
        let got = written.s.matvec(&k_hat).unwrap();
        let err = got
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| ((a - b) * (a - b)) as f64)
            .sum::<f64>()
            .sqrt();
        worst_direct = worst_direct.max(err);

        // subsequent writes with keys orthogonal to k: the association
        // decays by the product of the alphas
        let mut current = written.clone();
        let mut decay = 1.0f64;
        for step in 0..3 {
            // build a key orthogonal to k_hat by Gram-Schmidt
            let raw = Tensor::<f32>::from_fn(vec![c_k], |i| {
                rng.uniform(-1.0, 1.0) as f32 + (step + i) as f32 * 0.01
            });
            let dot: f32 = raw.data().iter().zip(k_hat.data()).map(|(a, b)| a * b).sum();
            let ortho = Tensor::new(
                vec![c_k],
                raw.data()
                    .iter()
                    .zip(k_hat.data())
                    .map(|(r, kh)| r - dot * kh)
                    .collect(),
            )
            .unwrap();
            let v2 = Tensor::<f32>::from_fn(vec![c_v], |_| rng.uniform(-1.0, 1.0) as f32);
            let alpha = rng.uniform(0.5, 0.99) as f32;
            let beta = rng.uniform(0.1, 0.99) as f32;
            current = gdr_step(&current, &ortho, &v2, GateValues { alpha, beta }).unwrap();
            decay *= alpha as f64;
        }
        let got = current.s.matvec(&k_hat).unwrap();
        let err = got
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| {
                let want = decay * *b as f64;
                (*a as f64 - want) * (*a as f64 - want)
            })
            .sum::<f64>()
            .sqrt();
        worst_decayed = worst_decayed.max(err);
    }
    assert!(worst_direct <= 1e-5, "retrieval error {worst_direct:.3e}");
    assert!(worst_decayed <= 1e-5, "decayed retrieval error {worst_decayed:.3e}");
    println!(
        "criterion 3: PASS - retrieval error {worst_direct:.2e}, decay-product error {worst_decayed:.2e}"
    );
}

/// Criterion 4: every trainable parameter of the full toy model matches
/// central finite differences at relative error <= 1e-4 in 64-bit,
/// within 60 seconds.
#[test]
fn acceptance_04_gradient_check() {
    let start = Instant::now();
    let report = grad_check(17, UpdateStrategy::Gdr, 1e-4);
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .rows
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    for row in &report.rows {
        assert!(row.pass, "{}: max rel err {:.3e}", row.name, row.max_rel_err);
    }
    assert!(secs < 60.0, "gradient check took {secs:.1}s");
    println!(
        "criterion 4: PASS - {} parameter tensors, worst rel err {worst:.2e}, {secs:.1}s",
        report.rows.len()
    );
}

/// Criterion 5: measured log-log runtime slope over T in 8..128 is
/// <= 1.2 for the recurrent form and >= 1.7 for softmax matching.
/// Timing on shared hardware is noisy, so one remeasurement with more
/// repetitions is allowed before failing.
#[test]
fn acceptance_05_complexity_slopes() {
    let lengths = [8usize, 16, 32, 64, 128];
    let mut report = measure_scaling(&lengths, 64, 8, 8, 3, 0xC5);
    if !(report.softmax_slope >= 1.7 && report.recurrent_slope <= 1.2) {
        report = measure_scaling(&lengths, 64, 8, 8, 5, 0xC5);
    }
    assert!(
        report.softmax_slope >= 1.7,
        "softmax slope {:.3} below 1.7",
        report.softmax_slope
    );
    assert!(
        report.recurrent_slope <= 1.2,
        "recurrent slope {:.3} above 1.2",
        report.recurrent_slope
    );
    println!(
        "criterion 5: PASS - softmax slope {:.3} (>= 1.7), recurrent slope {:.3} (<= 1.2)",
        report.softmax_slope, report.recurrent_slope
    );
}

/// Criterion 6: IoU = Dice/(2-Dice) on 10^4 random mask pairs, and
/// HD/ASD equal to an exhaustive brute-force oracle on masks <= 32x32.
#[test]
fn acceptance_06_metric_identities() {
    let mut rng = Rng::new(0xC6);
    for _ in 0..10_000 {
        let w = 4 + rng.next_below(12) as usize;
        let h = 4 + rng.next_below(12) as usize;
        let a = MaskGrid::from_fn(w, h, |_, _| rng.bernoulli(0.5));
        let b = MaskGrid::from_fn(w, h, |_, _| rng.bernoulli(0.5));
        let d = dice(&a, &b).unwrap();
        let i = iou(&a, &b).unwrap();
        assert!(
            (i - d / (2.0 - d)).abs() <= 1e-12,
            "identity violated: dice {d}, iou {i}"
        );
    }

    // brute-force oracle, written independently: all boundary pixels by
    // explicit neighbor tests, exhaustive pairwise f64 distances
    let oracle = |a: &MaskGrid, b: &MaskGrid| -> (f64, f64) {
        let boundary = |m: &MaskGrid| -> Vec<(f64, f64)> {
            let mut out = Vec::new();
            for y in 0..m.height() {
                for x in 0..m.width() {
                    if !m.get(x, y) {
                        continue;
                    }
                    let exposed = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(
                        |&(dx, dy)| {
                            let nx = x as i64 + dx;
                            let ny = y as i64 + dy;
                            nx < 0
                                || ny < 0
                                || nx >= m.width() as i64
                                || ny >= m.height() as i64
                                || !m.get(nx as usize, ny as usize)
                        },
                    );
                    if exposed {
                        out.push((x as f64, y as f64));
                    }
                }
            }
            out
        };
        let ba = boundary(a);
        let bb = boundary(b);
        let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> (f64, f64) {
            let mut mx = 0.0f64;
            let mut total = 0.0f64;
            for &(x, y) in from {
                let mut mn = f64::INFINITY;
                for &(u, v) in to {
                    mn = mn.min((x - u) * (x - u) + (y - v) * (y - v));
                }
                mx = mx.max(mn.sqrt());
                total += mn.sqrt();
            }
            (mx, total / from.len() as f64)
        };
        let (hab, aab) = directed(&ba, &bb);
        let (hba, aba) = directed(&bb, &ba);
        (hab.max(hba), 0.5 * (aab + aba))
    };
    let mut surface_pairs = 0;
    while surface_pairs < 300 {
        let w = 4 + rng.next_below(29) as usize;
        let h = 4 + rng.next_below(29) as usize;
        let a = MaskGrid::from_fn(w, h, |_, _| rng.bernoulli(0.4));
        let b = MaskGrid::from_fn(w, h, |_, _| rng.bernoulli(0.4));
        if a.is_empty() || b.is_empty() {
            continue;
        }
        surface_pairs += 1;
        let d = surface_distances_spaced(&a, &b, 1.0).unwrap();
        let (hd_o, asd_o) = oracle(&a, &b);
        assert_eq!(d.hausdorff, hd_o, "HD mismatch on {w}x{h} masks");
        assert_eq!(d.asd, asd_o, "ASD mismatch on {w}x{h} masks");
    }
    println!(
        "criterion 6: PASS - identity on 10000 pairs, HD/ASD exact vs oracle on {surface_pairs} pairs"
    );
}

/// Criterion 7: single-plane sphere within 1% at n=200, biplane
/// ellipsoid within 1%, EF(100, 40) exactly 60.
#[test]
fn acceptance_07_simpson_convergence() {
    let r = 5.0f64;
    let profile = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) * 2.0 * r / n as f64 - r;
                2.0 * (r * r - x * x).max(0.0).sqrt()
            })
            .collect()
    };
    let sphere = simpson_single(&DiskProfile::single(2.0 * r, profile(200))).unwrap();
    let sphere_want = 4.0 / 3.0 * PI * r.powi(3);
    let sphere_err = (sphere - sphere_want).abs() / sphere_want;
    assert!(sphere_err < 0.01, "sphere volume off by {:.3}%", sphere_err * 100.0);

    let (a, b) = (3.0f64, 2.0f64);
    let base = profile(200);
    let ellipsoid = simpson_biplane(&DiskProfile {
        long_axis: 2.0 * r,
        n_disks: 200,
        diam_4c: base.iter().map(|d| d * a / r).collect(),
        diam_2c: Some(base.iter().map(|d| d * b / r).collect()),
    })
    .unwrap();
    let ell_want = 4.0 / 3.0 * PI * a * b * r;
    let ell_err = (ellipsoid - ell_want).abs() / ell_want;
    assert!(ell_err < 0.01, "ellipsoid volume off by {:.3}%", ell_err * 100.0);

    let ef = ejection_fraction(100.0, 40.0).unwrap();
    assert_eq!(ef, 60.0, "EF(100, 40) = {ef}");
    println!(
        "criterion 7: PASS - sphere {:.2}% off, ellipsoid {:.2}% off, EF(100,40) = {ef:.2}",
        sphere_err * 100.0,
        ell_err * 100.0
    );
}

fn ablation() -> &'static (AblationTable, f64, usize) {
    static TABLE: OnceLock<(AblationTable, f64, usize)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let threads = std::thread::available_parallelism()
            .map(|n| n.get().min(8))
            .unwrap_or(1);
        let config = TrainConfig { seed: 100, ..TrainConfig::ablation_benchmark() };
        let start = Instant::now();
        let table = ablation_suite(&config, 5, threads).expect("ablation suite");
        (table, start.elapsed().as_secs_f64(), threads)
    })
}

/// Criterion 8: five-seed mean Dice ordering
/// gdr > {noalpha, nobeta} > baseline, with the hard overwrite at least
/// 5 Dice points below gdr, inside a 30 CPU-minute budget.
#[test]
fn acceptance_08_strategy_ordering() {
    let (table, wall, threads) = ablation();
    let dice_of = |v: &str| table.mean_dice(v);
    let (gdr, noalpha, nobeta, baseline, sanity) = (
        dice_of("gdr"),
        dice_of("noalpha"),
        dice_of("nobeta"),
        dice_of("baseline"),
        dice_of("sanity"),
    );
    println!(
        "criterion 8 means: gdr {gdr:.4}, noalpha {noalpha:.4}, nobeta {nobeta:.4}, \
         baseline {baseline:.4}, sanity {sanity:.4}"
    );
    assert!(gdr > noalpha, "gdr {gdr:.4} <= noalpha {noalpha:.4}");
    assert!(gdr > nobeta, "gdr {gdr:.4} <= nobeta {nobeta:.4}");
    assert!(noalpha > baseline, "noalpha {noalpha:.4} <= baseline {baseline:.4}");
    assert!(nobeta > baseline, "nobeta {nobeta:.4} <= baseline {baseline:.4}");
    assert!(
        gdr - sanity >= 0.05,
        "hard overwrite only {:.2} Dice points below gdr",
        (gdr - sanity) * 100.0
    );
    let cpu_minutes = wall * *threads as f64 / 60.0;
    assert!(cpu_minutes < 30.0, "suite used {cpu_minutes:.1} CPU-minutes");
    println!(
        "criterion 8: PASS - ordering holds, overwrite gap {:.1} Dice points, \
         <= {cpu_minutes:.1} CPU-minutes",
        (gdr - sanity) * 100.0
    );
}

/// Criterion 9: fusion on beats fusion off on five-seed mean Dice.
#[test]
fn acceptance_09_fusion_ablation() {
    let (table, _, _) = ablation();
    let on = table.mean_dice("gdr");
    let off = table.mean_dice("gdr_nokpff");
    assert!(on > off, "fusion on {on:.4} <= fusion off {off:.4}");
    println!("criterion 9: PASS - fusion on {on:.4} > fusion off {off:.4}");
}

/// Criterion 10: identical flags and seed give byte-identical outputs.
#[test]
fn acceptance_10_determinism() {
    let bin = env!("CARGO_BIN_EXE_gdkvm");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.cfg");
    std::fs::write(
        &cfg_path,
        "steps = 4\nbatch = 1\nresolution = 16\nframes = 3\nc_k = 4\nc_v = 4\nhidden = 4\n\
         eval_every = 0\neval_sequences = 2\n",
    )
    .unwrap();

    let run = |args: &[&str]| {
        let status = Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .status()
            .expect("spawn gdkvm");
        assert!(status.success(), "command failed: {args:?}");
    };
    let bytes = |name: &str| std::fs::read(dir.path().join(name)).expect(name);

    run(&["gen", "--seed", "7", "--out", "a.gdkv"]);
    run(&["gen", "--seed", "7", "--out", "b.gdkv"]);
    assert_eq!(bytes("a.gdkv"), bytes("b.gdkv"), "gen video differs");
    assert_eq!(bytes("a.gdkv.masks"), bytes("b.gdkv.masks"), "gen masks differ");

    run(&["train", "--seed", "3", "--config", "tiny.cfg", "--out", "run_a"]);
    run(&["train", "--seed", "3", "--config", "tiny.cfg", "--out", "run_b"]);
    for file in ["checkpoint.gdkvt", "loss.csv", "gatestats.csv", "eval.csv"] {
        assert_eq!(
            bytes(&format!("run_a/{file}")),
            bytes(&format!("run_b/{file}")),
            "train output {file} differs"
        );
    }

    run(&["eval", "--seed", "3", "--config", "tiny.cfg", "--out", "eval_a.csv"]);
    run(&["eval", "--seed", "3", "--config", "tiny.cfg", "--out", "eval_b.csv"]);
    assert_eq!(bytes("eval_a.csv"), bytes("eval_b.csv"), "eval output differs");

    println!("criterion 10: PASS - gen/train/eval reruns byte-identical");
}
