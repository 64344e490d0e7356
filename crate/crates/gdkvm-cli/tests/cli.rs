//! Command-line behavior: exit codes, file outputs, the ejection
//! fraction flow, and flag validation.

use gdkvm::io::{write_tensor, GdkvTensor};
use gdkvm::metrics::MaskGrid;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gdkvm")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn gdkvm")
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["gen", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_subcommand_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["shred"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen", "train", "eval", "bench", "gradcheck", "equiv", "ef", "gatestats", "ablate"]
    {
        assert!(text.contains(cmd), "--help does not list {cmd}");
    }
}

#[test]
fn bad_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "stepz = 5\n").unwrap();
    let out = run_in(
        dir.path(),
        &["train", "--seed", "1", "--config", "bad.cfg", "--out", "run"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn invalid_strategy_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["train", "--seed", "1", "--strategy", "magic", "--out", "run"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_writes_decodable_tensors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("g.cfg"),
        "resolution = 16\nframes = 3\nc_k = 4\nc_v = 4\nhidden = 4\n",
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &["gen", "--seed", "5", "--config", "g.cfg", "--out", "v.gdkv"],
    );
    assert!(out.status.success());
    let video = gdkvm::io::read_tensor(&dir.path().join("v.gdkv")).unwrap();
    assert_eq!(video.dims(), &[3, 16, 16, 1]);
    let masks = gdkvm::io::read_tensor(&dir.path().join("v.gdkv.masks")).unwrap();
    assert_eq!(masks.dims(), &[3, 16, 16]);
    match masks {
        GdkvTensor::U8 { data, .. } => assert!(data.iter().any(|&b| b == 1)),
        _ => panic!("masks must be u8"),
    }
}

fn ellipse(w: usize, h: usize, cx: f64, cy: f64, a: f64, b: f64) -> MaskGrid {
    MaskGrid::from_fn(w, h, |x, y| {
        let dx = (x as f64 - cx) / a;
        let dy = (y as f64 - cy) / b;
        dx * dx + dy * dy <= 1.0
    })
}

fn write_mask(path: &Path, mask: &MaskGrid) {
    let blob = GdkvTensor::U8 {
        dims: vec![mask.height() as u32, mask.width() as u32],
        data: mask.to_u8(),
    };
    write_tensor(path, &blob).unwrap();
}

#[test]
fn ef_pipeline_produces_agreement_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dir.path().join("cases");
    std::fs::create_dir(&cases).unwrap();
    // three cases with slightly perturbed predictions
    for (i, (ed_a, es_a)) in [(20.0, 14.0), (18.0, 11.5), (21.0, 15.5)].iter().enumerate() {
        let truth_ed = ellipse(96, 96, 47.5, 47.5, *ed_a, ed_a * 0.7);
        let truth_es = ellipse(96, 96, 47.5, 47.5, *es_a, es_a * 0.7);
        let pred_ed = ellipse(96, 96, 47.5, 47.5, ed_a + 0.6, (ed_a + 0.6) * 0.7);
        let pred_es = ellipse(96, 96, 47.5, 47.5, es_a - 0.4, (es_a - 0.4) * 0.7);
        write_mask(&cases.join(format!("case{i}_truth_ed.gdkv")), &truth_ed);
        write_mask(&cases.join(format!("case{i}_truth_es.gdkv")), &truth_es);
        write_mask(&cases.join(format!("case{i}_pred_ed.gdkv")), &pred_ed);
        write_mask(&cases.join(format!("case{i}_pred_es.gdkv")), &pred_es);
    }
    let out = run_in(
        dir.path(),
        &["ef", "--cases", "cases", "--out", "ef.csv", "--disks", "20"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ef.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "case_id,v_ed,v_es,ef_pred,ef_truth");
    assert_eq!(lines.len(), 5); // header + 3 cases + summary
    assert!(lines[4].starts_with("summary,corr,"));
    // per-case EF values should be in a plausible band
    for line in &lines[1..4] {
        let ef_pred: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        let ef_truth: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!((20.0..90.0).contains(&ef_pred), "ef_pred {ef_pred}");
        assert!((20.0..90.0).contains(&ef_truth), "ef_truth {ef_truth}");
    }
    // determinism of the ef command
    let rerun = run_in(
        dir.path(),
        &["ef", "--cases", "cases", "--out", "ef2.csv", "--disks", "20"],
    );
    assert!(rerun.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("ef.csv")).unwrap(),
        std::fs::read(dir.path().join("ef2.csv")).unwrap()
    );
}

#[test]
fn ef_biplane_accepts_two_view_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dir.path().join("cases");
    std::fs::create_dir(&cases).unwrap();
    let two_views = |a: f64| -> GdkvTensor {
        let v1 = ellipse(96, 96, 47.5, 47.5, a, a * 0.7);
        let v2 = ellipse(96, 96, 47.5, 47.5, a, a * 0.55);
        let mut data = v1.to_u8();
        data.extend_from_slice(&v2.to_u8());
        GdkvTensor::U8 { dims: vec![2, 96, 96], data }
    };
    for (i, (ed, es)) in [(20.0, 14.0), (19.0, 12.0)].iter().enumerate() {
        write_tensor(&cases.join(format!("c{i}_pred_ed.gdkv")), &two_views(*ed)).unwrap();
        write_tensor(&cases.join(format!("c{i}_pred_es.gdkv")), &two_views(*es)).unwrap();
        write_tensor(&cases.join(format!("c{i}_truth_ed.gdkv")), &two_views(*ed)).unwrap();
        write_tensor(&cases.join(format!("c{i}_truth_es.gdkv")), &two_views(*es)).unwrap();
    }
    let out = run_in(dir.path(), &["ef", "--cases", "cases", "--out", "ef.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // identical pred/truth: perfect agreement
    let csv = std::fs::read_to_string(dir.path().join("ef.csv")).unwrap();
    let summary = csv.lines().last().unwrap().to_string();
    let corr: f64 = summary.split(',').nth(2).unwrap().parse().unwrap();
    let bias: f64 = summary.split(',').nth(4).unwrap().parse().unwrap();
    assert!((corr - 1.0).abs() < 1e-9);
    assert!(bias.abs() < 1e-9);
}

#[test]
fn ef_empty_dir_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dir.path().join("cases");
    std::fs::create_dir(&cases).unwrap();
    let out = run_in(dir.path(), &["ef", "--cases", "cases", "--out", "ef.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gatestats_writes_trace_with_header() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("g.cfg"),
        "resolution = 16\nframes = 3\nc_k = 4\nc_v = 4\nhidden = 4\neval_sequences = 1\n",
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &["gatestats", "--seed", "2", "--config", "g.cfg", "--out", "gates.csv"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("gates.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,alpha,beta,grad_alpha,grad_beta");
    // 3 frames x 16 tokens of a 16x16 grid at stride 4
    assert_eq!(lines.count(), 48);
    assert!(String::from_utf8_lossy(&out.stdout).contains("correlation"));
}

#[test]
fn bench_requires_two_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["bench", "--lengths", "8", "--out", "b.csv"]);
    assert_eq!(out.status.code(), Some(1));
}
