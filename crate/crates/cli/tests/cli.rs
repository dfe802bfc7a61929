//! End-to-end checks of the command-line surface: exit codes, file outputs,
//! determinism flags.

use std::path::Path;
use std::process::{Command, Output};

fn delnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_lists_every_subcommand_and_unknown_flags_are_rejected() {
    let out = delnet(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for sub in ["infer", "train", "eval", "complexity", "gradcheck", "ablate", "synth-data"] {
        assert!(text.contains(sub), "--help must mention {sub}");
    }

    let out = delnet(&["complexity", "--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(2), "unknown flags exit with usage error");

    let out = delnet(&["not-a-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn complexity_reports_per_layer_table_and_scaled_units() {
    let out = delnet(&["complexity", "--config", "default", "--input", "2976x4000", "--totals-only", "--threads", "1"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("x 10^12"), "totals must appear in 10^12 units: {text}");
    assert!(text.contains("x 10^6"));

    let out = delnet(&["complexity", "--input", "64x64"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("stem.conv"), "per-layer table is printed by default");
    assert!(text.contains("head.clamp"));
    assert!(text.contains("total mult-adds"));
}

#[test]
fn complexity_rejects_bad_extent_with_runtime_error() {
    let out = delnet(&["complexity", "--input", "100x100"]); // not divisible by 16
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "stable error prefix, got {err:?}");
}

#[test]
fn synth_data_then_infer_produces_png() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let out = delnet(&["synth-data", "--out", data_dir.to_str().unwrap(), "--count", "2", "--size", "64x64", "--seed", "5"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(data_dir.join("raw/pair_0000.png").is_file());
    assert!(data_dir.join("rgb/pair_0001.png").is_file());

    let png = dir.path().join("out.png");
    let out = delnet(&[
        "infer",
        "--raw",
        data_dir.join("raw/pair_0000.png").to_str().unwrap(),
        "--out",
        png.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&png).expect("output PNG parses");
    assert_eq!((img.width(), img.height()), (64, 64));
    assert_eq!(img.color().channel_count(), 3);
}

#[test]
fn ablate_prints_four_variants_with_increasing_params() {
    let out = delnet(&["ablate", "--input", "2976x4000", "--check-forward", "32x32", "--unet-widths", "4,8", "--eam-count", "1", "--eam-dilations", "1,2"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let mut params = Vec::new();
    for variant in ["unet", "unet+sca", "unet+eam", "delnet"] {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(variant))
            .unwrap_or_else(|| panic!("missing {variant} row in:\n{text}"));
        let fields: Vec<&str> = line.split_whitespace().collect();
        params.push(fields[3].parse::<u64>().expect("param count"));
        assert!(line.ends_with("ok"), "forward check for {variant}");
    }
    assert!(params[0] < params[1] && params[1] <= params[3]);
    assert!(params[0] < params[2] && params[2] <= params[3]);
}

#[test]
fn train_eval_round_trip_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    // A deliberately tiny config keeps this smoke test fast.
    let arch: &[&str] = &["--unet-widths", "4,8", "--eam-count", "1", "--eam-dilations", "1,2"];

    let mut args = vec![
        "train",
        "--synth",
        "2",
        "--size",
        "16x16",
        "--steps",
        "2",
        "--batch-size",
        "1",
        "--seed",
        "3",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(arch);
    let out = delnet(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("final.dlw").is_file());
    assert!(out_dir.join("final.cfg").is_file());
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,total,l1,ssim,perceptual"));
    assert_eq!(log.lines().count(), 3, "header plus one row per step");

    let data_dir = dir.path().join("data");
    let out = delnet(&["synth-data", "--out", data_dir.to_str().unwrap(), "--count", "2", "--size", "16x16", "--seed", "9"]);
    assert!(out.status.success());

    let csv_path = dir.path().join("report.csv");
    let weights = out_dir.join("final.dlw");
    let mut args = vec![
        "eval",
        "--data",
        data_dir.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ];
    args.extend_from_slice(arch);
    let out = delnet(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "filename,psnr,ssim,ms_ssim,delta_e00");
    assert_eq!(lines.len(), 4, "two images plus mean row");
    assert!(lines[3].starts_with("mean,"));
}

#[test]
fn eval_rejects_weights_that_do_not_match_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let mut args = vec![
        "train", "--synth", "1", "--size", "16x16", "--steps", "0", "--seed", "1",
        "--out-dir", out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(&["--unet-widths", "4,8", "--eam-count", "1", "--eam-dilations", "1"]);
    assert!(delnet(&args).status.success());

    // Evaluating with the (different) default architecture must fail loudly.
    let data_dir = dir.path().join("data");
    assert!(delnet(&["synth-data", "--out", data_dir.to_str().unwrap(), "--count", "1", "--size", "16x16", "--seed", "2"]).status.success());
    let weights = out_dir.join("final.dlw");
    let out = delnet(&[
        "eval",
        "--data",
        data_dir.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing") || err.contains("unexpected"), "names diff in error: {err}");
}

#[test]
fn gradcheck_command_passes() {
    let out = delnet(&["gradcheck", "--seed", "7"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("all"), "{}", stdout(&out));
}

#[test]
fn infer_deterministic_for_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.png");
    let data_dir = dir.path().join("d");
    assert!(delnet(&["synth-data", "--out", data_dir.to_str().unwrap(), "--count", "1", "--size", "32x32", "--seed", "4"]).status.success());
    std::fs::copy(data_dir.join("raw/pair_0000.png"), &raw).unwrap();

    let run = |out: &Path| {
        let st = delnet(&[
            "infer",
            "--raw",
            raw.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
            "--unet-widths",
            "4,8",
            "--eam-count",
            "1",
            "--eam-dilations",
            "1,2",
        ]);
        assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    };
    let (o1, o2) = (dir.path().join("a.png"), dir.path().join("b.png"));
    run(&o1);
    run(&o2);
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());
}
