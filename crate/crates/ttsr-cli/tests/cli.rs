//! End-to-end tests of the `ttsr` binary: flag validation, determinism,
//! artifact layout, and the documented error behavior of every subcommand.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ttsr_core::data::{synthetic_texture, write_synthetic_dataset, ImageU8};
use ttsr_core::rng::{seeded, Stream};

fn ttsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttsr"))
        .args(args)
        .output()
        .expect("spawn ttsr")
}

fn write_toy_config(path: &Path) {
    fs::write(
        path,
        "# toy profile: warm-up only, one epoch\n\
         seed = 7\n\
         lr = 1e-4\n\
         warmup_epochs = 1\n\
         total_epochs = 1\n\
         batch_size = 2\n\
         lr_patch = 8\n\
         base_channels = 8\n\
         blocks = 1,1,1,1\n\
         csfi = on\n\
         scales = 1,2,4\n\
         pool = average\n\
         disc_base_channels = 4\n\
         d_steps = 1\n",
    )
    .unwrap();
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = ttsr(&["train", "--config", "x.cfg", "--out", "y"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--data"), "stderr: {err}");
}

#[test]
fn unknown_flag_is_rejected_with_usage() {
    let out = ttsr(&["bench", "--bogus-flag", "3"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage") || err.contains("unexpected"), "stderr: {err}");
}

#[test]
fn count_params_assert_passes_for_both_variants() {
    let on = ttsr(&["count-params", "--assert"]);
    assert!(on.status.success(), "{}", String::from_utf8_lossy(&on.stderr));
    let off = ttsr(&["count-params", "--csfi", "false", "--assert"]);
    assert!(off.status.success(), "{}", String::from_utf8_lossy(&off.stderr));
    let text = String::from_utf8_lossy(&on.stdout).to_string();
    assert!(text.contains("6692675"), "stdout: {text}");
}

#[test]
fn bench_degenerate_grid_reports_one_comparison() {
    let out = ttsr(&["bench", "--sizes", "1", "--channels", "4"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "grid,l_q,l_k,naive_ms,batched_ms,speedup,pairs_per_sec_batched"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..3], &["1", "1", "1"]);
}

#[test]
fn gradcheck_rejects_non_f64_dtype() {
    let out = ttsr(&["gradcheck", "--dtype", "f32"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("f64"));
}

#[test]
fn gradcheck_f64_passes_and_exits_zero() {
    let out = ttsr(&["gradcheck", "--dtype", "f64"]);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "stdout: {text}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(text.contains("transformer"));
    assert!(text.contains("generator"));
    assert!(!text.contains("FAIL"), "stdout: {text}");
}

/// One shared toy pipeline: train twice (determinism + warm-up columns),
/// then exercise infer, viz-transfer, eval, and the corrupt-checkpoint path
/// against the produced artifacts.
#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let mut rng = seeded(1, Stream::Data);
    write_synthetic_dataset(&data, 4, 32, &mut rng).unwrap();
    let cfg = root.join("toy.cfg");
    write_toy_config(&cfg);

    // train twice with the same seed
    for run in ["run_a", "run_b"] {
        let out = ttsr(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            root.join(run).to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let log_a = fs::read(root.join("run_a/loss_log.csv")).unwrap();
    let log_b = fs::read(root.join("run_b/loss_log.csv")).unwrap();
    assert_eq!(log_a, log_b, "same-seed runs must produce identical logs");

    // warm-up-only config: adversarial and perceptual columns all zero
    let text = String::from_utf8(log_a).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next().unwrap(), "step,epoch,l_rec,l_adv,l_per,l_d,gp");
    let mut n_rows = 0;
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0, "l_adv in {row}");
        assert_eq!(cols[4].parse::<f64>().unwrap(), 0.0, "l_per in {row}");
        n_rows += 1;
    }
    assert_eq!(n_rows, 2, "4 pairs / batch 2 / 1 epoch");

    let ckpt = root.join("run_a/epoch_001.ckpt");
    assert!(ckpt.exists());

    // infer: 10x10 LR -> 40x40 PNG, byte-identical on repeat
    let lr_png = root.join("lr.png");
    synthetic_texture(10, &mut rng).save(&lr_png).unwrap();
    let ref_png = root.join("ref.png");
    synthetic_texture(40, &mut rng).save(&ref_png).unwrap();
    let sr_png = root.join("sr.png");
    for _ in 0..2 {
        let out = ttsr(&[
            "infer",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--lr",
            lr_png.to_str().unwrap(),
            "--ref",
            ref_png.to_str().unwrap(),
            "--out",
            sr_png.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let sr = ImageU8::load(&sr_png).unwrap();
    assert_eq!((sr.width, sr.height), (40, 40));
    let first = fs::read(&sr_png).unwrap();
    // a third run must reproduce the same bytes
    let out = ttsr(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--lr",
        lr_png.to_str().unwrap(),
        "--ref",
        ref_png.to_str().unwrap(),
        "--out",
        sr_png.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(first, fs::read(&sr_png).unwrap());

    // corrupt checkpoint: named error, no partial output file
    let bad_ckpt = root.join("bad.ckpt");
    fs::write(&bad_ckpt, b"not a checkpoint").unwrap();
    let missing_out = root.join("never.png");
    let out = ttsr(&[
        "infer",
        "--ckpt",
        bad_ckpt.to_str().unwrap(),
        "--lr",
        lr_png.to_str().unwrap(),
        "--ref",
        ref_png.to_str().unwrap(),
        "--out",
        missing_out.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(!missing_out.exists(), "error paths must not leave output files");

    // viz-transfer writes a PNG with LR-up extents
    let viz_png = root.join("viz.png");
    let out = ttsr(&[
        "viz-transfer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--lr",
        lr_png.to_str().unwrap(),
        "--ref",
        ref_png.to_str().unwrap(),
        "--out",
        viz_png.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let viz = ImageU8::load(&viz_png).unwrap();
    assert_eq!((viz.width, viz.height), (40, 40));

    // eval: hr/ + refs/<level>/ layout -> one CSV row per level plus LR
    let eval_root = root.join("evalset");
    fs::create_dir_all(eval_root.join("hr")).unwrap();
    fs::create_dir_all(eval_root.join("refs/L1")).unwrap();
    fs::create_dir_all(eval_root.join("refs/L2")).unwrap();
    for id in ["000", "001"] {
        let hr = synthetic_texture(32, &mut rng);
        hr.save(&eval_root.join(format!("hr/{id}.png"))).unwrap();
        hr.save(&eval_root.join(format!("refs/L1/{id}.png"))).unwrap();
        synthetic_texture(32, &mut rng)
            .save(&eval_root.join(format!("refs/L2/{id}.png")))
            .unwrap();
    }
    let csv_path = root.join("eval.csv");
    let out = ttsr(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        eval_root.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "level,psnr,ssim");
    assert_eq!(lines.len(), 4, "L1, L2 and the LR baseline: {csv}");
    assert!(lines[1].starts_with("L1,"));
    assert!(lines[3].starts_with("LR,"));
}
