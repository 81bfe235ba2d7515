use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spectra_cli::checkpoint::{self, check_partition, encode};
use spectra_cli::config::RunConfig;
use spectra_cli::experiment::prepare;
use spectra_core::diffusion::NoiseSchedule;
use spectra_core::train::evaluate_loss;
use tempfile::TempDir;

const TINY: &str = r#"{
  "data": {
    "source": {"synth_random": {"features": 2, "length": 320, "period": 16, "seed": 3}},
    "split": {"train": 0.6, "val": 0.2, "test": 0.2}
  },
  "mask": {"pattern": "pointwise", "rate": 0.2},
  "model": {
    "channels": 8, "blocks": 1, "heads": 2, "decomposition_kernel": 5,
    "time_embed_dim": 8, "feature_embed_dim": 4, "cond_channels": 4, "step_embed_dim": 16,
    "seq_len": 16, "features": 2
  },
  "train": {"epochs": 2, "batch_size": 8, "learning_rate": 0.003, "validate_every": 1},
  "sampling": {"samples": 2}
}"#;

fn spectra(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spectra"));
    cmd.args(args).env_remove("SPECTRA_SEED");
    if let Some(s) = env_seed {
        cmd.env("SPECTRA_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = spectra(args, None);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn read_rows(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = write(dir, "tiny.json", TINY);
    let out = dir.join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    out.join("model.json")
}

fn series_csv(dir: &Path, name: &str, rows: usize, hole: Option<(usize, usize)>) -> PathBuf {
    let mut text = String::from("date,a,b\n");
    for t in 0..rows {
        let a = (t as f64 * 0.4).sin() + 0.01 * t as f64;
        let b = (t as f64 * 0.25).cos() * 2.0;
        let cell = |f: usize, v: f64| if hole == Some((t, f)) { String::new() } else { format!("{v}") };
        text.push_str(&format!("t{t:04},{},{}\n", cell(0, a), cell(1, b)));
    }
    write(dir, name, &text)
}

#[test]
fn train_writes_a_reloadable_checkpoint() {
    let dir = TempDir::new().unwrap();
    let manifest = trained(dir.path());
    let run = manifest.parent().unwrap();
    let log = json(&run.join("train_log.json"));
    assert_eq!(log["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(log["config"]["seed"], 0);

    let ck = checkpoint::load(&manifest).unwrap();
    let blob = std::fs::read(run.join("model.bin")).unwrap();
    check_partition(&ck.manifest.params, blob.len()).unwrap();
    let (records, bytes) = encode(&ck.params);
    assert_eq!(records, ck.manifest.params);
    assert_eq!(bytes, blob, "load then encode must reproduce the blob");

    let cfg = &ck.manifest.config;
    let splits = prepare(cfg).unwrap();
    let sched = NoiseSchedule::new(&cfg.schedule).unwrap();
    let val = evaluate_loss(&ck.model, &ck.params, splits.val.as_ref().unwrap(), &sched, &cfg.train).unwrap();
    assert_eq!(Some(val), log["best_val_loss"].as_f64());
}

#[test]
fn reruns_produce_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["--seed", "4", "train", "--config", s(&cfg), "--out", s(out)]);
        let manifest = a.join("model.json");
        ok(&["--seed", "4", "eval", "--checkpoint", s(&manifest), "--out", s(&out.join("eval.json"))]);
    }
    for f in ["train_log.json", "model.bin", "eval.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let report = json(&a.join("eval.json"));
    assert_eq!(report["source"]["checkpoint"]["seed"], 4);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "tiny.json", &TINY.replace("\"epochs\": 2", "\"epochs\": 1"));
    let run = |extra: &[&str], env: Option<&str>, out: &str| {
        let out = dir.path().join(out);
        let mut args = extra.to_vec();
        args.extend(["train", "--config", s(&cfg), "--out", s(&out)]);
        let res = spectra(&args, env);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        json(&out.join("train_log.json"))["config"]["seed"].as_u64().unwrap()
    };
    assert_eq!(run(&[], Some("11"), "env"), 11);
    assert_eq!(run(&["--seed", "7"], Some("11"), "flag"), 7);
    let bad = spectra(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))], Some("eleven"));
    assert_eq!(code(&bad), 2);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    let unknown = write(dir.path(), "unknown.json", r#"{"model": {"chanels": 8}}"#);
    assert_eq!(code(&spectra(&["train", "--config", s(&unknown), "--out", s(&out)], None)), 2);
    let invalid = write(dir.path(), "invalid.json", &TINY.replace("\"heads\": 2", "\"heads\": 3"));
    assert_eq!(code(&spectra(&["train", "--config", s(&invalid), "--out", s(&out)], None)), 2);
    assert!(!out.exists(), "nothing is written when the config is rejected");

    let missing = TINY.replace(
        r#"{"synth_random": {"features": 2, "length": 320, "period": 16, "seed": 3}}"#,
        r#"{"csv": {"path": "/nonexistent/data.csv"}}"#,
    );
    let missing = write(dir.path(), "missing.json", &missing);
    assert_eq!(code(&spectra(&["train", "--config", s(&missing), "--out", s(&out)], None)), 3);

    let huge = write(dir.path(), "huge.json", &TINY.replace("\"learning_rate\": 0.003", "\"learning_rate\": 1e30"));
    assert_eq!(code(&spectra(&["train", "--config", s(&huge), "--out", s(&out)], None)), 4);
    assert_eq!(code(&spectra(&["train", "--bogus"], None)), 2);
}

#[test]
fn fully_observed_input_comes_back_unchanged() {
    let dir = TempDir::new().unwrap();
    let manifest = trained(dir.path());
    let data = series_csv(dir.path(), "full.csv", 40, None);
    let out = dir.path().join("imp");
    ok(&["impute", "--checkpoint", s(&manifest), "--data", s(&data), "--out", s(&out)]);
    let (h0, r0) = read_rows(&data);
    let (h1, r1) = read_rows(&out.join("imputed.csv"));
    assert_eq!(h0, h1);
    assert_eq!(r0.len(), r1.len());
    for (a, b) in r0.iter().zip(&r1) {
        assert_eq!(a[0], b[0]);
        for (x, y) in a[1..].iter().zip(&b[1..]) {
            assert_eq!(x.parse::<f64>().unwrap(), y.parse::<f64>().unwrap());
        }
    }
    assert_eq!(json(&out.join("impute.json"))["imputed_entries"], 0);
}

#[test]
fn imputation_files_are_complete_for_one_and_sixteen_samples() {
    let dir = TempDir::new().unwrap();
    let manifest = trained(dir.path());
    let mut text = std::fs::read_to_string(series_csv(dir.path(), "full.csv", 37, None)).unwrap();
    // Gaps in both features, including one in the overlapped final window.
    for (t, f) in [(3, 0), (4, 0), (10, 1), (30, 1), (36, 0)] {
        let line = text.lines().nth(t + 1).unwrap().to_string();
        let mut cells: Vec<&str> = line.split(',').collect();
        cells[f + 1] = "";
        text = text.replacen(&line, &cells.join(","), 1);
    }
    let data = write(dir.path(), "gaps.csv", &text);
    for k in ["1", "16"] {
        let out = dir.path().join(format!("k{k}"));
        ok(&[
            "impute", "--checkpoint", s(&manifest), "--data", s(&data), "--out", s(&out), "--samples", k,
            "--quantiles", "0.1,0.5,0.9", "--save-samples",
        ]);
        let (_, rows) = read_rows(&out.join("imputed.csv"));
        assert_eq!(rows.len(), 37);
        for r in &rows {
            for c in &r[1..] {
                assert!(c.parse::<f64>().unwrap().is_finite(), "{r:?}");
            }
        }
        let (_, q) = read_rows(&out.join("quantiles.csv"));
        assert_eq!(q.len(), 37 * 3);
        for step in q.chunks(3) {
            assert_eq!(step.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(), ["0.1", "0.5", "0.9"]);
            for f in 2..4 {
                let v: Vec<f64> = step.iter().map(|r| r[f].parse().unwrap()).collect();
                assert!(v[0] <= v[1] && v[1] <= v[2], "{step:?}");
            }
        }
        let (_, samples) = read_rows(&out.join("samples.csv"));
        assert_eq!(samples.len(), 37 * k.parse::<usize>().unwrap());
        assert_eq!(json(&out.join("impute.json"))["imputed_entries"], 5);
    }
}

#[test]
fn impute_rejects_mismatched_features() {
    let dir = TempDir::new().unwrap();
    let manifest = trained(dir.path());
    let data = write(dir.path(), "one.csv", "date,a\n0,1\n1,2\n");
    let out = spectra(&["impute", "--checkpoint", s(&manifest), "--data", s(&data), "--out", "x"], None);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_of_exact_predictions_is_zero() {
    let dir = TempDir::new().unwrap();
    let truth = series_csv(dir.path(), "truth.csv", 30, None);
    let mask = write(dir.path(), "mask.csv", "b,t,d\n0,2,0\n0,5,1\n0,20,0\n");
    let out = dir.path().join("eval.json");
    ok(&["eval", "--pred", s(&truth), "--truth", s(&truth), "--mask", s(&mask), "--out", s(&out)]);
    let r = json(&out);
    assert_eq!(r["model"]["mae"], 0.0);
    assert_eq!(r["model"]["rmse"], 0.0);
    assert_eq!(r["model"]["mape"], 0.0);
    assert_eq!(r["model"]["n_eval"], 3);
    assert_eq!(r["ranking"][0]["name"], "model");
    assert_eq!(r["model_beats_baseline"]["mean"], true);
}

#[test]
fn eval_reproduces_hand_computed_metrics() {
    let dir = TempDir::new().unwrap();
    let truth = write(dir.path(), "truth.csv", "date,x\n0,1\n1,2\n2,4\n3,-2\n");
    let pred = write(dir.path(), "pred.csv", "date,x\n0,1\n1,3\n2,1\n3,-2\n");
    let mask = write(dir.path(), "mask.csv", "b,t,d\n0,1,0\n0,2,0\n");
    let samples = write(dir.path(), "samples.csv", "date,sample,x\n0,0,1\n1,0,3\n2,0,1\n3,0,-2\n");
    let out = dir.path().join("eval.json");
    ok(&[
        "eval", "--pred", s(&pred), "--truth", s(&truth), "--mask", s(&mask), "--sample-file", s(&samples),
        "--out", s(&out),
    ]);
    let r = json(&out);
    // Errors 1 and 3 on truths 2 and 4.
    assert_eq!(r["model"]["mae"], 2.0);
    assert_eq!(r["model"]["rmse"].as_f64().unwrap(), 5f64.sqrt());
    assert_eq!(r["model"]["mape"].as_f64().unwrap(), 100.0 * (0.5 + 0.75) / 2.0);
    assert_eq!(r["model"]["crps"], 2.0, "one sample makes CRPS the MAE");
    assert_eq!(r["mae_by_samples"][0]["mae"], 2.0);
}

#[test]
fn eval_rejects_misaligned_files() {
    let dir = TempDir::new().unwrap();
    let truth = series_csv(dir.path(), "truth.csv", 30, None);
    let pred = series_csv(dir.path(), "pred.csv", 29, None);
    let mask = write(dir.path(), "mask.csv", "b,t,d\n0,2,0\n");
    let out = spectra(&["eval", "--pred", s(&pred), "--truth", s(&truth), "--mask", s(&mask), "--out", "x.json"], None);
    assert_eq!(code(&out), 3);
    let holey = series_csv(dir.path(), "holey.csv", 30, Some((2, 0)));
    let out = spectra(&["eval", "--pred", s(&holey), "--truth", s(&truth), "--mask", s(&mask), "--out", "x.json"], None);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_report_records_the_baseline_ordering() {
    let dir = TempDir::new().unwrap();
    let manifest = trained(dir.path());
    let out = dir.path().join("eval.json");
    ok(&["eval", "--checkpoint", s(&manifest), "--samples", "4", "--out", s(&out)]);
    let r = json(&out);
    let model = r["model"]["mae"].as_f64().unwrap();
    let names: Vec<&str> = r["baselines"].as_array().unwrap().iter().map(|b| b["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["mean", "median", "linear-interp"]);
    for b in r["baselines"].as_array().unwrap() {
        let beats = model < b["report"]["mae"].as_f64().unwrap();
        assert_eq!(r["model_beats_baseline"][b["name"].as_str().unwrap()], beats);
    }
    let ranked: Vec<f64> = r["ranking"].as_array().unwrap().iter().map(|x| x["mae"].as_f64().unwrap()).collect();
    assert!(ranked.windows(2).all(|w| w[0] <= w[1]));
    let ks: Vec<u64> = r["mae_by_samples"].as_array().unwrap().iter().map(|p| p["k"].as_u64().unwrap()).collect();
    assert_eq!(ks, [1, 2, 4]);
    // The reported mean is averaged in single precision.
    let full = r["mae_by_samples"][2]["mae"].as_f64().unwrap();
    assert!((full - model).abs() <= 1e-6 * model, "{full} vs {model}");
}

#[test]
fn mask_then_impute_then_eval() {
    let dir = TempDir::new().unwrap();
    let manifest = trained(dir.path());
    let truth = series_csv(dir.path(), "truth.csv", 48, None);
    let (masked, mask) = (dir.path().join("masked.csv"), dir.path().join("mask.csv"));
    ok(&["--seed", "2", "mask", "--data", s(&truth), "--rate", "0.25", "--out-data", s(&masked), "--out-mask", s(&mask)]);
    let (_, mask_rows) = read_rows(&mask);
    assert_eq!(mask_rows.len(), 24);
    let imp = dir.path().join("imp");
    ok(&["impute", "--checkpoint", s(&manifest), "--data", s(&masked), "--out", s(&imp), "--samples", "2", "--save-samples"]);
    let out = dir.path().join("eval.json");
    ok(&[
        "eval", "--pred", s(&imp.join("imputed.csv")), "--truth", s(&truth), "--mask", s(&mask), "--sample-file",
        s(&imp.join("samples.csv")), "--out", s(&out),
    ]);
    let r = json(&out);
    assert_eq!(r["model"]["n_eval"], 24);
    assert!(r["model"]["crps"].as_f64().unwrap().is_finite());
}

#[test]
fn ablation_of_two_variants_shares_one_mask() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "tiny.json", &TINY.replace("\"validate_every\": 1", "\"validate_every\": 0"));
    let out = dir.path().join("abl");
    ok(&["ablate", "--config", s(&cfg), "--grid", "dft-attention,none-conv", "--seeds", "5", "--epochs", "1", "--out", s(&out)]);
    let (header, rows) = read_rows(&out.join("ablation.csv"));
    assert_eq!(header, ["variant", "fbp", "backbone", "runs", "failed", "mae", "rmse", "mape", "crps"]);
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0].as_str(), rows[1][0].as_str()), ("dft-attention", "none-conv"));
    let (_, runs) = read_rows(&out.join("ablation_runs.csv"));
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0][7], runs[1][7]);
    let mask = std::fs::read(out.join("masks/seed5.csv")).unwrap();
    use sha2::Digest;
    assert_eq!(format!("{:x}", sha2::Sha256::digest(&mask)), runs[0][7]);
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("dft-attention") && summary.contains("none-conv"));
}

#[test]
fn ablation_reports_failed_cells_and_continues() {
    let dir = TempDir::new().unwrap();
    // A 64-step analysis window cannot fit a 16-step series, which only the
    // STFT variant uses.
    let text = TINY
        .replace("\"validate_every\": 1", "\"validate_every\": 0")
        .replace("\"seq_len\": 16", "\"seq_len\": 16, \"window\": {\"length\": 64, \"hop\": 32}");
    let cfg = write(dir.path(), "cfg.json", &text);
    let out = dir.path().join("abl");
    ok(&["ablate", "--config", s(&cfg), "--grid", "stft-attention,dft-attention", "--epochs", "1", "--out", s(&out)]);
    let (_, runs) = read_rows(&out.join("ablation_runs.csv"));
    assert_eq!(runs[0][2], "failed");
    assert!(!runs[0][8].is_empty());
    assert_eq!(runs[1][2], "ok");
    let report = json(&out.join("ablation.json"));
    assert_eq!(report["summary"][0]["variant"], "dft-attention");
    assert_eq!(report["summary"][1]["rank"], Value::Null);
}

#[test]
fn ablation_rejects_unknown_variants() {
    let out = spectra(&["ablate", "--grid", "dft-lstm", "--out", "x"], None);
    assert_eq!(code(&out), 2);
}

#[test]
fn curve_plot_has_one_series_per_run() {
    let dir = TempDir::new().unwrap();
    let inputs: Vec<PathBuf> = (0..3)
        .map(|i| {
            let pts: Vec<String> = [1, 2, 4, 8, 16]
                .iter()
                .map(|k| format!(r#"{{"k": {k}, "mae": {}}}"#, 0.3 + 0.1 * i as f64 + 0.2 / *k as f64))
                .collect();
            write(dir.path(), &format!("run{i}.json"), &format!(r#"{{"mae_by_samples": [{}]}}"#, pts.join(",")))
        })
        .collect();
    let out = dir.path().join("curve.svg");
    let mut args = vec!["plot", "curve", "--out", s(&out)];
    for p in &inputs {
        args.extend(["--input", s(p)]);
    }
    ok(&args);
    let svg = std::fs::read_to_string(&out).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    for i in 0..3 {
        assert!(svg.contains(&format!(">run{i}</text>")));
    }
    let again = dir.path().join("again.svg");
    args[3] = s(&again);
    ok(&args);
    assert_eq!(svg, std::fs::read_to_string(&again).unwrap());
}

#[test]
fn training_logs_plot_as_loss_curves() {
    let dir = TempDir::new().unwrap();
    let manifest = trained(dir.path());
    let log = manifest.with_file_name("train_log.json");
    let out = dir.path().join("loss.svg");
    ok(&["plot", "curve", "--input", s(&log), "--label", "tiny", "--out", s(&out)]);
    assert!(std::fs::read_to_string(&out).unwrap().contains("training loss"));
}

#[test]
fn spectra_overlay_of_masked_and_true_series() {
    let dir = TempDir::new().unwrap();
    let truth = series_csv(dir.path(), "truth.csv", 64, None);
    let (masked, mask) = (dir.path().join("masked.csv"), dir.path().join("mask.csv"));
    ok(&["mask", "--data", s(&truth), "--pattern", "timewise", "--rate", "0.3", "--out-data", s(&masked), "--out-mask", s(&mask)]);
    let (gt, gm) = (dir.path().join("true.csv"), dir.path().join("masked_gram.csv"));
    ok(&["spectra", "dump", "--data", s(&truth), "--feature", "a", "--kind", "stft", "--out", s(&gt)]);
    ok(&["spectra", "dump", "--data", s(&masked), "--feature", "a", "--kind", "stft", "--out", s(&gm)]);
    let (header, rows) = read_rows(&gt);
    assert_eq!(header, ["frame", "bin", "re", "im"]);
    // A 64-step segment uses a 42-step window with hop 21: 22 bins, 2 frames.
    assert_eq!(rows.len(), 22 * 2);
    let out = dir.path().join("spectra.svg");
    ok(&["plot", "spectra", "--input", s(&gt), "--input", s(&gm), "--label", "true", "--label", "masked", "--out", s(&out)]);
    let svg = std::fs::read_to_string(&out).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
}

#[test]
fn dft_dump_has_one_frame() {
    let dir = TempDir::new().unwrap();
    let data = series_csv(dir.path(), "x.csv", 32, None);
    let out = dir.path().join("g.csv");
    ok(&["spectra", "dump", "--data", s(&data), "--feature", "1", "--start", "8", "--length", "16", "--out", s(&out)]);
    let (_, rows) = read_rows(&out);
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r[0] == "0"));
}

#[test]
fn empty_plot_input_is_an_error_without_output() {
    let dir = TempDir::new().unwrap();
    let empty = write(dir.path(), "empty.json", r#"{"mae_by_samples": []}"#);
    let out = dir.path().join("p.svg");
    let res = spectra(&["plot", "curve", "--input", s(&empty), "--out", s(&out)], None);
    assert_eq!(code(&res), 3);
    assert!(!out.exists());
    let gram = write(dir.path(), "gram.csv", "frame,bin,re,im\n");
    let res = spectra(&["plot", "spectra", "--input", s(&gram), "--out", s(&out)], None);
    assert_eq!(code(&res), 3);
    assert!(!out.exists());
    let res = spectra(&["plot", "curve", "--out", s(&out)], None);
    assert_eq!(code(&res), 2);
    assert!(!out.exists());
}

/// Desk-scale run of the full grid; slow, so run explicitly with
/// `cargo test -p spectra-cli --test commands -- --ignored`.
#[test]
#[ignore]
fn full_grid_finishes_within_thirty_minutes() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfig {
        ..RunConfig::from_json(include_str!("../configs/ablation.json")).unwrap()
    };
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    let out = dir.path().join("abl");
    let start = std::time::Instant::now();
    ok(&["ablate", "--config", s(&path), "--out", s(&out)]);
    let elapsed = start.elapsed();
    let (_, rows) = read_rows(&out.join("ablation.csv"));
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[4] == "0"), "{rows:?}");
    assert!(elapsed.as_secs() < 30 * 60, "grid took {elapsed:?}");
}
