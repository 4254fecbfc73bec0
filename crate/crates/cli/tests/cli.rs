use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sclle::enhancer::EnhancerConfig;
use sclle::imageio::{load_image, save_image, Image};
use sclle::synthetic::{scene, texture_image, write_corpus, CorpusSpec};
use sclle::trainer::Checkpoint;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scl-lle"));
    c.env_remove("SCL_LLE_THREADS").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn small_corpus(root: &Path) {
    let spec = CorpusSpec {
        inputs: 4,
        positives: 2,
        over: 1,
        under: 1,
        size: 16,
        ..CorpusSpec::default()
    };
    write_corpus(root, &spec, 3).unwrap();
}

fn write_scenes(dir: &Path, n: u64, size: usize) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    (0..n)
        .map(|i| {
            let (img, _) = scene(100 + i, size, size).unwrap();
            let p = dir.join(format!("img_{i}.png"));
            save_image(&img, &p).unwrap();
            p
        })
        .collect()
}

fn zero_checkpoint(path: &Path) {
    Checkpoint::<f32>::zeros(EnhancerConfig::default()).unwrap().save(path).unwrap();
}

#[test]
fn unknown_ablation_switch_is_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&["ablate", "--data-root", s(t.path()), "--out-dir", s(&t.path().join("o")), "--switches", "no-foo", "--dry-run"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("no-foo"));
    assert!(!t.path().join("o").exists());
}

#[test]
fn ablate_dry_run_derives_one_config_per_switch() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("abl");
    let o = run(&[
        "ablate", "--data-root", s(t.path()), "--out-dir", s(&out), "--dry-run", "--baseline", "--seed", "9",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let base = manifest(&out.join("full"))["config"].clone();
    for sw in ["no-lc", "no-lsc", "no-lfr", "no-neg", "no-over", "no-under"] {
        let m = manifest(&out.join(sw));
        assert_eq!(m["tag"], sw);
        assert_eq!(m["seeds"]["train"], 9);
        let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(sw).join("config.json")).unwrap()).unwrap();
        assert_eq!(cfg, m["config"]);
        let mut changed = Vec::new();
        diff("", &base, &cfg, &mut changed);
        let expect: &[&str] = match sw {
            "no-lc" => &["/loss/weights/contrastive"],
            "no-lsc" => &["/loss/weights/semantic"],
            "no-lfr" => &["/loss/weights/retention"],
            "no-neg" => &["/data/pools/neg_over", "/data/pools/neg_under"],
            "no-over" => &["/data/pools/neg_over"],
            _ => &["/data/pools/neg_under"],
        };
        assert_eq!(changed, expect, "{sw}");
    }
}

fn diff(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, v) in x {
                diff(&format!("{path}/{k}"), v, &y[k], out);
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

#[test]
fn train_writes_log_checkpoint_and_manifest_with_flag_precedence() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    small_corpus(&data);
    let cfg_path = t.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"lr": 0.001, "max_epochs": 3, "data": {"image_size": 16, "num_classes": 3}}"#).unwrap();
    let out = t.path().join("run");
    let o = run(&[
        "train", "--config", s(&cfg_path), "--data-root", s(&data), "--out-dir", s(&out), "--lr", "0.0002",
        "--max-steps", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["command"], "train");
    assert_eq!(m["status"], "succeeded");
    assert_eq!(m["config"]["lr"], 0.0002);
    assert_eq!(m["config"]["max_epochs"], 3);
    assert!(m["finished_at"].is_string());
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["step", "l_c", "l_sc", "l_fr", "l_cc", "total"] {
            assert!(v.get(k).is_some(), "{k} missing in {line}");
        }
    }
    assert!(out.join("final.scla").is_file());

    let resumed = t.path().join("resumed");
    let o = run(&[
        "train", "--config", s(&cfg_path), "--data-root", s(&data), "--out-dir", s(&resumed), "--max-steps", "4",
        "--lr", "0.0002", "--resume", s(&out.join("final.scla")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&resumed);
    assert!(m["checkpoint"]["content_hash"].as_str().unwrap().starts_with("sha256:"));
}

#[test]
fn train_rejects_zero_epochs() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data-root", s(t.path()), "--out-dir", s(&t.path().join("o")), "--max-epochs", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("max_epochs"));
}

#[test]
fn train_on_missing_dataset_is_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data-root", s(&t.path().join("nope")), "--out-dir", s(&t.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(manifest(&t.path().join("o"))["status"], "failed");
}

#[test]
fn enhance_with_zero_checkpoint_is_identity_and_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let inputs = write_scenes(&t.path().join("in"), 3, 20);
    let ckpt = t.path().join("zero.scla");
    zero_checkpoint(&ckpt);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["enhance", "--checkpoint", s(&ckpt), "--in", s(&t.path().join("in")), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for p in &inputs {
        let name = p.file_name().unwrap();
        let src: Image<f64> = load_image(p).unwrap();
        let got: Image<f64> = load_image(&a.join(name)).unwrap();
        assert_eq!(src, got);
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let m = manifest(&a);
    assert_eq!(m["checkpoint"]["content_hash"], manifest(&b)["checkpoint"]["content_hash"]);
}

#[test]
fn enhance_empty_dir_succeeds_with_warning() {
    let t = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(t.path().join("in")).unwrap();
    let ckpt = t.path().join("zero.scla");
    zero_checkpoint(&ckpt);
    let out = t.path().join("out");
    let o = bin()
        .env("RUST_LOG", "info")
        .args(["enhance", "--checkpoint", s(&ckpt), "--in", s(&t.path().join("in")), "--out", s(&out)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("no images"));
    assert_eq!(manifest(&out)["status"], "succeeded");
}

#[test]
fn enhance_reports_corrupt_checkpoint_offset() {
    let t = tempfile::tempdir().unwrap();
    write_scenes(&t.path().join("in"), 1, 8);
    let ckpt = t.path().join("bad.scla");
    zero_checkpoint(&ckpt);
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes.truncate(n / 2);
    std::fs::write(&ckpt, bytes).unwrap();
    let o = run(&["enhance", "--checkpoint", s(&ckpt), "--in", s(&t.path().join("in")), "--out", s(&t.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("byte offset"), "{}", stderr(&o));
}

#[test]
fn enhance_counts_per_file_failures() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path().join("in");
    write_scenes(&dir, 2, 8);
    std::fs::write(dir.join("broken.png"), b"not a png").unwrap();
    let ckpt = t.path().join("zero.scla");
    zero_checkpoint(&ckpt);
    let out = t.path().join("o");
    let o = run(&["enhance", "--checkpoint", s(&ckpt), "--in", s(&dir), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("broken.png"));
    assert!(out.join("img_0.png").is_file() && out.join("img_1.png").is_file());
    assert_eq!(manifest(&out)["status"], "failed");
}

#[test]
fn darken_gamma_one_is_byte_identity_and_gamma_two_squares() {
    let t = tempfile::tempdir().unwrap();
    let inputs = write_scenes(&t.path().join("in"), 2, 12);
    let one = t.path().join("g1");
    let o = run(&["darken", "--gamma", "1", "--in", s(&t.path().join("in")), "--out", s(&one)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for p in &inputs {
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(one.join(p.file_name().unwrap())).unwrap());
    }
    let two = t.path().join("g2");
    let o = run(&["darken", "--gamma", "2", "--in", s(&t.path().join("in")), "--out", s(&two)]);
    assert_eq!(code(&o), 0);
    let src: Image<f64> = load_image(&inputs[0]).unwrap();
    let got: Image<f64> = load_image(&two.join("img_0.png")).unwrap();
    for (a, b) in src.as_slice().iter().zip(got.as_slice()) {
        assert_eq!(((a * a * 255.0) + 0.5).floor(), (b * 255.0).round());
    }
    assert_eq!(manifest(&two)["config"]["gamma"], 2.0);
    let o = run(&["darken", "--gamma", "-1", "--in", s(&t.path().join("in")), "--out", s(&two)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_identical_pair_and_empty_intersection() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    write_scenes(&a, 1, 16);
    let out = t.path().join("rep");
    let o = run(&["eval", "--metrics", "psnr,ssim", "--pred", s(&a), "--ref", s(&a), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    assert!(row.starts_with("img_0,inf,1"), "{csv}");
    assert!(out.join("report.json").is_file());
    assert_eq!(manifest(&out)["command"], "eval");

    let b = t.path().join("b");
    std::fs::create_dir_all(&b).unwrap();
    save_image(&scene(5, 16, 16).unwrap().0, &b.join("other.png")).unwrap();
    let o = run(&["eval", "--metrics", "psnr", "--pred", s(&a), "--ref", s(&b), "--out", s(&t.path().join("r2"))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("img_0") && err.contains("other"), "{err}");

    let o = run(&["eval", "--metrics", "psnr,bogus", "--pred", s(&a), "--ref", s(&a), "--out", s(&t.path().join("r3"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fit_niqe_then_eval_niqe() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("pristine");
    std::fs::create_dir_all(&corpus).unwrap();
    for i in 0..4 {
        save_image(&texture_image(200 + i, 192, 192).unwrap(), &corpus.join(format!("p{i}.png"))).unwrap();
    }
    let model_dir = t.path().join("model");
    let o = run(&["fit-niqe", "--in", s(&corpus), "--out", s(&model_dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(model_dir.join("niqe_model.scla").is_file());
    let out = t.path().join("rep");
    let o = run(&[
        "eval", "--metrics", "niqe", "--pred", s(&corpus), "--niqe-model", s(&model_dir.join("niqe_model.scla")),
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_miou_with_oracle_is_one() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    small_corpus(&data);
    let out = t.path().join("rep");
    let o = run(&[
        "eval", "--metrics", "miou", "--pred", s(&data.join("inputs")), "--labels", s(&data.join("labels")),
        "--segmenter", "oracle", "--num-classes", "3", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("pooled miou 1.000000"), "{}", stdout(&o));
}

#[test]
fn bad_thread_count_is_usage_error() {
    let o = bin().env("SCL_LLE_THREADS", "zero").args(["selftest"]).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("SCL_LLE_THREADS"));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(code(&run(&["darken", "--brightness", "2"])), 2);
}

#[test]
fn selftest_lists_terms_and_groups() {
    let o = bin().env("SCL_LLE_THREADS", "2").arg("selftest").output().unwrap();
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    let groups = text.lines().filter(|l| l.starts_with("[pass]")).count();
    assert!(groups >= 6, "{text}");
    for term in ["l_c ", "l_sc ", "l_fr ", "l_cc "] {
        assert_eq!(text.lines().filter(|l| l.trim_start().starts_with(term)).count(), 1, "{term}");
    }
}

#[test]
fn gradcheck_writes_report() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--segmenter", "oracle", "--out", s(t.path())]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(t.path().join("gradcheck.json")).unwrap()).unwrap();
    let terms: Vec<&str> = report["terms"].as_array().unwrap().iter().map(|t| t["term"].as_str().unwrap()).collect();
    assert_eq!(terms, ["l_c", "l_sc", "l_fr", "l_cc", "total"]);
    assert_eq!(manifest(t.path())["seeds"]["gradcheck"], 0);
}
