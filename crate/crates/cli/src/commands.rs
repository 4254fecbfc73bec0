use std::path::Path;
use std::process::ExitCode;

use rayon::prelude::*;
use serde_json::json;

use sclle::data::{list_images, stem_of};
use sclle::enhancer::ENHANCER_VERSION;
use sclle::gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
use sclle::imageio::{gamma_darken, load_image, save_image};
use sclle::metrics::{self, eval_report, EvalConfig, Metric, NiqeConfig, NiqeModel};
use sclle::selftest::run_selftest;
use sclle::trainer::{build_segmenter, train as run_training, Ablation, Checkpoint, SegBackendConfig, TrainConfig};
use sclle::{Error, ImageF64};

use crate::manifest::{RunManifest, RunStatus};
use crate::{AblateArgs, ConfigArgs, DarkenArgs, EnhanceArgs, EvalArgs, FitNiqeArgs, GradcheckArgs, SelftestArgs, TrainArgs};

pub const THREADS_VAR: &str = "SCL_LLE_THREADS";
pub const NIQE_MODEL_FILE: &str = "niqe_model.scla";
pub const CONFIG_FILE: &str = "config.json";

/// Why a command stopped, and with which exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, configuration or dataset layout; exit 2.
    Usage(String),
    /// Work ran but something failed; exit 1.
    Run(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run(_) => 1,
        }
    }

    pub fn report(&self) -> ExitCode {
        match self {
            Failure::Usage(m) | Failure::Run(m) => log::error!("{m}"),
        }
        ExitCode::from(self.code())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownLayer(_) | Error::Dataset(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Run(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Sizes the global pool from `SCL_LLE_THREADS` when set.
pub fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_VAR} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Run(format!("thread pool: {e}")))
}

/// Config file first, then every flag that was given.
pub fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = args.image_size {
        cfg.data.image_size = v;
    }
    if let Some(v) = args.num_classes {
        cfg.data.num_classes = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = args.augment_fraction {
        cfg.data.augment.fraction = v;
    }
    if let Some(v) = args.segmenter {
        cfg.segmenter.kind = v.into();
    }
    if let Some(v) = &args.segmenter_weights {
        cfg.segmenter.weights = Some(v.clone());
    }
    if let Some(v) = args.features {
        cfg.features.kind = v.into();
    }
    if let Some(v) = &args.features_weights {
        cfg.features.weights = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_json(cfg: &TrainConfig) -> Result<serde_json::Value, Failure> {
    serde_json::to_value(cfg).map_err(|e| Failure::Run(e.to_string()))
}

fn train_manifest(command: &str, cfg: &TrainConfig) -> Result<RunManifest, Failure> {
    Ok(RunManifest::new(command, config_json(cfg)?)
        .seed("train", cfg.seed)
        .seed("features", cfg.features.seed)
        .seed("segmenter", cfg.segmenter.seed))
}

/// Records `outcome` in the manifest and passes it through.
fn finish<T>(manifest: &mut RunManifest, dir: &Path, outcome: Result<T, Failure>) -> Result<T, Failure> {
    let (status, message) = match &outcome {
        Ok(_) => (RunStatus::Succeeded, None),
        Err(Failure::Usage(m) | Failure::Run(m)) => (RunStatus::Failed, Some(m.clone())),
    };
    manifest.finish(dir, status, message)?;
    outcome
}

fn train_one(cfg: &TrainConfig, data_root: &Path, out_dir: &Path, mut manifest: RunManifest, resume: Option<&Path>) -> CmdResult {
    manifest.begin(out_dir)?;
    let outcome = run_training::<f32>(cfg, data_root, out_dir, resume)
        .map_err(Failure::from)
        .map(|s| {
            println!(
                "{}: {} steps, final total {:.6}, checkpoint {}",
                out_dir.display(),
                s.steps_run,
                s.log.last().map_or(f64::NAN, |e| e.total),
                s.final_path.display()
            );
        });
    finish(&mut manifest, out_dir, outcome)
}

pub fn train(args: TrainArgs) -> CmdResult {
    let cfg = resolve_config(&args.config)?;
    let mut manifest = train_manifest("train", &cfg)?;
    if let Some(r) = &args.resume {
        manifest = manifest.checkpoint(r)?;
    }
    train_one(&cfg, &args.data_root, &args.out_dir, manifest, args.resume.as_deref())
}

pub fn ablate(args: AblateArgs) -> CmdResult {
    let base = resolve_config(&args.config)?;
    let switches: Vec<Ablation> = args
        .switches
        .iter()
        .map(|s| s.parse::<Ablation>())
        .collect::<Result<_, _>>()?;
    let mut runs: Vec<(String, TrainConfig)> = Vec::new();
    if args.baseline {
        runs.push(("full".into(), base.clone()));
    }
    for s in switches {
        runs.push((s.name().into(), s.apply(&base)));
    }
    let mut failed = Vec::new();
    for (tag, cfg) in runs {
        let dir = args.out_dir.join(&tag);
        let manifest = train_manifest("ablate", &cfg)?.tag(&tag);
        let bytes = serde_json::to_vec_pretty(&cfg).map_err(|e| Failure::Run(e.to_string()))?;
        if args.dry_run {
            let mut manifest = manifest;
            manifest.begin(&dir)?;
            sclle::archive::write_atomic(&dir.join(CONFIG_FILE), &bytes)?;
            manifest.finish(&dir, RunStatus::Succeeded, Some("dry run".into()))?;
            println!("{tag}: configuration written to {}", dir.display());
            continue;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Failure::Run(format!("{}: {e}", dir.display())))?;
        sclle::archive::write_atomic(&dir.join(CONFIG_FILE), &bytes)?;
        match train_one(&cfg, &args.data_root, &dir, manifest, None) {
            Ok(()) => {}
            Err(f @ Failure::Usage(_)) => return Err(f),
            Err(Failure::Run(m)) => {
                log::error!("{tag}: {m}");
                failed.push(tag);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(format!("ablation runs failed: {}", failed.join(", "))))
    }
}

/// Applies `work` to every image of `in_dir`, logging per-file failures.
fn per_file(in_dir: &Path, work: impl Fn(&Path) -> sclle::Result<()> + Sync) -> Result<usize, Failure> {
    let files = list_images(in_dir)?;
    if files.is_empty() {
        log::warn!("no images in {}", in_dir.display());
        return Ok(0);
    }
    let errors: Vec<String> = files
        .par_iter()
        .filter_map(|p| work(p).err().map(|e| format!("{}: {e}", p.display())))
        .collect();
    for e in &errors {
        log::error!("{e}");
    }
    if errors.is_empty() {
        Ok(files.len())
    } else {
        Err(Failure::Run(format!("{} of {} files failed", errors.len(), files.len())))
    }
}

pub fn enhance(args: EnhanceArgs) -> CmdResult {
    let mut manifest = RunManifest::new("enhance", json!({ "in": args.in_dir, "out": args.out_dir }));
    manifest = manifest.checkpoint(&args.checkpoint)?;
    manifest.begin(&args.out_dir)?;
    let outcome = (|| {
        let ckpt = Checkpoint::<f32>::load(&args.checkpoint).map_err(|e| Failure::Usage(e.to_string()))?;
        let n = per_file(&args.in_dir, |p| {
            let img = load_image::<f32>(p)?;
            let (out, _) = ckpt.params.enhance(&img)?;
            save_image(&out, &args.out_dir.join(format!("{}.png", stem_of(p))))
        })?;
        println!("enhanced {n} images into {}", args.out_dir.display());
        Ok(())
    })();
    finish(&mut manifest, &args.out_dir, outcome)
}

pub fn darken(args: DarkenArgs) -> CmdResult {
    if !(args.gamma > 0.0 && args.gamma.is_finite()) {
        return Err(Failure::Usage(format!("gamma must be positive, got {}", args.gamma)));
    }
    let mut manifest = RunManifest::new(
        "darken",
        json!({ "gamma": args.gamma, "in": args.in_dir, "out": args.out_dir }),
    );
    manifest.begin(&args.out_dir)?;
    let outcome = per_file(&args.in_dir, |p| {
        if args.gamma == 1.0 {
            let name = p.file_name().expect("listed files have names");
            let dest = args.out_dir.join(name);
            std::fs::copy(p, &dest).map_err(|e| Error::Io { path: dest, source: e })?;
            return Ok(());
        }
        let img: ImageF64 = load_image(p)?;
        save_image(&gamma_darken(&img, args.gamma)?, &args.out_dir.join(format!("{}.png", stem_of(p))))
    })
    .map(|n| println!("darkened {n} images with gamma {} into {}", args.gamma, args.out_dir.display()));
    finish(&mut manifest, &args.out_dir, outcome)
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let metrics = Metric::parse_list(&args.metrics)?;
    let niqe_model = args
        .niqe_model
        .as_deref()
        .map(NiqeModel::load)
        .transpose()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let seg_cfg = SegBackendConfig {
        kind: args.segmenter.into(),
        seed: args.segmenter_seed,
        weights: args.segmenter_weights.clone(),
    };
    let segmenter = if metrics.contains(&Metric::Miou) {
        Some(build_segmenter::<f32>(&seg_cfg, args.num_classes)?)
    } else {
        None
    };
    let mut manifest = RunManifest::new(
        "eval",
        json!({
            "metrics": metrics.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "pred": args.pred,
            "ref": args.ref_dir,
            "labels": args.labels,
            "niqe_model": args.niqe_model,
            "segmenter": seg_cfg,
            "num_classes": args.num_classes,
            "brightness": format!("{:?}", args.brightness),
        }),
    )
    .seed("segmenter", args.segmenter_seed);
    if let Some(p) = &args.niqe_model {
        manifest = manifest.checkpoint(p)?;
    }
    manifest.begin(&args.out)?;
    let cfg = EvalConfig {
        metrics,
        brightness_mode: args.brightness.into(),
        niqe_model: niqe_model.as_ref(),
        labels_dir: args.labels.as_deref(),
        segmenter: segmenter.as_deref(),
        num_classes: args.num_classes,
    };
    let outcome = eval_report(&args.pred, args.ref_dir.as_deref(), &cfg, &args.out)
        .map_err(Failure::from)
        .and_then(|report| {
            for u in &report.unmatched {
                log::warn!("unmatched stem {u}");
            }
            let means: Vec<String> = report.mean.iter().map(|(m, s)| format!("{}={}", m.name(), s)).collect();
            println!("{} rows; mean {}", report.rows.len(), means.join(" "));
            if let Some(p) = &report.pooled_miou {
                println!("pooled miou {:.6}", p.mean);
            }
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(Failure::Run(format!("{} images failed to evaluate", report.failures.len())))
            }
        });
    finish(&mut manifest, &args.out, outcome)
}

pub fn print_gradcheck(report: &GradCheckReport) {
    println!(
        "gradient check: seed {}, {}x{}, {} classes, {} iterations, step {:e}, tolerance {:e}",
        report.config.seed,
        report.config.size,
        report.config.size,
        report.config.num_classes,
        report.config.iterations,
        report.config.fd_step,
        report.config.tolerance
    );
    for t in &report.terms {
        println!(
            "  {:<6} pixels {:.3e}  params {:.3e}  {}",
            t.term,
            t.pixels.max_rel,
            t.params.max_rel,
            if t.passed { "pass" } else { "FAIL" }
        );
    }
}

pub fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let cfg = GradCheckConfig {
        seed: args.seed,
        segmenter: args.segmenter.into(),
        ..GradCheckConfig::default()
    };
    let mut manifest = RunManifest::new("gradcheck", json!(cfg)).seed("gradcheck", cfg.seed);
    if let Some(dir) = &args.out {
        manifest.begin(dir)?;
    }
    let outcome = gradient_check(&cfg).map_err(Failure::from).and_then(|report| {
        print_gradcheck(&report);
        if let Some(dir) = &args.out {
            let bytes = serde_json::to_vec_pretty(&report).map_err(|e| Failure::Run(e.to_string()))?;
            sclle::archive::write_atomic(&dir.join("gradcheck.json"), &bytes)?;
        }
        if report.passed {
            Ok(())
        } else {
            Err(Failure::Run("gradient check failed".into()))
        }
    });
    match &args.out {
        Some(dir) => finish(&mut manifest, dir, outcome),
        None => outcome,
    }
}

fn fit_model(args: &FitNiqeArgs) -> Result<NiqeModel, Failure> {
    let files = list_images(&args.in_dir)?;
    if files.is_empty() {
        return Err(Failure::Usage(format!("no images in {}", args.in_dir.display())));
    }
    let corpus: Vec<ImageF64> = files.iter().map(|p| load_image(p)).collect::<Result<_, _>>()?;
    let cfg = NiqeConfig {
        patch_size: args.patch_size,
        sharpness_threshold: args.sharpness_threshold,
    };
    Ok(metrics::fit_niqe(&corpus, cfg)?)
}

pub fn fit_niqe(args: FitNiqeArgs) -> CmdResult {
    let mut manifest = RunManifest::new(
        "fit-niqe",
        json!({
            "in": args.in_dir,
            "patch_size": args.patch_size,
            "sharpness_threshold": args.sharpness_threshold,
        }),
    );
    manifest.begin(&args.out_dir)?;
    let outcome = fit_model(&args).and_then(|model| {
        let path = args.out_dir.join(NIQE_MODEL_FILE);
        model.save(&path)?;
        println!("niqe model ({} features) written to {}", model.dim(), path.display());
        Ok(())
    });
    finish(&mut manifest, &args.out_dir, outcome)
}

pub fn selftest(args: SelftestArgs) -> CmdResult {
    println!(
        "scl-lle {} (enhancer {}, archive format {})",
        env!("CARGO_PKG_VERSION"),
        ENHANCER_VERSION,
        sclle::archive::FORMAT_VERSION
    );
    let report = run_selftest(&GradCheckConfig::default())?;
    for g in &report.groups {
        println!("[{}] {}", if g.passed() { "pass" } else { "FAIL" }, g.name);
        for c in &g.checks {
            println!("    {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        }
    }
    print_gradcheck(&report.gradcheck);
    println!(
        "{} invariant groups, {} loss terms checked: {}",
        report.groups.len(),
        report.gradcheck.terms.iter().filter(|t| t.term != "total").count(),
        if report.passed { "all passed" } else { "FAILURES" }
    );
    if let Some(p) = &args.json {
        let bytes = serde_json::to_vec_pretty(&report).map_err(|e| Failure::Run(e.to_string()))?;
        sclle::archive::write_atomic(p, &bytes)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Run("self-test failed".into()))
    }
}
