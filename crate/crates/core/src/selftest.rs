//! Built-in invariant suite run by `scl-lle selftest`: small closed-form
//! checks grouped by subsystem, followed by the gradient check.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::data::{sample_contrastive_pair, stream_rng, SampleBank, Stream};
use crate::enhancer::{apply_curves, curve_step, CurveStack, EnhancerConfig};
use crate::error::{Error, Result};
use crate::features::{gram_matrix, ConvFeatureNet, FeatureBackend, DEFAULT_GRAM_LAYERS, DEFAULT_RETENTION_LAYER};
use crate::gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
use crate::imageio::{decode_image, encode_png, gamma_darken, BrightnessMode, Image};
use crate::losses::{
    color_terms, contrastive_loss, feature_retention_loss, semantic_terms, total_loss, Backends, LossConfig, LossInputs,
    Margins,
};
use crate::metrics::{miou, psnr, ssim};
use crate::segmenter::{one_hot, LabelMap, OracleSegmenter, ProbMap};
use crate::tensor::Tensor3;
use crate::trainer::Checkpoint;

const HAND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub checks: Vec<Check>,
}

impl Group {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTestReport {
    pub groups: Vec<Group>,
    pub gradcheck: GradCheckReport,
    pub passed: bool,
}

struct Collector {
    group: Group,
}

impl Collector {
    fn new(name: &str) -> Self {
        Self {
            group: Group {
                name: name.into(),
                checks: Vec::new(),
            },
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.group.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn close(&mut self, name: &str, got: f64, want: f64) {
        self.check(name, (got - want).abs() <= HAND_TOL, format!("{got:.12} vs {want:.12}"));
    }

    /// Records a failed check instead of propagating `r`'s error.
    fn run(&mut self, name: &str, r: Result<(bool, String)>) {
        match r {
            Ok((ok, detail)) => self.check(name, ok, detail),
            Err(e) => self.check(name, false, format!("error: {e}")),
        }
    }
}

fn gray(h: usize, w: usize, v: f64) -> Result<Image<f64>> {
    Image::constant(h, w, v)
}

fn curve_group() -> Group {
    let mut g = Collector::new("curve");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut closed, mut monotone) = (true, true);
    for _ in 0..10_000 {
        let x: f64 = rng.random();
        let a: f64 = rng.random_range(-1.0..=1.0);
        let y = curve_step(x, a);
        closed &= (0.0..=1.0).contains(&y);
        let x2 = (x + rng.random::<f64>() * (1.0 - x)).min(1.0);
        monotone &= curve_step(x2, a) >= y;
    }
    g.check("range closure", closed, "10000 samples");
    g.check("monotone in x", monotone, "10000 samples");
    let fixed = [-1.0, -0.3, 0.0, 0.7, 1.0]
        .iter()
        .all(|&a| curve_step(0.0, a) == 0.0 && curve_step(1.0, a) == 1.0);
    g.check("fixed points 0 and 1", fixed, "exact");
    g.run(
        "zero curves are identity",
        (|| {
            let img = Image::<f64>::from_fn(5, 7, |y, x| [(y * 7 + x) as f64 / 35.0, 0.25, 0.9])?;
            let out = apply_curves(&img, &CurveStack::zeros(8, 5, 7))?;
            Ok((out == img, "bit-exact".into()))
        })(),
    );
    g.group
}

fn imageio_group() -> Group {
    let mut g = Collector::new("imageio");
    g.run(
        "8-bit png round trip",
        (|| {
            let img = Image::<f64>::from_fn(4, 16, |y, x| {
                let v = ((y * 16 + x) * 4) as f64 / 255.0;
                [v, 1.0 - v, 0.5]
            })?;
            let bytes = encode_png(&img)?;
            let back: Image<f64> = decode_image(&bytes, Path::new("<selftest>"))?;
            let again = encode_png(&back)?;
            Ok((bytes == again, format!("{} bytes", bytes.len())))
        })(),
    );
    g.run(
        "gamma 1 is identity",
        (|| {
            let img = Image::<f64>::from_fn(3, 3, |y, x| [0.1 * y as f64, 0.1 * x as f64, 0.77])?;
            Ok((gamma_darken(&img, 1.0)? == img, "bit-exact".into()))
        })(),
    );
    g.run(
        "gamma darkening lowers mid-tones",
        (|| {
            let img = gray(2, 2, 0.5)?;
            let d = gamma_darken(&img, 2.0)?;
            Ok((d.get(0, 0, 0) == 0.25, format!("{}", d.get(0, 0, 0))))
        })(),
    );
    g.group
}

fn features_group() -> Group {
    let mut g = Collector::new("features");
    let net = ConvFeatureNet::<f64>::reference(0);
    g.run(
        "gram symmetric",
        (|| {
            let img = Image::<f64>::from_fn(16, 16, |y, x| [(y as f64 / 16.0), (x as f64 / 16.0), 0.3])?;
            let maps = net.extract(&img, &DEFAULT_GRAM_LAYERS)?;
            let mut worst: f64 = 0.0;
            for layer in DEFAULT_GRAM_LAYERS {
                let gm = gram_matrix(maps.get(layer).ok_or_else(|| Error::UnknownLayer(layer.into()))?);
                let c = gm.size;
                for i in 0..c {
                    for j in 0..c {
                        worst = worst.max((gm.get(i, j) - gm.get(j, i)).abs());
                    }
                }
            }
            Ok((worst == 0.0, format!("max asymmetry {worst:e}")))
        })(),
    );
    g.run(
        "reference backend deterministic",
        (|| {
            let again = ConvFeatureNet::<f64>::reference(0);
            Ok((again.parameter_digest() == net.parameter_digest(), "digest".into()))
        })(),
    );
    g.run(
        "unknown layer rejected",
        (|| {
            let img = gray(8, 8, 0.5)?;
            let r = net.extract(&img, &["relu9_9"]);
            Ok((matches!(r, Err(Error::UnknownLayer(_))), "relu9_9".into()))
        })(),
    );
    g.group
}

fn loss_zero_group() -> Group {
    let mut g = Collector::new("loss zero cases");
    let net = ConvFeatureNet::<f64>::reference(0);
    let layers: Vec<String> = DEFAULT_GRAM_LAYERS.iter().map(|s| s.to_string()).collect();
    g.run(
        "contrastive cleared margins",
        (|| {
            let h = gray(8, 8, 0.5)?;
            let n = gray(8, 8, 1.0)?;
            let v = contrastive_loss(&h, &h, Some(&n), &net, &Margins::default(), &layers)?;
            Ok((v.abs() <= HAND_TOL, format!("{v:e}")))
        })(),
    );
    g.run(
        "semantic constant per class",
        (|| {
            let labels = LabelMap::new(2, 2, 3, vec![0, 0, 1, 2])?;
            let img = Image::<f64>::from_fn(2, 2, |y, _| if y == 0 { [0.3; 3] } else { [0.6; 3] })?;
            let probs: ProbMap<f64> = one_hot(&labels, 3)?.0;
            let v = semantic_terms(&img, &labels, &probs, BrightnessMode::ChannelMean)?.total();
            Ok((v.abs() <= HAND_TOL, format!("{v:e}")))
        })(),
    );
    g.run(
        "retention identical inputs",
        (|| {
            let img = Image::<f64>::from_fn(8, 8, |y, x| [0.1 * (y % 3) as f64, 0.05 * x as f64, 0.4])?;
            let v = feature_retention_loss(&img, &img, &net, DEFAULT_RETENTION_LAYER)?;
            Ok((v == 0.0, format!("{v:e}")))
        })(),
    );
    g.run(
        "color gray with constant curves",
        (|| {
            let img = gray(4, 4, 0.4)?;
            let v = color_terms(&img, &CurveStack::constant(2, 4, 4, 0.3)?, 200.0)?.total();
            Ok((v.abs() <= HAND_TOL, format!("{v:e}")))
        })(),
    );
    g.run(
        "composed total",
        (|| {
            let h = gray(8, 8, 0.5)?;
            let n = gray(8, 8, 1.0)?;
            let labels = LabelMap::new(8, 8, 3, vec![1; 64])?;
            let curves = CurveStack::zeros(8, 8, 8);
            let oracle = OracleSegmenter { num_classes: 3 };
            let inputs = LossInputs {
                low: &h,
                enhanced: &h,
                positive: Some(&h),
                negative: Some(&n),
                labels: &labels,
                curves: &curves,
            };
            let backends = Backends {
                features: &net,
                segmenter: &oracle,
            };
            let r = total_loss(&inputs, backends, &LossConfig::default())?;
            Ok((r.total.abs() <= HAND_TOL, format!("{:e}", r.total)))
        })(),
    );
    g.group
}

fn loss_hand_group() -> Group {
    let mut g = Collector::new("loss hand values");
    let net = ConvFeatureNet::<f64>::reference(0);
    let layers: Vec<String> = DEFAULT_GRAM_LAYERS.iter().map(|s| s.to_string()).collect();
    match (|| -> Result<[f64; 4]> {
        let h = gray(8, 8, 0.5)?;
        let triplet = contrastive_loss(&h, &h, Some(&h), &net, &Margins::default(), &layers)?;

        let labels = LabelMap::new(1, 2, 1, vec![0, 0])?;
        let img = Image::<f64>::from_fn(1, 2, |_, x| if x == 0 { [0.2; 3] } else { [0.4; 3] })?;
        let variance = semantic_terms(&img, &labels, &one_hot(&labels, 1)?.0, BrightnessMode::ChannelMean)?.variance;

        let tinted = Image::<f64>::from_fn(3, 3, |_, _| [0.5, 0.3, 0.3])?;
        let gray_world = color_terms(&tinted, &CurveStack::zeros(2, 3, 3), 200.0)?.total();

        let labels4 = LabelMap::new(2, 2, 4, vec![0, 1, 2, 3])?;
        let uniform = ProbMap::new(Tensor3::filled(4, 2, 2, 0.25))?;
        let ce = semantic_terms(&gray(2, 2, 0.5)?, &labels4, &uniform, BrightnessMode::ChannelMean)?.cross_entropy;
        Ok([triplet, variance, gray_world, ce])
    })() {
        Ok([triplet, variance, gray_world, ce]) => {
            g.close("triplet collapse", triplet, 0.34);
            g.close("category variance", variance, 0.02);
            g.close("gray world", gray_world, 0.08);
            g.close("uniform cross entropy", ce, 4f64.ln());
        }
        Err(e) => g.check("hand fixtures", false, format!("error: {e}")),
    }
    g.group
}

fn metrics_group() -> Group {
    let mut g = Collector::new("metrics");
    g.run(
        "psnr identical is inf",
        (|| {
            let a = Image::<f64>::from_fn(12, 12, |y, x| [0.01 * y as f64, 0.02 * x as f64, 0.5])?;
            let v = psnr(&a, &a)?;
            Ok((v == f64::INFINITY, format!("{v}")))
        })(),
    );
    g.run(
        "psnr black vs white is 0 dB",
        (|| {
            let v = psnr(&gray(4, 4, 0.0)?, &gray(4, 4, 1.0)?)?;
            Ok((v.abs() <= HAND_TOL, format!("{v}")))
        })(),
    );
    g.run(
        "ssim identical is 1",
        (|| {
            let a = Image::<f64>::from_fn(16, 16, |y, x| [((y * x) % 7) as f64 / 7.0, 0.2, 0.9])?;
            let v = ssim(&a, &a, BrightnessMode::ChannelMean)?;
            Ok(((v - 1.0).abs() <= HAND_TOL, format!("{v}")))
        })(),
    );
    g.run(
        "miou perfect is 1",
        (|| {
            let l = LabelMap::new(2, 3, 4, vec![0, 1, 1, 3, 255, 0])?;
            let r = miou(&[l.clone()], &[l], 4)?;
            Ok((r.mean == 1.0, format!("{}", r.mean)))
        })(),
    );
    g.group
}

fn archive_group() -> Group {
    let mut g = Collector::new("archive");
    let ckpt = Checkpoint::<f32>::zeros(EnhancerConfig {
        width: 4,
        ..EnhancerConfig::default()
    });
    g.run(
        "save load save byte-identical",
        (|| {
            let bytes = ckpt.as_ref().map_err(clone_err)?.to_archive()?.to_bytes()?;
            let back = Checkpoint::<f32>::from_archive(&Archive::from_bytes(&bytes, Path::new("<selftest>"))?)?;
            Ok((back.to_archive()?.to_bytes()? == bytes, format!("{} bytes", bytes.len())))
        })(),
    );
    g.run(
        "corruption reports offset",
        (|| {
            let mut bytes = ckpt.as_ref().map_err(clone_err)?.to_archive()?.to_bytes()?;
            let at = bytes.len() / 2;
            bytes[at] ^= 0xff;
            match Archive::from_bytes(&bytes, Path::new("<selftest>")) {
                Err(Error::Archive { offset, .. }) => Ok((true, format!("offset {offset}"))),
                Err(e) => Ok((false, format!("wrong error: {e}"))),
                Ok(_) => Ok((false, "corruption accepted".into())),
            }
        })(),
    );
    g.run(
        "truncation reports offset",
        (|| {
            let bytes = ckpt.as_ref().map_err(clone_err)?.to_archive()?.to_bytes()?;
            match Archive::from_bytes(&bytes[..bytes.len() / 3], Path::new("<selftest>")) {
                Err(Error::Archive { offset, .. }) => Ok((true, format!("offset {offset}"))),
                Err(e) => Ok((false, format!("wrong error: {e}"))),
                Ok(_) => Ok((false, "truncation accepted".into())),
            }
        })(),
    );
    g.group
}

fn clone_err(e: &Error) -> Error {
    Error::InvalidArgument(e.to_string())
}

fn sampling_group() -> Group {
    let mut g = Collector::new("sampling");
    let bank = SampleBank {
        positives: vec!["p0".into(), "p1".into()],
        neg_over: vec!["o0".into()],
        neg_under: vec!["u0".into(), "u1".into()],
        rng_seed: 0,
    };
    g.run(
        "seeded draws reproducible",
        (|| {
            let draw = || -> Result<Vec<String>> {
                let mut rng = stream_rng(5, Stream::Triplet, 3);
                (0..50)
                    .map(|_| {
                        let (p, n) = sample_contrastive_pair(&bank, &mut rng)?;
                        Ok(format!("{}|{:?}", p.display(), n))
                    })
                    .collect()
            };
            Ok((draw()? == draw()?, "50 draws".into()))
        })(),
    );
    g.run(
        "single-element pools",
        (|| {
            let tiny = SampleBank {
                positives: vec!["p".into()],
                neg_over: vec!["o".into()],
                neg_under: Vec::new(),
                rng_seed: 0,
            };
            let mut rng = stream_rng(1, Stream::Triplet, 0);
            let mut ok = true;
            for _ in 0..20 {
                let (p, n) = sample_contrastive_pair(&tiny, &mut rng)?;
                ok &= p == Path::new("p") && n == Some(Path::new("o"));
            }
            Ok((ok, "20 draws".into()))
        })(),
    );
    g.run(
        "streams independent of index order",
        (|| {
            let a: u64 = stream_rng(9, Stream::Augment, 4).random();
            let _: u64 = stream_rng(9, Stream::Augment, 3).random();
            let b: u64 = stream_rng(9, Stream::Augment, 4).random();
            Ok((a == b, "counter keyed".into()))
        })(),
    );
    g.group
}

/// Runs every invariant group and the gradient check.
pub fn run_selftest(gradcheck: &GradCheckConfig) -> Result<SelfTestReport> {
    let groups = vec![
        curve_group(),
        imageio_group(),
        features_group(),
        loss_zero_group(),
        loss_hand_group(),
        metrics_group(),
        archive_group(),
        sampling_group(),
    ];
    let gradcheck = gradient_check(gradcheck)?;
    let passed = gradcheck.passed && groups.iter().all(Group::passed);
    Ok(SelfTestReport {
        groups,
        gradcheck,
        passed,
    })
}
