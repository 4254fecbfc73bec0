//! Full-reference (PSNR, SSIM), no-reference (NIQE) and segmentation (mIoU)
//! metrics, plus a directory-level report writer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::gamma::gamma;

use crate::archive::{write_atomic, Archive};
use crate::data::{list_images, stem_of};
use crate::error::{Error, Result};
use crate::imageio::{brightness_map, load_image, BrightnessMode, Image};
use crate::scalar::Real;
use crate::segmenter::{load_labels, LabelMap, SegBackend, IGNORE_INDEX};
use crate::tensor::Array;

fn ensure_same_shape<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "images are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- PSNR

/// Peak signal-to-noise ratio in dB with peak 1. Identical images give
/// `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    ensure_same_shape(a, b)?;
    let n = a.as_slice().len() as f64;
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

// ---------------------------------------------------------------- SSIM

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation keeping only positions where the window fits.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, &kv)| kv * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, &kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM on the brightness map: 11×11 Gaussian window
/// (σ = 1.5), K1 = 0.01, K2 = 0.03, peak 1, averaged over every window
/// position that fits inside the image.
pub fn ssim<T: Real>(a: &Image<T>, b: &Image<T>, mode: BrightnessMode) -> Result<f64> {
    ensure_same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let x: Vec<f64> = brightness_map(a, mode).into_iter().map(Real::as_f64).collect();
    let y: Vec<f64> = brightness_map(b, mode).into_iter().map(Real::as_f64).collect();
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let (mx, _, _) = filter_valid(&x, h, w, &k);
    let (my, _, _) = filter_valid(&y, h, w, &k);
    let (sxx, _, _) = filter_valid(&prod(&x, &x), h, w, &k);
    let (syy, _, _) = filter_valid(&prod(&y, &y), h, w, &k);
    let (sxy, _, _) = filter_valid(&prod(&x, &y), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

// ---------------------------------------------------------------- NIQE

pub const NIQE_PATCH_SIZE: usize = 96;
pub const NIQE_SHARPNESS_THRESHOLD: f64 = 0.75;
/// Features per scale: GGD (shape, variance) plus four AGGD quadruples.
pub const NIQE_FEATURES_PER_SCALE: usize = 18;
pub const NIQE_SCALES: usize = 2;
pub const NIQE_FEATURE_DIM: usize = NIQE_FEATURES_PER_SCALE * NIQE_SCALES;
const MSCN_WINDOW: usize = 7;
const MSCN_SIGMA: f64 = 7.0 / 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NiqeConfig {
    pub patch_size: usize,
    pub sharpness_threshold: f64,
}

impl Default for NiqeConfig {
    fn default() -> Self {
        Self {
            patch_size: NIQE_PATCH_SIZE,
            sharpness_threshold: NIQE_SHARPNESS_THRESHOLD,
        }
    }
}

/// Multivariate Gaussian fitted to patch features of a pristine corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct NiqeModel {
    pub config: NiqeConfig,
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
}

impl NiqeModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d != NIQE_FEATURE_DIM || self.cov.len() != d * d {
            return Err(Error::Shape(format!(
                "niqe model has mean {} and covariance {} entries, expected {} and {}",
                d,
                self.cov.len(),
                NIQE_FEATURE_DIM,
                NIQE_FEATURE_DIM * NIQE_FEATURE_DIM
            )));
        }
        if self.config.patch_size < 8 || self.config.patch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "niqe patch size must be even and at least 8, got {}",
                self.config.patch_size
            )));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (self.cov[i * d + j], self.cov[j * d + i]);
                if (a - b).abs() > 1e-6 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidArgument(format!("niqe covariance not symmetric at ({i},{j})")));
                }
            }
        }
        if !self.mean.iter().chain(&self.cov).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("niqe model holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let d = self.dim();
        let mut ar = Archive::new(serde_json::json!({
            "kind": "niqe-model",
            "feature_dim": d,
            "patch_size": self.config.patch_size,
            "sharpness_threshold": self.config.sharpness_threshold,
            "scales": NIQE_SCALES,
        }));
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        ar.insert("mean", Array::from_vec(&[d], f(&self.mean)).expect("shape"));
        ar.insert("cov", Array::from_vec(&[d, d], f(&self.cov)).expect("shape"));
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let m = &ar.manifest;
        if m["kind"] != "niqe-model" {
            return Err(Error::Config(format!("archive kind {} is not a niqe model", m["kind"])));
        }
        let d = m["feature_dim"]
            .as_u64()
            .ok_or_else(|| Error::Config("niqe manifest lacks feature_dim".into()))? as usize;
        let patch_size = m["patch_size"]
            .as_u64()
            .ok_or_else(|| Error::Config("niqe manifest lacks patch_size".into()))? as usize;
        let sharpness_threshold = m["sharpness_threshold"].as_f64().unwrap_or(NIQE_SHARPNESS_THRESHOLD);
        let g = |v: &Array<f32>| v.as_slice().iter().map(|&x| x as f64).collect::<Vec<_>>();
        let model = Self {
            config: NiqeConfig {
                patch_size,
                sharpness_threshold,
            },
            mean: g(ar.expect("mean", &[d])?),
            cov: g(ar.expect("cov", &[d, d])?),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Shape grid 0.2..=10 in steps of 0.001 with the GGD moment ratio
/// Γ(1/a)Γ(3/a)/Γ(2/a)² and its reciprocal (the AGGD ratio).
fn gamma_grid() -> &'static [(f64, f64, f64)] {
    static GRID: OnceLock<Vec<(f64, f64, f64)>> = OnceLock::new();
    GRID.get_or_init(|| {
        (0..=9800)
            .map(|i| {
                let a = 0.2 + i as f64 * 0.001;
                let r = gamma(1.0 / a) * gamma(3.0 / a) / gamma(2.0 / a).powi(2);
                (a, r, 1.0 / r)
            })
            .collect()
    })
}

/// Generalized Gaussian fit by moment matching: returns (shape, σ²).
pub fn fit_ggd(v: &[f64]) -> Option<(f64, f64)> {
    let n = v.len() as f64;
    let sigma_sq = v.iter().map(|x| x * x).sum::<f64>() / n;
    let e = v.iter().map(|x| x.abs()).sum::<f64>() / n;
    if !(e > 0.0) {
        return None;
    }
    let rho = sigma_sq / (e * e);
    let (alpha, _, _) = gamma_grid()
        .iter()
        .min_by(|a, b| (rho - a.1).abs().total_cmp(&(rho - b.1).abs()))?;
    Some((*alpha, sigma_sq))
}

/// Asymmetric generalized Gaussian fit: returns (shape, mean, σ_l², σ_r²).
pub fn fit_aggd(v: &[f64]) -> Option<[f64; 4]> {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for &x in v {
        if x < 0.0 {
            ls += x * x;
            ln += 1;
        } else if x > 0.0 {
            rs += x * x;
            rn += 1;
        }
    }
    if ln == 0 || rn == 0 {
        return None;
    }
    let left = (ls / ln as f64).sqrt();
    let right = (rs / rn as f64).sqrt();
    let g = left / right;
    let n = v.len() as f64;
    let mean_abs = v.iter().map(|x| x.abs()).sum::<f64>() / n;
    let mean_sq = v.iter().map(|x| x * x).sum::<f64>() / n;
    let rhat = mean_abs * mean_abs / mean_sq;
    let rnorm = rhat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let (alpha, _, _) = gamma_grid()
        .iter()
        .min_by(|a, b| (a.2 - rnorm).powi(2).total_cmp(&(b.2 - rnorm).powi(2)))?;
    let (g1, g2, g3) = (gamma(1.0 / alpha), gamma(2.0 / alpha), gamma(3.0 / alpha));
    let mean = (right - left) * (g2 / g1) * (g1 / g3).sqrt();
    Some([*alpha, mean, left * left, right * right])
}

/// Correlation with a square kernel, borders replicated.
fn filter_replicate(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * src[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * rows[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Mean-subtracted contrast-normalized coefficients and the local standard
/// deviation map of a gray image on the 0..255 scale.
pub fn mscn(gray: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let k = gaussian_kernel(MSCN_WINDOW, MSCN_SIGMA);
    let mu = filter_replicate(gray, h, w, &k);
    let sq: Vec<f64> = gray.iter().map(|v| v * v).collect();
    let mu_sq = filter_replicate(&sq, h, w, &k);
    let sigma: Vec<f64> = mu.iter().zip(&mu_sq).map(|(m, s)| (s - m * m).abs().sqrt()).collect();
    let coeffs = gray
        .iter()
        .zip(&mu)
        .zip(&sigma)
        .map(|((g, m), s)| (g - m) / (s + 1.0))
        .collect();
    (coeffs, sigma)
}

/// The 18 statistics of one MSCN block: GGD fit plus AGGD fits of the
/// horizontal, vertical and two diagonal neighbour products (circular
/// shifts within the block).
fn block_features(block: &[f64], h: usize, w: usize) -> Option<[f64; NIQE_FEATURES_PER_SCALE]> {
    let mut out = [0.0; NIQE_FEATURES_PER_SCALE];
    let (alpha, var) = fit_ggd(block)?;
    out[0] = alpha;
    out[1] = var;
    let shifts: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (-1, 1)];
    for (s, &(dy, dx)) in shifts.iter().enumerate() {
        let pair: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| {
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                block[y * w + x] * block[sy * w + sx]
            })
            .collect();
        let f = fit_aggd(&pair)?;
        out[2 + 4 * s..6 + 4 * s].copy_from_slice(&f);
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Patch features and sharpness of every block of one image.
struct PatchSet {
    features: Vec<[f64; NIQE_FEATURE_DIM]>,
    sharpness: Vec<f64>,
}

fn patch_features<T: Real>(img: &Image<T>, cfg: &NiqeConfig) -> Result<PatchSet> {
    let p = cfg.patch_size;
    let (rows, cols) = (img.height() / p, img.width() / p);
    if rows * cols < 1 {
        return Err(Error::InvalidArgument(format!(
            "niqe needs at least one {p}x{p} patch, image is {}x{}",
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (rows * p, cols * p);
    let full = brightness_map(img, BrightnessMode::ChannelMean);
    let iw = img.width();
    let gray: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| full[y * iw + x].as_f64() * 255.0)
        .collect();
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    if gray.iter().all(|&v| v == mean) {
        return Err(Error::Degenerate("constant image has zero MSCN variance".into()));
    }
    // second scale: 2×2 box average
    let (h2, w2) = (h / 2, w / 2);
    let half: Vec<f64> = (0..h2)
        .flat_map(|y| (0..w2).map(move |x| (y, x)))
        .map(|(y, x)| {
            let (y0, x0) = (2 * y, 2 * x);
            (gray[y0 * w + x0] + gray[y0 * w + x0 + 1] + gray[(y0 + 1) * w + x0] + gray[(y0 + 1) * w + x0 + 1]) / 4.0
        })
        .collect();
    let (m1, sigma1) = mscn(&gray, h, w);
    let (m2, _) = mscn(&half, h2, w2);
    let cut = |src: &[f64], sw: usize, y0: usize, x0: usize, n: usize| -> Vec<f64> {
        (0..n).flat_map(|y| src[(y0 + y) * sw + x0..(y0 + y) * sw + x0 + n].to_vec()).collect()
    };
    let mut set = PatchSet {
        features: Vec::new(),
        sharpness: Vec::new(),
    };
    for by in 0..rows {
        for bx in 0..cols {
            let b1 = cut(&m1, w, by * p, bx * p, p);
            let b2 = cut(&m2, w2, by * p / 2, bx * p / 2, p / 2);
            let (Some(f1), Some(f2)) = (block_features(&b1, p, p), block_features(&b2, p / 2, p / 2)) else {
                continue;
            };
            let mut f = [0.0; NIQE_FEATURE_DIM];
            f[..NIQE_FEATURES_PER_SCALE].copy_from_slice(&f1);
            f[NIQE_FEATURES_PER_SCALE..].copy_from_slice(&f2);
            let s = cut(&sigma1, w, by * p, bx * p, p);
            set.sharpness.push(s.iter().sum::<f64>() / s.len() as f64);
            set.features.push(f);
        }
    }
    if set.features.is_empty() {
        return Err(Error::Degenerate("no patch with well-defined MSCN statistics".into()));
    }
    Ok(set)
}

fn mean_cov(rows: &[[f64; NIQE_FEATURE_DIM]]) -> (Vec<f64>, Vec<f64>) {
    let d = NIQE_FEATURE_DIM;
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    if rows.len() > 1 {
        for r in rows {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1.0);
                }
            }
        }
    }
    (mean, cov)
}

/// Fits a pristine model from a corpus. Only patches whose mean local
/// deviation reaches `sharpness_threshold` times the image maximum count.
pub fn fit_niqe<T: Real>(corpus: &[Image<T>], cfg: NiqeConfig) -> Result<NiqeModel> {
    let sets: Vec<PatchSet> = corpus.par_iter().map(|img| patch_features(img, &cfg)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for set in &sets {
        let max = set.sharpness.iter().cloned().fold(0.0, f64::max);
        rows.extend(
            set.features
                .iter()
                .zip(&set.sharpness)
                .filter(|(_, &s)| s >= cfg.sharpness_threshold * max)
                .map(|(f, _)| *f),
        );
    }
    if rows.len() < 2 {
        return Err(Error::Degenerate(format!(
            "niqe fit needs at least 2 sharp patches, corpus gave {}",
            rows.len()
        )));
    }
    log::info!("niqe model fitted on {} patches from {} images", rows.len(), corpus.len());
    let (mean, cov) = mean_cov(&rows);
    let model = NiqeModel { config: cfg, mean, cov };
    model.validate()?;
    Ok(model)
}

/// Distance between the image's patch-feature Gaussian and the pristine
/// model, using the pseudo-inverse of the averaged covariance.
pub fn niqe<T: Real>(img: &Image<T>, model: &NiqeModel) -> Result<f64> {
    model.validate()?;
    let set = patch_features(img, &model.config)?;
    let (mean, cov) = mean_cov(&set.features);
    let d = model.dim();
    let diff = DVector::from_iterator(d, model.mean.iter().zip(&mean).map(|(a, b)| a - b));
    let avg = DMatrix::from_iterator(d, d, model.cov.iter().zip(&cov).map(|(a, b)| (a + b) / 2.0));
    let pinv = avg
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Degenerate(format!("niqe covariance pseudo-inverse failed: {e}")))?;
    let q = diff.dot(&(pinv * &diff));
    Ok(q.max(0.0).sqrt())
}

// ---------------------------------------------------------------- mIoU

/// `counts[g * S + p]` = pixels with ground truth `g` predicted as `p`.
/// Prediction pixels carrying the ignore label count in an extra column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    /// Ground-truth pixels whose prediction is the ignore label.
    pub unpredicted: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            unpredicted: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let s = self.num_classes;
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if g == IGNORE_INDEX {
                continue;
            }
            let g = g as usize;
            if g >= s {
                return Err(Error::InvalidArgument(format!("ground-truth label {g} outside {s} classes")));
            }
            if p == IGNORE_INDEX {
                self.unpredicted[g] += 1;
                continue;
            }
            let p = p as usize;
            if p >= s {
                return Err(Error::InvalidArgument(format!("predicted label {p} outside {s} classes")));
            }
            self.counts[g * s + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unpredicted.iter_mut().zip(&other.unpredicted) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unpredicted.iter().sum::<u64>()
    }

    /// Per-class IoU; `None` for classes absent from both prediction and
    /// ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let s = self.num_classes;
        (0..s)
            .map(|c| {
                let tp = self.counts[c * s + c];
                let gt_total: u64 = self.counts[c * s..(c + 1) * s].iter().sum::<u64>() + self.unpredicted[c];
                let pred_total: u64 = (0..s).map(|g| self.counts[g * s + c]).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Option<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Pooled-confusion mIoU over a list of prediction/ground-truth pairs.
pub fn miou(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g)?;
    }
    let mean = cm
        .miou()
        .ok_or_else(|| Error::Degenerate("no evaluated pixels for mIoU".into()))?;
    Ok(MiouReport {
        per_class: cm.iou(),
        mean,
    })
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Niqe,
    Miou,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Psnr, Metric::Ssim, Metric::Niqe, Metric::Miou];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Niqe => "niqe",
            Metric::Miou => "miou",
        }
    }

    /// Parses a comma-separated list such as `psnr,ssim`.
    pub fn parse_list(s: &str) -> Result<BTreeSet<Metric>> {
        let set: BTreeSet<Metric> = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Metric::from_str)
            .collect::<Result<_>>()?;
        if set.is_empty() {
            return Err(Error::Config("empty metric list".into()));
        }
        Ok(set)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}` (expected psnr, ssim, niqe or miou)")))
    }
}

/// A metric value that serializes `+∞` as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score(pub f64);

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::INFINITY {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Score(v)),
            Raw::Text(t) if t == "inf" => Ok(Score(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad score `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub stem: String,
    pub scores: BTreeMap<Metric, Score>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeSet<Metric>,
    pub rows: Vec<EvalRow>,
    /// Arithmetic mean of the rows per metric.
    pub mean: BTreeMap<Metric, Score>,
    /// mIoU of the confusion matrix pooled over every image.
    pub pooled_miou: Option<MiouReport>,
    /// Stems present on one side only.
    pub unmatched: Vec<String>,
    /// Stems whose evaluation failed, with the reason.
    pub failures: Vec<(String, String)>,
}

pub struct EvalConfig<'a> {
    pub metrics: BTreeSet<Metric>,
    pub brightness_mode: BrightnessMode,
    pub niqe_model: Option<&'a NiqeModel>,
    pub labels_dir: Option<&'a Path>,
    pub segmenter: Option<&'a dyn SegBackend<f32>>,
    pub num_classes: usize,
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?.into_iter().map(|p| (stem_of(&p), p)).collect())
}

struct RowOutcome {
    row: EvalRow,
    confusion: Option<ConfusionMatrix>,
}

/// Scores every stem present in all required directories, writes
/// `report.csv` and `report.json` into `out_dir` and returns the report.
pub fn eval_report(pred_dir: &Path, ref_dir: Option<&Path>, cfg: &EvalConfig, out_dir: &Path) -> Result<EvalReport> {
    let needs_ref = cfg.metrics.contains(&Metric::Psnr) || cfg.metrics.contains(&Metric::Ssim);
    let needs_labels = cfg.metrics.contains(&Metric::Miou);
    if cfg.metrics.contains(&Metric::Niqe) && cfg.niqe_model.is_none() {
        return Err(Error::Config("niqe requested without a model file".into()));
    }
    let preds = stems(pred_dir)?;
    let mut sides: Vec<(&str, BTreeMap<String, PathBuf>)> = vec![("pred", preds)];
    if needs_ref {
        let dir = ref_dir.ok_or_else(|| Error::Config("psnr/ssim need a reference directory".into()))?;
        sides.push(("ref", stems(dir)?));
    }
    if needs_labels {
        if cfg.segmenter.is_none() {
            return Err(Error::Config("miou requested without a segmenter".into()));
        }
        let dir = cfg
            .labels_dir
            .ok_or_else(|| Error::Config("miou needs a labels directory".into()))?;
        sides.push(("labels", stems(dir)?));
    }
    let all: BTreeSet<&String> = sides.iter().flat_map(|(_, m)| m.keys()).collect();
    let common: Vec<String> = all
        .iter()
        .filter(|s| sides.iter().all(|(_, m)| m.contains_key(**s)))
        .map(|s| s.to_string())
        .collect();
    let unmatched: Vec<String> = all
        .iter()
        .filter(|s| !common.contains(s))
        .map(|s| {
            let on: Vec<&str> = sides.iter().filter(|(_, m)| m.contains_key(*s)).map(|(n, _)| *n).collect();
            format!("{s} (only in {})", on.join(", "))
        })
        .collect();
    if common.is_empty() {
        let listing: Vec<String> = sides
            .iter()
            .map(|(n, m)| format!("{n}: [{}]", m.keys().cloned().collect::<Vec<_>>().join(", ")))
            .collect();
        return Err(Error::Dataset(format!("no common stems; {}", listing.join("; "))));
    }
    for u in &unmatched {
        log::warn!("unmatched stem {u}");
    }
    let lookup = |side: &str, stem: &str| -> &Path {
        sides.iter().find(|(n, _)| *n == side).map(|(_, m)| m[stem].as_path()).expect("side present")
    };

    let outcomes: Vec<std::result::Result<RowOutcome, (String, String)>> = common
        .par_iter()
        .map(|stem| {
            let run = || -> Result<RowOutcome> {
                let pred = load_image::<f32>(lookup("pred", stem))?;
                let mut scores = BTreeMap::new();
                if needs_ref {
                    let reference = load_image::<f32>(lookup("ref", stem))?;
                    if cfg.metrics.contains(&Metric::Psnr) {
                        scores.insert(Metric::Psnr, Score(psnr(&pred, &reference)?));
                    }
                    if cfg.metrics.contains(&Metric::Ssim) {
                        scores.insert(Metric::Ssim, Score(ssim(&pred, &reference, cfg.brightness_mode)?));
                    }
                }
                if let Some(model) = cfg.niqe_model.filter(|_| cfg.metrics.contains(&Metric::Niqe)) {
                    scores.insert(Metric::Niqe, Score(niqe(&pred, model)?));
                }
                let mut confusion = None;
                if needs_labels {
                    let gt = load_labels(lookup("labels", stem), cfg.num_classes)?;
                    let seg = cfg.segmenter.expect("checked above");
                    let predicted = seg.segment(&pred, Some(&gt))?.argmax();
                    let mut cm = ConfusionMatrix::new(cfg.num_classes);
                    cm.add(&predicted, &gt)?;
                    let m = cm
                        .miou()
                        .ok_or_else(|| Error::Degenerate("label map has no evaluated pixels".into()))?;
                    scores.insert(Metric::Miou, Score(m));
                    confusion = Some(cm);
                }
                Ok(RowOutcome {
                    row: EvalRow {
                        stem: stem.clone(),
                        scores,
                    },
                    confusion,
                })
            };
            run().map_err(|e| (stem.clone(), e.to_string()))
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut pooled = needs_labels.then(|| ConfusionMatrix::new(cfg.num_classes));
    for o in outcomes {
        match o {
            Ok(r) => {
                if let (Some(p), Some(c)) = (pooled.as_mut(), r.confusion.as_ref()) {
                    p.merge(c);
                }
                rows.push(r.row);
            }
            Err((stem, why)) => {
                log::error!("{stem}: {why}");
                failures.push((stem, why));
            }
        }
    }
    let mean: BTreeMap<Metric, Score> = cfg
        .metrics
        .iter()
        .filter_map(|&m| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.scores.get(&m)).map(|s| s.0).collect();
            (!vals.is_empty()).then(|| (m, Score(vals.iter().sum::<f64>() / vals.len() as f64)))
        })
        .collect();
    let pooled_miou = pooled.and_then(|cm| {
        cm.miou().map(|mean| MiouReport {
            per_class: cm.iou(),
            mean,
        })
    });
    let report = EvalReport {
        metrics: cfg.metrics.clone(),
        rows,
        mean,
        pooled_miou,
        unmatched,
        failures,
    };
    write_report(&report, out_dir)?;
    Ok(report)
}

/// Writes `report.csv` (one row per stem then a `mean` row) and
/// `report.json`.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    let mut header = vec!["stem".to_string()];
    header.extend(report.metrics.iter().map(|m| m.name().to_string()));
    w.write_record(&header).map_err(csv_err)?;
    let cells = |stem: &str, scores: &BTreeMap<Metric, Score>| -> Vec<String> {
        let mut r = vec![stem.to_string()];
        r.extend(
            report
                .metrics
                .iter()
                .map(|m| scores.get(m).map(|s| s.to_string()).unwrap_or_default()),
        );
        r
    };
    for row in &report.rows {
        w.write_record(cells(&row.stem, &row.scores)).map_err(csv_err)?;
    }
    w.write_record(cells("mean", &report.mean)).map_err(csv_err)?;
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    write_atomic(&out_dir.join("report.csv"), &bytes)?;
    let json = serde_json::to_vec_pretty(report)?;
    write_atomic(&out_dir.join("report.json"), &json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image<f64> {
        Image::from_fn(h, w, |y, x| [f(y, x); 3]).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = gray(4, 4, |_, _| 0.0);
        let b = gray(4, 4, |_, _| 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b).unwrap().abs() < 1e-12);
        let c = gray(4, 4, |_, _| 0.1);
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_size_check() {
        let a = gray(16, 16, |y, x| ((y * 16 + x) as f64 / 255.0).min(1.0));
        assert!((ssim(&a, &a, BrightnessMode::ChannelMean).unwrap() - 1.0).abs() < 1e-12);
        let small = gray(10, 16, |_, _| 0.5);
        assert!(ssim(&small, &small, BrightnessMode::ChannelMean).is_err());
    }

    #[test]
    fn ssim_constant_pair_matches_plug_in() {
        let a = gray(12, 12, |_, _| 0.0);
        let b = gray(12, 12, |_, _| 1.0);
        let c1 = 0.01f64.powi(2);
        let expected = c1 / (1.0 + c1);
        assert!((ssim(&a, &b, BrightnessMode::ChannelMean).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ggd_fit_recovers_gaussian_shape() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 2.0).unwrap();
        let v: Vec<f64> = (0..200_000).map(|_| n.sample(&mut rng)).collect();
        let (alpha, var) = fit_ggd(&v).unwrap();
        assert!((alpha - 2.0).abs() < 0.05, "{alpha}");
        assert!((var - 4.0).abs() < 0.05, "{var}");
        let [a, mean, l, r] = fit_aggd(&v).unwrap();
        assert!((a - 2.0).abs() < 0.1, "{a}");
        assert!(mean.abs() < 0.05 && (l - 4.0).abs() < 0.1 && (r - 4.0).abs() < 0.1);
    }

    #[test]
    fn confusion_hand_fixture() {
        let gt = LabelMap::new(2, 2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(2, 2, 2, vec![0, 1, 1, 1]).unwrap();
        let r = miou(&[pred], &[gt], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.mean - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let gt = LabelMap::new(1, 2, 4, vec![0, 0]).unwrap();
        let r = miou(&[gt.clone()], &[gt], 4).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, None, None]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn score_sentinel_round_trips() {
        let s = serde_json::to_string(&Score(f64::INFINITY)).unwrap();
        assert_eq!(s, "\"inf\"");
        let back: Score = serde_json::from_str(&s).unwrap();
        assert_eq!(back.0, f64::INFINITY);
        assert_eq!(serde_json::from_str::<Score>("1.5").unwrap(), Score(1.5));
    }

    #[test]
    fn metric_list_parsing() {
        let m = Metric::parse_list("psnr, SSIM,miou").unwrap();
        assert_eq!(m.into_iter().collect::<Vec<_>>(), vec![Metric::Psnr, Metric::Ssim, Metric::Miou]);
        assert!(Metric::parse_list("psnr,foo").is_err());
    }
}
