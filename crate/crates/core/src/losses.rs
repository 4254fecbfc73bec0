//! Training objectives: the contrastive triplet loss over Gram statistics and
//! intensity expectations, the semantic brightness consistency loss, the
//! feature retention loss, and the gray-world color constancy loss with its
//! curve smoothness penalty.
//!
//! Every `*_grad` function returns the loss value together with its gradient
//! with respect to the enhanced image (and, where relevant, the curve maps or
//! class probabilities). Gradients use the subgradient `0` at hinge and
//! absolute-value kinks.

use serde::{Deserialize, Serialize};

use crate::enhancer::CurveStack;
use crate::error::{Error, Result};
use crate::features::{
    expectation, gram_backward, gram_distance, gram_distance_grad, gram_set, FeatureBackend, FeatureMaps,
    DEFAULT_GRAM_LAYERS, DEFAULT_RETENTION_LAYER,
};
use crate::imageio::{brightness_map, BrightnessMode, Image};
use crate::scalar::{sign, Real};
use crate::segmenter::{one_hot, LabelMap, ProbMap, SegBackend, IGNORE_INDEX};
use crate::tensor::Tensor3;

/// Lower bound applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// Margin on the Gram-distance hinge.
    pub alpha: f64,
    /// Margin on the expectation hinge.
    pub beta: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self { alpha: 0.3, beta: 0.04 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub contrastive: f64,
    pub semantic: f64,
    pub retention: f64,
    pub color: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            semantic: 1.0,
            retention: 1.0,
            color: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margins: Margins,
    pub weights: LossWeights,
    /// Smoothness weight on the curve maps.
    pub lambda: f64,
    pub gram_layers: Vec<String>,
    pub retention_layer: String,
    pub brightness_mode: BrightnessMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margins: Margins::default(),
            weights: LossWeights::default(),
            lambda: 200.0,
            gram_layers: DEFAULT_GRAM_LAYERS.iter().map(|s| s.to_string()).collect(),
            retention_layer: DEFAULT_RETENTION_LAYER.to_string(),
            brightness_mode: BrightnessMode::ChannelMean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.margins;
        if !(m.alpha >= 0.0 && m.beta >= 0.0) {
            return Err(Error::Config("margins must be non-negative".into()));
        }
        let w = &self.weights;
        if [w.contrastive, w.semantic, w.retention, w.color]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        if self.gram_layers.is_empty() {
            return Err(Error::Config("at least one Gram layer is required".into()));
        }
        Ok(())
    }
}

/// Per-term losses and their weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_sc: f64,
    pub l_fr: f64,
    pub l_cc: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub margins: Margins,
}

impl LossReport {
    pub fn new(l_c: f64, l_sc: f64, l_fr: f64, l_cc: f64, weights: LossWeights, margins: Margins) -> Self {
        let total = weights.contrastive * l_c + weights.semantic * l_sc + weights.retention * l_fr + weights.color * l_cc;
        Self {
            l_c,
            l_sc,
            l_fr,
            l_cc,
            total,
            weights,
            margins,
        }
    }

    /// `(name, value)` for each term, in reporting order.
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("l_c", self.l_c),
            ("l_sc", self.l_sc),
            ("l_fr", self.l_fr),
            ("l_cc", self.l_cc),
            ("total", self.total),
        ]
    }

    /// Element-wise mean of several reports sharing weights and margins.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport::new(
            avg(|r| r.l_c),
            avg(|r| r.l_sc),
            avg(|r| r.l_fr),
            avg(|r| r.l_cc),
            first.weights,
            first.margins,
        ))
    }
}

fn layer_refs(layers: &[String]) -> Vec<&str> {
    layers.iter().map(String::as_str).collect()
}

/// Triplet hinge over Gram distance and mean intensity:
/// `max(d_G(H,P) − d_G(H,N) + α, 0) + max(|E(H)−E(P)| − |E(H)−E(N)| + β, 0)`.
///
/// Without a negative the negative distances are dropped, leaving the
/// positive pull plus margins.
pub fn contrastive_loss<T: Real>(
    enhanced: &Image<T>,
    positive: &Image<T>,
    negative: Option<&Image<T>>,
    backend: &dyn FeatureBackend<T>,
    margins: &Margins,
    gram_layers: &[String],
) -> Result<T> {
    let layers = layer_refs(gram_layers);
    let g_h = gram_set(&backend.extract(enhanced, &layers)?);
    let g_p = gram_set(&backend.extract(positive, &layers)?);
    let e_h = expectation(enhanced);
    let mut gram_arg = gram_distance(&g_h, &g_p)? + T::of(margins.alpha);
    let mut exp_arg = (e_h - expectation(positive)).abs() + T::of(margins.beta);
    if let Some(neg) = negative {
        let g_n = gram_set(&backend.extract(neg, &layers)?);
        gram_arg -= gram_distance(&g_h, &g_n)?;
        exp_arg -= (e_h - expectation(neg)).abs();
    }
    Ok(gram_arg.max(T::zero()) + exp_arg.max(T::zero()))
}

/// Contrastive loss value, its gradient w.r.t. the features of `enhanced`
/// at the Gram layers, and the direct pixel gradient of the expectation term.
fn contrastive_parts<T: Real>(
    enhanced: &Image<T>,
    h_maps: &FeatureMaps<T>,
    positive: &Image<T>,
    negative: Option<&Image<T>>,
    backend: &dyn FeatureBackend<T>,
    margins: &Margins,
    gram_layers: &[String],
) -> Result<(T, Vec<(String, Tensor3<T>)>, T)> {
    let layers = layer_refs(gram_layers);
    let g_h = gram_set(h_maps);
    let g_p = gram_set(&backend.extract(positive, &layers)?);
    let e_h = expectation(enhanced);
    let e_p = expectation(positive);
    let mut gram_arg = gram_distance(&g_h, &g_p)? + T::of(margins.alpha);
    let mut exp_arg = (e_h - e_p).abs() + T::of(margins.beta);
    let mut gram_grads = gram_distance_grad(&g_h, &g_p)?;
    let mut de = sign(e_h - e_p);
    if let Some(neg) = negative {
        let g_n = gram_set(&backend.extract(neg, &layers)?);
        let e_n = expectation(neg);
        gram_arg -= gram_distance(&g_h, &g_n)?;
        exp_arg -= (e_h - e_n).abs();
        for (acc, g) in gram_grads.iter_mut().zip(gram_distance_grad(&g_h, &g_n)?) {
            for (a, v) in acc.data.iter_mut().zip(g.data) {
                *a -= v;
            }
        }
        de -= sign(e_h - e_n);
    }
    let value = gram_arg.max(T::zero()) + exp_arg.max(T::zero());
    let mut tap_grads = Vec::new();
    if gram_arg > T::zero() {
        for ((name, f), g) in h_maps.layers.iter().zip(&gram_grads) {
            tap_grads.push((name.clone(), gram_backward(f, g)));
        }
    }
    let pixel_grad = if exp_arg > T::zero() {
        de / T::of_usize(enhanced.as_slice().len())
    } else {
        T::zero()
    };
    Ok((value, tap_grads, pixel_grad))
}

/// Contrastive loss and its gradient w.r.t. the enhanced image.
pub fn contrastive_loss_grad<T: Real>(
    enhanced: &Image<T>,
    positive: &Image<T>,
    negative: Option<&Image<T>>,
    backend: &dyn FeatureBackend<T>,
    margins: &Margins,
    gram_layers: &[String],
) -> Result<(T, Tensor3<T>)> {
    let h_maps = backend.extract(enhanced, &layer_refs(gram_layers))?;
    let (value, taps, pixel) = contrastive_parts(enhanced, &h_maps, positive, negative, backend, margins, gram_layers)?;
    let mut grad = if taps.is_empty() {
        Tensor3::zeros(3, enhanced.height(), enhanced.width())
    } else {
        backend.backward(enhanced, &FeatureMaps { layers: taps })?
    };
    if pixel != T::zero() {
        grad.as_mut_slice().iter_mut().for_each(|g| *g += pixel);
    }
    Ok((value, grad))
}

fn check_labels<T: Real>(img: &Image<T>, labels: &LabelMap) -> Result<()> {
    if (labels.height(), labels.width()) != (img.height(), img.width()) {
        return Err(Error::Shape(format!(
            "labels {}x{} do not match image {}x{}",
            labels.height(),
            labels.width(),
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Mean brightness over the pixels labelled `class`.
pub fn category_brightness_mean<T: Real>(
    enhanced: &Image<T>,
    labels: &LabelMap,
    class: u8,
    mode: BrightnessMode,
) -> Result<T> {
    check_labels(enhanced, labels)?;
    let b = brightness_map(enhanced, mode);
    let (sum, n) = labels
        .as_slice()
        .iter()
        .zip(&b)
        .filter(|(&l, _)| l == class)
        .fold((T::zero(), 0usize), |(s, n), (_, &v)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::InvalidArgument(format!("class {class} has no pixels")));
    }
    Ok(sum / T::of_usize(n))
}

/// The two parts of the semantic consistency loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticTerms<T> {
    /// `Σ_s Σ_{i∈θ_s} (B_i − B_s)²`, summed (not averaged) over pixels.
    pub variance: T,
    /// Per-pixel mean cross-entropy over non-ignored pixels.
    pub cross_entropy: T,
}

impl<T: Real> SemanticTerms<T> {
    pub fn total(&self) -> T {
        self.variance + self.cross_entropy
    }
}

/// Per-class brightness means over non-ignored labels; `None` for absent classes.
fn class_means<T: Real>(b: &[T], labels: &LabelMap) -> Vec<Option<T>> {
    let mut sums = vec![(T::zero(), 0usize); labels.num_classes()];
    for (&l, &v) in labels.as_slice().iter().zip(b) {
        if l != IGNORE_INDEX {
            let e = &mut sums[l as usize];
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(s, n)| if n == 0 { None } else { Some(s / T::of_usize(n)) })
        .collect()
}

pub fn semantic_terms<T: Real>(
    enhanced: &Image<T>,
    labels: &LabelMap,
    probs: &ProbMap<T>,
    mode: BrightnessMode,
) -> Result<SemanticTerms<T>> {
    Ok(semantic_terms_grad(enhanced, labels, probs, mode, false)?.0)
}

/// Variance of brightness within ground-truth categories plus cross-entropy
/// between the ground truth and the predicted probabilities.
pub fn semantic_consistency_loss<T: Real>(
    enhanced: &Image<T>,
    labels: &LabelMap,
    probs: &ProbMap<T>,
    mode: BrightnessMode,
) -> Result<T> {
    Ok(semantic_terms(enhanced, labels, probs, mode)?.total())
}

type SemanticGrad<T> = (SemanticTerms<T>, Option<(Tensor3<T>, Tensor3<T>)>);

/// Returns the terms and, when `want_grad`, `(d/d image, d/d probs)`.
pub fn semantic_terms_grad<T: Real>(
    enhanced: &Image<T>,
    labels: &LabelMap,
    probs: &ProbMap<T>,
    mode: BrightnessMode,
    want_grad: bool,
) -> Result<SemanticGrad<T>> {
    check_labels(enhanced, labels)?;
    let q = probs.tensor();
    if (q.height(), q.width()) != (enhanced.height(), enhanced.width()) {
        return Err(Error::Shape("probability map does not match image size".into()));
    }
    let s_count = q.channels();
    // validates every label against the prediction's class count
    let (_, mask) = one_hot::<T>(labels, s_count)?;
    let b = brightness_map(enhanced, mode);
    let means = class_means(&b, labels);

    let (h, w) = (enhanced.height(), enhanced.width());
    let n = h * w;
    let two = T::of(2.0);
    let mut variance = T::zero();
    let mut grad_b = vec![T::zero(); n];
    for (i, (&l, &v)) in labels.as_slice().iter().zip(&b).enumerate() {
        if !mask[i] {
            continue;
        }
        let d = v - means[l as usize].expect("class present");
        variance += d * d;
        grad_b[i] = two * d;
    }

    let valid = mask.iter().filter(|&&m| m).count();
    let floor = T::of(LOG_CLAMP);
    let qd = q.as_slice();
    let mut ce = T::zero();
    let mut grad_q = Tensor3::zeros(s_count, h, w);
    if valid > 0 {
        let inv = T::one() / T::of_usize(valid);
        for (i, &l) in labels.as_slice().iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let idx = l as usize * n + i;
            let p = qd[idx];
            ce -= p.max(floor).ln();
            if p > floor {
                grad_q.as_mut_slice()[idx] = -inv / p;
            }
        }
        ce *= inv;
    }
    let terms = SemanticTerms {
        variance,
        cross_entropy: ce,
    };
    if !want_grad {
        return Ok((terms, None));
    }
    let weights = mode.weights::<T>();
    let mut grad_img = Tensor3::zeros(3, h, w);
    for (c, &wc) in weights.iter().enumerate() {
        for (g, &gb) in grad_img.plane_mut(c).iter_mut().zip(&grad_b) {
            *g = wc * gb;
        }
    }
    Ok((terms, Some((grad_img, grad_q))))
}

/// `mean((f_l(low) − f_l(enhanced))²)` at a single layer.
pub fn feature_retention_loss<T: Real>(
    low: &Image<T>,
    enhanced: &Image<T>,
    backend: &dyn FeatureBackend<T>,
    layer: &str,
) -> Result<T> {
    check_same_size(low, enhanced)?;
    let fl = backend.extract(low, &[layer])?;
    let fh = backend.extract(enhanced, &[layer])?;
    let (a, b) = (&fl.layers[0].1, &fh.layers[0].1);
    Ok(mean_sq_diff(a, b))
}

fn mean_sq_diff<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> T {
    let sq: T = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    sq / T::of_usize(a.len().max(1))
}

fn check_same_size<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "images {}x{} and {}x{} differ in size",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Gradient of the retention loss w.r.t. the enhanced image's features.
fn retention_tap_grad<T: Real>(f_low: &Tensor3<T>, f_enh: &Tensor3<T>) -> (T, Tensor3<T>) {
    let value = mean_sq_diff(f_low, f_enh);
    let scale = T::of(2.0) / T::of_usize(f_low.len().max(1));
    let mut g = f_enh.clone();
    for (gv, &l) in g.as_mut_slice().iter_mut().zip(f_low.as_slice()) {
        *gv = scale * (*gv - l);
    }
    (value, g)
}

pub fn feature_retention_loss_grad<T: Real>(
    low: &Image<T>,
    enhanced: &Image<T>,
    backend: &dyn FeatureBackend<T>,
    layer: &str,
) -> Result<(T, Tensor3<T>)> {
    check_same_size(low, enhanced)?;
    let fl = backend.extract(low, &[layer])?;
    let fh = backend.extract(enhanced, &[layer])?;
    let (value, g) = retention_tap_grad(&fl.layers[0].1, &fh.layers[0].1);
    let grad = backend.backward(
        enhanced,
        &FeatureMaps {
            layers: vec![(layer.to_string(), g)],
        },
    )?;
    Ok((value, grad))
}

/// The two parts of the color constancy loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorTerms<T> {
    /// `Σ_{(p,q)} (J_p − J_q)²` over the RG, RB and GB channel pairs.
    pub gray_world: T,
    /// `λ/M · Σ_m Σ_c mean(|∇x A| + |∇y A|)`.
    pub smoothness: T,
}

impl<T: Real> ColorTerms<T> {
    pub fn total(&self) -> T {
        self.gray_world + self.smoothness
    }
}

const CHANNEL_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

fn check_curves_match<T: Real>(img: &Image<T>, curves: &CurveStack<T>) -> Result<()> {
    if (curves.height(), curves.width()) != (img.height(), img.width()) {
        return Err(Error::Shape(format!(
            "curve maps {}x{} do not match image {}x{}",
            curves.height(),
            curves.width(),
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

pub fn color_terms<T: Real>(enhanced: &Image<T>, curves: &CurveStack<T>, lambda: f64) -> Result<ColorTerms<T>> {
    Ok(color_terms_grad(enhanced, curves, lambda, false)?.0)
}

/// Gray-world channel-mean agreement plus forward-difference smoothness of
/// every curve map (the far row and column contribute zero).
pub fn color_constancy_loss<T: Real>(enhanced: &Image<T>, curves: &CurveStack<T>, lambda: f64) -> Result<T> {
    Ok(color_terms(enhanced, curves, lambda)?.total())
}

type ColorGrad<T> = (ColorTerms<T>, Option<(Tensor3<T>, Tensor3<T>)>);

/// Returns the terms and, when `want_grad`, `(d/d image, d/d curves)`.
pub fn color_terms_grad<T: Real>(
    enhanced: &Image<T>,
    curves: &CurveStack<T>,
    lambda: f64,
    want_grad: bool,
) -> Result<ColorGrad<T>> {
    check_curves_match(enhanced, curves)?;
    let t = enhanced.tensor();
    let (h, w) = (t.height(), t.width());
    let n = T::of_usize(h * w);
    let j: Vec<T> = (0..3).map(|c| t.plane(c).iter().copied().sum::<T>() / n).collect();
    let mut gray_world = T::zero();
    let mut dj = [T::zero(); 3];
    for &(p, q) in &CHANNEL_PAIRS {
        let d = j[p] - j[q];
        gray_world += d * d;
        dj[p] += T::of(2.0) * d;
        dj[q] -= T::of(2.0) * d;
    }

    let m_total = curves.iterations();
    let scale = T::of(lambda) / (T::of_usize(m_total) * n);
    let mut tv = T::zero();
    let mut grad_a = if want_grad {
        Some(Tensor3::zeros(3 * m_total, h, w))
    } else {
        None
    };
    for m in 0..m_total {
        for c in 0..3 {
            let a = curves.map(m, c);
            let mut plane_g = grad_a.as_mut().map(|g| g.plane_mut(3 * m + c));
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if x + 1 < w {
                        let d = a[i + 1] - a[i];
                        tv += d.abs();
                        if let Some(g) = plane_g.as_deref_mut() {
                            let s = sign(d) * scale;
                            g[i + 1] += s;
                            g[i] -= s;
                        }
                    }
                    if y + 1 < h {
                        let d = a[i + w] - a[i];
                        tv += d.abs();
                        if let Some(g) = plane_g.as_deref_mut() {
                            let s = sign(d) * scale;
                            g[i + w] += s;
                            g[i] -= s;
                        }
                    }
                }
            }
        }
    }
    let terms = ColorTerms {
        gray_world,
        smoothness: tv * scale,
    };
    let Some(grad_a) = grad_a else {
        return Ok((terms, None));
    };
    let mut grad_img = Tensor3::zeros(3, h, w);
    for (c, &d) in dj.iter().enumerate() {
        let v = d / n;
        grad_img.plane_mut(c).iter_mut().for_each(|g| *g = v);
    }
    Ok((terms, Some((grad_img, grad_a))))
}

/// Everything one training example contributes to the objective.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, T> {
    pub low: &'a Image<T>,
    pub enhanced: &'a Image<T>,
    /// Without a positive the contrastive term is reported as zero.
    pub positive: Option<&'a Image<T>>,
    pub negative: Option<&'a Image<T>>,
    pub labels: &'a LabelMap,
    pub curves: &'a CurveStack<T>,
}

/// Frozen networks the objective reads from.
#[derive(Clone, Copy)]
pub struct Backends<'a, T: Real> {
    pub features: &'a dyn FeatureBackend<T>,
    pub segmenter: &'a dyn SegBackend<T>,
}

/// Weighted objective with explicitly supplied class probabilities.
pub fn total_loss_with_probs<T: Real>(
    inputs: &LossInputs<'_, T>,
    probs: &ProbMap<T>,
    features: &dyn FeatureBackend<T>,
    config: &LossConfig,
) -> Result<LossReport> {
    config.validate()?;
    let l_c = match inputs.positive {
        Some(pos) => contrastive_loss(
            inputs.enhanced,
            pos,
            inputs.negative,
            features,
            &config.margins,
            &config.gram_layers,
        )?,
        None => T::zero(),
    };
    let l_sc = semantic_consistency_loss(inputs.enhanced, inputs.labels, probs, config.brightness_mode)?;
    let l_fr = feature_retention_loss(inputs.low, inputs.enhanced, features, &config.retention_layer)?;
    let l_cc = color_constancy_loss(inputs.enhanced, inputs.curves, config.lambda)?;
    Ok(LossReport::new(
        l_c.as_f64(),
        l_sc.as_f64(),
        l_fr.as_f64(),
        l_cc.as_f64(),
        config.weights,
        config.margins,
    ))
}

/// Weighted objective, segmenting the enhanced image with `backends.segmenter`.
pub fn total_loss<T: Real>(inputs: &LossInputs<'_, T>, backends: Backends<'_, T>, config: &LossConfig) -> Result<LossReport> {
    let probs = backends.segmenter.segment(inputs.enhanced, Some(inputs.labels))?;
    total_loss_with_probs(inputs, &probs, backends.features, config)
}

/// Gradients of the weighted objective.
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    /// `d total / d enhanced image`, including paths through both backends.
    pub enhanced: Tensor3<T>,
    /// `d total / d curve maps` from the smoothness penalty.
    pub curves: Tensor3<T>,
}

/// Weighted objective and its gradients. Terms with zero weight are still
/// reported but contribute no gradient.
pub fn total_loss_grad<T: Real>(
    inputs: &LossInputs<'_, T>,
    backends: Backends<'_, T>,
    config: &LossConfig,
) -> Result<(LossReport, LossGrads<T>)> {
    config.validate()?;
    let img = inputs.enhanced;
    check_same_size(inputs.low, img)?;
    let (h, w) = (img.height(), img.width());
    let weights = config.weights;

    // one forward through the feature backend covers every tap
    let mut taps: Vec<String> = config.gram_layers.clone();
    if !taps.contains(&config.retention_layer) {
        taps.push(config.retention_layer.clone());
    }
    let h_maps = backends.features.extract(img, &layer_refs(&taps))?;
    let gram_maps = FeatureMaps {
        layers: h_maps
            .layers
            .iter()
            .filter(|(n, _)| config.gram_layers.contains(n))
            .cloned()
            .collect(),
    };

    let mut grad_img = Tensor3::zeros(3, h, w);
    let mut tap_grads: Vec<(String, Tensor3<T>)> = Vec::new();
    let mut add_tap = |name: String, g: Tensor3<T>, scale: T| {
        if let Some((_, acc)) = tap_grads.iter_mut().find(|(n, _)| *n == name) {
            acc.add_scaled(&g, scale);
        } else {
            let mut g = g;
            if scale != T::one() {
                g.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
            }
            tap_grads.push((name, g));
        }
    };

    let (l_c, c_taps, c_pixel) = match inputs.positive {
        Some(pos) => contrastive_parts(
            img,
            &gram_maps,
            pos,
            inputs.negative,
            backends.features,
            &config.margins,
            &config.gram_layers,
        )?,
        None => (T::zero(), Vec::new(), T::zero()),
    };
    let w_c = T::of(weights.contrastive);
    if weights.contrastive != 0.0 {
        for (name, g) in c_taps {
            add_tap(name, g, w_c);
        }
        if c_pixel != T::zero() {
            let v = w_c * c_pixel;
            grad_img.as_mut_slice().iter_mut().for_each(|g| *g += v);
        }
    }

    let f_low = backends.features.extract(inputs.low, &[config.retention_layer.as_str()])?;
    let f_enh = h_maps.get(&config.retention_layer).expect("requested above");
    let (l_fr, fr_tap) = retention_tap_grad(&f_low.layers[0].1, f_enh);
    if weights.retention != 0.0 {
        add_tap(config.retention_layer.clone(), fr_tap, T::of(weights.retention));
    }

    let probs = backends.segmenter.segment(img, Some(inputs.labels))?;
    let (sc_terms, sc_grads) = semantic_terms_grad(
        img,
        inputs.labels,
        &probs,
        config.brightness_mode,
        weights.semantic != 0.0,
    )?;
    if let Some((g_direct, g_probs)) = sc_grads {
        let w_sc = T::of(weights.semantic);
        grad_img.add_scaled(&g_direct, w_sc);
        if let Some(g_seg) = backends.segmenter.backward(img, Some(inputs.labels), &g_probs)? {
            grad_img.add_scaled(&g_seg, w_sc);
        }
    }

    let (cc_terms, cc_grads) = color_terms_grad(img, inputs.curves, config.lambda, weights.color != 0.0)?;
    let mut grad_curves = Tensor3::zeros(3 * inputs.curves.iterations(), h, w);
    if let Some((g_img, g_curves)) = cc_grads {
        let w_cc = T::of(weights.color);
        grad_img.add_scaled(&g_img, w_cc);
        grad_curves.add_scaled(&g_curves, w_cc);
    }

    if !tap_grads.is_empty() {
        let g_feat = backends.features.backward(img, &FeatureMaps { layers: tap_grads })?;
        grad_img.add_scaled(&g_feat, T::one());
    }

    let report = LossReport::new(
        l_c.as_f64(),
        sc_terms.total().as_f64(),
        l_fr.as_f64(),
        cc_terms.total().as_f64(),
        weights,
        config.margins,
    );
    Ok((
        report,
        LossGrads {
            enhanced: grad_img,
            curves: grad_curves,
        },
    ))
}
