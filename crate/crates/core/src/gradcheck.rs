//! Analytic versus central finite-difference gradients of every loss term,
//! with respect to enhanced-image pixels and to enhancer parameters.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Stream, TrainExample};
use crate::enhancer::{EnhancerConfig, EnhancerParams};
use crate::error::Result;
use crate::features::{CachedBackend, ConvFeatureNet};
use crate::imageio::Image;
use crate::losses::{total_loss, total_loss_grad, Backends, LossConfig, LossInputs, LossReport, LossWeights};
use crate::segmenter::{ConvSegmenter, LabelMap, OracleSegmenter, SegBackend};
use crate::trainer::{example_grad, SegBackendKind};

pub const TERMS: [&str; 5] = ["l_c", "l_sc", "l_fr", "l_cc", "total"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Side of the square test images.
    pub size: usize,
    pub num_classes: usize,
    pub iterations: usize,
    pub width: usize,
    pub init_std: f64,
    pub fd_step: f64,
    pub tolerance: f64,
    pub abs_floor: f64,
    pub segmenter: SegBackendKind,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 4,
            num_classes: 3,
            iterations: 2,
            width: 8,
            init_std: 0.1,
            fd_step: 1e-4,
            tolerance: 1e-4,
            abs_floor: 1e-7,
            segmenter: SegBackendKind::Tinycnn,
        }
    }
}

/// Largest relative deviation over the checked coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub max_rel: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl Deviation {
    fn from_pairs(pairs: &[(f64, f64)], floor: f64) -> Self {
        let mut out = Deviation {
            max_rel: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: pairs.len(),
        };
        for (i, &(a, n)) in pairs.iter().enumerate() {
            let rel = relative_deviation(a, n, floor);
            if rel > out.max_rel || rel.is_nan() {
                out.max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                out.worst_index = i;
                out.analytic = a;
                out.numeric = n;
            }
        }
        out
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_deviation(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub pixels: Deviation,
    pub params: Deviation,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub terms: Vec<TermCheck>,
    /// Coordinates re-differenced because their stencil crossed a kink.
    pub refined_pixels: usize,
    pub refined_params: usize,
    pub passed: bool,
}

/// Loss configuration enabling only `term` (or every term for `"total"`).
pub fn isolate(term: &str) -> LossConfig {
    let zero = LossWeights {
        contrastive: 0.0,
        semantic: 0.0,
        retention: 0.0,
        color: 0.0,
    };
    let weights = match term {
        "l_c" => LossWeights { contrastive: 1.0, ..zero },
        "l_sc" => LossWeights { semantic: 1.0, ..zero },
        "l_fr" => LossWeights { retention: 1.0, ..zero },
        "l_cc" => LossWeights { color: 1.0, ..zero },
        _ => LossWeights::default(),
    };
    LossConfig {
        weights,
        ..LossConfig::default()
    }
}

/// A seeded `f64` instance.
pub struct Instance {
    pub features: ConvFeatureNet<f64>,
    pub segmenter: Box<dyn SegBackend<f64>>,
    pub params: EnhancerParams<f64>,
    pub example: TrainExample<f64>,
    /// Free-standing enhanced image for pixel checks.
    pub enhanced: Image<f64>,
}

impl Instance {
    pub fn new(cfg: &GradCheckConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
        let s = cfg.size;
        let mut image = |lo: f64, hi: f64| Image::from_fn(s, s, |_, _| [0; 3].map(|_| rng.random_range(lo..hi)));
        let low = image(0.05, 0.5)?;
        let positive = image(0.3, 0.9)?;
        let negative = image(0.0, 1.0)?;
        let enhanced = image(0.1, 0.9)?;
        let labels = LabelMap::from_fn(s, s, cfg.num_classes, |_, _| rng.random_range(0..cfg.num_classes) as u8)?;
        let segmenter: Box<dyn SegBackend<f64>> = match cfg.segmenter {
            SegBackendKind::Oracle => Box::new(OracleSegmenter {
                num_classes: cfg.num_classes,
            }),
            _ => Box::new(ConvSegmenter::<f64>::tiny(cfg.num_classes, cfg.seed.wrapping_add(1))),
        };
        let mut params = EnhancerParams::init(
            EnhancerConfig {
                width: cfg.width,
                iterations: cfg.iterations,
                init_std: cfg.init_std,
            },
            cfg.seed.wrapping_add(2),
        )?;
        // zero biases put units fed by all-zero patches exactly on a ReLU kink
        for conv in &mut params.convs {
            for b in conv.bias.as_mut_slice() {
                *b = rng.random_range(-cfg.init_std..cfg.init_std);
            }
        }
        Ok(Self {
            features: ConvFeatureNet::reference(cfg.seed.wrapping_add(3)),
            segmenter,
            params,
            example: TrainExample {
                stem: "gradcheck".into(),
                low,
                labels,
                positive: Some(positive),
                negative: Some(negative),
                gamma: None,
            },
            enhanced,
        })
    }

    pub fn backends(&self) -> Backends<'_, f64> {
        Backends {
            features: &self.features,
            segmenter: self.segmenter.as_ref(),
        }
    }

    fn pixel_inputs<'a>(&'a self, enhanced: &'a Image<f64>, curves: &'a crate::enhancer::CurveStack<f64>) -> LossInputs<'a, f64> {
        LossInputs {
            low: &self.example.low,
            enhanced,
            positive: self.example.positive.as_ref(),
            negative: self.example.negative.as_ref(),
            labels: &self.example.labels,
            curves,
        }
    }

    /// Central differences of every term w.r.t. the pixels of
    /// `self.enhanced`, curve maps held at the enhancer's prediction.
    /// Entry `i` holds the five term derivatives in [`TERMS`] order.
    pub fn pixel_numeric(&self, step: f64) -> Result<Vec<Numeric>> {
        let curves = self.params.estimate_curves(&self.example.low)?;
        let features = CachedBackend::new(&self.features);
        let backends = Backends {
            features: &features,
            segmenter: self.segmenter.as_ref(),
        };
        let loss = LossConfig::default();
        let base = self.enhanced.tensor().clone();
        let eval = |i: usize, delta: f64| -> Result<[f64; 5]> {
            let mut t = base.clone();
            t.as_mut_slice()[i] += delta;
            let img = Image::new(t)?;
            Ok(term_values(&total_loss(&self.pixel_inputs(&img, &curves), backends, &loss)?))
        };
        let f0 = eval(0, 0.0)?;
        (0..base.len())
            .into_par_iter()
            .map(|i| stencil(|d| eval(i, d), f0, step))
            .collect()
    }

    /// Analytic pixel gradient of the loss selected by `loss`.
    pub fn pixel_analytic(&self, loss: &LossConfig) -> Result<Vec<f64>> {
        let curves = self.params.estimate_curves(&self.example.low)?;
        let (_, grads) = total_loss_grad(&self.pixel_inputs(&self.enhanced, &curves), self.backends(), loss)?;
        Ok(grads.enhanced.into_vec())
    }

    /// Central differences of every term w.r.t. every enhancer parameter.
    pub fn param_numeric(&self, step: f64) -> Result<Vec<Numeric>> {
        let features = CachedBackend::new(&self.features);
        let backends = Backends {
            features: &features,
            segmenter: self.segmenter.as_ref(),
        };
        let loss = LossConfig::default();
        let f0 = {
            let (enhanced, curves) = self.params.enhance(&self.example.low)?;
            term_values(&total_loss(&self.pixel_inputs(&enhanced, &curves), backends, &loss)?)
        };
        let mut slots = Vec::new();
        for (layer, conv) in self.params.convs.iter().enumerate() {
            slots.extend((0..conv.weight.len()).map(|i| (layer, false, i)));
            slots.extend((0..conv.bias.len()).map(|i| (layer, true, i)));
        }
        slots
            .par_iter()
            .map(|&(layer, is_bias, i)| {
                let eval = |delta: f64| -> Result<[f64; 5]> {
                    let mut p = self.params.clone();
                    let conv = &mut p.convs[layer];
                    let arr = if is_bias { &mut conv.bias } else { &mut conv.weight };
                    arr.as_mut_slice()[i] += delta;
                    let (enhanced, curves) = p.enhance(&self.example.low)?;
                    Ok(term_values(&total_loss(&self.pixel_inputs(&enhanced, &curves), backends, &loss)?))
                };
                stencil(eval, f0, step)
            })
            .collect()
    }

    /// Analytic parameter gradient of the loss selected by `loss`, flattened
    /// in the same order as [`Instance::param_numeric`].
    pub fn param_analytic(&self, loss: &LossConfig) -> Result<Vec<f64>> {
        let (_, grads) = example_grad(&self.params, &self.example, self.backends(), loss)?;
        Ok(grads.flat())
    }
}

fn term_values(r: &LossReport) -> [f64; 5] {
    [r.l_c, r.l_sc, r.l_fr, r.l_cc, r.l_c + r.l_sc + r.l_fr + r.l_cc]
}

fn central(plus: [f64; 5], minus: [f64; 5], step: f64) -> [f64; 5] {
    std::array::from_fn(|t| (plus[t] - minus[t]) / (2.0 * step))
}

/// Relative disagreement of the one-sided differences above which a
/// coordinate is probed for a kink inside its stencil.
pub const KINK_THRESHOLD: f64 = 1e-4;
/// Ratio between the slope drift on the two sides of the stencil above
/// which the drifting side is taken to contain a kink.
pub const KINK_RATIO: f64 = 3.0;

/// Numeric derivative of one coordinate for each term.
///
/// The central difference is used unless the stencil straddles a ReLU,
/// hinge or absolute-value kink. Then the side whose slope drifts between
/// the half and full step holds the kink, and a second-order one-sided
/// difference on the opposite side replaces the central one.
#[derive(Debug, Clone, Copy)]
pub struct Numeric {
    pub values: [f64; 5],
    pub refined: bool,
}

fn stencil(eval: impl Fn(f64) -> Result<[f64; 5]>, f0: [f64; 5], step: f64) -> Result<Numeric> {
    let (plus, minus) = (eval(step)?, eval(-step)?);
    let mut values = central(plus, minus, step);
    let suspect: Vec<usize> = (0..5)
        .filter(|&t| {
            let fwd = (plus[t] - f0[t]) / step;
            let bwd = (f0[t] - minus[t]) / step;
            relative_deviation(fwd, bwd, 1e-7) > KINK_THRESHOLD
        })
        .collect();
    if suspect.is_empty() {
        return Ok(Numeric { values, refined: false });
    }
    let h = step / 2.0;
    let (half_plus, half_minus) = (eval(h)?, eval(-h)?);
    let mut refined = false;
    for t in suspect {
        let drift_plus = ((plus[t] - f0[t]) / step - (half_plus[t] - f0[t]) / h).abs();
        let drift_minus = ((f0[t] - minus[t]) / step - (f0[t] - half_minus[t]) / h).abs();
        if drift_plus > KINK_RATIO * drift_minus {
            values[t] = (3.0 * f0[t] - 4.0 * half_minus[t] + minus[t]) / step;
            refined = true;
        } else if drift_minus > KINK_RATIO * drift_plus {
            values[t] = (4.0 * half_plus[t] - 3.0 * f0[t] - plus[t]) / step;
            refined = true;
        }
    }
    Ok(Numeric { values, refined })
}

fn pairs(analytic: &[f64], numeric: &[Numeric], term: usize) -> Vec<(f64, f64)> {
    analytic.iter().zip(numeric).map(|(&a, n)| (a, n.values[term])).collect()
}

/// Runs every term against finite differences on one seeded instance.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inst = Instance::new(cfg)?;
    let pixel_numeric = inst.pixel_numeric(cfg.fd_step)?;
    let param_numeric = inst.param_numeric(cfg.fd_step)?;
    let mut terms = Vec::with_capacity(TERMS.len());
    for (t, term) in TERMS.iter().enumerate() {
        let loss = isolate(term);
        let pixels = Deviation::from_pairs(&pairs(&inst.pixel_analytic(&loss)?, &pixel_numeric, t), cfg.abs_floor);
        let params = Deviation::from_pairs(&pairs(&inst.param_analytic(&loss)?, &param_numeric, t), cfg.abs_floor);
        let passed = pixels.max_rel <= cfg.tolerance && params.max_rel <= cfg.tolerance;
        terms.push(TermCheck {
            term: term.to_string(),
            pixels,
            params,
            passed,
        });
    }
    let passed = terms.iter().all(|t| t.passed);
    Ok(GradCheckReport {
        config: cfg.clone(),
        terms,
        refined_pixels: pixel_numeric.iter().filter(|n| n.refined).count(),
        refined_params: param_numeric.iter().filter(|n| n.refined).count(),
        passed,
    })
}
