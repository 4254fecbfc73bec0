//! Curve-estimation network and iterative pixel-correction curves.
//!
//! The network is a seven-layer stride-1 CNN with symmetric skip
//! concatenations. Its last layer emits `3·M` channels squashed by `tanh`,
//! read as `M` per-channel curve maps. Each map drives one step of the
//! quadratic curve `x ← x + a·x·(1 − x)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::nn::{relu, relu_backward, tanh_backward, Conv2d};
use crate::scalar::Real;
use crate::tensor::{Array, Tensor3};

pub const ENHANCER_VERSION: &str = "curve-estimator/1";
pub const NUM_LAYERS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhancerConfig {
    /// Feature channels of every hidden layer.
    pub width: usize,
    /// Number of curve iterations `M`.
    pub iterations: usize,
    /// Standard deviation of the normal weight initializer.
    pub init_std: f64,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            width: 32,
            iterations: 8,
            init_std: 0.02,
        }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.iterations == 0 {
            return Err(Error::Config("enhancer width and iterations must be positive".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `(in_channels, out_channels)` of each convolution.
    pub fn layer_channels(&self) -> [(usize, usize); NUM_LAYERS] {
        let w = self.width;
        [
            (3, w),
            (w, w),
            (w, w),
            (w, w),
            (2 * w, w),
            (2 * w, w),
            (2 * w, 3 * self.iterations),
        ]
    }

    /// Hex SHA-256 over the architecture-defining fields.
    pub fn fingerprint(&self) -> String {
        let desc = format!("{ENHANCER_VERSION};width={};iterations={}", self.width, self.iterations);
        hex::encode(Sha256::digest(desc.as_bytes()))
    }
}

/// `M×3×H×W` curve parameters stored as one `3M`-channel tensor; map `m`,
/// color `c` lives in channel `3m + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveStack<T> {
    maps: Tensor3<T>,
}

impl<T: Real> CurveStack<T> {
    pub fn new(maps: Tensor3<T>) -> Result<Self> {
        if maps.channels() == 0 || maps.channels() % 3 != 0 {
            return Err(Error::Shape(format!(
                "curve stack needs a positive multiple of 3 channels, got {}",
                maps.channels()
            )));
        }
        if let Some(v) = maps
            .as_slice()
            .iter()
            .find(|v| !(v.is_finite() && v.abs() <= T::one()))
        {
            return Err(Error::InvalidArgument(format!("curve value {v} outside [-1, 1]")));
        }
        Ok(Self { maps })
    }

    pub fn zeros(iterations: usize, height: usize, width: usize) -> Self {
        Self {
            maps: Tensor3::zeros(3 * iterations, height, width),
        }
    }

    pub fn constant(iterations: usize, height: usize, width: usize, a: T) -> Result<Self> {
        Self::new(Tensor3::filled(3 * iterations, height, width, a))
    }

    #[inline]
    pub fn iterations(&self) -> usize {
        self.maps.channels() / 3
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.maps.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.maps.width()
    }

    /// Plane for iteration `m` (0-based) and color channel `c`.
    #[inline]
    pub fn map(&self, m: usize, c: usize) -> &[T] {
        self.maps.plane(3 * m + c)
    }

    pub fn tensor(&self) -> &Tensor3<T> {
        &self.maps
    }
}

/// Learnable weights of the curve estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerParams<T> {
    pub config: EnhancerConfig,
    pub convs: Vec<Conv2d<T>>,
}

/// Gradient of a scalar objective w.r.t. every convolution `(weight, bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerGrads<T> {
    pub convs: Vec<(Array<T>, Array<T>)>,
}

impl<T: Real> EnhancerGrads<T> {
    pub fn zeros_like(params: &EnhancerParams<T>) -> Self {
        Self {
            convs: params
                .convs
                .iter()
                .map(|c| (Array::zeros(c.weight.shape()), Array::zeros(c.bias.shape())))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((w, b), (ow, ob)) in self.convs.iter_mut().zip(&other.convs) {
            for (a, &v) in w.as_mut_slice().iter_mut().zip(ow.as_slice()) {
                *a += scale * v;
            }
            for (a, &v) in b.as_mut_slice().iter_mut().zip(ob.as_slice()) {
                *a += scale * v;
            }
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.convs
            .iter()
            .flat_map(|(w, b)| w.as_slice().iter().chain(b.as_slice()).copied())
            .collect()
    }

    pub fn norm(&self) -> T {
        self.flat().iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for (w, b) in &mut self.convs {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= s);
            b.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EnhancerTrace<T> {
    /// Layer inputs, `inputs[i]` feeds convolution `i`.
    inputs: Vec<Tensor3<T>>,
    /// Post-activation outputs of layers 1..=6.
    hidden: Vec<Tensor3<T>>,
    /// `tanh` output of the last layer.
    curves: Tensor3<T>,
}

impl<T: Real> EnhancerParams<T> {
    /// Normal-initialized weights (std `config.init_std`), zero biases.
    pub fn init(config: EnhancerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = config
            .layer_channels()
            .iter()
            .map(|&(cin, cout)| Conv2d::normal(cin, cout, 3, 1, 1, config.init_std, &mut rng))
            .collect();
        Ok(Self { config, convs })
    }

    /// Every weight and bias zero: the network then predicts zero curves.
    pub fn zeros(config: EnhancerConfig) -> Result<Self> {
        config.validate()?;
        let convs = config
            .layer_channels()
            .iter()
            .map(|&(cin, cout)| Conv2d::zeros(cin, cout, 3, 1, 1))
            .collect();
        Ok(Self { config, convs })
    }

    pub fn num_parameters(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    /// `(name, array)` pairs in a fixed order.
    pub fn named_arrays(&self) -> Vec<(String, &Array<T>)> {
        let mut out = Vec::with_capacity(2 * NUM_LAYERS);
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &c.weight));
            out.push((format!("conv{}.bias", i + 1), &c.bias));
        }
        out
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Array<T>)> {
        let mut out = Vec::with_capacity(2 * NUM_LAYERS);
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &mut c.weight));
            out.push((format!("conv{}.bias", i + 1), &mut c.bias));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.convs
            .iter()
            .all(|c| c.weight.as_slice().iter().chain(c.bias.as_slice()).all(|v| v.is_finite()))
    }

    fn check_input(&self, img: &Image<T>) -> Result<()> {
        let (h, w) = (img.height(), img.width());
        if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "enhancer input must be at least 4x4 with sides divisible by 4, got {h}x{w}"
            )));
        }
        Ok(())
    }

    pub fn forward_trace(&self, img: &Image<T>) -> Result<EnhancerTrace<T>> {
        self.check_input(img)?;
        let c = &self.convs;
        let x0 = img.tensor().clone();
        let x1 = relu(&c[0].forward(&x0)?);
        let x2 = relu(&c[1].forward(&x1)?);
        let x3 = relu(&c[2].forward(&x2)?);
        let x4 = relu(&c[3].forward(&x3)?);
        let in5 = x3.concat_channels(&x4);
        let x5 = relu(&c[4].forward(&in5)?);
        let in6 = x2.concat_channels(&x5);
        let x6 = relu(&c[5].forward(&in6)?);
        let in7 = x1.concat_channels(&x6);
        let curves = c[6].forward(&in7)?.map(|v| v.tanh());
        Ok(EnhancerTrace {
            inputs: vec![x0, x1.clone(), x2.clone(), x3.clone(), in5, in6, in7],
            hidden: vec![x1, x2, x3, x4, x5, x6],
            curves,
        })
    }

    /// Back-propagates `d objective / d curves` into parameter gradients.
    pub fn backward(&self, trace: &EnhancerTrace<T>, grad_curves: &Tensor3<T>) -> Result<EnhancerGrads<T>> {
        trace.curves.ensure_same_dims(grad_curves, "curve gradient")?;
        let c = &self.convs;
        let w = self.config.width;
        let mut grads: Vec<Option<(Array<T>, Array<T>)>> = vec![None; NUM_LAYERS];
        let mut store = |i: usize, g: crate::nn::ConvGrads<T>| {
            grads[i] = Some((g.weight, g.bias));
            g.input
        };

        let g7 = tanh_backward(&trace.curves, grad_curves);
        let gin7 = store(6, c[6].backward(&trace.inputs[6], &g7, true)?).expect("input grad");
        let (mut g_x1, g_x6) = gin7.split_channels(w);

        let g6 = relu_backward(&trace.hidden[5], &g_x6);
        let gin6 = store(5, c[5].backward(&trace.inputs[5], &g6, true)?).expect("input grad");
        let (mut g_x2, g_x5) = gin6.split_channels(w);

        let g5 = relu_backward(&trace.hidden[4], &g_x5);
        let gin5 = store(4, c[4].backward(&trace.inputs[4], &g5, true)?).expect("input grad");
        let (mut g_x3, g_x4) = gin5.split_channels(w);

        let g4 = relu_backward(&trace.hidden[3], &g_x4);
        let gin4 = store(3, c[3].backward(&trace.inputs[3], &g4, true)?).expect("input grad");
        g_x3.add_scaled(&gin4, T::one());

        let g3 = relu_backward(&trace.hidden[2], &g_x3);
        let gin3 = store(2, c[2].backward(&trace.inputs[2], &g3, true)?).expect("input grad");
        g_x2.add_scaled(&gin3, T::one());

        let g2 = relu_backward(&trace.hidden[1], &g_x2);
        let gin2 = store(1, c[1].backward(&trace.inputs[1], &g2, true)?).expect("input grad");
        g_x1.add_scaled(&gin2, T::one());

        let g1 = relu_backward(&trace.hidden[0], &g_x1);
        store(0, c[0].backward(&trace.inputs[0], &g1, false)?);

        Ok(EnhancerGrads {
            convs: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        })
    }

    pub fn estimate_curves(&self, img: &Image<T>) -> Result<CurveStack<T>> {
        Ok(CurveStack {
            maps: self.forward_trace(img)?.curves,
        })
    }

    pub fn enhance(&self, img: &Image<T>) -> Result<(Image<T>, CurveStack<T>)> {
        let curves = self.estimate_curves(img)?;
        let out = apply_curves(img, &curves)?;
        Ok((out, curves))
    }

    /// Stores arrays as `f32` under their canonical names.
    pub fn write_to(&self, archive: &mut Archive) {
        for (name, array) in self.named_arrays() {
            archive.insert(name, array.cast());
        }
    }

    pub fn read_from(config: EnhancerConfig, archive: &Archive) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        for (name, array) in params.named_arrays_mut() {
            let stored = archive.expect(&name, array.shape())?;
            *array = stored.cast();
        }
        if !params.all_finite() {
            return Err(Error::Config("checkpoint contains non-finite parameters".into()));
        }
        Ok(params)
    }
}

impl<T> EnhancerTrace<T> {
    pub fn curves(&self) -> &Tensor3<T> {
        &self.curves
    }
}

impl<T: Real> EnhancerTrace<T> {
    pub fn curve_stack(&self) -> CurveStack<T> {
        CurveStack {
            maps: self.curves.clone(),
        }
    }
}

/// One curve step; stays in `[0, 1]` for `x ∈ [0, 1]`, `a ∈ [−1, 1]`.
#[inline]
pub fn curve_step<T: Real>(x: T, a: T) -> T {
    (x + a * x * (T::one() - x)).max(T::zero()).min(T::one())
}

fn check_curves<T: Real>(img: &Image<T>, curves: &CurveStack<T>) -> Result<()> {
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

/// Applies all `M` curve iterations per color channel.
pub fn apply_curves<T: Real>(img: &Image<T>, curves: &CurveStack<T>) -> Result<Image<T>> {
    check_curves(img, curves)?;
    let mut out = img.tensor().clone();
    for m in 0..curves.iterations() {
        for c in 0..3 {
            for (x, &a) in out.plane_mut(c).iter_mut().zip(curves.map(m, c)) {
                *x = curve_step(*x, a);
            }
        }
    }
    Image::new(out)
}

/// Gradients of a scalar objective through [`apply_curves`] given
/// `d objective / d output`. Returns `(d/d image, d/d curves)`.
pub fn apply_curves_backward<T: Real>(
    img: &Image<T>,
    curves: &CurveStack<T>,
    grad_out: &Tensor3<T>,
) -> Result<(Tensor3<T>, Tensor3<T>)> {
    check_curves(img, curves)?;
    img.tensor().ensure_same_dims(grad_out, "output gradient")?;
    let m_total = curves.iterations();
    // states[m] is LE_m
    let mut states = Vec::with_capacity(m_total + 1);
    states.push(img.tensor().clone());
    for m in 0..m_total {
        let mut next = states[m].clone();
        for c in 0..3 {
            for (x, &a) in next.plane_mut(c).iter_mut().zip(curves.map(m, c)) {
                *x = curve_step(*x, a);
            }
        }
        states.push(next);
    }
    let (h, w) = (img.height(), img.width());
    let mut grad_curves = Tensor3::zeros(3 * m_total, h, w);
    let mut g = grad_out.clone();
    for m in (0..m_total).rev() {
        let prev = &states[m];
        for c in 0..3 {
            let a_plane = curves.map(m, c);
            let x_plane = prev.plane(c);
            let ga = grad_curves.plane_mut(3 * m + c);
            let gx = g.plane_mut(c);
            for i in 0..h * w {
                let x = x_plane[i];
                let a = a_plane[i];
                ga[i] = gx[i] * x * (T::one() - x);
                gx[i] *= T::one() + a * (T::one() - T::of(2.0) * x);
            }
        }
    }
    Ok((g, grad_curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| {
            [rng.random_range(0.02..0.98), rng.random_range(0.02..0.98), rng.random_range(0.02..0.98)]
        })
        .unwrap()
    }

    fn random_curves(m: usize, h: usize, w: usize, seed: u64) -> CurveStack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * m * h * w).map(|_| rng.random_range(-0.9..0.9)).collect();
        CurveStack::new(Tensor3::from_vec(3 * m, h, w, data).unwrap()).unwrap()
    }

    #[test]
    fn zero_curves_are_identity() {
        let img = random_image(4, 4, 1);
        let out = apply_curves(&img, &CurveStack::zeros(8, 4, 4)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn scalar_recurrence_value() {
        let img = Image::<f64>::constant(1, 1, 0.5).unwrap();
        let out = apply_curves(&img, &CurveStack::constant(1, 1, 1, 1.0).unwrap()).unwrap();
        assert_eq!(out.get(0, 0, 0), 0.75);
    }

    #[test]
    fn endpoints_are_fixed() {
        for v in [0.0, 1.0] {
            let img = Image::<f64>::constant(2, 2, v).unwrap();
            let out = apply_curves(&img, &random_curves(8, 2, 2, 4)).unwrap();
            assert!(out.as_slice().iter().all(|&x| x == v));
        }
    }

    #[test]
    fn curve_shape_mismatch_is_rejected() {
        let img = random_image(4, 4, 1);
        assert!(apply_curves(&img, &CurveStack::zeros(2, 4, 8)).is_err());
        assert!(CurveStack::<f64>::constant(1, 1, 1, 1.5).is_err());
    }

    #[test]
    fn zero_network_predicts_zero_curves() {
        let params = EnhancerParams::<f64>::zeros(EnhancerConfig::default()).unwrap();
        let img = random_image(8, 8, 2);
        let curves = params.estimate_curves(&img).unwrap();
        assert!(curves.tensor().as_slice().iter().all(|&a| a == 0.0));
        let (out, _) = params.enhance(&img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn estimation_is_deterministic_and_bounded() {
        let cfg = EnhancerConfig {
            init_std: 0.5,
            ..Default::default()
        };
        let a = EnhancerParams::<f32>::init(cfg, 7).unwrap();
        let b = EnhancerParams::<f32>::init(cfg, 7).unwrap();
        assert_eq!(a, b);
        let img = random_image(8, 8, 3).cast::<f32>();
        let ca = a.estimate_curves(&img).unwrap();
        let cb = b.estimate_curves(&img).unwrap();
        let bits = |c: &CurveStack<f32>| c.tensor().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ca), bits(&cb));
        assert!(ca.tensor().as_slice().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(ca.iterations(), 8);
    }

    #[test]
    fn rejects_bad_input_sizes() {
        let params = EnhancerParams::<f64>::zeros(EnhancerConfig::default()).unwrap();
        assert!(params.estimate_curves(&random_image(6, 8, 1)).is_err());
        assert!(params.estimate_curves(&random_image(2, 2, 1)).is_err());
    }

    #[test]
    fn apply_curves_gradients_match_finite_differences() {
        let (h, w, m) = (4, 4, 8);
        let img = random_image(h, w, 10);
        let curves = random_curves(m, h, w, 11);
        let probe = random_image(h, w, 12).into_tensor();
        let objective = |img: &Image<f64>, curves: &CurveStack<f64>| -> f64 {
            let out = apply_curves(img, curves).unwrap();
            out.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (gi, gc) = apply_curves_backward(&img, &curves, &probe).unwrap();
        let eps = 1e-4;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
        for idx in 0..img.as_slice().len() {
            let mut p = img.tensor().clone();
            p.as_mut_slice()[idx] += eps;
            let mut n = img.tensor().clone();
            n.as_mut_slice()[idx] -= eps;
            let fd = (objective(&Image::new(p).unwrap(), &curves) - objective(&Image::new(n).unwrap(), &curves))
                / (2.0 * eps);
            assert!(rel(fd, gi.as_slice()[idx]) <= 1e-4, "pixel {idx}");
        }
        for idx in 0..curves.tensor().len() {
            let mut p = curves.tensor().clone();
            p.as_mut_slice()[idx] += eps;
            let mut n = curves.tensor().clone();
            n.as_mut_slice()[idx] -= eps;
            let fd = (objective(&img, &CurveStack::new(p).unwrap()) - objective(&img, &CurveStack::new(n).unwrap()))
                / (2.0 * eps);
            assert!(rel(fd, gc.as_slice()[idx]) <= 1e-4, "curve {idx}");
        }
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let cfg = EnhancerConfig {
            width: 4,
            iterations: 2,
            init_std: 0.4,
        };
        let params = EnhancerParams::<f64>::init(cfg, 3).unwrap();
        let img = random_image(4, 4, 5);
        let probe = random_curves(2, 4, 4, 6).tensor().clone();
        let objective = |p: &EnhancerParams<f64>| -> f64 {
            let c = p.estimate_curves(&img).unwrap();
            c.tensor().as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
        };
        let trace = params.forward_trace(&img).unwrap();
        let grads = params.backward(&trace, &probe).unwrap();
        let eps = 1e-5;
        for layer in 0..NUM_LAYERS {
            for idx in (0..params.convs[layer].weight.len()).step_by(7) {
                let mut p = params.clone();
                p.convs[layer].weight.as_mut_slice()[idx] += eps;
                let mut n = params.clone();
                n.convs[layer].weight.as_mut_slice()[idx] -= eps;
                let fd = (objective(&p) - objective(&n)) / (2.0 * eps);
                let an = grads.convs[layer].0.as_slice()[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "layer {layer} w{idx}: {fd} vs {an}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn single_step_closure(x in 0.0f64..=1.0, a in -1.0f64..=1.0) {
            let y = curve_step(x, a);
            prop_assert!((0.0..=1.0).contains(&y));
        }

        #[test]
        fn single_step_monotone(x in 0.0f64..=1.0, dx in 0.0f64..=1.0, a in -1.0f64..=1.0) {
            let x2 = (x + dx).min(1.0);
            prop_assert!(curve_step(x2, a) >= curve_step(x, a));
        }
    }
}
