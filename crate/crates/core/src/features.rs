//! Frozen feature extractors plus the Gram and expectation statistics built
//! on their activations.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::nn::{Conv2d, Op, SeqNet};
use crate::scalar::Real;
use crate::tensor::Tensor3;

/// The four taps shared by both backends, shallow to deep.
pub const DEFAULT_GRAM_LAYERS: [&str; 4] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3"];
pub const DEFAULT_RETENTION_LAYER: &str = "relu4_3";

/// Activations at requested taps, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps<T> {
    pub layers: Vec<(String, Tensor3<T>)>,
}

impl<T: Real> FeatureMaps<T> {
    pub fn get(&self, layer: &str) -> Option<&Tensor3<T>> {
        self.layers.iter().find(|(n, _)| n == layer).map(|(_, t)| t)
    }

    pub fn layer_ids(&self) -> Vec<&str> {
        self.layers.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// A frozen image-to-features network. Implementations never mutate their
/// parameters; gradients flow only to the input image.
pub trait FeatureBackend<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn layer_ids(&self) -> Vec<String>;

    fn extract(&self, img: &Image<T>, layers: &[&str]) -> Result<FeatureMaps<T>>;

    /// `d objective / d image` given `d objective / d tap` for some taps.
    fn backward(&self, img: &Image<T>, tap_grads: &FeatureMaps<T>) -> Result<Tensor3<T>>;

    /// Hex SHA-256 over every parameter, for freezing checks.
    fn parameter_digest(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Seeded random 4-layer stride-2 CNN.
    Reference,
    /// VGG-16 convolution stack up to `relu4_3`, loaded from a weight archive.
    Vgg16,
}

/// A [`SeqNet`] wrapped with optional per-channel input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFeatureNet<T> {
    kind: FeatureKind,
    net: SeqNet<T>,
    mean: [T; 3],
    std: [T; 3],
}

const REFERENCE_CHANNELS: [usize; 5] = [3, 16, 32, 64, 128];

/// Mean-square activation of each reference tap on a uniform 0.5 input.
/// The first tap's Gram entries are then of unit scale; deeper taps decay.
pub const REFERENCE_TAP_ENERGY: [f64; 4] = [16.0, 4.0, 1.0, 0.25];
const CALIBRATION_SIZE: usize = 64;

impl<T: Real> ConvFeatureNet<T> {
    /// He-normal weights with zero biases, then each layer rescaled in turn
    /// so that a uniform mid-gray input gives the tap mean-square activation
    /// listed in [`REFERENCE_TAP_ENERGY`].
    pub fn reference(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::reference_with(|cin, cout| {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            Conv2d::normal(cin, cout, 3, 2, 1, std, &mut rng)
        });
        net.calibrate();
        net
    }

    fn calibrate(&mut self) {
        let probe = Tensor3::filled(3, CALIBRATION_SIZE, CALIBRATION_SIZE, T::of(0.5));
        for (tap, &target) in REFERENCE_TAP_ENERGY.iter().enumerate() {
            let idx = self.net.taps[tap].1;
            let out = self.net.forward_to(&probe, idx).expect("probe fits the reference net");
            let ms = out.as_slice().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / out.len() as f64;
            if ms <= 0.0 {
                continue;
            }
            let scale = T::of((target / ms).sqrt());
            let (_, conv) = self.net.convs_mut().nth(tap).expect("one conv per tap");
            conv.weight.as_mut_slice().iter_mut().for_each(|w| *w *= scale);
            conv.bias.as_mut_slice().iter_mut().for_each(|b| *b *= scale);
        }
    }

    pub fn reference_zeros() -> Self {
        Self::reference_with(|cin, cout| Conv2d::zeros(cin, cout, 3, 2, 1))
    }

    fn reference_with(mut make: impl FnMut(usize, usize) -> Conv2d<T>) -> Self {
        let mut ops = Vec::new();
        let mut taps = Vec::new();
        for (i, pair) in REFERENCE_CHANNELS.windows(2).enumerate() {
            ops.push(Op::Conv {
                name: format!("conv{}", i + 1),
                conv: make(pair[0], pair[1]),
            });
            ops.push(Op::Relu);
            taps.push((DEFAULT_GRAM_LAYERS[i].to_string(), ops.len() - 1));
        }
        Self {
            kind: FeatureKind::Reference,
            net: SeqNet { ops, taps },
            mean: [T::zero(); 3],
            std: [T::one(); 3],
        }
    }

    /// VGG-16 topology; `make(name, cin, cout)` supplies each convolution.
    fn vgg16_with(mut make: impl FnMut(&str, usize, usize) -> Result<Conv2d<T>>) -> Result<Self> {
        const BLOCKS: [(usize, usize); 4] = [(2, 64), (2, 128), (3, 256), (3, 512)];
        let mut ops = Vec::new();
        let mut taps = Vec::new();
        let mut cin = 3;
        for (b, &(convs, width)) in BLOCKS.iter().enumerate() {
            if b > 0 {
                ops.push(Op::MaxPool2);
            }
            for i in 0..convs {
                let name = format!("conv{}_{}", b + 1, i + 1);
                let conv = make(&name, cin, width)?;
                ops.push(Op::Conv { name, conv });
                ops.push(Op::Relu);
                taps.push((format!("relu{}_{}", b + 1, i + 1), ops.len() - 1));
                cin = width;
            }
        }
        Ok(Self {
            kind: FeatureKind::Vgg16,
            net: SeqNet { ops, taps },
            mean: [T::of(0.485), T::of(0.456), T::of(0.406)],
            std: [T::of(0.229), T::of(0.224), T::of(0.225)],
        })
    }

    /// Random VGG-16 weights, for tests and shape checks.
    pub fn vgg16_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::vgg16_with(|_, cin, cout| {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            Ok(Conv2d::normal(cin, cout, 3, 1, 1, std, &mut rng))
        })
        .expect("infallible")
    }

    /// Loads `conv{block}_{idx}.weight/.bias` arrays plus the manifest's
    /// `mean`/`std` standardization constants.
    pub fn vgg16_from_archive(archive: &Archive) -> Result<Self> {
        let mut net = Self::vgg16_with(|name, cin, cout| {
            let mut conv = Conv2d::zeros(cin, cout, 3, 1, 1);
            conv.weight = archive.expect(&format!("{name}.weight"), &[cout, cin, 3, 3])?.cast();
            conv.bias = archive.expect(&format!("{name}.bias"), &[cout])?.cast();
            Ok(conv)
        })?;
        let read3 = |key: &str| -> Result<Option<[T; 3]>> {
            match archive.manifest.get(key) {
                None => Ok(None),
                Some(v) => {
                    let vals: Vec<f64> = serde_json::from_value(v.clone())?;
                    if vals.len() != 3 {
                        return Err(Error::Config(format!("manifest `{key}` must hold 3 values")));
                    }
                    Ok(Some([T::of(vals[0]), T::of(vals[1]), T::of(vals[2])]))
                }
            }
        };
        if let Some(m) = read3("mean")? {
            net.mean = m;
        }
        if let Some(s) = read3("std")? {
            if s.iter().any(|v| *v <= T::zero()) {
                return Err(Error::Config("standardization std must be positive".into()));
            }
            net.std = s;
        }
        Ok(net)
    }

    pub fn vgg16_from_file(path: &Path) -> Result<Self> {
        Self::vgg16_from_archive(&Archive::load(path)?)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn network(&self) -> &SeqNet<T> {
        &self.net
    }

    fn standardize(&self, img: &Image<T>) -> Tensor3<T> {
        let mut t = img.tensor().clone();
        for c in 0..3 {
            let (m, s) = (self.mean[c], self.std[c]);
            if m != T::zero() || s != T::one() {
                t.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        t
    }

    fn deepest(&self, layers: &[&str]) -> Result<usize> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("no feature layers requested".into()));
        }
        layers
            .iter()
            .map(|l| self.net.tap_index(l))
            .try_fold(0usize, |acc, i| Ok(acc.max(i?)))
    }
}

impl<T: Real> FeatureBackend<T> for ConvFeatureNet<T> {
    fn name(&self) -> &str {
        match self.kind {
            FeatureKind::Reference => "reference",
            FeatureKind::Vgg16 => "vgg16",
        }
    }

    fn layer_ids(&self) -> Vec<String> {
        self.net.taps.iter().map(|(n, _)| n.clone()).collect()
    }

    fn extract(&self, img: &Image<T>, layers: &[&str]) -> Result<FeatureMaps<T>> {
        let top = self.deepest(layers)?;
        let acts = self.net.forward_trace(&self.standardize(img), top)?;
        let mut out = Vec::with_capacity(layers.len());
        for l in layers {
            let idx = self.net.tap_index(l)?;
            out.push((l.to_string(), acts[idx + 1].clone()));
        }
        Ok(FeatureMaps { layers: out })
    }

    fn backward(&self, img: &Image<T>, tap_grads: &FeatureMaps<T>) -> Result<Tensor3<T>> {
        let names = tap_grads.layer_ids();
        let top = self.deepest(&names)?;
        let acts = self.net.forward_trace(&self.standardize(img), top)?;
        let mut injected = Vec::with_capacity(names.len());
        for (name, g) in &tap_grads.layers {
            let idx = self.net.tap_index(name)?;
            acts[idx + 1].ensure_same_dims(g, "feature gradient")?;
            injected.push((idx, g.clone()));
        }
        let mut grad = self.net.backward_to_input(&acts, &injected)?;
        for c in 0..3 {
            let s = self.std[c];
            if s != T::one() {
                grad.plane_mut(c).iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(grad)
    }

    fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, conv) in self.net.convs() {
            h.update(name.as_bytes());
            for v in conv.weight.as_slice().iter().chain(conv.bias.as_slice()) {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Memoizes [`FeatureBackend::extract`] by exact image content. Meant for
/// repeated evaluation against a handful of fixed images.
pub struct CachedBackend<'a, T> {
    inner: &'a dyn FeatureBackend<T>,
    cache: Mutex<HashMap<(Vec<u64>, Vec<String>), FeatureMaps<T>>>,
}

impl<'a, T: Real> CachedBackend<'a, T> {
    pub fn new(inner: &'a dyn FeatureBackend<T>) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<T: Real> FeatureBackend<T> for CachedBackend<'_, T> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn layer_ids(&self) -> Vec<String> {
        self.inner.layer_ids()
    }

    fn extract(&self, img: &Image<T>, layers: &[&str]) -> Result<FeatureMaps<T>> {
        let mut key_bits: Vec<u64> = vec![img.height() as u64, img.width() as u64];
        key_bits.extend(img.as_slice().iter().map(|v| v.as_f64().to_bits()));
        let key = (key_bits, layers.iter().map(|l| l.to_string()).collect());
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let maps = self.inner.extract(img, layers)?;
        self.cache.lock().expect("cache lock").insert(key, maps.clone());
        Ok(maps)
    }

    fn backward(&self, img: &Image<T>, tap_grads: &FeatureMaps<T>) -> Result<Tensor3<T>> {
        self.inner.backward(img, tap_grads)
    }

    fn parameter_digest(&self) -> String {
        self.inner.parameter_digest()
    }
}

/// A symmetric `C×C` Gram matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram<T> {
    pub size: usize,
    pub data: Vec<T>,
}

impl<T: Real> Gram<T> {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.size + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramSet<T> {
    pub layers: Vec<(String, Gram<T>)>,
}

/// `G_ij = Σ_k f_ik f_jk / (C·H·W)` with `k` over flattened spatial positions.
pub fn gram_matrix<T: Real>(f: &Tensor3<T>) -> Gram<T> {
    let c = f.channels();
    let norm = T::one() / T::of_usize(f.len().max(1));
    let mut data = vec![T::zero(); c * c];
    for i in 0..c {
        let fi = f.plane(i);
        for j in i..c {
            let fj = f.plane(j);
            let dot: T = fi.iter().zip(fj).map(|(&a, &b)| a * b).sum();
            let v = dot * norm;
            data[i * c + j] = v;
            data[j * c + i] = v;
        }
    }
    Gram { size: c, data }
}

/// `d objective / d f` given `d objective / d G`.
pub fn gram_backward<T: Real>(f: &Tensor3<T>, grad: &Gram<T>) -> Tensor3<T> {
    let c = f.channels();
    let norm = T::one() / T::of_usize(f.len().max(1));
    let (_, h, w) = f.dims();
    let mut out = Tensor3::zeros(c, h, w);
    for i in 0..c {
        for j in 0..c {
            let coeff = (grad.get(i, j) + grad.get(j, i)) * norm;
            if coeff == T::zero() {
                continue;
            }
            let fj = f.plane(j);
            for (o, &v) in out.plane_mut(i).iter_mut().zip(fj) {
                *o += coeff * v;
            }
        }
    }
    out
}

pub fn gram_set<T: Real>(maps: &FeatureMaps<T>) -> GramSet<T> {
    GramSet {
        layers: maps
            .layers
            .iter()
            .map(|(n, f)| (n.clone(), gram_matrix(f)))
            .collect(),
    }
}

/// Mean intensity over every channel and pixel.
pub fn expectation<T: Real>(img: &Image<T>) -> T {
    img.tensor().mean()
}

fn check_compatible<T: Real>(a: &GramSet<T>, b: &GramSet<T>) -> Result<()> {
    if a.layers.len() != b.layers.len() || a.layers.is_empty() {
        return Err(Error::Shape(format!(
            "gram sets have {} and {} layers",
            a.layers.len(),
            b.layers.len()
        )));
    }
    for ((na, ga), (nb, gb)) in a.layers.iter().zip(&b.layers) {
        if na != nb || ga.size != gb.size {
            return Err(Error::Shape(format!(
                "gram layer mismatch: {na}[{}] vs {nb}[{}]",
                ga.size, gb.size
            )));
        }
    }
    Ok(())
}

/// Mean over layers of the mean squared element difference.
pub fn gram_distance<T: Real>(a: &GramSet<T>, b: &GramSet<T>) -> Result<T> {
    check_compatible(a, b)?;
    let mut total = T::zero();
    for ((_, ga), (_, gb)) in a.layers.iter().zip(&b.layers) {
        let sq: T = ga.data.iter().zip(&gb.data).map(|(&x, &y)| (x - y) * (x - y)).sum();
        total += sq / T::of_usize(ga.data.len());
    }
    Ok(total / T::of_usize(a.layers.len()))
}

/// `d gram_distance(a, b) / d a`, per layer.
pub fn gram_distance_grad<T: Real>(a: &GramSet<T>, b: &GramSet<T>) -> Result<Vec<Gram<T>>> {
    check_compatible(a, b)?;
    let n_layers = T::of_usize(a.layers.len());
    Ok(a.layers
        .iter()
        .zip(&b.layers)
        .map(|((_, ga), (_, gb))| {
            let scale = T::of(2.0) / (T::of_usize(ga.data.len()) * n_layers);
            Gram {
                size: ga.size,
                data: ga.data.iter().zip(&gb.data).map(|(&x, &y)| scale * (x - y)).collect(),
            }
        })
        .collect())
}
