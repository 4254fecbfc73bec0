//! Semantic label maps, class-probability maps and frozen segmentation
//! backends.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::imageio::{nearest_index, Image};
use crate::nn::{softmax_channels, softmax_channels_backward, Conv2d, Op, SeqNet};
use crate::scalar::Real;
use crate::tensor::Tensor3;

pub const IGNORE_INDEX: u8 = 255;
/// Cityscapes train classes.
pub const DEFAULT_NUM_CLASSES: usize = 19;

/// Per-pixel class ids in `[0, S)`, or [`IGNORE_INDEX`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > IGNORE_INDEX as usize {
            return Err(Error::InvalidArgument(format!("class count {num_classes} out of range")));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_INDEX && l as usize >= num_classes)
        {
            return Err(Error::InvalidArgument(format!(
                "label {bad} not below class count {num_classes}"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn from_fn(height: usize, width: usize, num_classes: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let labels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, num_classes, labels)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn is_ignored(&self, i: usize) -> bool {
        self.labels[i] == IGNORE_INDEX
    }

    /// Distinct non-ignored labels.
    pub fn classes(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().filter(|&l| l != IGNORE_INDEX).collect()
    }

    /// Nearest-neighbor resampling; never introduces new labels.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("label resize target must be positive".into()));
        }
        let rows: Vec<usize> = (0..out_h).map(|y| nearest_index(y, self.height, out_h)).collect();
        let cols: Vec<usize> = (0..out_w).map(|x| nearest_index(x, self.width, out_w)).collect();
        let mut labels = Vec::with_capacity(out_h * out_w);
        for &sy in &rows {
            for &sx in &cols {
                labels.push(self.get(sy, sx));
            }
        }
        Self::new(out_h, out_w, self.num_classes, labels)
    }

    /// Square crop with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape("crop window outside label map".into()));
        }
        let mut labels = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            labels.extend_from_slice(&self.labels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::new(h, w, self.num_classes, labels)
    }
}

/// Reads a single-channel 8-bit PNG in the labelTrainIds convention.
pub fn load_labels(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("label maps must be 8-bit single channel, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    LabelMap::new(h as usize, w as usize, num_classes, gray.into_raw()).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(labels.width as u32, labels.height as u32, labels.labels.clone())
        .expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// `S×H×W` class probabilities; each pixel sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<T> {
    probs: Tensor3<T>,
}

impl<T: Real> ProbMap<T> {
    pub fn new(probs: Tensor3<T>) -> Result<Self> {
        let (s, h, w) = probs.dims();
        if s == 0 {
            return Err(Error::Shape("probability map needs at least one class".into()));
        }
        let n = h * w;
        let data = probs.as_slice();
        let tol = T::of(1e-5);
        for px in 0..n {
            let mut total = T::zero();
            for c in 0..s {
                let v = data[c * n + px];
                if !(v.is_finite() && v >= T::zero() && v <= T::one()) {
                    return Err(Error::InvalidArgument(format!("probability {v} outside [0, 1]")));
                }
                total += v;
            }
            if (total - T::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "probabilities at pixel {px} sum to {total}"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn tensor(&self) -> &Tensor3<T> {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.channels()
    }

    /// Arg-max labels (first maximum wins).
    pub fn argmax(&self) -> LabelMap {
        let (s, h, w) = self.probs.dims();
        let n = h * w;
        let data = self.probs.as_slice();
        let labels = (0..n)
            .map(|px| {
                let mut best = 0;
                for c in 1..s {
                    if data[c * n + px] > data[best * n + px] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(h, w, s, labels).expect("argmax labels are in range")
    }
}

/// One-hot encoding plus a mask that is `false` on ignored pixels, which
/// receive a uniform distribution.
pub fn one_hot<T: Real>(labels: &LabelMap, num_classes: usize) -> Result<(ProbMap<T>, Vec<bool>)> {
    let (h, w) = (labels.height, labels.width);
    let n = h * w;
    let mut probs = Tensor3::zeros(num_classes, h, w);
    let mut mask = vec![true; n];
    let uniform = T::one() / T::of_usize(num_classes);
    let data = probs.as_mut_slice();
    for (px, &l) in labels.labels.iter().enumerate() {
        if l == IGNORE_INDEX {
            mask[px] = false;
            for c in 0..num_classes {
                data[c * n + px] = uniform;
            }
        } else if (l as usize) < num_classes {
            data[l as usize * n + px] = T::one();
        } else {
            return Err(Error::InvalidArgument(format!(
                "label {l} not below class count {num_classes}"
            )));
        }
    }
    Ok((ProbMap::new(probs)?, mask))
}

/// A frozen segmentation network.
pub trait SegBackend<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn num_classes(&self) -> usize;

    /// `truth` is only consulted by backends that echo ground truth.
    fn segment(&self, img: &Image<T>, truth: Option<&LabelMap>) -> Result<ProbMap<T>>;

    /// `d objective / d image` given `d objective / d probabilities`, or
    /// `None` when the prediction does not depend on the image.
    fn backward(
        &self,
        img: &Image<T>,
        truth: Option<&LabelMap>,
        grad_probs: &Tensor3<T>,
    ) -> Result<Option<Tensor3<T>>>;

    fn parameter_digest(&self) -> String;
}

/// Returns the one-hot encoding of the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleSegmenter {
    pub num_classes: usize,
}

impl<T: Real> SegBackend<T> for OracleSegmenter {
    fn name(&self) -> &str {
        "oracle"
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn segment(&self, img: &Image<T>, truth: Option<&LabelMap>) -> Result<ProbMap<T>> {
        let truth = truth.ok_or_else(|| Error::InvalidArgument("oracle segmenter needs ground truth".into()))?;
        if (truth.height, truth.width) != (img.height(), img.width()) {
            return Err(Error::Shape("ground truth does not match image size".into()));
        }
        Ok(one_hot(truth, self.num_classes)?.0)
    }

    fn backward(&self, _: &Image<T>, _: Option<&LabelMap>, _: &Tensor3<T>) -> Result<Option<Tensor3<T>>> {
        Ok(None)
    }

    fn parameter_digest(&self) -> String {
        hex::encode(Sha256::digest(format!("oracle:{}", self.num_classes)))
    }
}

/// Stride-1 fully convolutional network followed by a channel softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSegmenter<T> {
    name: String,
    net: SeqNet<T>,
    num_classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LayerSpec {
    Conv {
        name: String,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        pad: usize,
    },
    Relu,
}

fn one() -> usize {
    1
}

impl<T: Real> ConvSegmenter<T> {
    /// Three 3×3 convolutions (3→16→16→S) with He-normal weights.
    pub fn tiny(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |cin: usize, cout: usize| Conv2d::normal(cin, cout, 3, 1, 1, (2.0 / (cin * 9) as f64).sqrt(), &mut rng);
        let ops = vec![
            Op::Conv { name: "conv1".into(), conv: conv(3, 16) },
            Op::Relu,
            Op::Conv { name: "conv2".into(), conv: conv(16, 16) },
            Op::Relu,
            Op::Conv { name: "conv3".into(), conv: conv(16, num_classes) },
        ];
        Self {
            name: "tinycnn".into(),
            net: SeqNet { ops, taps: vec![] },
            num_classes,
        }
    }

    /// Loads a sequential network whose manifest lists
    /// `{"layers": [{"op": "conv", "name": .., "stride": 1, "pad": 1}, {"op": "relu"}, ..]}`
    /// with weights stored as `<name>.weight` / `<name>.bias`.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let layers: Vec<LayerSpec> = serde_json::from_value(
            archive
                .manifest
                .get("layers")
                .cloned()
                .ok_or_else(|| Error::Config("segmenter manifest lacks `layers`".into()))?,
        )?;
        let mut ops = Vec::with_capacity(layers.len());
        let mut channels = 3;
        for spec in layers {
            match spec {
                LayerSpec::Conv { name, stride, pad } => {
                    let w = archive
                        .get(&format!("{name}.weight"))
                        .ok_or_else(|| Error::Config(format!("missing `{name}.weight`")))?;
                    let shape = w.shape().to_vec();
                    if shape.len() != 4 || shape[1] != channels || shape[2] != shape[3] {
                        return Err(Error::Shape(format!("bad weight shape {shape:?} for `{name}`")));
                    }
                    if stride != 1 || 2 * pad + 1 != shape[2] {
                        return Err(Error::Config(format!(
                            "`{name}` must preserve resolution (stride 1, same padding)"
                        )));
                    }
                    let mut conv = Conv2d::zeros(shape[1], shape[0], shape[2], stride, pad);
                    conv.weight = w.cast();
                    conv.bias = archive.expect(&format!("{name}.bias"), &[shape[0]])?.cast();
                    channels = shape[0];
                    ops.push(Op::Conv { name, conv });
                }
                LayerSpec::Relu => ops.push(Op::Relu),
            }
        }
        if !matches!(ops.last(), Some(Op::Conv { .. })) {
            return Err(Error::Config("segmenter must end with a convolution".into()));
        }
        Ok(Self {
            name: "deeplab".into(),
            net: SeqNet { ops, taps: vec![] },
            num_classes: channels,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn network(&self) -> &SeqNet<T> {
        &self.net
    }

    fn trace(&self, img: &Image<T>) -> Result<Vec<Tensor3<T>>> {
        self.net.forward_trace(img.tensor(), self.net.ops.len() - 1)
    }
}

impl<T: Real> SegBackend<T> for ConvSegmenter<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn segment(&self, img: &Image<T>, _: Option<&LabelMap>) -> Result<ProbMap<T>> {
        let acts = self.trace(img)?;
        ProbMap::new(softmax_channels(acts.last().expect("non-empty")))
    }

    fn backward(&self, img: &Image<T>, _: Option<&LabelMap>, grad_probs: &Tensor3<T>) -> Result<Option<Tensor3<T>>> {
        let acts = self.trace(img)?;
        let logits = acts.last().expect("non-empty");
        let probs = softmax_channels(logits);
        probs.ensure_same_dims(grad_probs, "probability gradient")?;
        let g_logits = softmax_channels_backward(&probs, grad_probs);
        let top = self.net.ops.len() - 1;
        Ok(Some(self.net.backward_to_input(&acts, &[(top, g_logits)])?))
    }

    fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, conv) in self.net.convs() {
            h.update(name.as_bytes());
            for v in conv.weight.as_slice().iter().chain(conv.bias.as_slice()) {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn one_hot_examples() {
        let labels = LabelMap::new(1, 2, 4, vec![2, IGNORE_INDEX]).unwrap();
        let (p, mask) = one_hot::<f64>(&labels, 4).unwrap();
        let at = |c: usize, px: usize| p.tensor().as_slice()[c * 2 + px];
        assert_eq!((0..4).map(|c| at(c, 0)).collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(mask, vec![true, false]);
        assert!((0..4).all(|c| at(c, 1) == 0.25));
        let too_big = LabelMap::new(1, 1, 8, vec![4]).unwrap();
        assert!(one_hot::<f64>(&too_big, 4).is_err());
        assert!(LabelMap::new(1, 1, 4, vec![4]).is_err());
    }

    #[test]
    fn oracle_echoes_truth() {
        let labels = LabelMap::from_fn(4, 4, 3, |y, _| (y % 3) as u8).unwrap();
        let img = random_image(4, 4, 1);
        let oracle = OracleSegmenter { num_classes: 3 };
        let p: ProbMap<f64> = oracle.segment(&img, Some(&labels)).unwrap();
        assert_eq!(p.argmax(), labels);
        assert!(SegBackend::<f64>::backward(&oracle, &img, Some(&labels), p.tensor()).unwrap().is_none());
        assert!(SegBackend::<f64>::segment(&oracle, &img, None).is_err());
    }

    #[test]
    fn tiny_cnn_is_deterministic_and_normalized() {
        let a = ConvSegmenter::<f64>::tiny(5, 3);
        let b = ConvSegmenter::<f64>::tiny(5, 3);
        let img = random_image(6, 6, 2);
        let pa = a.segment(&img, None).unwrap();
        assert_eq!(pa, b.segment(&img, None).unwrap());
        let n = 36;
        for px in 0..n {
            let s: f64 = (0..5).map(|c| pa.tensor().as_slice()[c * n + px]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn tiny_cnn_backward_matches_finite_differences() {
        let seg = ConvSegmenter::<f64>::tiny(3, 8);
        let img = random_image(4, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe = Tensor3::from_vec(3, 4, 4, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = |img: &Image<f64>| -> f64 {
            let p = seg.segment(img, None).unwrap();
            p.tensor().as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
        };
        let g = seg.backward(&img, None, &probe).unwrap().unwrap();
        for idx in 0..48 {
            let mut p = img.tensor().clone();
            p.as_mut_slice()[idx] += 1e-6;
            let mut m = img.tensor().clone();
            m.as_mut_slice()[idx] -= 1e-6;
            let fd = (f(&Image::new(p).unwrap()) - f(&Image::new(m).unwrap())) / 2e-6;
            assert!((fd - g.as_slice()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn archive_segmenter_round_trip() {
        let tiny = ConvSegmenter::<f32>::tiny(4, 1);
        let mut archive = Archive::new(serde_json::json!({
            "layers": [
                {"op": "conv", "name": "conv1"}, {"op": "relu"},
                {"op": "conv", "name": "conv2"}, {"op": "relu"},
                {"op": "conv", "name": "conv3"}
            ]
        }));
        for (name, conv) in tiny.network().convs() {
            archive.insert(format!("{name}.weight"), conv.weight.clone());
            archive.insert(format!("{name}.bias"), conv.bias.clone());
        }
        let loaded = ConvSegmenter::<f32>::from_archive(&archive).unwrap();
        assert_eq!(loaded.network(), tiny.network());
        assert_eq!(SegBackend::<f32>::num_classes(&loaded), 4);
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let labels = LabelMap::new(2, 2, 19, vec![0, 18, IGNORE_INDEX, 7]).unwrap();
        save_labels(&labels, &path).unwrap();
        assert_eq!(load_labels(&path, 19).unwrap(), labels);
        assert!(load_labels(&path, 10).is_err());
    }

    proptest! {
        #[test]
        fn nearest_resize_never_invents_labels(
            labels in proptest::collection::vec(0u8..4, 12),
            oh in 1usize..9, ow in 1usize..9,
        ) {
            let map = LabelMap::new(3, 4, 4, labels).unwrap();
            let r = map.resize_nearest(oh, ow).unwrap();
            prop_assert!(r.classes().is_subset(&map.classes()));
        }
    }
}
