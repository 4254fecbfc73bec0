//! RGB image tensors, file I/O, resizing, gamma darkening and brightness
//! statistics.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor3;

/// A 3-channel RGB image with every element finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    data: Tensor3<T>,
}

impl<T: Real> Image<T> {
    /// Wraps a `3×H×W` tensor after validating the value range.
    pub fn new(data: Tensor3<T>) -> Result<Self> {
        if data.channels() != 3 {
            return Err(Error::Shape(format!(
                "images have 3 channels, got {}",
                data.channels()
            )));
        }
        if data.height() == 0 || data.width() == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if let Some(bad) = data
            .as_slice()
            .iter()
            .find(|v| !(v.is_finite() && **v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { data })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Tensor3::from_vec(3, height, width, data)?)
    }

    /// Clamps into range instead of rejecting; non-finite values still fail.
    pub fn new_clamped(mut data: Tensor3<T>) -> Result<Self> {
        for v in data.as_mut_slice() {
            if v.is_finite() {
                *v = v.max(T::zero()).min(T::one());
            }
        }
        Self::new(data)
    }

    pub fn constant(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(Tensor3::filled(3, height, width, value))
    }

    /// Builds an image from a per-pixel `(r, g, b)` function.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Result<Self> {
        let mut t = Tensor3::zeros(3, height, width);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.into_iter().enumerate() {
                    t.set(c, y, x, v);
                }
            }
        }
        Self::new(t)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.data.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.data.width()
    }

    #[inline]
    pub fn tensor(&self) -> &Tensor3<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor3<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data.get(c, y, x)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        self.data.as_slice()
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image::new_clamped(self.data.cast()).expect("cast of a valid image stays valid")
    }
}

/// How per-pixel brightness is derived from RGB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrightnessMode {
    /// Arithmetic mean of R, G and B.
    #[default]
    ChannelMean,
    /// Rec.601 luma, `0.299 R + 0.587 G + 0.114 B`.
    Luma601,
}

impl BrightnessMode {
    /// Channel weights; they always sum to one.
    pub fn weights<T: Real>(self) -> [T; 3] {
        match self {
            BrightnessMode::ChannelMean => {
                let third = T::one() / T::of(3.0);
                [third; 3]
            }
            BrightnessMode::Luma601 => [T::of(0.299), T::of(0.587), T::of(0.114)],
        }
    }
}

/// Decodes a PNG or JPEG into `[0, 1]` RGB. Grayscale is replicated across
/// channels, alpha is dropped, 16-bit samples are scaled by `1/65535`.
pub fn load_image<T: Real>(path: &Path) -> Result<Image<T>> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| decode_error(e, path))?;
    dynamic_to_image(decoded, path)
}

/// [`load_image`] from an in-memory PNG or JPEG. `path` only labels errors.
pub fn decode_image<T: Real>(bytes: &[u8], path: &Path) -> Result<Image<T>> {
    let decoded = image::load_from_memory(bytes).map_err(|e| decode_error(e, path))?;
    dynamic_to_image(decoded, path)
}

fn decode_error(e: image::ImageError, path: &Path) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        image::ImageError::Unsupported(u) => Error::Format {
            path: path.to_path_buf(),
            reason: u.to_string(),
        },
        other => Error::Codec {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn dynamic_to_image<T: Real>(img: DynamicImage, path: &Path) -> Result<Image<T>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor3::zeros(3, h, w);
    let scale8 = T::one() / T::of(255.0);
    let scale16 = T::one() / T::of(65535.0);
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            for (i, p) in g.pixels().enumerate() {
                let v = T::of(p.0[0] as f64) * scale8;
                for c in 0..3 {
                    t.plane_mut(c)[i] = v;
                }
            }
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    t.plane_mut(c)[i] = T::of(p.0[c] as f64) * scale8;
                }
            }
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let g = img.to_luma16();
            for (i, p) in g.pixels().enumerate() {
                let v = T::of(p.0[0] as f64) * scale16;
                for c in 0..3 {
                    t.plane_mut(c)[i] = v;
                }
            }
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    t.plane_mut(c)[i] = T::of(p.0[c] as f64) * scale16;
                }
            }
        }
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported pixel layout {:?}", other.color()),
            })
        }
    }
    Image::new_clamped(t)
}

/// Round-half-up quantization to 8 bits.
#[inline]
pub fn quantize8<T: Real>(v: T) -> u8 {
    let q = (v.as_f64() * 255.0 + 0.5).floor();
    q.clamp(0.0, 255.0) as u8
}

/// Encodes an image as 8-bit RGB PNG bytes.
pub fn encode_png<T: Real>(img: &Image<T>) -> Result<Vec<u8>> {
    let rgb = to_rgb8(img);
    let mut out = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Codec {
        path: "<memory>".into(),
        reason: e.to_string(),
    })?;
    Ok(out.into_inner())
}

pub fn to_rgb8<T: Real>(img: &Image<T>) -> image::RgbImage {
    let (h, w) = (img.height(), img.width());
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            quantize8(img.get(0, y, x)),
            quantize8(img.get(1, y, x)),
            quantize8(img.get(2, y, x)),
        ])
    })
}

/// Writes an 8-bit PNG.
pub fn save_image<T: Real>(img: &Image<T>, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling with half-pixel centers (align-corners = false).
pub fn resize<T: Real>(img: &Image<T>, out_h: usize, out_w: usize) -> Result<Image<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} must be positive"
        )));
    }
    if (out_h, out_w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    Image::new_clamped(resize_bilinear(img.tensor(), out_h, out_w))
}

/// Source coordinate and blend weight for output index `i`.
#[inline]
fn bilinear_taps(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

pub fn resize_bilinear<T: Real>(t: &Tensor3<T>, out_h: usize, out_w: usize) -> Tensor3<T> {
    let (c, h, w) = t.dims();
    let rows: Vec<_> = (0..out_h).map(|y| bilinear_taps(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, w, out_w)).collect();
    let mut out = Tensor3::zeros(c, out_h, out_w);
    for ch in 0..c {
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            let fy = T::of(fy);
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let fx = T::of(fx);
                let top = t.get(ch, y0, x0) * (T::one() - fx) + t.get(ch, y0, x1) * fx;
                let bottom = t.get(ch, y1, x0) * (T::one() - fx) + t.get(ch, y1, x1) * fx;
                out.set(ch, y, x, top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Nearest-neighbor source index under the half-pixel convention.
#[inline]
pub fn nearest_index(i: usize, in_len: usize, out_len: usize) -> usize {
    let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    src.min(in_len - 1)
}

/// `x ↦ x^gamma` per element. Only darkening gammas (`gamma ≥ 1`) are accepted.
pub fn gamma_darken<T: Real>(img: &Image<T>, gamma: f64) -> Result<Image<T>> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be a finite value >= 1, got {gamma}"
        )));
    }
    if gamma == 1.0 {
        return Ok(img.clone());
    }
    let g = T::of(gamma);
    Image::new(img.tensor().map(|v| v.powf(g)))
}

/// Per-pixel brightness as an `H×W` row-major buffer.
pub fn brightness_map<T: Real>(img: &Image<T>, mode: BrightnessMode) -> Vec<T> {
    let [wr, wg, wb] = mode.weights::<T>();
    let t = img.tensor();
    let (r, g, b) = (t.plane(0), t.plane(1), t.plane(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| {
            if r == g && g == b {
                // exact on gray pixels
                r
            } else {
                (wr * r + wg * g + wb * b).max(T::zero()).min(T::one())
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramStats {
    /// `bins[c][k]` counts pixels of channel `c` quantizing to level `k`.
    pub bins: [Vec<u64>; 3],
    pub mean_brightness: f64,
}

pub fn histogram<T: Real>(img: &Image<T>) -> HistogramStats {
    histogram_with(img, BrightnessMode::default())
}

pub fn histogram_with<T: Real>(img: &Image<T>, mode: BrightnessMode) -> HistogramStats {
    let mut bins = [vec![0u64; 256], vec![0u64; 256], vec![0u64; 256]];
    for (c, hist) in bins.iter_mut().enumerate() {
        for &v in img.tensor().plane(c) {
            hist[quantize8(v) as usize] += 1;
        }
    }
    let b = brightness_map(img, mode);
    let mean_brightness = b.iter().map(|v| v.as_f64()).sum::<f64>() / b.len() as f64;
    HistogramStats {
        bins,
        mean_brightness,
    }
}
