//! Seeded synthetic scenes, label maps and small training corpora for
//! desk-scale tests and the self-test.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{gamma_darken, save_image, Image};
use crate::segmenter::{save_labels, LabelMap};

/// Sum of random oriented sinusoids with a 1/f amplitude falloff, scaled
/// into [0,1].
pub struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    pub fn new(rng: &mut impl Rng, octaves: usize) -> Self {
        let mut waves = Vec::new();
        for o in 0..octaves {
            let f = 0.02 * 2f64.powi(o as i32);
            for _ in 0..3 {
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                waves.push((f * theta.cos(), f * theta.sin(), phase, 1.0 / (o + 1) as f64));
            }
        }
        Self { waves }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        let norm: f64 = self.waves.iter().map(|w| w.3).sum();
        let v: f64 = self
            .waves
            .iter()
            .map(|&(fx, fy, p, a)| a * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + p).sin())
            .sum();
        0.5 + 0.5 * v / norm
    }
}

/// A three-class scene: sky band on top, ground below a wavy horizon and an
/// elliptical object. Colors are textured around per-class base values.
pub fn scene(seed: u64, height: usize, width: usize) -> Result<(Image<f32>, LabelMap)> {
    textured_scene(seed, height, width, 0.3)
}

/// [`scene`] with in-class shading `1 - texture + texture * t` for a
/// texture field `t` in [0,1].
pub fn textured_scene(seed: u64, height: usize, width: usize, texture: f64) -> Result<(Image<f32>, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(0.3..0.5) * height as f64;
    let wobble = rng.random_range(0.02..0.08) * height as f64;
    let freq = rng.random_range(1.0..3.0) / width as f64;
    let (cy, cx) = (
        rng.random_range(0.55..0.8) * height as f64,
        rng.random_range(0.25..0.75) * width as f64,
    );
    let (ry, rx) = (
        rng.random_range(0.1..0.2) * height as f64,
        rng.random_range(0.1..0.25) * width as f64,
    );
    let bases: [[f64; 3]; 3] = [
        [0.55, 0.7, 0.9],
        [0.45, 0.4, 0.35],
        [0.8, 0.3, 0.25],
    ]
    .map(|c| c.map(|v: f64| (v + rng.random_range(-0.08..0.08)).clamp(0.05, 0.95)));
    let textures = [Texture::new(&mut rng, 3), Texture::new(&mut rng, 5), Texture::new(&mut rng, 4)];
    let class_at = |y: usize, x: usize| -> u8 {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        if ((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2) <= 1.0 {
            2
        } else if fy < horizon + wobble * (std::f64::consts::TAU * freq * fx).sin() {
            0
        } else {
            1
        }
    };
    let labels = LabelMap::from_fn(height, width, 3, class_at)?;
    let img = Image::from_fn(height, width, |y, x| {
        let c = class_at(y, x) as usize;
        let shade = 1.0 - texture + texture * textures[c].at(y, x);
        bases[c].map(|b| (b * shade).clamp(0.0, 1.0) as f32)
    })?;
    Ok((img, labels))
}

/// Scales an image so its mean intensity becomes `target`, clamping.
pub fn expose(img: &Image<f32>, target: f64) -> Result<Image<f32>> {
    let mean = img.tensor().mean() as f64;
    if mean <= 0.0 {
        return Err(Error::Degenerate("cannot expose a black image".into()));
    }
    let k = (target / mean) as f32;
    Image::new_clamped(img.tensor().map(|v| v * k))
}

/// Counts of each part of a synthetic training corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub inputs: usize,
    pub positives: usize,
    pub over: usize,
    pub under: usize,
    pub size: usize,
    /// In-class shading amplitude, see [`textured_scene`].
    pub texture: f64,
    /// Inputs are darkened with γ drawn uniformly from this range.
    pub input_gamma: (f64, f64),
    pub positive_mean: f64,
    pub over_mean: f64,
    pub under_mean: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            inputs: 8,
            positives: 4,
            over: 2,
            under: 2,
            size: 32,
            texture: 0.3,
            input_gamma: (2.0, 3.5),
            positive_mean: 0.5,
            over_mean: 0.88,
            under_mean: 0.05,
        }
    }
}

/// Writes a corpus in the dataset layout under `root`. Every image is a
/// distinct scene, so no triplet is paired.
pub fn write_corpus(root: &Path, spec: &CorpusSpec, seed: u64) -> Result<()> {
    let dirs = ["inputs", "labels", "positives", "negatives/over", "negatives/under"];
    for d in dirs {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_scene = || -> Result<(Image<f32>, LabelMap)> { textured_scene(rng.random(), spec.size, spec.size, spec.texture) };
    let mut gammas = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..spec.inputs {
        let (img, labels) = next_scene()?;
        let g = gammas.random_range(spec.input_gamma.0..spec.input_gamma.1);
        save_image(&gamma_darken(&img, g)?, &root.join(format!("inputs/scene_{i:03}.png")))?;
        save_labels(&labels, &root.join(format!("labels/scene_{i:03}.png")))?;
    }
    let pools = [
        ("positives", spec.positives, spec.positive_mean),
        ("negatives/over", spec.over, spec.over_mean),
        ("negatives/under", spec.under, spec.under_mean),
    ];
    for (dir, n, mean) in pools {
        for i in 0..n {
            let (img, _) = next_scene()?;
            save_image(&expose(&img, mean)?, &root.join(format!("{dir}/ref_{i:03}.png")))?;
        }
    }
    Ok(())
}

/// A textured natural-looking image for quality-metric fixtures.
pub fn texture_image(seed: u64, height: usize, width: usize) -> Result<Image<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = [Texture::new(&mut rng, 6), Texture::new(&mut rng, 6), Texture::new(&mut rng, 6)];
    let tint: [f64; 3] = [0; 3].map(|_| rng.random_range(0.7..1.0));
    Image::from_fn(height, width, |y, x| {
        let base = tex[0].at(y, x);
        let detail = 0.5 * tex[1].at(y, x) + 0.5 * tex[2].at(y, x);
        let v = 0.15 + 0.6 * base + 0.2 * detail;
        tint.map(|t| (v * t).clamp(0.0, 1.0))
    })
}

/// Replaces a `fraction` of pixels with black or white.
pub fn salt_and_pepper(img: &Image<f64>, fraction: f64, seed: u64) -> Result<Image<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = img.tensor();
    let mut out = t.clone();
    let (h, w) = (t.height(), t.width());
    for y in 0..h {
        for x in 0..w {
            if rng.random::<f64>() < fraction {
                let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                for c in 0..3 {
                    out.set(c, y, x, v);
                }
            }
        }
    }
    Image::new(out)
}
