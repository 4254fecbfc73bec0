//! Dataset scanning, contrastive sample banks, per-step sampling and batch
//! assembly.
//!
//! Layout under a data root:
//!
//! ```text
//! inputs/*.png            low-light training images
//! labels/*.png            8-bit label maps, same stem as the input
//! positives/*.png         normal-light references
//! negatives/over/*.png    overexposed references
//! negatives/under/*.png   underexposed references
//! ```
//!
//! All randomness is drawn from counter-based streams keyed by
//! `(seed, purpose, index)`, so any step can be reproduced in isolation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio::{gamma_darken, load_image, resize, Image};
use crate::scalar::Real;
use crate::segmenter::{load_labels, LabelMap};

pub const MANIFEST_FILE: &str = "manifest.json";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetLayout {
    pub inputs: String,
    pub labels: String,
    pub positives: String,
    pub neg_over: String,
    pub neg_under: String,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            inputs: "inputs".into(),
            labels: "labels".into(),
            positives: "positives".into(),
            neg_over: "negatives/over".into(),
            neg_under: "negatives/under".into(),
        }
    }
}

/// Which reference pools the run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSelection {
    pub positives: bool,
    pub neg_over: bool,
    pub neg_under: bool,
}

impl Default for PoolSelection {
    fn default() -> Self {
        Self {
            positives: true,
            neg_over: true,
            neg_under: true,
        }
    }
}

/// One low-light input and its label map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stem: String,
    pub input: PathBuf,
    pub label: PathBuf,
    pub height: u32,
    pub width: u32,
}

/// Unpaired reference images for the contrastive triplet.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleBank {
    pub positives: Vec<PathBuf>,
    pub neg_over: Vec<PathBuf>,
    pub neg_under: Vec<PathBuf>,
    pub rng_seed: u64,
}

impl SampleBank {
    /// Checks the pools the selection needs.
    pub fn validate(&self, pools: &PoolSelection) -> Result<()> {
        if pools.positives && self.positives.is_empty() {
            return Err(Error::Config("positive pool is empty but the contrastive loss is enabled".into()));
        }
        if pools.neg_over && self.neg_over.is_empty() {
            return Err(Error::Config("overexposed negative pool is empty but enabled".into()));
        }
        if pools.neg_under && self.neg_under.is_empty() {
            return Err(Error::Config("underexposed negative pool is empty but enabled".into()));
        }
        Ok(())
    }

    /// Drops the pools the selection disables.
    pub fn restricted(&self, pools: &PoolSelection) -> SampleBank {
        let keep = |on: bool, v: &Vec<PathBuf>| if on { v.clone() } else { Vec::new() };
        SampleBank {
            positives: keep(pools.positives, &self.positives),
            neg_over: keep(pools.neg_over, &self.neg_over),
            neg_under: keep(pools.neg_under, &self.neg_under),
            rng_seed: self.rng_seed,
        }
    }
}

/// Uniform positive; the negative first picks a non-empty pool with equal
/// probability, then an element uniformly. `None` when both negative pools
/// are empty.
pub fn sample_contrastive_pair<'a, R: Rng>(bank: &'a SampleBank, rng: &mut R) -> Result<(&'a Path, Option<&'a Path>)> {
    let pos = bank
        .positives
        .get(rng.random_range(0..bank.positives.len().max(1)))
        .ok_or_else(|| Error::Config("positive pool is empty".into()))?;
    let pools: Vec<&Vec<PathBuf>> = [&bank.neg_over, &bank.neg_under]
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect();
    let neg = if pools.is_empty() {
        None
    } else {
        let pool = pools[rng.random_range(0..pools.len())];
        Some(pool[rng.random_range(0..pool.len())].as_path())
    };
    Ok((pos.as_path(), neg))
}

/// Purposes of the independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    EpochOrder = 1,
    Augment = 2,
    Triplet = 3,
    Crop = 4,
    Init = 5,
}

/// A generator keyed by `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Fraction of inputs darkened each epoch.
    pub fraction: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            gamma_min: 1.5,
            gamma_max: 5.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Config("augmentation fraction must lie in [0, 1]".into()));
        }
        if !(self.gamma_min >= 1.0 && self.gamma_max >= self.gamma_min && self.gamma_max.is_finite()) {
            return Err(Error::Config("augmentation gammas need 1 <= gamma_min <= gamma_max".into()));
        }
        Ok(())
    }
}

/// Visiting order of the records in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::EpochOrder, epoch));
    order
}

/// Per-record gamma for `epoch`; exactly `round(fraction · n)` records are darkened.
pub fn augmentation_plan(n: usize, seed: u64, epoch: u64, cfg: &AugmentConfig) -> Vec<Option<f64>> {
    let mut rng = stream_rng(seed, Stream::Augment, epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let count = (cfg.fraction * n as f64).round() as usize;
    let mut plan = vec![None; n];
    for &i in idx.iter().take(count) {
        let g = if cfg.gamma_max > cfg.gamma_min {
            rng.random_range(cfg.gamma_min..cfg.gamma_max)
        } else {
            cfg.gamma_min
        };
        plan[i] = Some(g);
    }
    plan
}

/// Sorted image files (png, jpg, jpeg) directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", dir.display())));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Lists a pool directory, treating a missing directory as empty.
fn list_pool(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.exists() {
        list_images(dir)
    } else {
        Ok(Vec::new())
    }
}

pub fn stem_of(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Cached facts about one scanned file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScanManifest {
    pub files: BTreeMap<String, FileEntry>,
}

fn file_entry(root: &Path, path: &Path) -> Result<FileEntry> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height) = image::image_dimensions(path).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(FileEntry {
        path: relative(root, path),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
        width,
        height,
    })
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Looks up dimensions from the cache when the file size still matches,
/// otherwise re-reads the file.
struct Prober<'a> {
    root: &'a Path,
    cached: ScanManifest,
    fresh: ScanManifest,
    reused: usize,
}

impl Prober<'_> {
    fn probe(&mut self, path: &Path) -> Result<(u32, u32)> {
        let key = relative(self.root, path);
        let size = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
        let entry = match self.cached.files.get(&key) {
            Some(e) if e.bytes == size => {
                self.reused += 1;
                e.clone()
            }
            _ => file_entry(self.root, path)?,
        };
        let dims = (entry.width, entry.height);
        self.fresh.files.insert(key, entry);
        Ok(dims)
    }
}

/// Scans `root`, validating that every input has a same-sized label map.
/// Results are sorted by path. A `manifest.json` cache is read if present and
/// rewritten (best effort) afterwards.
pub fn scan_dataset(root: &Path, layout: &DatasetLayout) -> Result<(Vec<TrainRecord>, SampleBank)> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("data root {} does not exist", root.display())));
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let cached = fs::read(&manifest_path)
        .ok()
        .and_then(|b| serde_json::from_slice::<ScanManifest>(&b).ok())
        .unwrap_or_default();
    let mut prober = Prober {
        root,
        cached,
        fresh: ScanManifest::default(),
        reused: 0,
    };

    let inputs = list_images(&root.join(&layout.inputs))?;
    let label_dir = root.join(&layout.labels);
    let labels: BTreeMap<String, PathBuf> = list_images(&label_dir)?
        .into_iter()
        .map(|p| (stem_of(&p), p))
        .collect();
    let mut records = Vec::with_capacity(inputs.len());
    for input in inputs {
        let stem = stem_of(&input);
        let label = labels
            .get(&stem)
            .ok_or_else(|| Error::Dataset(format!("no label map for input {}", input.display())))?
            .clone();
        let (w, h) = prober.probe(&input)?;
        let (lw, lh) = prober.probe(&label)?;
        if (w, h) != (lw, lh) {
            return Err(Error::Dataset(format!(
                "size mismatch: {} is {w}x{h} but {} is {lw}x{lh}",
                input.display(),
                label.display()
            )));
        }
        records.push(TrainRecord {
            stem,
            input,
            label,
            height: h,
            width: w,
        });
    }
    let mut bank = SampleBank {
        positives: list_pool(&root.join(&layout.positives))?,
        neg_over: list_pool(&root.join(&layout.neg_over))?,
        neg_under: list_pool(&root.join(&layout.neg_under))?,
        rng_seed: 0,
    };
    for p in bank.positives.iter().chain(&bank.neg_over).chain(&bank.neg_under) {
        prober.probe(p)?;
    }
    bank.positives.sort();
    log::info!(
        "scanned {}: {} inputs, {} positives, {} over / {} under negatives ({} cached entries reused)",
        root.display(),
        records.len(),
        bank.positives.len(),
        bank.neg_over.len(),
        bank.neg_under.len(),
        prober.reused
    );
    if prober.fresh != prober.cached {
        match serde_json::to_vec_pretty(&prober.fresh) {
            Ok(bytes) => {
                if let Err(e) = crate::archive::write_atomic(&manifest_path, &bytes) {
                    log::warn!("could not write scan cache: {e}");
                }
            }
            Err(e) => log::warn!("could not serialize scan cache: {e}"),
        }
    }
    Ok((records, bank))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Square training resolution.
    pub image_size: usize,
    /// Random square crops instead of whole-image resizing.
    pub crop: bool,
    pub augment: AugmentConfig,
    pub pools: PoolSelection,
    pub layout: DatasetLayout,
    /// Class count of the label maps.
    pub num_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 384,
            crop: false,
            augment: AugmentConfig::default(),
            pools: PoolSelection::default(),
            layout: DatasetLayout::default(),
            num_classes: crate::segmenter::DEFAULT_NUM_CLASSES,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::Config("image_size must be a positive multiple of 4".into()));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::Config("num_classes must lie in 1..=255".into()));
        }
        self.augment.validate()
    }
}

/// One assembled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample<T> {
    pub stem: String,
    pub low: Image<T>,
    pub labels: LabelMap,
    /// Absent only when the positive pool is disabled.
    pub positive: Option<Image<T>>,
    pub negative: Option<Image<T>>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch<T> {
    pub step: u64,
    pub examples: Vec<TrainExample<T>>,
}

/// Records plus pools, with decoded files cached in memory.
pub struct DataSource<T> {
    pub records: Vec<TrainRecord>,
    pub bank: SampleBank,
    pub config: DataConfig,
    cache: std::sync::Mutex<BTreeMap<PathBuf, Image<T>>>,
}

impl<T: Real> DataSource<T> {
    pub fn new(records: Vec<TrainRecord>, bank: SampleBank, config: DataConfig) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::Dataset("no training inputs".into()));
        }
        let bank = bank.restricted(&config.pools);
        bank.validate(&config.pools)?;
        Ok(Self {
            records,
            bank,
            config,
            cache: Default::default(),
        })
    }

    pub fn open(root: &Path, config: DataConfig) -> Result<Self> {
        let (records, bank) = scan_dataset(root, &config.layout)?;
        Self::new(records, bank, config)
    }

    fn image(&self, path: &Path) -> Result<Image<T>> {
        if let Some(img) = self.cache.lock().expect("cache lock").get(path) {
            return Ok(img.clone());
        }
        let img = load_image::<T>(path)?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(path.to_path_buf(), img.clone());
        Ok(img)
    }

    fn sized(&self, img: &Image<T>) -> Result<Image<T>> {
        let s = self.config.image_size;
        if (img.height(), img.width()) == (s, s) {
            Ok(img.clone())
        } else {
            resize(img, s, s)
        }
    }

    /// Builds the batch for `step` from record indices and their gammas.
    pub fn make_batch(&self, step: u64, seed: u64, indices: &[usize], gammas: &[Option<f64>]) -> Result<TrainBatch<T>> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        let mut triplet_rng = stream_rng(seed, Stream::Triplet, step);
        let mut crop_rng = stream_rng(seed, Stream::Crop, step);
        let s = self.config.image_size;
        let mut examples = Vec::with_capacity(indices.len());
        for &i in indices {
            let rec = &self.records[i];
            let raw = self.image(&rec.input)?;
            let labels = load_labels(&rec.label, self.config.num_classes)?;
            let (low, labels) = if self.config.crop && raw.height() >= s && raw.width() >= s {
                let y0 = crop_rng.random_range(0..=raw.height() - s);
                let x0 = crop_rng.random_range(0..=raw.width() - s);
                (crop_image(&raw, y0, x0, s)?, labels.crop(y0, x0, s, s)?)
            } else {
                (self.sized(&raw)?, labels.resize_nearest(s, s)?)
            };
            let gamma = gammas.get(i).copied().flatten();
            let low = match gamma {
                Some(g) => gamma_darken(&low, g)?,
                None => low,
            };
            let (positive, negative) = if self.bank.positives.is_empty() {
                (None, None)
            } else {
                let (p, n) = sample_contrastive_pair(&self.bank, &mut triplet_rng)?;
                let load = |path: &Path| self.image(path).and_then(|img| self.sized(&img));
                (Some(load(p)?), n.map(load).transpose()?)
            };
            examples.push(TrainExample {
                stem: rec.stem.clone(),
                low,
                labels,
                positive,
                negative,
                gamma,
            });
        }
        Ok(TrainBatch { step, examples })
    }
}

impl<T: Real> DataSource<T> {
    /// Every record, resized and without augmentation, crossed with every
    /// positive and every enabled negative (or no negative when none is
    /// enabled). A fixed set for comparing losses across training.
    pub fn probe_examples(&self) -> Result<Vec<TrainExample<T>>> {
        let load = |path: &Path| self.image(path).and_then(|img| self.sized(&img));
        let s = self.config.image_size;
        let positives: Vec<Option<Image<T>>> = if self.bank.positives.is_empty() {
            vec![None]
        } else {
            self.bank.positives.iter().map(|p| load(p).map(Some)).collect::<Result<_>>()?
        };
        let pool: Vec<&PathBuf> = self.bank.neg_over.iter().chain(&self.bank.neg_under).collect();
        let negatives: Vec<Option<Image<T>>> = if pool.is_empty() {
            vec![None]
        } else {
            pool.into_iter().map(|p| load(p).map(Some)).collect::<Result<_>>()?
        };
        let mut out = Vec::new();
        for rec in &self.records {
            let low = load(&rec.input)?;
            let labels = load_labels(&rec.label, self.config.num_classes)?.resize_nearest(s, s)?;
            for p in &positives {
                for n in &negatives {
                    out.push(TrainExample {
                        stem: rec.stem.clone(),
                        low: low.clone(),
                        labels: labels.clone(),
                        positive: p.clone(),
                        negative: n.clone(),
                        gamma: None,
                    });
                }
            }
        }
        Ok(out)
    }
}

fn crop_image<T: Real>(img: &Image<T>, y0: usize, x0: usize, s: usize) -> Result<Image<T>> {
    Image::from_fn(s, s, |y, x| img.pixel(y0 + y, x0 + x))
}
