//! Synthetic paired-contrast phantoms and on-disk datasets.
//!
//! Both contrasts of a pair share one label map of random ellipses and
//! rectangles; each tissue label gets an independent intensity per contrast.
//! The target contrast is degraded through [`crate::fourier::degrade`] to
//! produce the low-resolution input.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{degrade, ScaleFactor};
use crate::tensor::Tensor;
use crate::tensor_io::{load_tensor, save_tensor};

pub const MIN_SIZE: usize = 16;
pub const INTENSITY_RANGE: (f32, f32) = (0.2, 1.0);
pub const MIN_CONTRAST_GAP: f32 = 0.3;
pub const DEFAULT_RATIOS: [usize; 3] = [7, 1, 2];
pub const THREADS_ENV: &str = "MSR_THREADS";

const AUX_STREAM: u64 = 0xa11c_e5ee_d000_0001;

/// Both contrasts of one phantom plus the shared tissue labels
/// (0 is background, `k + 1` is tissue `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub aux: Array2<f32>,
    pub tar: Array2<f32>,
    pub labels: Array2<u16>,
    pub aux_intensity: Vec<f32>,
    pub tar_intensity: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl ShapeKind {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            ShapeKind::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let dy = y - cy;
                let dx = x - cx;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            ShapeKind::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, first: bool) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let (cy, cx, ry, rx) = if first {
            (
                hf * rng.gen_range(0.45..0.55),
                wf * rng.gen_range(0.45..0.55),
                hf * rng.gen_range(0.3..0.45),
                wf * rng.gen_range(0.3..0.45),
            )
        } else {
            (
                hf * rng.gen_range(0.2..0.8),
                wf * rng.gen_range(0.2..0.8),
                (hf * rng.gen_range(0.05..0.2)).max(2.0),
                (wf * rng.gen_range(0.05..0.2)).max(2.0),
            )
        };
        // Pixel centers sit on integer coordinates; snapping the shape
        // center keeps every shape non-empty.
        let (cy, cx) = (cy.floor(), cx.floor());
        if rng.gen_bool(0.5) {
            ShapeKind::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        } else {
            ShapeKind::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        }
    }
}

fn draw_intensity(rng: &mut ChaCha8Rng) -> f32 {
    rng.gen_range(INTENSITY_RANGE.0..=INTENSITY_RANGE.1)
}

/// Generates an aligned phantom pair. Auxiliary intensities come from a
/// stream derived from `seed`.
pub fn generate_phantom(seed: u64, size: (usize, usize), n_shapes: usize) -> Result<PhantomPair> {
    generate_phantom_with_aux_seed(seed, seed ^ AUX_STREAM, size, n_shapes)
}

/// Like [`generate_phantom`] but with an explicit seed for the auxiliary
/// intensities; geometry and target intensities depend on `seed` only.
pub fn generate_phantom_with_aux_seed(
    seed: u64,
    aux_seed: u64,
    (h, w): (usize, usize),
    n_shapes: usize,
) -> Result<PhantomPair> {
    if h < MIN_SIZE || w < MIN_SIZE {
        return Err(Error::config(format!(
            "phantom size {h}x{w} below the {MIN_SIZE}x{MIN_SIZE} minimum"
        )));
    }
    if n_shapes == 0 {
        return Err(Error::config("phantom needs at least one shape"));
    }
    if n_shapes >= u16::MAX as usize {
        return Err(Error::config("too many shapes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aux_rng = ChaCha8Rng::seed_from_u64(aux_seed);

    let shapes: Vec<ShapeKind> = (0..n_shapes)
        .map(|k| ShapeKind::random(&mut rng, h, w, k == 0))
        .collect();
    let tar_intensity: Vec<f32> = (0..n_shapes).map(|_| draw_intensity(&mut rng)).collect();
    let mut aux_intensity: Vec<f32> = (0..n_shapes).map(|_| draw_intensity(&mut aux_rng)).collect();

    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        shapes
            .iter()
            .rposition(|s| s.contains(y as f64, x as f64))
            .map_or(0, |k| k as u16 + 1)
    });

    let visible: HashSet<u16> = labels.iter().copied().filter(|&l| l > 0).collect();
    let diverges = |aux: &[f32]| {
        visible.iter().any(|&l| {
            let k = l as usize - 1;
            (aux[k] - tar_intensity[k]).abs() >= MIN_CONTRAST_GAP
        })
    };
    if !diverges(&aux_intensity) {
        // The topmost shape is always visible; move its auxiliary intensity
        // at least the minimum gap away from the target one.
        let k = n_shapes - 1;
        let b = tar_intensity[k];
        let (lo, hi) = INTENSITY_RANGE;
        aux_intensity[k] = if b + MIN_CONTRAST_GAP <= hi {
            aux_rng.gen_range(b + MIN_CONTRAST_GAP..=hi)
        } else {
            aux_rng.gen_range(lo..=b - MIN_CONTRAST_GAP)
        };
    }

    let paint = |intensity: &[f32]| {
        labels.mapv(|l| if l == 0 { 0.0 } else { intensity[l as usize - 1].clamp(0.0, 1.0) })
    };
    Ok(PhantomPair {
        aux: paint(&aux_intensity),
        tar: paint(&tar_intensity),
        labels,
        aux_intensity,
        tar_intensity,
    })
}

/// Aligned auxiliary HR, target HR and target LR images.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub x_aux: Array2<f32>,
    pub x_tar: Array2<f32>,
    pub y_tar: Array2<f32>,
    pub scale: ScaleFactor,
}

/// The low-resolution image stored alongside an HR target.
pub fn degrade_target(x_tar: &Array2<f32>, s: ScaleFactor) -> Result<Array2<f32>> {
    Ok(degrade(&x_tar.mapv(f64::from), s)?.mapv(|v| v as f32))
}

impl SamplePair {
    pub fn from_phantom(id: impl Into<String>, pair: PhantomPair, s: ScaleFactor) -> Result<Self> {
        let y_tar = degrade_target(&pair.tar, s)?;
        Ok(SamplePair {
            id: id.into(),
            x_aux: pair.aux,
            x_tar: pair.tar,
            y_tar,
            scale: s,
        })
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.x_tar.dim();
        if self.x_aux.dim() != (h, w) {
            return Err(Error::Data(format!(
                "sample {}: aux {:?} and target {:?} sizes differ",
                self.id,
                self.x_aux.dim(),
                (h, w)
            )));
        }
        let s = self.scale.get();
        if self.y_tar.dim() != (h / s, w / s) || h % s != 0 || w % s != 0 {
            return Err(Error::Data(format!(
                "sample {}: low-resolution size {:?} inconsistent with {h}x{w} at scale {s}",
                self.id,
                self.y_tar.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub aux: PathBuf,
    pub tar: PathBuf,
    pub lr: PathBuf,
}

/// One split of a dataset. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub scale: ScaleFactor,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }
}

/// Parameters of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub size: (usize, usize),
    pub scale: ScaleFactor,
    #[serde(default = "default_shapes")]
    pub n_shapes: usize,
    #[serde(default = "default_ratios")]
    pub ratios: [usize; 3],
    /// Overrides the seed of the auxiliary intensity stream.
    #[serde(default)]
    pub aux_seed: Option<u64>,
}

fn default_shapes() -> usize {
    6
}

fn default_ratios() -> [usize; 3] {
    DEFAULT_RATIOS
}

impl DatasetSpec {
    pub fn new(seed: u64, count: usize, size: (usize, usize), scale: ScaleFactor) -> Self {
        DatasetSpec {
            seed,
            count,
            size,
            scale,
            n_shapes: default_shapes(),
            ratios: DEFAULT_RATIOS,
            aux_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 10 {
            return Err(Error::config(format!(
                "dataset needs at least 10 samples, got {}",
                self.count
            )));
        }
        if self.ratios.iter().sum::<usize>() == 0 {
            return Err(Error::config("split ratios sum to zero"));
        }
        self.scale.check_divides(self.size.0, self.size.1)?;
        if self.size.0 < MIN_SIZE || self.size.1 < MIN_SIZE {
            return Err(Error::config(format!(
                "image size {:?} below the {MIN_SIZE}x{MIN_SIZE} minimum",
                self.size
            )));
        }
        Ok(())
    }
}

/// Train/val/test sizes: floor for train and val, remainder to test.
pub fn split_sizes(count: usize, ratios: [usize; 3]) -> [usize; 3] {
    let total: usize = ratios.iter().sum();
    let train = count * ratios[0] / total;
    let val = count * ratios[1] / total;
    [train, val, count - train - val]
}

/// The generated samples of each split, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SamplePair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates every sample of `spec` and partitions them.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sample_seeds: Vec<u64> = (0..spec.count).map(|_| rng.gen()).collect();
    let mut aux_rng = ChaCha8Rng::seed_from_u64(spec.aux_seed.unwrap_or(spec.seed ^ AUX_STREAM));
    let aux_seeds: Vec<u64> = (0..spec.count).map(|_| aux_rng.gen()).collect();
    let mut order: Vec<usize> = (0..spec.count).collect();
    order.shuffle(&mut rng);

    let make = |i: usize| -> Result<SamplePair> {
        let pair = generate_phantom_with_aux_seed(sample_seeds[i], aux_seeds[i], spec.size, spec.n_shapes)?;
        SamplePair::from_phantom(format!("s{}-{i:05}", spec.seed), pair, spec.scale)
    };
    let [n_train, n_val, _] = split_sizes(spec.count, spec.ratios);
    let mut samples = order.iter().map(|&i| make(i)).collect::<Result<Vec<_>>>()?;
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(Dataset {
        spec: spec.clone(),
        train: samples,
        val,
        test,
    })
}

pub const SPEC_FILE: &str = "dataset.json";

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.json", split.name()))
}

pub(crate) fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes tensor files, one manifest per split and the generation spec.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<[DatasetManifest; 3]> {
    let manifests = Split::ALL.map(|split| {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut entries = Vec::new();
        for sample in dataset.split(split) {
            let rel = |suffix: &str| PathBuf::from(split.name()).join(format!("{}_{suffix}.msrt", sample.id));
            let entry = ManifestEntry {
                id: sample.id.clone(),
                aux: rel("aux"),
                tar: rel("tar"),
                lr: rel("lr"),
            };
            save_tensor::<f32>(dir.join(&entry.aux), &Tensor::from_image(&sample.x_aux))?;
            save_tensor::<f32>(dir.join(&entry.tar), &Tensor::from_image(&sample.x_tar))?;
            save_tensor::<f32>(dir.join(&entry.lr), &Tensor::from_image(&sample.y_tar))?;
            entries.push(entry);
        }
        let manifest = DatasetManifest {
            seed: dataset.spec.seed,
            scale: dataset.spec.scale,
            split,
            entries,
        };
        write_json(&manifest_path(dir, split), &manifest)?;
        Ok(manifest)
    });
    write_json(&dir.join(SPEC_FILE), &dataset.spec)?;
    let [a, b, c] = manifests;
    Ok([a?, b?, c?])
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(path)?;
    let mut seen = HashSet::new();
    for id in manifest.ids() {
        if !seen.insert(id) {
            return Err(Error::Data(format!(
                "duplicate id {id} in {}",
                path.display()
            )));
        }
    }
    Ok(manifest)
}

/// Worker count for data loading, from `MSR_THREADS` (default: all cores).
pub fn data_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_image(path: &Path) -> Result<Array2<f32>> {
    let t: Tensor<f32> = load_tensor(path)?;
    let s = t.shape();
    if s.n() != 1 || s.c() != 1 {
        return Err(Error::Data(format!(
            "{} holds shape {s}, expected a single image",
            path.display()
        )));
    }
    Ok(t.image(0, 0))
}

/// Reads every sample of a manifest. Order follows the manifest regardless
/// of the number of loader threads.
pub fn load_samples(manifest: &DatasetManifest, dir: &Path) -> Result<Vec<SamplePair>> {
    let load = |e: &ManifestEntry| -> Result<SamplePair> {
        let sample = SamplePair {
            id: e.id.clone(),
            x_aux: load_image(&dir.join(&e.aux))?,
            x_tar: load_image(&dir.join(&e.tar))?,
            y_tar: load_image(&dir.join(&e.lr))?,
            scale: manifest.scale,
        };
        sample.validate()?;
        Ok(sample)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(data_threads())
        .build()
        .map_err(|e| Error::Data(format!("cannot start loader threads: {e}")))?;
    pool.install(|| manifest.entries.par_iter().map(load).collect())
}

/// Loads the manifest of `split` from a dataset directory and its samples.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<SamplePair>> {
    let manifest = load_manifest(&manifest_path(dir, split))?;
    if manifest.split != split {
        return Err(Error::Data(format!(
            "manifest for {} declares split {}",
            split.name(),
            manifest.split.name()
        )));
    }
    load_samples(&manifest, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s2() -> ScaleFactor {
        ScaleFactor::new(2).unwrap()
    }

    #[test]
    fn single_shape_gives_two_levels() {
        let p = generate_phantom(7, (32, 32), 1).unwrap();
        for img in [&p.aux, &p.tar] {
            let mut levels: Vec<u32> = img.iter().map(|v| v.to_bits()).collect();
            levels.sort_unstable();
            levels.dedup();
            assert_eq!(levels.len(), 2);
        }
    }

    #[test]
    fn zero_shapes_and_tiny_sizes_rejected() {
        assert!(generate_phantom(1, (32, 32), 0).is_err());
        assert!(generate_phantom(1, (8, 32), 3).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(
            generate_phantom(42, (24, 40), 5).unwrap(),
            generate_phantom(42, (24, 40), 5).unwrap()
        );
    }

    #[test]
    fn contrasts_share_geometry() {
        for seed in 0..20 {
            let p = generate_phantom(seed, (32, 32), 6).unwrap();
            for ((a, t), l) in p.aux.iter().zip(p.tar.iter()).zip(p.labels.iter()) {
                assert_eq!(*a != 0.0, *t != 0.0);
                assert_eq!(*l != 0, *t != 0.0);
            }
            // each tissue region is a single intensity in both images
            for k in 1..=6u16 {
                let vals: HashSet<(u32, u32)> = p
                    .labels
                    .iter()
                    .zip(p.aux.iter().zip(p.tar.iter()))
                    .filter(|(l, _)| **l == k)
                    .map(|(_, (a, t))| (a.to_bits(), t.to_bits()))
                    .collect();
                assert!(vals.len() <= 1);
            }
        }
    }

    #[test]
    fn contrasts_diverge_somewhere_and_stay_in_range() {
        for seed in 0..50 {
            let p = generate_phantom(seed, (32, 32), 1 + (seed as usize % 5)).unwrap();
            let gap = p
                .labels
                .iter()
                .filter(|&&l| l > 0)
                .map(|&l| (p.aux_intensity[l as usize - 1] - p.tar_intensity[l as usize - 1]).abs())
                .fold(0.0f32, f32::max);
            assert!(gap >= MIN_CONTRAST_GAP, "seed {seed}: gap {gap}");
            assert!(p.aux.iter().chain(p.tar.iter()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn aux_seed_changes_only_aux() {
        let a = generate_phantom_with_aux_seed(3, 100, (32, 32), 4).unwrap();
        let b = generate_phantom_with_aux_seed(3, 200, (32, 32), 4).unwrap();
        assert_eq!(a.tar, b.tar);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.aux, b.aux);
    }

    #[test]
    fn split_rounding() {
        assert_eq!(split_sizes(10, DEFAULT_RATIOS), [7, 1, 2]);
        assert_eq!(split_sizes(11, DEFAULT_RATIOS), [7, 1, 3]);
        assert_eq!(split_sizes(55, [40, 5, 10]), [40, 5, 10]);
    }

    #[test]
    fn dataset_splits_are_disjoint_and_complete() {
        let spec = DatasetSpec::new(5, 11, (16, 16), s2());
        let ds = build_dataset(&spec).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (7, 1, 3));
        let ids: Vec<&str> = Split::ALL
            .iter()
            .flat_map(|&s| ds.split(s).iter().map(|p| p.id.as_str()))
            .collect();
        let unique: HashSet<&str> = ids.iter().copied().collect();
        assert_eq!(unique.len(), 11);
        assert_eq!(build_dataset(&spec).unwrap(), ds);
    }

    #[test]
    fn small_counts_rejected() {
        assert!(build_dataset(&DatasetSpec::new(0, 9, (16, 16), s2())).is_err());
    }

    #[test]
    fn stored_lr_matches_fresh_degradation() {
        let ds = build_dataset(&DatasetSpec::new(1, 10, (32, 32), s2())).unwrap();
        for s in &ds.train {
            let again = degrade_target(&s.x_tar, s.scale).unwrap();
            assert!(again.iter().zip(s.y_tar.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn write_and_reload_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&DatasetSpec::new(9, 10, (16, 16), s2())).unwrap();
        let manifests = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(manifests[0].entries.len(), 7);
        for split in Split::ALL {
            let loaded = load_split(dir.path(), split).unwrap();
            assert_eq!(loaded.as_slice(), ds.split(split));
        }
        let spec: DatasetSpec = read_json(&dir.path().join(SPEC_FILE)).unwrap();
        assert_eq!(spec, ds.spec);
    }

    #[test]
    fn missing_files_and_duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&DatasetSpec::new(9, 10, (16, 16), s2())).unwrap();
        let mut manifests = write_dataset(&ds, dir.path()).unwrap();
        let train = &mut manifests[0];
        fs::remove_file(dir.path().join(&train.entries[0].lr)).unwrap();
        assert!(matches!(load_samples(train, dir.path()), Err(Error::Io { .. })));

        train.entries[1].id = train.entries[2].id.clone();
        let p = dir.path().join("dup.json");
        write_json(&p, &*train).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Data(_))));
    }
}
