//! Synthetic dermoscopy-like images with exactly known superpixel labels, and
//! the on-disk dataset manifest.
//!
//! Each image is a noisy skin-tone background with up to a few elliptical
//! lesion regions. A region carries each feature class independently with that
//! class's prevalence, and every class it carries stamps its own texture over
//! the region. A grid superpixel is labelled positive for a class when at least
//! half of its pixels lie inside regions carrying that class.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm::{self, RgbImage};
use crate::superpixel::{
    grid_superpixels, labels_to_mask, read_labels, read_superpixel_map, write_labels,
    write_superpixel_map, Class, LabelMatrix, SuperpixelMap, CLASS_COUNT,
};
use crate::tensor::Tensor;
use crate::train::TrainSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    /// Side of the square grid superpixels.
    pub cell: usize,
    /// Probability that a region carries each class, in class order.
    pub prevalence: [f64; CLASS_COUNT],
    /// Regions per image are drawn uniformly from `0..=max_regions`.
    pub max_regions: usize,
    /// Smallest and largest ellipse semi-axis, as fractions of the image side.
    pub region_radius: [f64; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 64,
            cell: 8,
            prevalence: [0.5; CLASS_COUNT],
            max_regions: 3,
            region_radius: [0.18, 0.32],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::invalid("image_size must be positive"));
        }
        if self.cell == 0 {
            return Err(Error::invalid("cell must be positive"));
        }
        for (class, p) in Class::ALL.iter().zip(self.prevalence) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("prevalence of {class} is {p}, outside [0, 1]")));
            }
        }
        let [lo, hi] = self.region_radius;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid(format!(
                "region_radius [{lo}, {hi}] must satisfy 0 < min <= max"
            )));
        }
        if hi > 0.5 {
            return Err(Error::invalid(format!(
                "unsatisfiable geometry: regions up to {} px across do not fit a {} px image",
                (2.0 * hi * self.image_size as f64).round(),
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Rotated ellipse with the classes it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    pub classes: [bool; CLASS_COUNT],
}

impl Region {
    /// Whether the center of pixel `(i, j)` falls inside the ellipse.
    pub fn contains(&self, i: usize, j: usize) -> bool {
        let dy = i as f64 + 0.5 - self.center.0;
        let dx = j as f64 + 0.5 - self.center.1;
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: RgbImage,
    pub map: SuperpixelMap,
    pub labels: LabelMatrix,
    pub regions: Vec<Region>,
}

/// Labels each superpixel positive for a class when at least half of its
/// pixels are covered. `coverage[c]` holds one flag per pixel, row-major.
pub fn coverage_labels(map: &SuperpixelMap, coverage: &[Vec<bool>; CLASS_COUNT]) -> Result<LabelMatrix> {
    let n = map.height() * map.width();
    if let Some(c) = coverage.iter().position(|cov| cov.len() != n) {
        return Err(Error::shape(format!(
            "coverage for class {c} has {} pixels, map has {n}",
            coverage[c].len()
        )));
    }
    let mut covered = vec![[0usize; CLASS_COUNT]; map.count()];
    for (p, &id) in map.ids().iter().enumerate() {
        for c in 0..CLASS_COUNT {
            covered[id as usize][c] += usize::from(coverage[c][p]);
        }
    }
    let rows = covered
        .iter()
        .zip(map.sizes())
        .map(|(cov, &size)| cov.map(|k| u8::from(2 * k >= size)))
        .collect();
    LabelMatrix::new(rows)
}

type Rgb = [f64; 3];

const SKIN: Rgb = [0.86, 0.66, 0.56];
const LESION: Rgb = [0.58, 0.40, 0.30];

/// Adds one class's texture at pixel `(i, j)`. Textures are fixed functions of
/// position so each class has a stable local signature.
fn stamp(class: Class, i: usize, j: usize, px: &mut Rgb) {
    let shift = |px: &mut Rgb, d: Rgb| {
        for k in 0..3 {
            px[k] += d[k];
        }
    };
    match class {
        // dark mesh, period 4
        Class::PigmentNetwork => {
            if i % 4 == 0 || j % 4 == 0 {
                shift(px, [-0.30, -0.24, -0.20]);
            }
        }
        // light mesh over darkened holes, period 6
        Class::NegativeNetwork => {
            if i % 6 == 0 || j % 6 == 0 {
                shift(px, [0.25, 0.28, 0.30]);
            } else {
                shift(px, [-0.12, -0.10, -0.06]);
            }
        }
        // bright 2×2 dots on a period-5 lattice
        Class::MiliaLikeCyst => {
            if i % 5 < 2 && j % 5 < 2 {
                shift(px, [0.38, 0.38, 0.22]);
            }
        }
        // parallel diagonal streaks
        Class::Streaks => {
            if (i + j) % 6 < 2 {
                shift(px, [0.30, -0.22, -0.22]);
            }
        }
    }
}

fn sample_region(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Region {
    let size = spec.image_size as f64;
    let [lo, hi] = spec.region_radius.map(|r| r * size);
    let a = rng.gen_range(lo..=hi);
    let b = rng.gen_range(lo..=hi);
    // keep the bounding circle inside the image
    let r = a.max(b);
    let cy = rng.gen_range(r..=size - r);
    let cx = rng.gen_range(r..=size - r);
    let angle = rng.gen_range(0.0..PI);
    let classes = spec.prevalence.map(|p| rng.gen_bool(p));
    Region {
        center: (cy, cx),
        semi_axes: (a, b),
        angle,
        classes,
    }
}

/// Deterministically renders sample `index` of `split`.
pub fn synthesize(spec: &SynthSpec, split: Split, index: u64) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream_base() + index);

    let n = spec.image_size;
    let region_count = rng.gen_range(0..=spec.max_regions);
    let regions: Vec<Region> = (0..region_count).map(|_| sample_region(spec, &mut rng)).collect();

    let mut coverage: [Vec<bool>; CLASS_COUNT] = std::array::from_fn(|_| vec![false; n * n]);
    let mut pixels = Vec::with_capacity(n * n * 3);
    for i in 0..n {
        for j in 0..n {
            let noise = rng.gen_range(-0.04..0.04);
            let mut px = SKIN.map(|v| v + noise);
            let inside: Vec<&Region> = regions.iter().filter(|r| r.contains(i, j)).collect();
            if !inside.is_empty() {
                px = LESION.map(|v| v + noise);
                for class in Class::ALL {
                    if inside.iter().any(|r| r.classes[class.index()]) {
                        stamp(class, i, j, &mut px);
                        coverage[class.index()][i * n + j] = true;
                    }
                }
            }
            pixels.extend(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }

    let map = grid_superpixels(n, n, spec.cell)?;
    let labels = coverage_labels(&map, &coverage)?;
    Ok(SynthSample {
        image: RgbImage {
            width: n,
            height: n,
            pixels,
        },
        map,
        labels,
        regions,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub image: String,
    pub superpixels: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub image_size: usize,
    /// Paths relative to the manifest's directory.
    pub samples: Vec<ManifestSample>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders `count` samples into `out_dir` (images/, superpixels/, labels/) and
/// writes `manifest.json` there.
pub fn generate(spec: &SynthSpec, split: Split, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    for sub in ["images", "superpixels", "labels"] {
        create_dir(&out_dir.join(sub))?;
    }
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let s = synthesize(spec, split, index as u64)?;
        let stem = format!("sample_{index:05}");
        let entry = ManifestSample {
            image: format!("images/{stem}.ppm"),
            superpixels: format!("superpixels/{stem}.pgm"),
            labels: format!("labels/{stem}.json"),
        };
        let image_path = out_dir.join(&entry.image);
        std::fs::write(&image_path, netpbm::encode_ppm(&s.image))
            .map_err(|e| Error::io(&image_path, e))?;
        write_superpixel_map(&s.map, &out_dir.join(&entry.superpixels))?;
        write_labels(&s.labels, &out_dir.join(&entry.labels))?;
        samples.push(entry);
    }
    let manifest = DatasetManifest {
        split,
        image_size: spec.image_size,
        samples,
        seed: spec.seed,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A decoded sample.
#[derive(Debug, Clone)]
pub struct Sample {
    /// File stem of the image, used to key predictions.
    pub name: String,
    pub image_path: PathBuf,
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    pub map: SuperpixelMap,
    pub labels: LabelMatrix,
}

impl Sample {
    pub fn to_train_sample(&self) -> Result<TrainSample> {
        Ok(TrainSample {
            name: self.name.clone(),
            image: self.image.clone(),
            truth: labels_to_mask(&self.map, &self.labels)?.into_tensor(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub image_size: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

/// Converts 8-bit RGB to a `[3, H, W]` tensor scaled by 1/255.
pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let plane = image.width * image.height;
    Tensor::from_fn(&[3, image.height, image.width], |idx| {
        let (c, p) = (idx / plane, idx % plane);
        f64::from(image.pixels[p * 3 + c]) / 255.0
    })
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    netpbm::decode_ppm(&bytes).map_err(|e| Error::format(path, e.0))
}

/// Loads and validates every sample listed in a manifest.
pub fn load(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let n = manifest.image_size;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image_path = root.join(&entry.image);
        let map_path = root.join(&entry.superpixels);
        let labels_path = root.join(&entry.labels);
        let image = read_image(&image_path)?;
        if (image.height, image.width) != (n, n) {
            return Err(Error::format(
                &image_path,
                format!("image is {}x{}, manifest says {n}x{n}", image.height, image.width),
            ));
        }
        let map = read_superpixel_map(&map_path)?;
        if (map.height(), map.width()) != (n, n) {
            return Err(Error::format(
                &map_path,
                format!("superpixel map is {}x{}, manifest says {n}x{n}", map.height(), map.width()),
            ));
        }
        let labels = read_labels(&labels_path)?;
        if labels.len() != map.count() {
            return Err(Error::format(
                &labels_path,
                format!("{} label rows but the superpixel map has {}", labels.len(), map.count()),
            ));
        }
        let name = Path::new(&entry.image)
            .file_stem()
            .map_or_else(|| entry.image.clone(), |s| s.to_string_lossy().into_owned());
        samples.push(Sample {
            name,
            image: image_to_tensor(&image),
            image_path,
            map,
            labels,
        });
    }
    Ok(Dataset {
        split: manifest.split,
        image_size: n,
        seed: manifest.seed,
        samples,
    })
}
