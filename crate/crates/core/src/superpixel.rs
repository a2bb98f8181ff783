//! Superpixel maps and the two conversions between per-superpixel labels and
//! per-pixel four-channel masks.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm::{self, GrayImage};
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 4;

/// Dermoscopic feature classes, in the channel order used by every mask,
/// label vector and file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    PigmentNetwork,
    NegativeNetwork,
    MiliaLikeCyst,
    Streaks,
}

impl Class {
    pub const ALL: [Class; CLASS_COUNT] = [
        Class::PigmentNetwork,
        Class::NegativeNetwork,
        Class::MiliaLikeCyst,
        Class::Streaks,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::PigmentNetwork => "pigment_network",
            Class::NegativeNetwork => "negative_network",
            Class::MiliaLikeCyst => "milia_like_cyst",
            Class::Streaks => "streaks",
        }
    }

    pub fn names() -> [&'static str; CLASS_COUNT] {
        Self::ALL.map(Class::name)
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-pixel superpixel ids over an `height × width` grid.
///
/// Ids are contiguous: every id in `0..count` labels at least one pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    height: usize,
    width: usize,
    index: Vec<u32>,
    count: usize,
    sizes: Vec<usize>,
}

impl SuperpixelMap {
    /// Validates `index` against a declared superpixel count.
    pub fn new(height: usize, width: usize, index: Vec<u32>, count: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "superpixel map extent {height}x{width} must be positive"
            )));
        }
        if index.len() != height * width {
            return Err(Error::shape(format!(
                "superpixel map {height}x{width} needs {} ids, got {}",
                height * width,
                index.len()
            )));
        }
        let mut sizes = vec![0usize; count];
        for (p, &id) in index.iter().enumerate() {
            let Some(size) = sizes.get_mut(id as usize) else {
                return Err(Error::invalid(format!(
                    "superpixel id {id} at pixel ({}, {}) is outside 0..{count}",
                    p / width,
                    p % width
                )));
            };
            *size += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::invalid(format!("empty superpixel {empty}")));
        }
        Ok(SuperpixelMap {
            height,
            width,
            index,
            count,
            sizes,
        })
    }

    /// Builds a map whose count is one past the largest id present.
    pub fn from_ids(height: usize, width: usize, index: Vec<u32>) -> Result<Self> {
        let count = index.iter().max().map_or(0, |&m| m as usize + 1);
        Self::new(height, width, index, count)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of superpixels `K`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn ids(&self) -> &[u32] {
        &self.index
    }

    pub fn id_at(&self, i: usize, j: usize) -> usize {
        self.index[i * self.width + j] as usize
    }

    /// Pixel count of every superpixel.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
}

/// Binary label vector per superpixel.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelMatrix {
    rows: Vec<[u8; CLASS_COUNT]>,
}

impl LabelMatrix {
    pub fn new(rows: Vec<[u8; CLASS_COUNT]>) -> Result<Self> {
        if let Some((r, _)) = rows
            .iter()
            .enumerate()
            .find(|(_, row)| row.iter().any(|&v| v > 1))
        {
            return Err(Error::invalid(format!(
                "label row {r} has a non-binary entry: {:?}",
                rows[r]
            )));
        }
        Ok(LabelMatrix { rows })
    }

    pub fn zeros(count: usize) -> Self {
        LabelMatrix {
            rows: vec![[0; CLASS_COUNT]; count],
        }
    }

    pub fn rows(&self) -> &[[u8; CLASS_COUNT]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, superpixel: usize, class: Class) -> bool {
        self.rows[superpixel][class.index()] == 1
    }

    pub fn set(&mut self, superpixel: usize, class: Class, value: bool) {
        self.rows[superpixel][class.index()] = value as u8;
    }
}

/// Four-channel per-pixel volume with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMask(Tensor);

impl FeatureMask {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (c, _, _) = tensor.dims3()?;
        if c != CLASS_COUNT {
            return Err(Error::shape(format!(
                "feature mask needs {CLASS_COUNT} channels, got {c}"
            )));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "feature mask value {v} outside [0, 1]"
            )));
        }
        Ok(FeatureMask(tensor))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Mean predicted probability per superpixel and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SuperpixelScores {
    rows: Vec<[f64; CLASS_COUNT]>,
}

impl SuperpixelScores {
    pub fn new(rows: Vec<[f64; CLASS_COUNT]>) -> Result<Self> {
        if let Some(v) = rows
            .iter()
            .flatten()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(format!("superpixel score {v} outside [0, 1]")));
        }
        Ok(SuperpixelScores { rows })
    }

    pub fn rows(&self) -> &[[f64; CLASS_COUNT]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl From<&LabelMatrix> for SuperpixelScores {
    fn from(labels: &LabelMatrix) -> Self {
        SuperpixelScores {
            rows: labels.rows.iter().map(|r| r.map(f64::from)).collect(),
        }
    }
}

/// Paints each superpixel's label vector over its pixels.
pub fn labels_to_mask(map: &SuperpixelMap, labels: &LabelMatrix) -> Result<FeatureMask> {
    if labels.len() != map.count() {
        return Err(Error::shape(format!(
            "{} label rows for {} superpixels",
            labels.len(),
            map.count()
        )));
    }
    let plane = map.height * map.width;
    let mut mask = Tensor::zeros(&[CLASS_COUNT, map.height, map.width]);
    let out = mask.data_mut();
    for (p, &id) in map.index.iter().enumerate() {
        let row = labels.rows[id as usize];
        for c in 0..CLASS_COUNT {
            out[c * plane + p] = f64::from(row[c]);
        }
    }
    Ok(FeatureMask(mask))
}

/// Averages the mask over each superpixel's pixels, per class.
pub fn mask_to_scores(map: &SuperpixelMap, mask: &FeatureMask) -> Result<SuperpixelScores> {
    if (mask.height(), mask.width()) != (map.height, map.width) {
        return Err(Error::shape(format!(
            "mask is {}x{} but superpixel map is {}x{}",
            mask.height(),
            mask.width(),
            map.height,
            map.width
        )));
    }
    let plane = map.height * map.width;
    let data = mask.0.data();
    let mut sums = vec![[0.0f64; CLASS_COUNT]; map.count];
    let mut lo = vec![[f64::INFINITY; CLASS_COUNT]; map.count];
    let mut hi = vec![[f64::NEG_INFINITY; CLASS_COUNT]; map.count];
    for (p, &id) in map.index.iter().enumerate() {
        let id = id as usize;
        for c in 0..CLASS_COUNT {
            let v = data[c * plane + p];
            sums[id][c] += v;
            lo[id][c] = lo[id][c].min(v);
            hi[id][c] = hi[id][c].max(v);
        }
    }
    let rows = sums
        .iter()
        .zip(&map.sizes)
        .enumerate()
        .map(|(k, (sum, &n))| {
            // the exact mean lies within [min, max]; clamping removes rounding overshoot
            std::array::from_fn(|c| (sum[c] / n as f64).clamp(lo[k][c], hi[k][c]))
        })
        .collect();
    Ok(SuperpixelScores { rows })
}

/// Tiles the image with `cell × cell` squares, numbered in row-major cell
/// order. The last row and column of cells may be smaller.
pub fn grid_superpixels(height: usize, width: usize, cell: usize) -> Result<SuperpixelMap> {
    if cell == 0 {
        return Err(Error::invalid("grid cell size must be at least 1"));
    }
    let cells_across = width.div_ceil(cell);
    let index = (0..height * width)
        .map(|p| {
            let (i, j) = (p / width, p % width);
            ((i / cell) * cells_across + j / cell) as u32
        })
        .collect();
    SuperpixelMap::from_ids(height, width, index)
}

const COUNT_PREFIX: &str = "K=";

/// Encodes a map as a 16-bit P5 graymap with a `# K=<count>` header comment.
pub fn encode_superpixel_map(map: &SuperpixelMap) -> Result<Vec<u8>> {
    if map.count > 65536 {
        return Err(Error::invalid(format!(
            "{} superpixels exceed the 16-bit id range",
            map.count
        )));
    }
    Ok(netpbm::encode_pgm(&GrayImage {
        width: map.width,
        height: map.height,
        maxval: 65535,
        samples: map.index.iter().map(|&id| id as u16).collect(),
        comments: vec![format!("{COUNT_PREFIX}{}", map.count)],
    }))
}

pub fn decode_superpixel_map(bytes: &[u8]) -> std::result::Result<SuperpixelMap, String> {
    let img = netpbm::decode_pgm(bytes).map_err(|e| e.0)?;
    if img.maxval != 65535 {
        return Err(format!("malformed superpixel map: maxval {} (expected 65535)", img.maxval));
    }
    let declared = img
        .comments
        .iter()
        .find_map(|c| c.strip_prefix(COUNT_PREFIX))
        .ok_or_else(|| "malformed superpixel map: missing `# K=<count>` comment".to_string())?;
    let count: usize = declared
        .trim()
        .parse()
        .map_err(|_| format!("malformed superpixel map: bad count {declared:?}"))?;
    let index = img.samples.iter().map(|&s| u32::from(s)).collect();
    SuperpixelMap::new(img.height, img.width, index, count).map_err(|e| match e {
        Error::InvalidArgument(m) | Error::Shape(m) => m,
        other => other.to_string(),
    })
}

pub fn write_superpixel_map(map: &SuperpixelMap, path: &Path) -> Result<()> {
    let bytes = encode_superpixel_map(map)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_superpixel_map(path: &Path) -> Result<SuperpixelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_superpixel_map(&bytes).map_err(|m| Error::format(path, m))
}

/// On-disk label document.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelFile {
    superpixel_count: usize,
    classes: Vec<String>,
    labels: Vec<[u8; CLASS_COUNT]>,
}

pub fn labels_to_json(labels: &LabelMatrix) -> String {
    let doc = LabelFile {
        superpixel_count: labels.len(),
        classes: Class::names().map(String::from).to_vec(),
        labels: labels.rows.clone(),
    };
    serde_json::to_string(&doc).expect("label document serializes")
}

pub fn labels_from_json(text: &str) -> std::result::Result<LabelMatrix, String> {
    let doc: LabelFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if doc.classes != Class::names() {
        return Err(format!(
            "class list {:?} differs from {:?}",
            doc.classes,
            Class::names()
        ));
    }
    if doc.labels.len() != doc.superpixel_count {
        return Err(format!(
            "{} label rows but superpixel_count is {}",
            doc.labels.len(),
            doc.superpixel_count
        ));
    }
    LabelMatrix::new(doc.labels).map_err(|e| e.to_string())
}

pub fn write_labels(labels: &LabelMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, labels_to_json(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<LabelMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    labels_from_json(&text).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn columns_map() -> SuperpixelMap {
        SuperpixelMap::new(2, 2, vec![0, 1, 0, 1], 2).unwrap()
    }

    #[test]
    fn labels_to_mask_two_columns() {
        let labels = LabelMatrix::new(vec![[1, 0, 0, 0], [0, 0, 0, 1]]).unwrap();
        let mask = labels_to_mask(&columns_map(), &labels).unwrap();
        let t = mask.as_tensor();
        assert_eq!(t.channel(0), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(t.channel(3), &[0.0, 1.0, 0.0, 1.0]);
        assert!(t.channel(1).iter().chain(t.channel(2)).all(|&v| v == 0.0));
    }

    #[test]
    fn labels_to_mask_degenerate_cases() {
        let map = grid_superpixels(5, 3, 2).unwrap();
        let zeros = labels_to_mask(&map, &LabelMatrix::zeros(map.count())).unwrap();
        assert!(zeros.as_tensor().data().iter().all(|&v| v == 0.0));

        let single = grid_superpixels(4, 4, 10).unwrap();
        let ones = LabelMatrix::new(vec![[1; 4]]).unwrap();
        let mask = labels_to_mask(&single, &ones).unwrap();
        assert!(mask.as_tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn labels_to_mask_rejects_row_mismatch() {
        let err = labels_to_mask(&columns_map(), &LabelMatrix::zeros(3)).unwrap_err();
        assert!(err.to_string().contains("3 label rows for 2"), "{err}");
    }

    #[test]
    fn mean_of_three_pixels() {
        let map = SuperpixelMap::new(1, 4, vec![0, 0, 0, 1], 2).unwrap();
        let mut t = Tensor::zeros(&[4, 1, 4]);
        t.channel_mut(2).copy_from_slice(&[0.2, 0.4, 0.6, 0.9]);
        let scores = mask_to_scores(&map, &FeatureMask::new(t).unwrap()).unwrap();
        assert!((scores.rows()[0][2] - 0.4).abs() < 1e-15);
        assert_eq!(scores.rows()[1][2], 0.9);
    }

    #[test]
    fn two_pixel_superpixel_half() {
        let map = SuperpixelMap::new(2, 1, vec![0, 0], 1).unwrap();
        let mut t = Tensor::zeros(&[4, 2, 1]);
        t.channel_mut(0).copy_from_slice(&[0.0, 1.0]);
        let scores = mask_to_scores(&map, &FeatureMask::new(t).unwrap()).unwrap();
        assert_eq!(scores.rows()[0][0], 0.5);
    }

    #[test]
    fn mask_to_scores_rejects_extent_mismatch() {
        let mask = FeatureMask::new(Tensor::zeros(&[4, 3, 2])).unwrap();
        assert!(mask_to_scores(&columns_map(), &mask).is_err());
    }

    #[test]
    fn feature_mask_validates() {
        assert!(FeatureMask::new(Tensor::zeros(&[3, 2, 2])).is_err());
        assert!(FeatureMask::new(Tensor::full(&[4, 2, 2], 1.5)).is_err());
    }

    #[test]
    fn grid_four_by_four() {
        let map = grid_superpixels(4, 4, 2).unwrap();
        assert_eq!(map.count(), 4);
        assert_eq!(map.sizes(), &[4, 4, 4, 4]);
        assert_eq!(map.id_at(0, 2), 1);
        assert_eq!(map.id_at(3, 1), 2);
    }

    #[test]
    fn grid_single_cell() {
        let map = grid_superpixels(5, 7, 7).unwrap();
        assert_eq!(map.count(), 1);
        assert_eq!(map.sizes(), &[35]);
    }

    #[test]
    fn grid_ragged() {
        let map = grid_superpixels(5, 5, 2).unwrap();
        assert_eq!(map.count(), 9);
        assert_eq!(map.sizes(), &[4, 4, 2, 4, 4, 2, 2, 2, 1]);
    }

    #[test]
    fn grid_rejects_zero_cell() {
        assert!(grid_superpixels(4, 4, 0).is_err());
    }

    #[test]
    fn map_rejects_gaps_and_out_of_range() {
        let err = SuperpixelMap::new(1, 2, vec![0, 2], 3).unwrap_err().to_string();
        assert!(err.contains("empty superpixel 1"), "{err}");
        let err = SuperpixelMap::new(1, 2, vec![0, 4], 3).unwrap_err().to_string();
        assert!(err.contains("outside 0..3"), "{err}");
    }

    #[test]
    fn map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sp.pgm");
        let map = grid_superpixels(9, 13, 3).unwrap();
        write_superpixel_map(&map, &path).unwrap();
        assert_eq!(read_superpixel_map(&path).unwrap(), map);
    }

    #[test]
    fn map_file_with_gap_is_rejected() {
        let img = GrayImage {
            width: 2,
            height: 1,
            maxval: 65535,
            samples: vec![0, 2],
            comments: vec!["K=3".into()],
        };
        let err = decode_superpixel_map(&netpbm::encode_pgm(&img)).unwrap_err();
        assert!(err.contains("empty superpixel 1"), "{err}");
    }

    #[test]
    fn map_file_truncated_or_unlabelled() {
        let map = grid_superpixels(4, 4, 2).unwrap();
        let mut bytes = encode_superpixel_map(&map).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(decode_superpixel_map(&bytes).unwrap_err().contains("truncated"));

        let no_count = netpbm::encode_pgm(&GrayImage {
            width: 1,
            height: 1,
            maxval: 65535,
            samples: vec![0],
            comments: vec![],
        });
        assert!(decode_superpixel_map(&no_count).unwrap_err().contains("K=<count>"));
    }

    #[test]
    fn label_json_round_trip_and_validation() {
        let labels = LabelMatrix::new(vec![[1, 0, 0, 1], [0, 1, 1, 0]]).unwrap();
        let text = labels_to_json(&labels);
        assert!(text.contains("\"superpixel_count\":2"));
        assert_eq!(labels_from_json(&text).unwrap(), labels);

        let bad_count = r#"{"superpixel_count":3,"classes":["pigment_network","negative_network","milia_like_cyst","streaks"],"labels":[[0,0,0,0]]}"#;
        assert!(labels_from_json(bad_count).is_err());
        let bad_value = r#"{"superpixel_count":1,"classes":["pigment_network","negative_network","milia_like_cyst","streaks"],"labels":[[0,2,0,0]]}"#;
        assert!(labels_from_json(bad_value).is_err());
        let bad_order = r#"{"superpixel_count":1,"classes":["streaks","negative_network","milia_like_cyst","pigment_network"],"labels":[[0,0,0,0]]}"#;
        assert!(labels_from_json(bad_order).is_err());
    }

    fn grid_and_labels() -> impl Strategy<Value = (SuperpixelMap, LabelMatrix)> {
        (1usize..24, 1usize..24, 1usize..9).prop_flat_map(|(h, w, cell)| {
            let map = grid_superpixels(h, w, cell).unwrap();
            let k = map.count();
            proptest::collection::vec(proptest::array::uniform4(0u8..2), k)
                .prop_map(move |rows| (map.clone(), LabelMatrix::new(rows).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn scores_recover_labels((map, labels) in grid_and_labels()) {
            let mask = labels_to_mask(&map, &labels).unwrap();
            let scores = mask_to_scores(&map, &mask).unwrap();
            prop_assert_eq!(scores, SuperpixelScores::from(&labels));
        }

        #[test]
        fn grid_partitions_pixels(h in 1usize..40, w in 1usize..40, cell in 1usize..12) {
            let map = grid_superpixels(h, w, cell).unwrap();
            prop_assert_eq!(map.sizes().iter().sum::<usize>(), h * w);
            prop_assert_eq!(map.count(), h.div_ceil(cell) * w.div_ceil(cell));
        }

        #[test]
        fn scores_bounded_by_member_values(
            h in 1usize..12, w in 1usize..12, cell in 1usize..5, seed in any::<u64>()
        ) {
            let map = grid_superpixels(h, w, cell).unwrap();
            let mut state = seed;
            let t = Tensor::from_fn(&[4, h, w], |_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64) / ((1u64 << 53) as f64)
            });
            let mask = FeatureMask::new(t.clone()).unwrap();
            let scores = mask_to_scores(&map, &mask).unwrap();
            for c in 0..4 {
                for k in 0..map.count() {
                    let vals: Vec<f64> = (0..h * w)
                        .filter(|&p| map.ids()[p] as usize == k)
                        .map(|p| t.channel(c)[p])
                        .collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s = scores.rows()[k][c];
                    prop_assert!(lo <= s && s <= hi);
                    // visiting the members in reverse order gives the same mean
                    let rev: f64 = vals.iter().rev().sum::<f64>() / vals.len() as f64;
                    prop_assert!((rev - s).abs() <= 1e-12);
                }
            }
        }
    }
}
