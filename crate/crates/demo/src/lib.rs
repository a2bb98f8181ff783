//! WebAssembly bindings for a static demo page. A `Scene` holds one synthetic
//! sample and renders three views of it as RGBA buffers: its superpixel labels
//! painted back into a mask, an encoder tap pooled and bilinearly upsampled,
//! and the smoothed F1 loss of an adjustable prediction with its gradient.

use dermfeat::data::{image_to_tensor, synthesize, Split, SynthSample, SynthSpec};
use dermfeat::loss::{f1_loss, f1_loss_grad, LossConfig};
use dermfeat::superpixel::{labels_to_mask, mask_to_scores, CLASS_COUNT};
use dermfeat::tensor::{bilinear_resize, maxpool2d, sigmoid_scalar};
use dermfeat::{Class, SuperpixelScores, Tensor};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Overlay colour per class.
const CLASS_RGB: [[u8; 3]; CLASS_COUNT] = [[40, 90, 255], [0, 200, 120], [255, 220, 0], [255, 40, 160]];

#[wasm_bindgen]
pub struct Scene {
    sample: SynthSample,
    image: Tensor,
    truth: Tensor,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn class_index(class: u32) -> Result<usize, String> {
    let c = class as usize;
    if c < CLASS_COUNT {
        Ok(c)
    } else {
        Err(format!("class {class} is outside 0..{CLASS_COUNT}"))
    }
}

fn gray_rgba(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    values
        .iter()
        .flat_map(|&v| {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

#[wasm_bindgen]
impl Scene {
    /// Renders sample `index` of the synthetic training split.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, index: u32, size: u32, cell: u32) -> Result<Scene, String> {
        let spec = SynthSpec {
            image_size: size as usize,
            cell: cell as usize,
            seed: u64::from(seed),
            ..SynthSpec::default()
        };
        let sample = synthesize(&spec, Split::Train, u64::from(index)).map_err(err)?;
        let image = image_to_tensor(&sample.image);
        let truth = labels_to_mask(&sample.map, &sample.labels).map_err(err)?.into_tensor();
        Ok(Scene { sample, image, truth })
    }

    pub fn size(&self) -> u32 {
        self.sample.image.width as u32
    }

    pub fn superpixel_count(&self) -> u32 {
        self.sample.map.count() as u32
    }

    pub fn class_names(&self) -> String {
        json!(Class::names()).to_string()
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        self.sample
            .image
            .pixels
            .chunks(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect()
    }

    /// The image with superpixel borders and the positive superpixels of
    /// `class` tinted.
    pub fn labels_rgba(&self, class: u32) -> Result<Vec<u8>, String> {
        let c = class_index(class)?;
        let map = &self.sample.map;
        let (h, w) = (map.height(), map.width());
        let mask = self.truth.channel(c);
        let mut out = self.image_rgba();
        for i in 0..h {
            for j in 0..w {
                let px = &mut out[(i * w + j) * 4..][..3];
                let id = map.id_at(i, j);
                let border = (i + 1 < h && map.id_at(i + 1, j) != id) || (j + 1 < w && map.id_at(i, j + 1) != id);
                if border {
                    px.copy_from_slice(&[255, 255, 255]);
                } else if mask[i * w + j] > 0.5 {
                    for (v, t) in px.iter_mut().zip(CLASS_RGB[c]) {
                        *v = ((u16::from(*v) + 2 * u16::from(t)) / 3) as u8;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Per-superpixel labels and whether averaging the painted mask back onto
    /// superpixels recovers them exactly.
    pub fn labels_summary(&self) -> Result<String, String> {
        let mask = labels_to_mask(&self.sample.map, &self.sample.labels).map_err(err)?;
        let back = mask_to_scores(&self.sample.map, &mask).map_err(err)?;
        let positives: Vec<usize> = (0..CLASS_COUNT)
            .map(|c| self.sample.labels.rows().iter().filter(|r| r[c] == 1).count())
            .collect();
        Ok(json!({
            "superpixels": self.sample.map.count(),
            "regions": self.sample.regions.len(),
            "positives": positives,
            "round_trip_exact": back == SuperpixelScores::from(&self.sample.labels),
        })
        .to_string())
    }

    /// Image luminance max-pooled `depth` times and resized back to full size,
    /// as a block `depth + 1` tap is before it joins the hypercolumn.
    pub fn tap_rgba(&self, depth: u32) -> Result<Vec<u8>, String> {
        let (_, h, w) = self.image.dims3().map_err(err)?;
        let lum = Tensor::from_fn(&[1, h, w], |p| {
            let px = |c: usize| self.image.data()[c * h * w + p];
            0.299 * px(0) + 0.587 * px(1) + 0.114 * px(2)
        });
        let mut tap = lum;
        for _ in 0..depth {
            tap = maxpool2d(&tap).map_err(err)?.output;
        }
        let up = bilinear_resize(&tap, h, w).map_err(err)?;
        Ok(gray_rgba(up.data(), 0.0, 1.0))
    }

    fn prediction(&self, sharpness: f64, bias: f64) -> Tensor {
        self.truth.map(|y| sigmoid_scalar(sharpness * (2.0 * y - 1.0) + bias))
    }

    /// Smoothed F1 loss of the prediction `sigmoid(sharpness·(2y − 1) + bias)`.
    pub fn loss_json(&self, sharpness: f64, bias: f64, eps: f64) -> Result<String, String> {
        let pred = self.prediction(sharpness, bias);
        let b = f1_loss(&pred, &self.truth, &LossConfig { eps }).map_err(err)?;
        serde_json::to_string(&b).map_err(err)
    }

    /// Magnitude of ∂loss/∂prediction for one class, brightest where the loss
    /// is most sensitive.
    pub fn loss_gradient_rgba(&self, class: u32, sharpness: f64, bias: f64, eps: f64) -> Result<Vec<u8>, String> {
        let c = class_index(class)?;
        let pred = self.prediction(sharpness, bias);
        let g = f1_loss_grad(&pred, &self.truth, &LossConfig { eps }).map_err(err)?;
        let mags: Vec<f64> = g.channel(c).iter().map(|v| v.abs()).collect();
        let hi = mags.iter().copied().fold(0.0, f64::max);
        Ok(gray_rgba(&mags, 0.0, hi))
    }
}
