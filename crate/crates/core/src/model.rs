//! Hypercolumn fully-convolutional network.
//!
//! Each encoder block is a 3×3 convolution followed by ReLU. Its activation is
//! tapped before the 2×2 max pool that feeds the next block. Every tap is
//! resized bilinearly to the input resolution and the taps are stacked along
//! the channel axis. A 1×1 convolution maps that stack to four logits per
//! pixel, and an elementwise sigmoid turns them into independent per-class
//! probabilities.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::superpixel::{Class, FeatureMask, CLASS_COUNT};
use crate::tensor::{
    bilinear_resize, bilinear_resize_backward, concat_channels, conv2d, conv2d_backward,
    maxpool2d, maxpool2d_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    split_channels, ConvSpec, Tensor,
};

const BLOCK_CONV: ConvSpec = ConvSpec {
    kernel_height: 3,
    kernel_width: 3,
    stride: 1,
    padding: 1,
};

const HEAD_CONV: ConvSpec = ConvSpec {
    kernel_height: 1,
    kernel_width: 1,
    stride: 1,
    padding: 0,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    /// Output channels of each block; its length is the block count.
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_channels: 3,
            channels: vec![8, 16, 32, 64, 64],
        }
    }
}

impl EncoderConfig {
    pub fn block_count(&self) -> usize {
        self.channels.len()
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.block_count().saturating_sub(1)
    }

    /// Channels entering the 1×1 head.
    pub fn hypercolumn_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("encoder needs at least one block"));
        }
        if self.input_channels == 0 {
            return Err(Error::invalid("encoder input channels must be positive"));
        }
        if let Some(k) = self.channels.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("block {} has zero channels", k + 1)));
        }
        Ok(())
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height % m != 0 || width % m != 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "input {height}x{width} must have both sides a positive multiple of {m} \
                 for {} encoder blocks",
                self.block_count()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvLayer {
            weights: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

/// All trainable tensors: one conv per block plus the 1×1 head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<ConvLayer>,
    pub head: ConvLayer,
}

impl ModelParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let mut c_in = cfg.input_channels;
        let blocks = cfg
            .channels
            .iter()
            .map(|&c| {
                let layer = ConvLayer::zeros(c, c_in, 3);
                c_in = c;
                layer
            })
            .collect();
        ModelParams {
            blocks,
            head: ConvLayer::zeros(CLASS_COUNT, cfg.hypercolumn_channels(), 1),
        }
    }

    /// Tensors in storage order: each block's weights then bias, then the head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.blocks
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// Names in storage order, e.g. `block1.weights` or `head.bias`.
    pub fn tensor_names(&self) -> Vec<String> {
        (1..=self.blocks.len())
            .flat_map(|k| [format!("block{k}.weights"), format!("block{k}.bias")])
            .chain(["head.weights".to_string(), "head.bias".to_string()])
            .collect()
    }

    /// Maps an index into [`ModelParams::to_flat`] to a tensor name and offset.
    pub fn locate_flat(&self, index: usize) -> Option<(String, usize)> {
        let mut rest = index;
        for (name, t) in self.tensor_names().into_iter().zip(self.tensors()) {
            if rest < t.len() {
                return Some((name, rest));
            }
            rest -= t.len();
        }
        None
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in storage order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Confirms every tensor has the shape `cfg` implies, naming the first
    /// block that disagrees.
    pub fn check_against(&self, cfg: &EncoderConfig) -> Result<()> {
        let expect = ModelParams::zeros(cfg);
        for k in 0..expect.blocks.len().max(self.blocks.len()) {
            match (expect.blocks.get(k), self.blocks.get(k)) {
                (Some(e), Some(a)) => {
                    if e.weights.shape() != a.weights.shape() || e.bias.shape() != a.bias.shape() {
                        return Err(Error::shape(format!(
                            "block {}: expected weights {:?}, found {:?}",
                            k + 1,
                            e.weights.shape(),
                            a.weights.shape()
                        )));
                    }
                }
                (Some(e), None) => {
                    return Err(Error::shape(format!(
                        "block {}: configured with {} channels but the parameters stop after block {}",
                        k + 1,
                        e.weights.shape()[0],
                        self.blocks.len()
                    )));
                }
                (None, Some(_)) => {
                    return Err(Error::shape(format!(
                        "block {}: parameters have {} blocks but the configuration has {}",
                        k + 1,
                        self.blocks.len(),
                        expect.blocks.len()
                    )));
                }
                (None, None) => unreachable!(),
            }
        }
        if expect.head.weights.shape() != self.head.weights.shape()
            || expect.head.bias.shape() != self.head.bias.shape()
        {
            return Err(Error::shape(format!(
                "head: expected weights {:?}, found {:?}",
                expect.head.weights.shape(),
                self.head.weights.shape()
            )));
        }
        Ok(())
    }
}

/// Uniform `[-a, a]` weights with `a = sqrt(6 / fan_in)`; zero biases.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = params.blocks.iter_mut().chain(std::iter::once(&mut params.head));
    for layer in layers {
        let s = layer.weights.shape();
        let fan_in = s[1] * s[2] * s[3];
        let a = (6.0 / fan_in as f64).sqrt();
        for w in layer.weights.data_mut() {
            *w = rng.gen_range(-a..=a);
        }
    }
    Ok(params)
}

/// Intermediates kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input_shape: Vec<usize>,
    /// Input to each block's convolution (the image, then pooled activations).
    block_inputs: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
    /// Post-ReLU activation of each block: the hypercolumn taps.
    taps: Vec<Tensor>,
    pool_argmax: Vec<Vec<usize>>,
    hypercolumn: Tensor,
    probs: Tensor,
}

impl ForwardCache {
    pub fn taps(&self) -> &[Tensor] {
        &self.taps
    }

    pub fn hypercolumn(&self) -> &Tensor {
        &self.hypercolumn
    }

    /// Distance of the forward pass from the nearest non-smooth point: the
    /// smallest |pre-activation| and the smallest gap between the winner and
    /// runner-up of any max-pool window that passes a positive value.
    pub fn smoothness_margin(&self) -> f64 {
        let relu_margin = self
            .pre_activations
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let mut pool_margin = f64::INFINITY;
        for (tap, argmax) in self.taps.iter().zip(&self.pool_argmax) {
            let (_, _, w) = tap.dims3().expect("rank-3 tap");
            let x = tap.data();
            for &best in argmax {
                if x[best] <= 0.0 {
                    continue;
                }
                // window top-left from the winner's position
                let (row, col) = (best / w, best % w);
                let top = (row - row % 2) * w + (col - col % 2);
                for idx in [top, top + 1, top + w, top + w + 1] {
                    if idx != best {
                        pool_margin = pool_margin.min(x[best] - x[idx]);
                    }
                }
            }
        }
        relu_margin.min(pool_margin)
    }
}

/// Runs the network on a `[C, H, W]` image and returns `[4, H, W]` probabilities.
pub fn forward(
    params: &ModelParams,
    cfg: &EncoderConfig,
    image: &Tensor,
) -> Result<(FeatureMask, ForwardCache)> {
    cfg.validate()?;
    params.check_against(cfg)?;
    let (c, h, w) = image.dims3()?;
    if c != cfg.input_channels {
        return Err(Error::shape(format!(
            "image has {c} channels but the encoder expects {}",
            cfg.input_channels
        )));
    }
    cfg.check_input_size(h, w)?;

    let n = cfg.block_count();
    let mut block_inputs = Vec::with_capacity(n);
    let mut pre_activations = Vec::with_capacity(n);
    let mut taps = Vec::with_capacity(n);
    let mut pool_argmax = Vec::with_capacity(n.saturating_sub(1));
    let mut x = image.clone();
    for (k, layer) in params.blocks.iter().enumerate() {
        let pre = conv2d(&x, &layer.weights, &layer.bias, &BLOCK_CONV)?;
        let act = relu(&pre);
        block_inputs.push(x);
        pre_activations.push(pre);
        x = if k + 1 < n {
            let pooled = maxpool2d(&act)?;
            pool_argmax.push(pooled.argmax);
            pooled.output
        } else {
            Tensor::zeros(&[1])
        };
        taps.push(act);
    }

    let resized: Vec<Tensor> = taps
        .iter()
        .map(|t| {
            let (_, th, tw) = t.dims3()?;
            if (th, tw) == (h, w) {
                Ok(t.clone())
            } else {
                bilinear_resize(t, h, w)
            }
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = resized.iter().collect();
    let hypercolumn = concat_channels(&refs)?;
    let logits = conv2d(&hypercolumn, &params.head.weights, &params.head.bias, &HEAD_CONV)?;
    let probs = sigmoid(&logits);

    let cache = ForwardCache {
        input_shape: image.shape().to_vec(),
        block_inputs,
        pre_activations,
        taps,
        pool_argmax,
        hypercolumn,
        probs: probs.clone(),
    };
    Ok((FeatureMask::new(probs)?, cache))
}

/// Gradients of `sum(grad_probs ⊙ probs)` with respect to every parameter and
/// the input image.
pub fn backward(
    params: &ModelParams,
    cfg: &EncoderConfig,
    cache: &ForwardCache,
    grad_probs: &Tensor,
) -> Result<(ModelParams, Tensor)> {
    params.check_against(cfg)?;
    if cache.taps.len() != cfg.block_count() {
        return Err(Error::shape(format!(
            "cache holds {} blocks but the encoder has {}",
            cache.taps.len(),
            cfg.block_count()
        )));
    }
    if grad_probs.shape() != cache.probs.shape() {
        return Err(Error::shape(format!(
            "grad_probs {:?} does not match cached output {:?}",
            grad_probs.shape(),
            cache.probs.shape()
        )));
    }
    let (_, h, w) = cache.probs.dims3()?;
    let mut grads = ModelParams::zeros(cfg);

    let grad_logits = sigmoid_backward(&cache.probs, grad_probs)?;
    let head = conv2d_backward(&cache.hypercolumn, &params.head.weights, &HEAD_CONV, &grad_logits)?;
    grads.head = ConvLayer {
        weights: head.weights,
        bias: head.bias,
    };
    let per_tap = split_channels(&head.input, &cfg.channels)?;

    // Walk the encoder backwards; `carry` is the gradient arriving at the
    // current block's activation from the pool feeding the next block.
    let mut carry: Option<Tensor> = None;
    let mut grad_image = None;
    for k in (0..cfg.block_count()).rev() {
        let tap = &cache.taps[k];
        let (_, th, tw) = tap.dims3()?;
        let mut g_act = if (th, tw) == (h, w) {
            per_tap[k].clone()
        } else {
            bilinear_resize_backward(&per_tap[k], th, tw)?
        };
        if let Some(c) = carry.take() {
            g_act.add_assign(&c)?;
        }
        let g_pre = relu_backward(&cache.pre_activations[k], &g_act)?;
        let layer = &params.blocks[k];
        let conv = conv2d_backward(&cache.block_inputs[k], &layer.weights, &BLOCK_CONV, &g_pre)?;
        grads.blocks[k] = ConvLayer {
            weights: conv.weights,
            bias: conv.bias,
        };
        if k > 0 {
            let prev_shape = cache.taps[k - 1].shape();
            carry = Some(maxpool2d_backward(
                prev_shape,
                &cache.pool_argmax[k - 1],
                &conv.input,
            )?);
        } else {
            grad_image = Some(conv.input);
        }
    }
    let grad_image = grad_image.expect("at least one block");
    debug_assert_eq!(grad_image.shape(), &cache.input_shape[..]);
    Ok((grads, grad_image))
}

const MAGIC: &[u8; 8] = b"HFCNv001";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct WeightsHeader {
    format_version: u32,
    encoder: EncoderConfig,
    classes: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Serializes parameters: the 8-byte magic, a little-endian `u64` header
/// length, the JSON header, then every value as little-endian `f64` in header
/// order.
pub fn encode_params(params: &ModelParams, cfg: &EncoderConfig) -> Result<Vec<u8>> {
    params.check_against(cfg)?;
    let header = WeightsHeader {
        format_version: FORMAT_VERSION,
        encoder: cfg.clone(),
        classes: Class::names().map(String::from).to_vec(),
        tensors: params
            .tensor_names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("weights header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a weights file into its stored encoder config and parameters.
pub fn decode_params(bytes: &[u8]) -> std::result::Result<(EncoderConfig, ModelParams), String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a weights file (bad magic)".into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < header_len {
        return Err("truncated header".into());
    }
    let header: WeightsHeader = serde_json::from_slice(&body[..header_len])
        .map_err(|e| format!("malformed header: {e}"))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        ));
    }
    if header.classes != Class::names() {
        return Err(format!("unexpected class list {:?}", header.classes));
    }
    header.encoder.validate().map_err(|e| e.to_string())?;
    let mut params = ModelParams::zeros(&header.encoder);
    let names = params.tensor_names();
    if header.tensors.len() != names.len() {
        return Err(format!(
            "header lists {} tensors, encoder implies {}",
            header.tensors.len(),
            names.len()
        ));
    }
    let mut raw = body[header_len..].chunks_exact(8);
    for ((entry, name), t) in header.tensors.iter().zip(&names).zip(params.tensors_mut()) {
        if &entry.name != name || entry.shape != t.shape() {
            return Err(format!(
                "tensor {} {:?} does not match expected {name} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            ));
        }
        for v in t.data_mut() {
            let chunk = raw.next().ok_or("truncated tensor data")?;
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if raw.next().is_some() || !raw.remainder().is_empty() {
        return Err("trailing bytes after tensor data".into());
    }
    Ok((header.encoder, params))
}

pub fn save_params(params: &ModelParams, cfg: &EncoderConfig, path: &Path) -> Result<()> {
    let bytes = encode_params(params, cfg)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a weights file together with the encoder config it was saved with.
pub fn load_model(path: &Path) -> Result<(EncoderConfig, ModelParams)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes).map_err(|m| Error::format(path, m))
}

/// Reads a weights file and checks it against the expected encoder.
pub fn load_params(path: &Path, cfg: &EncoderConfig) -> Result<ModelParams> {
    let (_, params) = load_model(path)?;
    params
        .check_against(cfg)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{f1_loss, f1_loss_grad, LossConfig};
    use crate::tensor::gradcheck;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            input_channels: 1,
            channels: vec![2, 2],
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let cfg = EncoderConfig::default();
        let a = init_params(&cfg, 9).unwrap();
        let b = init_params(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&cfg, 10).unwrap());
        for layer in a.blocks.iter().chain([&a.head]) {
            assert!(layer.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_spread_matches_uniform_moments() {
        let cfg = EncoderConfig {
            input_channels: 32,
            channels: vec![64],
        };
        let p = init_params(&cfg, 3).unwrap();
        let w = p.blocks[0].weights.data();
        assert_eq!(p.blocks[0].weights.shape(), &[64, 32, 3, 3]);
        let a = (6.0f64 / (32.0 * 9.0)).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let expect = a / 3f64.sqrt();
        assert!((std - expect).abs() < 0.2 * expect, "{std} vs {expect}");
        assert!(w.iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn zero_params_give_half() {
        let cfg = EncoderConfig::default();
        let params = ModelParams::zeros(&cfg);
        let img = Tensor::full(&[3, 32, 32], 0.3);
        let (probs, cache) = forward(&params, &cfg, &img).unwrap();
        assert!(probs.as_tensor().data().iter().all(|&v| v == 0.5));
        assert_eq!(cache.taps()[0].shape(), &[8, 32, 32]);
        assert_eq!(cache.taps()[4].shape(), &[64, 2, 2]);
        assert_eq!(cache.hypercolumn().shape(), &[184, 32, 32]);
        assert_eq!(cfg.hypercolumn_channels(), 184);
    }

    #[test]
    fn output_follows_input_size() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for size in [16, 48, 64] {
            let img = random_image(&mut rng, 3, size, size);
            let (probs, _) = forward(&params, &cfg, &img).unwrap();
            assert_eq!(probs.as_tensor().shape(), &[4, size, size]);
        }
        let img = random_image(&mut rng, 3, 32, 48);
        assert_eq!(forward(&params, &cfg, &img).unwrap().0.as_tensor().shape(), &[4, 32, 48]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = EncoderConfig::default();
        let params = ModelParams::zeros(&cfg);
        let err = forward(&params, &cfg, &Tensor::zeros(&[3, 60, 60]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("multiple of 16"), "{err}");
        assert!(forward(&params, &cfg, &Tensor::zeros(&[1, 64, 64])).is_err());
    }

    #[test]
    fn head_can_fire_two_classes_at_once() {
        let cfg = tiny();
        let mut params = ModelParams::zeros(&cfg);
        params.head.bias = Tensor::new(vec![4], vec![3.0, 3.0, -3.0, -3.0]).unwrap();
        let (probs, _) = forward(&params, &cfg, &Tensor::zeros(&[1, 4, 4])).unwrap();
        let t = probs.as_tensor();
        assert!(t.at3(0, 1, 1) > 0.5 && t.at3(1, 1, 1) > 0.5);
        assert!(t.at3(2, 1, 1) < 0.5);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 3, 32, 32);
        let a = forward(&params, &cfg, &img).unwrap().0;
        let b = forward(&params, &cfg, &img).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let cfg = tiny();
        let params = init_params(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 1, 8, 8);
        let (_, cache) = forward(&params, &cfg, &img).unwrap();
        let (g, gi) = backward(&params, &cfg, &cache, &Tensor::zeros(&[4, 8, 8])).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(gi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_bias_gradient_is_sigmoid_weighted_sum() {
        let cfg = tiny();
        let params = init_params(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 1, 8, 8);
        let (probs, cache) = forward(&params, &cfg, &img).unwrap();
        let gp = Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let (g, _) = backward(&params, &cfg, &cache, &gp).unwrap();
        let p = probs.as_tensor();
        for c in 0..4 {
            let expect: f64 = p
                .channel(c)
                .iter()
                .zip(gp.channel(c))
                .map(|(s, g)| g * s * (1.0 - s))
                .sum();
            assert!((g.head.bias.data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let cfg = tiny();
        let params = init_params(&cfg, 4).unwrap();
        let (_, cache) = forward(&params, &cfg, &Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(backward(&params, &cfg, &cache, &Tensor::zeros(&[4, 16, 16])).is_err());
    }

    #[test]
    fn end_to_end_loss_gradient_matches_finite_differences() {
        let cfg = tiny();
        let loss_cfg = LossConfig::default();
        // draw instances until the forward pass stays clear of ReLU and pool kinks
        let (params, img, truth, probs, cache) = (6u64..)
            .find_map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = init_params(&cfg, seed).unwrap();
                let img = random_image(&mut rng, 1, 16, 16);
                let truth = Tensor::from_fn(&[4, 16, 16], |_| f64::from(rng.gen_bool(0.3)));
                let (probs, cache) = forward(&params, &cfg, &img).unwrap();
                (cache.smoothness_margin() > 1e-4).then_some((params, img, truth, probs, cache))
            })
            .unwrap();
        let gp = f1_loss_grad(probs.as_tensor(), &truth, &loss_cfg).unwrap();
        let (grads, grad_img) = backward(&params, &cfg, &cache, &gp).unwrap();

        let flat = Tensor::new(vec![params.param_count()], params.to_flat()).unwrap();
        let analytic = Tensor::new(vec![params.param_count()], grads.to_flat()).unwrap();
        let f = |x: &Tensor| {
            let mut p = params.clone();
            p.set_flat(x.data()).unwrap();
            let (probs, _) = forward(&p, &cfg, &img).unwrap();
            f1_loss(probs.as_tensor(), &truth, &loss_cfg).unwrap().loss
        };
        let rep = gradcheck(f, &analytic, &flat, 1e-5, 1e-5).unwrap();
        assert!(rep.passed, "params: {rep:?}");

        let f = |x: &Tensor| {
            let (probs, _) = forward(&params, &cfg, x).unwrap();
            f1_loss(probs.as_tensor(), &truth, &loss_cfg).unwrap().loss
        };
        let rep = gradcheck(f, &grad_img, &img, 1e-5, 1e-5).unwrap();
        assert!(rep.passed, "image: {rep:?}");
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let cfg = EncoderConfig {
            input_channels: 3,
            channels: vec![4, 6, 8],
        };
        let params = init_params(&cfg, 8).unwrap();
        let bytes = encode_params(&params, &cfg).unwrap();
        assert_eq!(&bytes[..8], b"HFCNv001");
        let (cfg2, back) = decode_params(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        let bits = |p: &ModelParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&params));
    }

    #[test]
    fn corrupted_magic_and_truncation_rejected() {
        let cfg = tiny();
        let params = init_params(&cfg, 8).unwrap();
        let mut bytes = encode_params(&params, &cfg).unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(decode_params(&bytes).unwrap_err().contains("magic"));
        let cut = &good[..good.len() - 4];
        assert!(decode_params(cut).unwrap_err().contains("truncated"));
    }

    #[test]
    fn loading_under_longer_config_names_missing_block() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let small = EncoderConfig {
            input_channels: 3,
            channels: vec![8, 16],
        };
        save_params(&init_params(&small, 1).unwrap(), &small, &path).unwrap();
        let big = EncoderConfig {
            input_channels: 3,
            channels: vec![8, 16, 32],
        };
        let err = load_params(&path, &big).unwrap_err().to_string();
        assert!(err.contains("block 3"), "{err}");
        assert!(load_params(&path, &small).is_ok());
    }
}
