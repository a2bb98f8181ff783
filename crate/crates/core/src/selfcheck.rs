//! Seeded batteries of finite-difference gradient checks over the loss
//! functions and the full loss-through-model composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{dice_loss, f1_loss, f1_loss_grad, LossConfig};
use crate::model::{backward, forward, init_params, EncoderConfig, ModelParams};
use crate::tensor::{gradcheck, GradCheckReport, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Instances of each check kind.
    pub instances: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    /// Edge of the square inputs.
    pub size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 100,
            tolerance: 1e-5,
            step: 1e-5,
            seed: 0,
            size: 16,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::invalid("instances must be at least 1"));
        }
        if !(self.tolerance > 0.0 && self.step > 0.0) {
            return Err(Error::invalid("tolerance and step must be positive"));
        }
        tiny_encoder().check_input_size(self.size, self.size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    F1Loss,
    DiceLoss,
    ModelParams,
    ModelInput,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub check: CheckKind,
    pub instance: usize,
    pub max_rel_error: f64,
    /// Human-readable position of the worst element.
    pub worst_at: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }

    /// The case with the largest relative error.
    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// One conv per block, two blocks, single-channel input.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        input_channels: 1,
        channels: vec![2, 2],
    }
}

/// Smallest distance to a ReLU or pool kink the model instances must keep, so
/// central differences never straddle one.
const MIN_SMOOTHNESS: f64 = 1e-4;

fn position(shape: &[usize], flat: usize) -> String {
    let mut rest = flat;
    let mut idx = vec![0; shape.len()];
    for (d, &n) in shape.iter().enumerate().rev() {
        idx[d] = rest % n;
        rest /= n;
    }
    format!("{idx:?}")
}

fn case(check: CheckKind, instance: usize, rep: &GradCheckReport, at: impl Fn(usize) -> String) -> CaseResult {
    CaseResult {
        check,
        instance,
        max_rel_error: rep.max_rel_error,
        worst_at: rep.worst_index.map_or_else(|| "-".to_string(), at),
        analytic: rep.analytic_at_worst,
        numeric: rep.numeric_at_worst,
        passed: rep.passed,
    }
}

fn prediction_pair(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Tensor, Tensor) {
    let density = rng.gen_range(0.05..0.6);
    let pred = Tensor::from_fn(shape, |_| rng.gen_range(0.02..0.98));
    let truth = Tensor::from_fn(shape, |_| f64::from(rng.gen_bool(density)));
    (pred, truth)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `instances` F1, dice, and end-to-end model checks.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    let loss_cfg = LossConfig::default();
    let n = cfg.size;
    let mut cases = Vec::with_capacity(4 * cfg.instances);

    for i in 0..cfg.instances {
        let mut rng = rng_for(cfg.seed, i as u64);

        let shape = [4, n / 2, n / 2];
        let (pred, truth) = prediction_pair(&mut rng, &shape);
        let g = f1_loss_grad(&pred, &truth, &loss_cfg)?;
        let rep = gradcheck(
            |p| f1_loss(p, &truth, &loss_cfg).map_or(f64::NAN, |b| b.loss),
            &g,
            &pred,
            cfg.step,
            cfg.tolerance,
        )?;
        cases.push(case(CheckKind::F1Loss, i, &rep, |k| position(&shape, k)));

        let shape = [1, n, n];
        let (pred, truth) = prediction_pair(&mut rng, &shape);
        let d = dice_loss(&pred, &truth, &loss_cfg)?;
        let rep = gradcheck(
            |p| dice_loss(p, &truth, &loss_cfg).map_or(f64::NAN, |d| d.loss),
            &d.grad,
            &pred,
            cfg.step,
            cfg.tolerance,
        )?;
        cases.push(case(CheckKind::DiceLoss, i, &rep, |k| position(&shape, k)));

        let [params_case, input_case] = model_cases(cfg, i, &mut rng, &loss_cfg)?;
        cases.push(params_case);
        cases.push(input_case);
    }
    let passed = cases.iter().all(|c| c.passed);
    Ok(SuiteReport {
        config: cfg.clone(),
        cases,
        passed,
    })
}

fn model_cases(
    cfg: &SuiteConfig,
    instance: usize,
    rng: &mut ChaCha8Rng,
    loss_cfg: &LossConfig,
) -> Result<[CaseResult; 2]> {
    let enc = tiny_encoder();
    let n = cfg.size;
    // redraw until the forward pass keeps clear of non-smooth points
    let mut attempt = 0;
    let (params, image, truth, probs, cache) = loop {
        attempt += 1;
        if attempt > 1000 {
            return Err(Error::invalid(format!(
                "instance {instance}: no smooth model instance found in 1000 draws"
            )));
        }
        let params = init_params(&enc, rng.gen())?;
        let image = Tensor::from_fn(&[1, n, n], |_| rng.gen_range(0.0..1.0));
        let truth = Tensor::from_fn(&[4, n, n], |_| f64::from(rng.gen_bool(0.3)));
        let (probs, cache) = forward(&params, &enc, &image)?;
        if cache.smoothness_margin() > MIN_SMOOTHNESS {
            break (params, image, truth, probs, cache);
        }
    };
    let gp = f1_loss_grad(probs.as_tensor(), &truth, loss_cfg)?;
    let (grads, grad_image) = backward(&params, &enc, &cache, &gp)?;

    let loss_at = |p: &ModelParams, x: &Tensor| {
        forward(p, &enc, x)
            .and_then(|(probs, _)| f1_loss(probs.as_tensor(), &truth, loss_cfg))
            .map_or(f64::NAN, |b| b.loss)
    };

    let count = params.param_count();
    let flat = Tensor::new(vec![count], params.to_flat())?;
    let analytic = Tensor::new(vec![count], grads.to_flat())?;
    let mut scratch = params.clone();
    let rep = gradcheck(
        |x| {
            scratch.set_flat(x.data()).expect("same length");
            loss_at(&scratch, &image)
        },
        &analytic,
        &flat,
        cfg.step,
        cfg.tolerance,
    )?;
    let params_case = case(CheckKind::ModelParams, instance, &rep, |k| {
        params
            .locate_flat(k)
            .map_or_else(|| k.to_string(), |(name, off)| format!("{name}[{off}]"))
    });

    let rep = gradcheck(|x| loss_at(&params, x), &grad_image, &image, cfg.step, cfg.tolerance)?;
    let shape = image.shape().to_vec();
    let input_case = case(CheckKind::ModelInput, instance, &rep, |k| format!("image{}", position(&shape, k)));
    Ok([params_case, input_case])
}
