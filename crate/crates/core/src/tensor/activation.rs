use super::Tensor;
use crate::error::Result;

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `grad_output` where `input > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    input.expect_same_shape(grad_output, "relu_backward")?;
    Ok(Tensor::from_fn(input.shape(), |i| {
        if input.data()[i] > 0.0 {
            grad_output.data()[i]
        } else {
            0.0
        }
    }))
}

/// Logistic function evaluated so that `exp` never overflows.
#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

/// Gradient through the sigmoid, expressed with its output `s`: `g · s(1 − s)`.
pub fn sigmoid_backward(output: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    output.expect_same_shape(grad_output, "sigmoid_backward")?;
    Ok(Tensor::from_fn(output.shape(), |i| {
        let s = output.data()[i];
        grad_output.data()[i] * s * (1.0 - s)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::new(vec![3], vec![0.1, 4.0, 2.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn relu_backward_masks_non_positive() {
        let x = Tensor::new(vec![4], vec![-1.0, 0.0, 2.0, 1e-300]).unwrap();
        let g = Tensor::new(vec![4], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 7.0, 8.0]);
    }

    #[test]
    fn relu_gradcheck_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[2, 5, 5], |_| {
            let mag = rng.gen_range(1e-3..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        });
        let w = Tensor::from_fn(x.shape(), |_| rng.gen_range(-1.0..1.0));
        let analytic = relu_backward(&x, &w).unwrap();
        let f = |t: &Tensor| relu(t).dot(&w).unwrap();
        let rep = gradcheck(f, &analytic, &x, 1e-5, 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
    }

    #[test]
    fn sigmoid_symmetry() {
        for k in -400..=400 {
            let v = k as f64 * 0.137;
            let sum = sigmoid_scalar(v) + sigmoid_scalar(-v);
            assert!((sum - 1.0).abs() <= 2.0 * f64::EPSILON, "v={v} sum={sum}");
        }
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert!((sigmoid_scalar(50.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid_scalar(-50.0).abs() < 1e-15);
        assert!(sigmoid_scalar(-50.0) > 0.0);
        assert_eq!(sigmoid_scalar(1e4), 1.0);
        assert_eq!(sigmoid_scalar(-1e4), 0.0);
        assert!(sigmoid_scalar(f64::MAX).is_finite());
        assert!(sigmoid_scalar(f64::MIN).is_finite());
    }

    #[test]
    fn sigmoid_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-4.0..4.0));
        let w = Tensor::from_fn(x.shape(), |_| rng.gen_range(-1.0..1.0));
        let analytic = sigmoid_backward(&sigmoid(&x), &w).unwrap();
        let f = |t: &Tensor| sigmoid(t).dot(&w).unwrap();
        let rep = gradcheck(f, &analytic, &x, 1e-5, 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
