use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where the exact value rounds to an endpoint.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let half_eps = T::epsilon() / (one + one);
    y.max(T::min_positive_value()).min(one - half_eps)
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => x.map(sigmoid_scalar),
    }
}

/// Gradient given the forward input `x`, forward output `y` and upstream `dy`.
pub fn activation_backward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let mut dx = dy.clone();
    match kind {
        Activation::Relu => {
            for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                if v <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                *g *= s * (T::one() - s);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let x = Tensor::<f64>::from_f64(&[3], &[0.0, -3.0, 3.0]).unwrap();
        assert_eq!(activation(&x, Activation::Sigmoid).data()[0], 0.5);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let x = Tensor::<f64>::scalar(0.0);
        let y = activation(&x, Activation::Sigmoid);
        let g = activation_backward(&x, &y, &Tensor::scalar(1.0), Activation::Sigmoid);
        assert_eq!(g.data()[0], 0.25);
        let h = 1e-6f64;
        let fd: f64 = (sigmoid_scalar(h) - sigmoid_scalar(-h)) / (2.0 * h);
        assert!((fd - 0.25).abs() < 1e-10);
    }

    #[test]
    fn sigmoid_stays_open_interval_at_extremes() {
        for &v in &[-1e4f32, -200.0, -50.0, 50.0, 200.0, 1e4] {
            let s = sigmoid_scalar(v);
            assert!(s > 0.0 && s < 1.0, "{} -> {}", v, s);
        }
        for &v in &[-1e4f64, -800.0, 40.0, 1e4] {
            let s = sigmoid_scalar(v);
            assert!(s > 0.0 && s < 1.0, "{} -> {}", v, s);
        }
    }
}
