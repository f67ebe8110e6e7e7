use crate::tensor::{Float, Tensor};

pub fn leaky_relu<T: Float>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x >= T::zero() { x } else { slope * x })
}

pub fn leaky_relu_backward<T: Float>(input: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x >= T::zero() { g } else { slope * g })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Logistic function. Outputs are kept inside the open interval: the lower
/// end is clamped at the smallest normal value and the upper end one ulp
/// below 1, so a following log never sees 0 or 1.
pub fn sigmoid<T: Float>(input: &Tensor<T>) -> Tensor<T> {
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon() / T::of(2.0);
    input.map(|x| {
        let y = if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        };
        y.max(lo).min(hi)
    })
}

/// Backward through the logistic given its forward output.
pub fn sigmoid_backward<T: Float>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Tensor::from_vec(output.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_values() {
        let t = Tensor::from_vec(&[2], vec![-1.0f64, 3.0]).unwrap();
        assert_eq!(leaky_relu(&t, 0.2).data(), &[-0.2, 3.0]);
        assert_eq!(leaky_relu(&t, 0.0).data()[1], 3.0);
    }

    #[test]
    fn sigmoid_center_and_tails() {
        let t = Tensor::from_vec(&[3], vec![0.0f64, -10000.0, 10000.0]).unwrap();
        let y = sigmoid(&t);
        assert_eq!(y.data()[0], 0.5);
        assert!(y.data()[1] > 0.0 && y.data()[1] <= 1e-300);
        assert!(y.data()[2] < 1.0);
        assert!(y.is_finite());

        let t32 = Tensor::from_vec(&[2], vec![-200.0f32, 200.0]).unwrap();
        let y32 = sigmoid(&t32);
        assert!(y32.data()[0] > 0.0 && y32.data()[1] < 1.0);
    }
}
