use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::tensor::{Float, Tensor};

fn dims<T: Float>(input: &Tensor<T>, params: &LayerParams<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let (n, d) = match *input.shape() {
        [n, d] => (n, d),
        _ => return Err(Error::shape(op, format!("input must be [N, D], got {:?}", input.shape()))),
    };
    let (wd, m) = match *params.weight.shape() {
        [a, b] => (a, b),
        _ => return Err(Error::shape(op, format!("weight must be [D, M], got {:?}", params.weight.shape()))),
    };
    if wd != d {
        return Err(Error::shape(
            op,
            format!("layer `{}` expects {wd} inputs but got {d}", params.name),
        ));
    }
    if params.bias.shape() != [m] {
        return Err(Error::shape(op, format!("bias {:?} vs {m} outputs", params.bias.shape())));
    }
    Ok((n, d, m))
}

/// `out = input * W + b` with `W` stored as `[D, M]`.
pub fn fully_connected<T: Float>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let (n, d, m) = dims(input, params, "fully_connected")?;
    let mut out = Tensor::zeros(&[n, m]);
    for row in out.data_mut().chunks_mut(m) {
        row.copy_from_slice(params.bias.data());
    }
    T::gemm(
        n,
        d,
        m,
        T::one(),
        input.data(),
        d as isize,
        1,
        params.weight.data(),
        m as isize,
        1,
        T::one(),
        out.data_mut(),
        m as isize,
        1,
    );
    Ok(out)
}

pub fn fully_connected_backward<T: Float>(
    input: &Tensor<T>,
    params: &mut LayerParams<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d, m) = dims(input, params, "fully_connected_backward")?;
    if grad_out.shape() != [n, m] {
        return Err(Error::shape("fully_connected_backward", "upstream gradient shape"));
    }
    // dW += x^T g
    T::gemm(
        d,
        n,
        m,
        T::one(),
        input.data(),
        1,
        d as isize,
        grad_out.data(),
        m as isize,
        1,
        T::one(),
        params.grad_weight.data_mut(),
        m as isize,
        1,
    );
    let gb = params.grad_bias.data_mut();
    for row in grad_out.data().chunks(m) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    // dx = g W^T
    let mut grad_in = Tensor::zeros(&[n, d]);
    T::gemm(
        n,
        m,
        d,
        T::one(),
        grad_out.data(),
        m as isize,
        1,
        params.weight.data(),
        1,
        m as isize,
        T::zero(),
        grad_in.data_mut(),
        d as isize,
        1,
    );
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_input_through() {
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0f64;
        }
        let p = LayerParams::new("fc", w, Tensor::zeros(&[3]));
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(fully_connected(&x, &p).unwrap(), x);
    }

    #[test]
    fn hand_arithmetic() {
        let p = LayerParams::new(
            "fc",
            Tensor::from_vec(&[2, 1], vec![2.0f64, 3.0]).unwrap(),
            Tensor::from_vec(&[1], vec![0.5]).unwrap(),
        );
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(fully_connected(&x, &p).unwrap().data(), &[5.5]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = LayerParams::new("fc", Tensor::<f32>::zeros(&[4, 2]), Tensor::zeros(&[2]));
        let x = Tensor::zeros(&[1, 3]);
        assert!(fully_connected(&x, &p).is_err());
    }
}
