use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn dims4<T: Float>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expected rank 4, got {:?}", t.shape()))),
    }
}

/// Nearest-neighbour 2x upsampling of an `[N, C, H, W]` map.
pub fn upsample2x<T: Float>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(input, "upsample2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                d[y * ow + x] = s[(y / 2) * w + x / 2];
            }
        }
    }
    Ok(out)
}

/// Sums each 2x2 block of the upstream gradient into its source cell.
pub fn upsample2x_backward<T: Float>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = dims4(grad_out, "upsample2x_backward")?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::shape("upsample2x_backward", "odd spatial extent"));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut grad = Tensor::zeros(&[n, c, h, w]);
    let g = grad_out.data();
    let d = grad.data_mut();
    for plane in 0..n * c {
        let s = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let t = &mut d[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                t[(y / 2) * w + x / 2] = t[(y / 2) * w + x / 2] + s[y * ow + x];
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_into_blocks() {
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample2x(&t).unwrap();
        assert_eq!(up.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &expected);
    }

    #[test]
    fn backward_counts_block_size() {
        let g = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let back = upsample2x_backward(&g).unwrap();
        assert_eq!(back.data(), &[4.0; 4]);
    }
}
