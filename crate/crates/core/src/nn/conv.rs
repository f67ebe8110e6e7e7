//! 2-D convolution via im2col and a single GEMM per batch chunk.

use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::tensor::{Float, Tensor};

/// Upper bound on the im2col buffer, in elements.
const COLS_BUDGET: usize = 1 << 23;

pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn new<T: Float>(input: &Tensor<T>, params: &LayerParams<T>, stride: usize, padding: usize) -> Result<Self> {
        let [n, cin, h, w] = match *input.shape() {
            [n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be [N, C, H, W], got {:?}", input.shape()),
                ))
            }
        };
        let [cout, kcin, kh, kw] = match *params.weight.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be [Cout, Cin, K, K], got {:?}", params.weight.shape()),
                ))
            }
        };
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "layer `{}` expects {kcin} input channels but input has {cin}",
                    params.name
                ),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", "only square kernels are supported"));
        }
        if params.bias.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {cout} output channels", params.bias.shape()),
            ));
        }
        let (oh, ow) = match (
            conv_output_extent(h, kh, stride, padding),
            conv_output_extent(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh} stride {stride} pad {padding} does not fit {h}x{w}"),
                ))
            }
        };
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            oh,
            ow,
            stride,
            padding,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.rows() * self.spatial()).max(1)).clamp(1, self.n.max(1))
    }

    /// Fills `cols[row, local * spatial + p]` for samples `start..start + count`.
    fn im2col<T: Float>(&self, x: &[T], start: usize, count: usize, cols: &mut [T]) {
        let sp = self.spatial();
        let width = count * sp;
        let plane = self.h * self.w;
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for local in 0..count {
                        let src = &x[((start + local) * self.cin + c) * plane..][..plane];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            let out = &mut dst[local * sp + oy * self.ow..][..self.ow];
                            if iy < 0 || iy >= self.h as isize {
                                out.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let line = &src[iy as usize * self.w..][..self.w];
                            for (ox, v) in out.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                *v = if ix < 0 || ix >= self.w as isize {
                                    T::zero()
                                } else {
                                    line[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Float>(&self, cols: &[T], start: usize, count: usize, grad: &mut [T]) {
        let sp = self.spatial();
        let width = count * sp;
        let plane = self.h * self.w;
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * width..(row + 1) * width];
                    for local in 0..count {
                        let dst = &mut grad[((start + local) * self.cin + c) * plane..][..plane];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let line = &mut dst[iy as usize * self.w..][..self.w];
                            let vals = &src[local * sp + oy * self.ow..][..self.ow];
                            for (ox, &v) in vals.iter().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    line[ix as usize] = line[ix as usize] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of an `[N, Cin, H, W]` batch with a `[Cout, Cin, K, K]` kernel.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, params, stride, padding)?;
    let (rows, sp) = (g.rows(), g.spatial());
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); rows * chunk * sp];
    let mut prod = vec![T::zero(); g.cout * chunk * sp];
    let bias = params.bias.data();
    let mut start = 0;
    while start < g.n {
        let count = chunk.min(g.n - start);
        let width = count * sp;
        g.im2col(input.data(), start, count, &mut cols);
        T::gemm(
            g.cout,
            rows,
            width,
            T::one(),
            params.weight.data(),
            rows as isize,
            1,
            &cols,
            width as isize,
            1,
            T::zero(),
            &mut prod,
            width as isize,
            1,
        );
        let dst = out.data_mut();
        for local in 0..count {
            for co in 0..g.cout {
                let o = &mut dst[((start + local) * g.cout + co) * sp..][..sp];
                let p = &prod[co * width + local * sp..][..sp];
                for (a, &b) in o.iter_mut().zip(p) {
                    *a = b + bias[co];
                }
            }
        }
        start += count;
    }
    Ok(out)
}

/// Accumulates kernel and bias gradients into `params` and returns the
/// gradient with respect to `input`.
pub fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    params: &mut LayerParams<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, params, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {:?} does not match output", grad_out.shape()),
        ));
    }
    let (rows, sp) = (g.rows(), g.spatial());
    let mut grad_in = Tensor::zeros(input.shape());
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); rows * chunk * sp];
    let mut dcols = vec![T::zero(); rows * chunk * sp];
    let mut gout = vec![T::zero(); g.cout * chunk * sp];
    let go = grad_out.data();
    let mut start = 0;
    while start < g.n {
        let count = chunk.min(g.n - start);
        let width = count * sp;
        for local in 0..count {
            for co in 0..g.cout {
                let src = &go[((start + local) * g.cout + co) * sp..][..sp];
                gout[co * width + local * sp..][..sp].copy_from_slice(src);
            }
        }
        {
            let gb = params.grad_bias.data_mut();
            for (co, b) in gb.iter_mut().enumerate() {
                *b = *b + gout[co * width..(co + 1) * width].iter().copied().sum::<T>();
            }
        }
        g.im2col(input.data(), start, count, &mut cols);
        // dW[Cout, rows] += gout[Cout, width] * cols^T
        T::gemm(
            g.cout,
            width,
            rows,
            T::one(),
            &gout,
            width as isize,
            1,
            &cols,
            1,
            width as isize,
            T::one(),
            params.grad_weight.data_mut(),
            rows as isize,
            1,
        );
        // dcols[rows, width] = W^T * gout
        T::gemm(
            rows,
            g.cout,
            width,
            T::one(),
            params.weight.data(),
            1,
            rows as isize,
            &gout,
            width as isize,
            1,
            T::zero(),
            &mut dcols,
            width as isize,
            1,
        );
        g.col2im(&dcols, start, count, grad_in.data_mut());
        start += count;
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(weight: Tensor<f64>, cout: usize) -> LayerParams<f64> {
        LayerParams::new("conv", weight, Tensor::zeros(&[cout]))
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let p = layer(Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap(), 1);
        assert_eq!(conv2d(&x, &p, 1, 0).unwrap().data(), &[6.0]);
    }

    #[test]
    fn stride_two_halves_extent() {
        let x = Tensor::zeros(&[1, 1, 48, 48]);
        let p = layer(Tensor::zeros(&[4, 1, 3, 3]), 4);
        assert_eq!(conv2d(&x, &p, 2, 1).unwrap().shape(), &[1, 4, 24, 24]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::zeros(&[1, 2, 8, 8]);
        let p = layer(Tensor::zeros(&[4, 3, 3, 3]), 4);
        let err = conv2d(&x, &p, 1, 1).unwrap_err().to_string();
        assert!(err.contains("3 input channels"), "{err}");
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let p = layer(Tensor::zeros(&[1, 1, 5, 5]), 1);
        assert!(conv2d(&x, &p, 1, 0).is_err());
    }

    #[test]
    fn matches_direct_convolution() {
        // 1x1x3x3 input, 2x2 kernel, stride 1, pad 0, direct sum by hand.
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let mut p = layer(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap(), 1);
        p.bias = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = conv2d(&x, &p, 1, 0).unwrap();
        // x[i][j] - x[i+1][j+1] = -4 everywhere, plus bias.
        assert_eq!(y.data(), &[-3.5; 4]);
    }
}
