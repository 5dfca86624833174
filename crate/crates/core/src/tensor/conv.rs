//! 2-D convolution (NCHW) via im2col + GEMM, with zero padding.

use super::{GradFn, Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col<F: Scalar>(x: &[F], d: &ConvDims, sample: usize, col: &mut [F]) {
    let ConvDims {
        ci, h, w, kh, kw, stride, pad, ho, wo, ..
    } = *d;
    let xs = &x[sample * ci * h * w..];
    let mut row = 0usize;
    for c in 0..ci {
        let plane = &xs[c * h * w..(c + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let src_r = (i * stride + u) as isize - pad as isize;
                    if src_r < 0 || src_r >= h as isize {
                        dst[i * wo..(i + 1) * wo].iter_mut().for_each(|t| *t = F::zero());
                        continue;
                    }
                    let base = src_r as usize * w;
                    for j in 0..wo {
                        let src_c = (j * stride + v) as isize - pad as isize;
                        dst[i * wo + j] = if src_c < 0 || src_c >= w as isize {
                            F::zero()
                        } else {
                            plane[base + src_c as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_accumulate<F: Scalar>(col: &[F], d: &ConvDims, sample: usize, dx: &mut [F]) {
    let ConvDims {
        ci, h, w, kh, kw, stride, pad, ho, wo, ..
    } = *d;
    let xs = &mut dx[sample * ci * h * w..(sample + 1) * ci * h * w];
    let mut row = 0usize;
    for c in 0..ci {
        for u in 0..kh {
            for v in 0..kw {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let dst_r = (i * stride + u) as isize - pad as isize;
                    if dst_r < 0 || dst_r >= h as isize {
                        continue;
                    }
                    let base = c * h * w + dst_r as usize * w;
                    for j in 0..wo {
                        let dst_c = (j * stride + v) as isize - pad as isize;
                        if dst_c >= 0 && dst_c < w as isize {
                            xs[base + dst_c as usize] += src[i * wo + j];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

struct Conv2dGrad {
    dims: ConvDims,
}

impl<F: Scalar> GradFn<F> for Conv2dGrad {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        _out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let d = &self.dims;
        let (x, w) = (&parents[0], &parents[1]);
        let ckk = d.ci * d.kh * d.kw;
        let owo = d.ho * d.wo;
        let mut col = vec![F::zero(); ckk * owo];

        let mut dw = if w.requires_grad() {
            Some(vec![F::zero(); w.numel()])
        } else {
            None
        };
        let mut dx = if x.requires_grad() {
            Some(vec![F::zero(); x.numel()])
        } else {
            None
        };
        let mut dcol = if dx.is_some() {
            vec![F::zero(); ckk * owo]
        } else {
            Vec::new()
        };

        for nn in 0..d.n {
            let g = &grad[nn * d.co * owo..(nn + 1) * d.co * owo];
            if let Some(dw) = &mut dw {
                im2col(x.data(), d, nn, &mut col);
                // dW += g (co x owo) @ col^T (owo x ckk)
                F::gemm(
                    d.co,
                    owo,
                    ckk,
                    F::one(),
                    g,
                    owo as isize,
                    1,
                    &col,
                    1,
                    owo as isize,
                    F::one(),
                    dw,
                    ckk as isize,
                    1,
                );
            }
            if let Some(dx) = &mut dx {
                // dcol = W^T (ckk x co) @ g (co x owo)
                F::gemm(
                    ckk,
                    d.co,
                    owo,
                    F::one(),
                    w.data(),
                    1,
                    ckk as isize,
                    g,
                    owo as isize,
                    1,
                    F::zero(),
                    &mut dcol,
                    owo as isize,
                    1,
                );
                col2im_accumulate(&dcol, d, nn, dx);
            }
        }
        vec![dx, dw]
    }
}

impl<F: Scalar> Tensor<F> {
    /// 2-D convolution: `self` is `[N, Ci, H, W]`, `weight` is
    /// `[Co, Ci, Kh, Kw]`. Symmetric zero padding, square stride.
    pub fn conv2d(&self, weight: &Tensor<F>, stride: usize, pad: usize) -> TensorResult<F> {
        if self.rank() != 4 || weight.rank() != 4 || self.shape()[1] != weight.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".to_string(),
            });
        }
        let (n, ci, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (co, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let dims = ConvDims {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = ci * kh * kw;
        let owo = ho * wo;
        let mut col = vec![F::zero(); ckk * owo];
        let mut out = vec![F::zero(); n * co * owo];
        for nn in 0..n {
            im2col(self.data(), &dims, nn, &mut col);
            F::gemm(
                co,
                ckk,
                owo,
                F::one(),
                weight.data(),
                ckk as isize,
                1,
                &col,
                owo as isize,
                1,
                F::zero(),
                &mut out[nn * co * owo..(nn + 1) * co * owo],
                owo as isize,
                1,
            );
        }
        Ok(Tensor::from_op(
            vec![n, co, ho, wo],
            out,
            vec![self.clone(), weight.clone()],
            Box::new(Conv2dGrad { dims }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_kernel_sums_input() {
        // conv2d(3x3 input, 3x3 kernel of ones, stride 1, no padding) -> input sum
        let x = Tensor::<f64>::from_vec(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let w = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
        let y = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 45.0);
    }

    #[test]
    fn stride_two_padded_halves_extent() {
        // 3x3 s2 p1 gives ceil(n/2): 5 -> 3, 4 -> 2
        let x = Tensor::<f64>::zeros(vec![1, 1, 5, 4]);
        let w = Tensor::<f64>::zeros(vec![2, 1, 3, 3]);
        let y = x.conv2d(&w, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 2]);
    }

    #[test]
    fn known_valid_convolution() {
        // 2x2 kernel over 2x3 input, stride 1, no pad.
        let x = Tensor::<f64>::from_vec(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let w = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[6.0, 8.0]); // 1+5, 2+6
    }

    #[test]
    fn kernel_larger_than_input_rejected() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        assert!(x.conv2d(&w, 1, 0).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![1, 3, 3, 3]);
        assert!(x.conv2d(&w, 1, 0).is_err());
    }

    #[test]
    fn backward_weight_grad_is_correlation() {
        // y = conv(x, w), loss = sum(y). dW[u,v] = sum over windows of x.
        let x = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::param(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let loss = x.conv2d(&w, 1, 0).unwrap().sum(&[0, 1, 2, 3], false).unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![10.0]);
    }
}
