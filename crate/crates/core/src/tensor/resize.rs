//! Differentiable bilinear resize on the trailing two axes.

use super::{GradFn, Tensor, TensorError, TensorResult};
use crate::raster::{bilinear_axis, bilinear_plane};
use crate::scalar::Scalar;

struct ResizeGrad {
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
}

impl<F: Scalar> GradFn<F> for ResizeGrad {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        _out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let x = &parents[0];
        let planes = x.numel() / (self.sh * self.sw);
        let sy = self.sh as f64 / self.dh as f64;
        let sx = self.sw as f64 / self.dw as f64;
        let mut dx = vec![F::zero(); x.numel()];
        for p in 0..planes {
            let g = &grad[p * self.dh * self.dw..(p + 1) * self.dh * self.dw];
            let d = &mut dx[p * self.sh * self.sw..(p + 1) * self.sh * self.sw];
            for r in 0..self.dh {
                let (r0, r1, wr) = bilinear_axis(r, sy, self.sh);
                let wr = F::cast_from(wr);
                let one_wr = F::one() - wr;
                for c in 0..self.dw {
                    let (c0, c1, wc) = bilinear_axis(c, sx, self.sw);
                    let wc = F::cast_from(wc);
                    let one_wc = F::one() - wc;
                    let g_rc = g[r * self.dw + c];
                    d[r0 * self.sw + c0] += one_wr * one_wc * g_rc;
                    d[r0 * self.sw + c1] += one_wr * wc * g_rc;
                    d[r1 * self.sw + c0] += wr * one_wc * g_rc;
                    d[r1 * self.sw + c1] += wr * wc * g_rc;
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<F: Scalar> Tensor<F> {
    /// Bilinear resize of the trailing two spatial axes to (`height`, `width`),
    /// half-pixel-center sampling with edge clamping.
    pub fn bilinear_resize(&self, height: usize, width: usize) -> TensorResult<F> {
        if self.rank() < 2 {
            return Err(TensorError::Invalid {
                op: "bilinear_resize",
                msg: format!("needs rank >= 2, got shape {:?}", self.shape()),
            });
        }
        if height == 0 || width == 0 {
            return Err(TensorError::Invalid {
                op: "bilinear_resize",
                msg: "target extents must be positive".to_string(),
            });
        }
        let sh = self.shape()[self.rank() - 2];
        let sw = self.shape()[self.rank() - 1];
        let planes = self.numel() / (sh * sw);
        let mut out = vec![F::zero(); planes * height * width];
        for p in 0..planes {
            bilinear_plane(
                &self.data()[p * sh * sw..(p + 1) * sh * sw],
                sh,
                sw,
                &mut out[p * height * width..(p + 1) * height * width],
                height,
                width,
            );
        }
        let mut out_shape = self.shape().to_vec();
        let r = out_shape.len();
        out_shape[r - 2] = height;
        out_shape[r - 1] = width;
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(ResizeGrad {
                sh,
                sw,
                dh: height,
                dw: width,
            }),
        ))
    }
}
