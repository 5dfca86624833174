//! Training-mode batch normalization over (N, H, W) per channel.
//!
//! Evaluation mode is an affine map with stored statistics and is composed
//! from broadcast ops by the caller; only the batch-statistics path needs a
//! dedicated backward rule.

use super::{GradFn, Tensor, TensorError};
use crate::scalar::Scalar;

struct BatchNormGrad<F: Scalar> {
    mean: Vec<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> GradFn<F> for BatchNormGrad<F> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(
        &self,
        grad: &[F],
        out_shape: &[usize],
        _out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let (x, gamma, _beta) = (&parents[0], &parents[1], &parents[2]);
        let (n, c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
        let m = (n * h * w) as f64;
        let m_f = F::cast_from(m);
        let hw = h * w;
        let xd = x.data();
        let gd = gamma.data();

        // Per-channel sums of dxhat and dxhat * xhat.
        let mut sum_dxh = vec![F::zero(); c];
        let mut sum_dxh_xh = vec![F::zero(); c];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let inv = self.inv_std[cc];
                let mu = self.mean[cc];
                let gam = gd[cc];
                for i in 0..hw {
                    let dxh = grad[base + i] * gam;
                    let xh = (xd[base + i] - mu) * inv;
                    sum_dxh[cc] += dxh;
                    sum_dxh_xh[cc] += dxh * xh;
                }
            }
        }

        let need_x = x.requires_grad();
        let need_g = gamma.requires_grad();
        let need_b = parents[2].requires_grad();
        let mut dx = if need_x { vec![F::zero(); xd.len()] } else { Vec::new() };
        let mut dgamma = if need_g { vec![F::zero(); c] } else { Vec::new() };
        let mut dbeta = if need_b { vec![F::zero(); c] } else { Vec::new() };

        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let inv = self.inv_std[cc];
                let mu = self.mean[cc];
                let gam = gd[cc];
                for i in 0..hw {
                    let g = grad[base + i];
                    let xh = (xd[base + i] - mu) * inv;
                    if need_x {
                        let dxh = g * gam;
                        dx[base + i] =
                            inv / m_f * (m_f * dxh - sum_dxh[cc] - xh * sum_dxh_xh[cc]);
                    }
                    if need_g {
                        dgamma[cc] += g * xh;
                    }
                    if need_b {
                        dbeta[cc] += g;
                    }
                }
            }
        }

        vec![
            if need_x { Some(dx) } else { None },
            if need_g { Some(dgamma) } else { None },
            if need_b { Some(dbeta) } else { None },
        ]
    }
}

impl<F: Scalar> Tensor<F> {
    /// Batch normalization in training mode: normalizes `[N, C, H, W]` per
    /// channel with batch statistics. Returns the output plus the biased
    /// batch mean and variance so the caller can maintain running stats.
    pub fn batchnorm_train(
        &self,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: f64,
    ) -> Result<(Tensor<F>, Vec<F>, Vec<F>), TensorError> {
        if self.rank() != 4 {
            return Err(TensorError::Invalid {
                op: "batchnorm",
                msg: format!("expects [N,C,H,W], got {:?}", self.shape()),
            });
        }
        let (n, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let hw = h * w;
        let m = F::cast_from((n * hw) as f64);
        let xd = self.data();

        let mut mean = vec![F::zero(); c];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                for i in 0..hw {
                    mean[cc] += xd[base + i];
                }
            }
        }
        for v in &mut mean {
            *v = *v / m;
        }
        let mut var = vec![F::zero(); c];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let mu = mean[cc];
                for i in 0..hw {
                    let d = xd[base + i] - mu;
                    var[cc] += d * d;
                }
            }
        }
        for v in &mut var {
            *v = *v / m;
        }
        let eps_f = F::cast_from(eps);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps_f).sqrt()).collect();

        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![F::zero(); xd.len()];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let mu = mean[cc];
                let inv = inv_std[cc];
                let gam = gd[cc];
                let bet = bd[cc];
                for i in 0..hw {
                    out[base + i] = (xd[base + i] - mu) * inv * gam + bet;
                }
            }
        }

        let t = Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(BatchNormGrad {
                mean: mean.clone(),
                inv_std,
            }),
        );
        Ok((t, mean, var))
    }
}
