//! Reductions over designated axes: sum, mean, global norm, and softmax.

use super::shape::{broadcast_strides, check_axes, numel, reduced_shape, walk1};
use super::{GradFn, Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;

/// Guard added under the square root of `norm` so the gradient stays finite
/// at exactly zero. Far below any test tolerance.
pub(crate) const NORM_EPS: f64 = 1e-12;

fn axes_err(op: &'static str, axes: &[usize], rank: usize) -> TensorError {
    TensorError::Invalid {
        op,
        msg: format!("invalid axes {axes:?} for rank {rank}"),
    }
}

/// Offsets of each input element into the keepdim-reduced output.
fn group_strides(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let keep = reduced_shape(in_shape, axes, true);
    broadcast_strides(in_shape, &keep)
}

struct SumGrad {
    axes: Vec<usize>,
    scale_inv_count: bool, // true for mean
}

impl<F: Scalar> GradFn<F> for SumGrad {
    fn name(&self) -> &'static str {
        if self.scale_inv_count {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        _out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let x = &parents[0];
        let gs = group_strides(x.shape(), &self.axes);
        let count: usize = self.axes.iter().map(|&a| x.shape()[a]).product();
        let w = if self.scale_inv_count {
            F::one() / F::cast_from(count as f64)
        } else {
            F::one()
        };
        let mut dx = vec![F::zero(); x.numel()];
        walk1(x.shape(), &gs, |i, off| dx[i] = grad[off] * w);
        vec![Some(dx)]
    }
}

struct NormGrad {
    axes: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for NormGrad {
    fn name(&self) -> &'static str {
        "norm"
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let x = &parents[0];
        let gs = group_strides(x.shape(), &self.axes);
        let xd = x.data();
        let mut dx = vec![F::zero(); x.numel()];
        walk1(x.shape(), &gs, |i, off| {
            dx[i] = grad[off] * xd[i] / out_data[off];
        });
        vec![Some(dx)]
    }
}

struct SoftmaxGrad {
    axes: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        grad: &[F],
        out_shape: &[usize],
        out_data: &[F],
        _parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let gs = group_strides(out_shape, &self.axes);
        let groups = numel(&reduced_shape(out_shape, &self.axes, true));
        let mut dots = vec![F::zero(); groups];
        walk1(out_shape, &gs, |i, off| {
            dots[off] += grad[i] * out_data[i];
        });
        let mut dx = vec![F::zero(); grad.len()];
        walk1(out_shape, &gs, |i, off| {
            dx[i] = out_data[i] * (grad[i] - dots[off]);
        });
        vec![Some(dx)]
    }
}

impl<F: Scalar> Tensor<F> {
    /// Sum over `axes`; with `keepdim` the reduced axes stay as extent 1.
    pub fn sum(&self, axes: &[usize], keepdim: bool) -> TensorResult<F> {
        if !check_axes(axes, self.rank()) {
            return Err(axes_err("sum", axes, self.rank()));
        }
        let keep = reduced_shape(self.shape(), axes, true);
        let gs = group_strides(self.shape(), axes);
        let mut out = vec![F::zero(); numel(&keep)];
        let xd = self.data();
        walk1(self.shape(), &gs, |i, off| out[off] += xd[i]);
        let out_shape = reduced_shape(self.shape(), axes, keepdim);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(SumGrad {
                axes: axes.to_vec(),
                scale_inv_count: false,
            }),
        ))
    }

    pub fn mean(&self, axes: &[usize], keepdim: bool) -> TensorResult<F> {
        if !check_axes(axes, self.rank()) {
            return Err(axes_err("mean", axes, self.rank()));
        }
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "mean over zero elements".to_string(),
            });
        }
        let inv = F::one() / F::cast_from(count as f64);
        let keep = reduced_shape(self.shape(), axes, true);
        let gs = group_strides(self.shape(), axes);
        let mut out = vec![F::zero(); numel(&keep)];
        let xd = self.data();
        walk1(self.shape(), &gs, |i, off| out[off] += xd[i]);
        for v in &mut out {
            *v *= inv;
        }
        let out_shape = reduced_shape(self.shape(), axes, keepdim);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(SumGrad {
                axes: axes.to_vec(),
                scale_inv_count: true,
            }),
        ))
    }

    /// Euclidean norm over `axes`: sqrt(sum(x^2) + eps^2). The tiny guard
    /// keeps the gradient finite at zero without affecting values above
    /// 1e-6 by more than ~1e-18 relative.
    pub fn norm(&self, axes: &[usize], keepdim: bool) -> TensorResult<F> {
        if !check_axes(axes, self.rank()) {
            return Err(axes_err("norm", axes, self.rank()));
        }
        let eps2 = F::cast_from(NORM_EPS * NORM_EPS);
        let keep = reduced_shape(self.shape(), axes, true);
        let gs = group_strides(self.shape(), axes);
        let mut out = vec![eps2; numel(&keep)];
        let xd = self.data();
        walk1(self.shape(), &gs, |i, off| out[off] += xd[i] * xd[i]);
        for v in &mut out {
            *v = v.sqrt();
        }
        let out_shape = reduced_shape(self.shape(), axes, keepdim);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(NormGrad {
                axes: axes.to_vec(),
            }),
        ))
    }

    /// Softmax over an axis set: exponentials normalized within each group
    /// formed by the remaining axes.
    pub fn softmax(&self, axes: &[usize]) -> TensorResult<F> {
        if !check_axes(axes, self.rank()) || axes.is_empty() {
            return Err(axes_err("softmax", axes, self.rank()));
        }
        let keep = reduced_shape(self.shape(), axes, true);
        let gs = group_strides(self.shape(), axes);
        let groups = numel(&keep);
        let xd = self.data();

        let mut maxes = vec![F::neg_infinity(); groups];
        walk1(self.shape(), &gs, |i, off| {
            if xd[i] > maxes[off] {
                maxes[off] = xd[i];
            }
        });
        let mut out = vec![F::zero(); xd.len()];
        let mut sums = vec![F::zero(); groups];
        walk1(self.shape(), &gs, |i, off| {
            let e = (xd[i] - maxes[off]).exp();
            out[i] = e;
            sums[off] += e;
        });
        walk1(self.shape(), &gs, |i, off| {
            out[i] = out[i] / sums[off];
        });

        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(SoftmaxGrad {
                axes: axes.to_vec(),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_constant_vector_is_uniform() {
        for n in [1usize, 2, 5, 9] {
            let x = Tensor::<f64>::full(vec![n], 3.7);
            let y = x.softmax(&[0]).unwrap();
            for &v in y.data() {
                assert!((v - 1.0 / n as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_positive() {
        let x = Tensor::<f64>::from_vec(vec![2, 3], vec![0.1, -4.0, 2.5, 100.0, 99.0, 98.0])
            .unwrap();
        let y = x.softmax(&[1]).unwrap();
        for row in y.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn sum_over_middle_axis() {
        let x = Tensor::<f64>::from_vec(vec![2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let s = x.sum(&[1], false).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4.0, 6.0, 12.0, 14.0]);
    }

    #[test]
    fn mean_keepdim_shape() {
        let x = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = x.mean(&[1], true).unwrap();
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.data(), &[2.0, 5.0]);
    }

    #[test]
    fn norm_matches_manual() {
        let x = Tensor::<f64>::from_vec(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let n = x.norm(&[1], false).unwrap();
        assert!((n.data()[0] - 5.0).abs() < 1e-12);
        assert!(n.data()[1] < 1e-9); // zero row: eps-guarded, effectively 0
    }

    #[test]
    fn invalid_axis_rejected() {
        let x = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(x.sum(&[2], false).is_err());
        assert!(x.softmax(&[0, 0]).is_err());
    }
}
