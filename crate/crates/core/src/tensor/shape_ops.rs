//! Structural ops: reshape, permute, slice, concat, broadcast.

use super::elementwise::reduce_to_shape;
use super::shape::{broadcast_shape, broadcast_strides, numel, strides, walk1};
use super::{GradFn, Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;

struct ReshapeGrad {
    in_shape: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for ReshapeGrad {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        _out_data: &[F],
        _parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let _ = &self.in_shape;
        vec![Some(grad.to_vec())]
    }
}

struct PermuteGrad {
    axes: Vec<usize>,
}

fn permute_data<F: Scalar>(data: &[F], in_shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<F>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let walk_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![F::zero(); data.len()];
    walk1(&out_shape, &walk_strides, |i, off| out[i] = data[off]);
    (out_shape, out)
}

impl<F: Scalar> GradFn<F> for PermuteGrad {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(
        &self,
        grad: &[F],
        out_shape: &[usize],
        _out_data: &[F],
        _parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        // Inverse permutation maps the gradient back.
        let mut inv = vec![0usize; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inv[a] = i;
        }
        let (_, g) = permute_data(grad, out_shape, &inv);
        vec![Some(g)]
    }
}

struct SliceGrad {
    in_shape: Vec<usize>,
    start: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for SliceGrad {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(
        &self,
        grad: &[F],
        out_shape: &[usize],
        _out_data: &[F],
        _parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let in_strides = strides(&self.in_shape);
        let base: usize = self
            .start
            .iter()
            .zip(&in_strides)
            .map(|(&s, &st)| s * st)
            .sum();
        let mut dx = vec![F::zero(); numel(&self.in_shape)];
        walk1(out_shape, &in_strides, |i, off| dx[base + off] += grad[i]);
        vec![Some(dx)]
    }
}

struct ConcatGrad {
    axis: usize,
    extents: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for ConcatGrad {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        grad: &[F],
        out_shape: &[usize],
        _out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let outer: usize = out_shape[..self.axis].iter().product();
        let inner: usize = out_shape[self.axis + 1..].iter().product();
        let total_axis: usize = self.extents.iter().sum();
        let mut outs: Vec<Option<Vec<F>>> = parents
            .iter()
            .map(|p| {
                if p.requires_grad() {
                    Some(vec![F::zero(); p.numel()])
                } else {
                    None
                }
            })
            .collect();
        let mut axis_start = 0usize;
        for (pi, &ext) in self.extents.iter().enumerate() {
            if let Some(buf) = &mut outs[pi] {
                for o in 0..outer {
                    for e in 0..ext {
                        let src = ((o * total_axis) + axis_start + e) * inner;
                        let dst = (o * ext + e) * inner;
                        buf[dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
                    }
                }
            }
            axis_start += ext;
        }
        outs
    }
}

struct BroadcastGrad {
    in_shape: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for BroadcastGrad {
    fn name(&self) -> &'static str {
        "broadcast"
    }

    fn backward(
        &self,
        grad: &[F],
        out_shape: &[usize],
        _out_data: &[F],
        _parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        vec![Some(reduce_to_shape(grad, out_shape, &self.in_shape))]
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn reshape(&self, new_shape: impl Into<Vec<usize>>) -> TensorResult<F> {
        let new_shape = new_shape.into();
        if numel(&new_shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: new_shape,
            });
        }
        Ok(Tensor::from_op(
            new_shape,
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(ReshapeGrad {
                in_shape: self.shape().to_vec(),
            }),
        ))
    }

    /// Reorder axes; `axes` is a permutation of 0..rank.
    pub fn permute(&self, axes: &[usize]) -> TensorResult<F> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("axes {axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let (out_shape, out) = permute_data(self.data(), self.shape(), axes);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(PermuteGrad {
                axes: axes.to_vec(),
            }),
        ))
    }

    /// Rectangular slice; one half-open (start, end) per axis.
    pub fn slice(&self, ranges: &[(usize, usize)]) -> TensorResult<F> {
        if ranges.len() != self.rank() {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!(
                    "{} ranges for rank {}",
                    ranges.len(),
                    self.rank()
                ),
            });
        }
        for (ax, &(s, e)) in ranges.iter().enumerate() {
            if s >= e || e > self.shape()[ax] {
                return Err(TensorError::Invalid {
                    op: "slice",
                    msg: format!("range {s}..{e} out of bounds on axis {ax} (extent {})", self.shape()[ax]),
                });
            }
        }
        let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
        let start: Vec<usize> = ranges.iter().map(|&(s, _)| s).collect();
        let in_strides = strides(self.shape());
        let base: usize = start.iter().zip(&in_strides).map(|(&s, &st)| s * st).sum();
        let mut out = vec![F::zero(); numel(&out_shape)];
        let xd = self.data();
        walk1(&out_shape, &in_strides, |i, off| out[i] = xd[base + off]);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(SliceGrad {
                in_shape: self.shape().to_vec(),
                start,
            }),
        ))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(tensors: &[&Tensor<F>], axis: usize) -> TensorResult<F> {
        if tensors.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".to_string(),
            });
        }
        let first = tensors[0];
        if axis >= first.rank() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} for rank {}", first.rank()),
            });
        }
        for t in tensors.iter().skip(1) {
            if t.rank() != first.rank()
                || (0..first.rank()).any(|ax| ax != axis && t.shape()[ax] != first.shape()[ax])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total_axis: usize = extents.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_axis;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = vec![F::zero(); numel(&out_shape)];
        let mut axis_start = 0usize;
        for (t, &ext) in tensors.iter().zip(&extents) {
            let td = t.data();
            for o in 0..outer {
                let src = o * ext * inner;
                let dst = ((o * total_axis) + axis_start) * inner;
                out[dst..dst + ext * inner].copy_from_slice(&td[src..src + ext * inner]);
            }
            axis_start += ext;
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            tensors.iter().map(|&t| t.clone()).collect(),
            Box::new(ConcatGrad { axis, extents }),
        ))
    }

    /// Broadcast to a larger shape under right-aligned rules.
    pub fn broadcast_to(&self, target: impl Into<Vec<usize>>) -> TensorResult<F> {
        let target = target.into();
        let ok = broadcast_shape(self.shape(), &target)
            .map(|s| s == target)
            .unwrap_or(false);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: target,
            });
        }
        let bs = broadcast_strides(&target, self.shape());
        let mut out = vec![F::zero(); numel(&target)];
        let xd = self.data();
        walk1(&target, &bs, |i, off| out[i] = xd[off]);
        Ok(Tensor::from_op(
            target,
            out,
            vec![self.clone()],
            Box::new(BroadcastGrad {
                in_shape: self.shape().to_vec(),
            }),
        ))
    }
}
