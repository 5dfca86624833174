//! Matrix multiply on the trailing two axes with broadcast leading axes.

use super::shape::{broadcast_shape, broadcast_strides, numel, walk1};
use super::{GradFn, Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;

/// Per-batch base offsets of both operands for a broadcast batch walk.
fn batch_offsets(batch_shape: &[usize], operand_batch_shape: &[usize], mat_len: usize) -> Vec<usize> {
    let bs = broadcast_strides(batch_shape, operand_batch_shape);
    // Scale strides by the matrix element count to get flat offsets.
    let scaled: Vec<usize> = bs.iter().map(|&s| s * mat_len).collect();
    let mut offs = Vec::with_capacity(numel(batch_shape).max(1));
    if batch_shape.is_empty() {
        offs.push(0);
        return offs;
    }
    walk1(batch_shape, &scaled, |_, off| offs.push(off));
    offs
}

struct MatmulGrad {
    m: usize,
    k: usize,
    n: usize,
    batch_shape: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for MatmulGrad {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        _out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let a_batch = &a.shape()[..a.rank() - 2];
        let b_batch = &b.shape()[..b.rank() - 2];
        let a_offs = batch_offsets(&self.batch_shape, a_batch, m * k);
        let b_offs = batch_offsets(&self.batch_shape, b_batch, k * n);
        let batches = a_offs.len();
        let (ad, bd) = (a.data(), b.data());

        let da = if a.requires_grad() {
            let mut da = vec![F::zero(); a.numel()];
            for bi in 0..batches {
                let g = &grad[bi * m * n..(bi + 1) * m * n];
                let bsl = &bd[b_offs[bi]..b_offs[bi] + k * n];
                // dA = g @ B^T  (m x n) @ (n x k)
                F::gemm(
                    m,
                    n,
                    k,
                    F::one(),
                    g,
                    n as isize,
                    1,
                    bsl,
                    1,
                    n as isize,
                    F::one(),
                    &mut da[a_offs[bi]..a_offs[bi] + m * k],
                    k as isize,
                    1,
                );
            }
            Some(da)
        } else {
            None
        };

        let db = if b.requires_grad() {
            let mut db = vec![F::zero(); b.numel()];
            for bi in 0..batches {
                let g = &grad[bi * m * n..(bi + 1) * m * n];
                let asl = &ad[a_offs[bi]..a_offs[bi] + m * k];
                // dB = A^T @ g  (k x m) @ (m x n)
                F::gemm(
                    k,
                    m,
                    n,
                    F::one(),
                    asl,
                    1,
                    k as isize,
                    g,
                    n as isize,
                    1,
                    F::one(),
                    &mut db[b_offs[bi]..b_offs[bi] + k * n],
                    n as isize,
                    1,
                );
            }
            Some(db)
        } else {
            None
        };

        vec![da, db]
    }
}

impl<F: Scalar> Tensor<F> {
    /// Batched matrix product: `[.., m, k] @ [.., k, n] -> [.., m, n]` with
    /// numpy-style broadcasting of the leading axes.
    pub fn matmul(&self, other: &Tensor<F>) -> TensorResult<F> {
        if self.rank() < 2 || other.rank() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, ka) = (
            self.shape()[self.rank() - 2],
            self.shape()[self.rank() - 1],
        );
        let (kb, n) = (
            other.shape()[other.rank() - 2],
            other.shape()[other.rank() - 1],
        );
        let a_batch = &self.shape()[..self.rank() - 2];
        let b_batch = &other.shape()[..other.rank() - 2];
        let batch_shape = broadcast_shape(a_batch, b_batch);
        if ka != kb || batch_shape.is_none() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let batch_shape = batch_shape.unwrap();
        let k = ka;
        let a_offs = batch_offsets(&batch_shape, a_batch, m * k);
        let b_offs = batch_offsets(&batch_shape, b_batch, k * n);
        let batches = a_offs.len();
        let mut out = vec![F::zero(); batches * m * n];
        let (ad, bd) = (self.data(), other.data());
        for bi in 0..batches {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                &ad[a_offs[bi]..a_offs[bi] + m * k],
                k as isize,
                1,
                &bd[b_offs[bi]..b_offs[bi] + k * n],
                n as isize,
                1,
                F::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
        let mut out_shape = batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(MatmulGrad {
                m,
                k,
                n,
                batch_shape,
            }),
        ))
    }
}
