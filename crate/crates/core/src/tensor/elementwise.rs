//! Elementwise forward ops with broadcasting and their backward rules.

use super::shape::{broadcast_shape, broadcast_strides, numel, walk1, walk2};
use super::{GradFn, Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }
}

struct BinGrad {
    kind: BinKind,
    out_shape: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for BinGrad {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        _out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let sa = broadcast_strides(&self.out_shape, a.shape());
        let sb = broadcast_strides(&self.out_shape, b.shape());
        let need_a = a.requires_grad();
        let need_b = b.requires_grad();
        let mut da = if need_a { vec![F::zero(); a.numel()] } else { Vec::new() };
        let mut db = if need_b { vec![F::zero(); b.numel()] } else { Vec::new() };
        let (ad, bd) = (a.data(), b.data());
        match self.kind {
            BinKind::Add => walk2(&self.out_shape, &sa, &sb, |i, oa, ob| {
                if need_a {
                    da[oa] += grad[i];
                }
                if need_b {
                    db[ob] += grad[i];
                }
            }),
            BinKind::Sub => walk2(&self.out_shape, &sa, &sb, |i, oa, ob| {
                if need_a {
                    da[oa] += grad[i];
                }
                if need_b {
                    db[ob] -= grad[i];
                }
            }),
            BinKind::Mul => walk2(&self.out_shape, &sa, &sb, |i, oa, ob| {
                if need_a {
                    da[oa] += grad[i] * bd[ob];
                }
                if need_b {
                    db[ob] += grad[i] * ad[oa];
                }
            }),
            BinKind::Div => walk2(&self.out_shape, &sa, &sb, |i, oa, ob| {
                let inv = F::one() / bd[ob];
                if need_a {
                    da[oa] += grad[i] * inv;
                }
                if need_b {
                    db[ob] -= grad[i] * ad[oa] * inv * inv;
                }
            }),
        }
        vec![
            if need_a { Some(da) } else { None },
            if need_b { Some(db) } else { None },
        ]
    }
}

fn binary<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, kind: BinKind) -> TensorResult<F> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        TensorError::ShapeMismatch {
            op: kind.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
    })?;
    let n = numel(&out_shape);
    let mut data = Vec::with_capacity(n);
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        // Fast path: identical shapes, contiguous zip.
        match kind {
            BinKind::Add => data.extend(ad.iter().zip(bd).map(|(&x, &y)| x + y)),
            BinKind::Sub => data.extend(ad.iter().zip(bd).map(|(&x, &y)| x - y)),
            BinKind::Mul => data.extend(ad.iter().zip(bd).map(|(&x, &y)| x * y)),
            BinKind::Div => data.extend(ad.iter().zip(bd).map(|(&x, &y)| x / y)),
        }
    } else {
        let sa = broadcast_strides(&out_shape, a.shape());
        let sb = broadcast_strides(&out_shape, b.shape());
        data.resize(n, F::zero());
        match kind {
            BinKind::Add => walk2(&out_shape, &sa, &sb, |i, oa, ob| data[i] = ad[oa] + bd[ob]),
            BinKind::Sub => walk2(&out_shape, &sa, &sb, |i, oa, ob| data[i] = ad[oa] - bd[ob]),
            BinKind::Mul => walk2(&out_shape, &sa, &sb, |i, oa, ob| data[i] = ad[oa] * bd[ob]),
            BinKind::Div => walk2(&out_shape, &sa, &sb, |i, oa, ob| data[i] = ad[oa] / bd[ob]),
        }
    }
    if kind == BinKind::Div && !data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "div".to_string(),
        });
    }
    Ok(Tensor::from_op(
        out_shape.clone(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(BinGrad { kind, out_shape }),
    ))
}

struct AffineGrad<F: Scalar> {
    mul: F,
}

impl<F: Scalar> GradFn<F> for AffineGrad<F> {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        _out_data: &[F],
        _parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        vec![Some(grad.iter().map(|&g| g * self.mul).collect())]
    }
}

struct ReluGrad;

impl<F: Scalar> GradFn<F> for ReluGrad {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        _out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let x = parents[0].data();
        vec![Some(
            grad.iter()
                .zip(x)
                .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                .collect(),
        )]
    }
}

struct SquareGrad;

impl<F: Scalar> GradFn<F> for SquareGrad {
    fn name(&self) -> &'static str {
        "square"
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        _out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let two = F::cast_from(2.0);
        let x = parents[0].data();
        vec![Some(
            grad.iter().zip(x).map(|(&g, &v)| two * v * g).collect(),
        )]
    }
}

struct SqrtGrad;

impl<F: Scalar> GradFn<F> for SqrtGrad {
    fn name(&self) -> &'static str {
        "sqrt"
    }

    fn backward(
        &self,
        grad: &[F],
        _out_shape: &[usize],
        out_data: &[F],
        _parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>> {
        let half = F::cast_from(0.5);
        vec![Some(
            grad.iter()
                .zip(out_data)
                .map(|(&g, &y)| g * half / y)
                .collect(),
        )]
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> TensorResult<F> {
        binary(self, other, BinKind::Add)
    }

    pub fn sub(&self, other: &Tensor<F>) -> TensorResult<F> {
        binary(self, other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<F>) -> TensorResult<F> {
        binary(self, other, BinKind::Mul)
    }

    /// Elementwise division. Rejects non-finite results.
    pub fn div(&self, other: &Tensor<F>) -> TensorResult<F> {
        binary(self, other, BinKind::Div)
    }

    /// `c * x + b`, elementwise with scalar constants.
    pub fn affine(&self, c: F, b: F) -> TensorResult<F> {
        let data: Vec<F> = self.data().iter().map(|&v| c * v + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(AffineGrad { mul: c }),
        ))
    }

    pub fn scale(&self, c: F) -> TensorResult<F> {
        self.affine(c, F::zero())
    }

    pub fn add_scalar(&self, b: F) -> TensorResult<F> {
        self.affine(F::one(), b)
    }

    pub fn neg(&self) -> TensorResult<F> {
        self.affine(-F::one(), F::zero())
    }

    pub fn relu(&self) -> TensorResult<F> {
        let data: Vec<F> = self
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(ReluGrad),
        ))
    }

    pub fn square(&self) -> TensorResult<F> {
        let data: Vec<F> = self.data().iter().map(|&v| v * v).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(SquareGrad),
        ))
    }

    /// Elementwise square root. Rejects negative inputs (NaN outputs).
    pub fn sqrt(&self) -> TensorResult<F> {
        let data: Vec<F> = self.data().iter().map(|&v| v.sqrt()).collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "sqrt".to_string(),
            });
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(SqrtGrad),
        ))
    }
}

// Re-exported for sibling modules that reduce broadcast gradients.
pub(crate) fn reduce_to_shape<F: Scalar>(
    g: &[F],
    out_shape: &[usize],
    target_shape: &[usize],
) -> Vec<F> {
    let mut dst = vec![F::zero(); numel(target_shape)];
    if out_shape == target_shape {
        dst.copy_from_slice(g);
        return dst;
    }
    let bs = broadcast_strides(out_shape, target_shape);
    walk1(out_shape, &bs, |i, off| dst[off] += g[i]);
    dst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_example() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_broadcasts_column() {
        let a = Tensor::<f64>::from_vec(vec![2, 1], vec![10.0, 20.0]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
    }

    #[test]
    fn mismatched_shapes_report_both() {
        let a = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        match a.add(&b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn div_by_zero_rejected() {
        let a = Tensor::<f64>::from_vec(vec![1], vec![1.0]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![1], vec![0.0]).unwrap();
        assert!(matches!(a.div(&b), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn sqrt_of_negative_rejected() {
        let a = Tensor::<f64>::from_vec(vec![1], vec![-1.0]).unwrap();
        assert!(matches!(a.sqrt(), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn broadcast_mul_backward_reduces() {
        // a: [2,1], b: [2,3]; loss = sum(a*b): da = row sums of b.
        let a = Tensor::<f64>::param(vec![2, 1], vec![2.0, 3.0]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let loss = a.mul(&b).unwrap().sum(&[0, 1], false).unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![6.0, 15.0]);
    }
}
