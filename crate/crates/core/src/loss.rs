//! Spread loss and its epoch-indexed margin schedule.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Margin that starts small and grows every `period` epochs until `cap`,
/// which keeps early training from killing off capsules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSchedule {
    pub initial: f64,
    pub step: f64,
    pub period: usize,
    pub cap: f64,
}

impl Default for MarginSchedule {
    fn default() -> Self {
        MarginSchedule {
            initial: 0.2,
            step: 0.1,
            period: 2,
            cap: 0.9,
        }
    }
}

impl MarginSchedule {
    pub fn margin_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.period) as f64;
        (self.initial + self.step * steps).min(self.cap)
    }
}

/// Spread loss: `sum_{j != t} max(0, m - (a_t - a_j))^2`, averaged over the
/// batch. `activations` is `[N, classes]` (or `[classes]` for one sample),
/// `targets` one class index per row.
pub fn spread_loss<F: Scalar>(
    activations: &Tensor<F>,
    targets: &[usize],
    margin: f64,
) -> TensorResult<F> {
    let acts = match activations.rank() {
        2 => activations.clone(),
        1 => activations.reshape(vec![1, activations.numel()])?,
        _ => {
            return Err(TensorError::Invalid {
                op: "spread_loss",
                msg: format!("activations must be [N, classes], got {:?}", activations.shape()),
            })
        }
    };
    let (n, classes) = (acts.shape()[0], acts.shape()[1]);
    if targets.len() != n {
        return Err(TensorError::Invalid {
            op: "spread_loss",
            msg: format!("{} targets for batch of {n}", targets.len()),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(TensorError::Invalid {
            op: "spread_loss",
            msg: format!("target {bad} out of range for {classes} classes"),
        });
    }
    if !(0.0 < margin && margin < 1.0) {
        return Err(TensorError::Invalid {
            op: "spread_loss",
            msg: format!("margin {margin} outside (0, 1)"),
        });
    }

    let mut onehot = vec![F::zero(); n * classes];
    let mut others = vec![F::one(); n * classes];
    for (row, &t) in targets.iter().enumerate() {
        onehot[row * classes + t] = F::one();
        others[row * classes + t] = F::zero();
    }
    let onehot = Tensor::from_vec(vec![n, classes], onehot)?;
    let others = Tensor::from_vec(vec![n, classes], others)?;

    let a_t = acts.mul(&onehot)?.sum(&[1], true)?; // [N, 1]
    // margin - (a_t - a_j), hinged and squared, target column masked out
    let violation = acts
        .sub(&a_t)?
        .add_scalar(F::cast_from(margin))?
        .relu()?
        .square()?
        .mul(&others)?;
    violation.sum(&[1], false)?.mean(&[0], false)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn direct_evaluation_example() {
        // a_t = 0.9, others {0.2, 0.5}, m = 0.5 -> 0 + 0.01
        let a = T::from_vec(vec![3], vec![0.9, 0.2, 0.5]).unwrap();
        let l = spread_loss(&a, &[0], 0.5).unwrap();
        assert!((l.item() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn satisfied_margins_give_exact_zero() {
        let a = T::from_vec(vec![3], vec![0.9, 0.1, 0.3]).unwrap();
        let l = spread_loss(&a, &[0], 0.5).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn equal_activations_two_classes() {
        // all equal, m = 0.2, 2 classes -> 0.2^2 = 0.04
        let a = T::from_vec(vec![2], vec![0.4, 0.4]).unwrap();
        let l = spread_loss(&a, &[1], 0.2).unwrap();
        assert!((l.item() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn batch_mean_reduction() {
        let a = T::from_vec(vec![2, 2], vec![0.9, 0.1, 0.4, 0.4]).unwrap();
        let l = spread_loss(&a, &[0, 1], 0.2).unwrap();
        // row 0 satisfied (0.8 >= 0.2) -> 0; row 1 -> 0.04; mean = 0.02
        assert!((l.item() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn non_target_permutation_invariant() {
        let a1 = T::from_vec(vec![4], vec![0.6, 0.1, 0.5, 0.3]).unwrap();
        let a2 = T::from_vec(vec![4], vec![0.6, 0.3, 0.1, 0.5]).unwrap();
        let l1 = spread_loss(&a1, &[0], 0.4).unwrap().item();
        let l2 = spread_loss(&a2, &[0], 0.4).unwrap().item();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_target_and_margin() {
        let a = T::from_vec(vec![2], vec![0.5, 0.5]).unwrap();
        assert!(spread_loss(&a, &[2], 0.5).is_err());
        assert!(spread_loss(&a, &[0], 0.0).is_err());
        assert!(spread_loss(&a, &[0], 1.0).is_err());
    }

    #[test]
    fn gradient_signs() {
        // d loss / d a_t <= 0, d loss / d violating a_j >= 0
        let a = T::param(vec![3], vec![0.5, 0.45, 0.1]).unwrap();
        let l = spread_loss(&a, &[0], 0.3).unwrap();
        l.backward().unwrap();
        let g = a.grad().unwrap();
        assert!(g[0] < 0.0); // target pushes up
        assert!(g[1] > 0.0); // violator pushes down
        assert_eq!(g[2], 0.0); // satisfied class untouched
    }

    #[test]
    fn margin_schedule_sequence() {
        let s = MarginSchedule::default();
        let expect = [0.2, 0.2, 0.3, 0.3, 0.4, 0.4, 0.5, 0.5, 0.6, 0.6];
        for (e, &m) in expect.iter().enumerate() {
            assert!((s.margin_at(e) - m).abs() < 1e-12);
        }
        assert!((s.margin_at(100) - 0.9).abs() < 1e-15);
        assert!((s.margin_at(2) - 0.3).abs() < 1e-12);
        assert!((s.margin_at(3) - 0.3).abs() < 1e-12);
    }
}
