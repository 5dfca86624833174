//! Adaptive moment estimation with bias correction; fixed learning rate,
//! no weight decay.

use crate::model::Param;
use crate::scalar::Scalar;

pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, param_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters; `grads[i]` matches `params[i]`.
    pub fn step(&mut self, params: &mut [Param<F>], grads: &[Vec<F>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = F::cast_from(self.beta1);
        let b2 = F::cast_from(self.beta2);
        let one = F::one();
        let corr1 = F::cast_from(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = F::cast_from(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::cast_from(self.lr);
        let eps = F::cast_from(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.data.len(), g.len());
            for i in 0..p.data.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state_tensors(&self, params: &[Param<F>]) -> Vec<(String, Vec<usize>, Vec<F>)> {
        let mut out = Vec::new();
        for (p, (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("adam.m.{}", p.name), p.shape.clone(), m.clone()));
            out.push((format!("adam.v.{}", p.name), p.shape.clone(), v.clone()));
        }
        out
    }

    pub fn restore_state(
        &mut self,
        t: u64,
        moments: impl Fn(&str) -> Option<Vec<F>>,
        params: &[Param<F>],
    ) -> Result<(), String> {
        self.t = t;
        for (i, p) in params.iter().enumerate() {
            let m = moments(&format!("adam.m.{}", p.name))
                .ok_or_else(|| format!("missing adam.m.{}", p.name))?;
            let v = moments(&format!("adam.v.{}", p.name))
                .ok_or_else(|| format!("missing adam.v.{}", p.name))?;
            if m.len() != p.data.len() || v.len() != p.data.len() {
                return Err(format!("moment size mismatch for {}", p.name));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: Vec<f64>) -> Param<f64> {
        Param {
            name: "w".to_string(),
            shape: vec![data.len()],
            data,
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut params = vec![param(vec![1.0])];
        let mut adam = Adam::new(0.1, 0.9, 0.999, &[1]);
        adam.step(&mut params, &[vec![2.0]]);
        // t=1: m=0.2, v=0.004, mhat=2, vhat=4 -> w -= 0.1 * 2/(2+1e-8)
        let expect = 1.0 - 0.1 * 2.0 / (4.0f64.sqrt() + 1e-8);
        assert!((params[0].data[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_moves_steadily() {
        let mut params = vec![param(vec![0.0])];
        let mut adam = Adam::new(0.01, 0.5, 0.999, &[1]);
        for _ in 0..100 {
            adam.step(&mut params, &[vec![1.0]]);
        }
        // With a constant unit gradient every bias-corrected step is ~lr.
        assert!((params[0].data[0] + 1.0).abs() < 0.05);
    }

    #[test]
    fn state_round_trip() {
        let mut params = vec![param(vec![1.0, 2.0])];
        let mut adam = Adam::new(0.1, 0.5, 0.999, &[2]);
        adam.step(&mut params, &[vec![0.3, -0.7]]);
        let state = adam.state_tensors(&params);
        let mut adam2 = Adam::new(0.1, 0.5, 0.999, &[2]);
        adam2
            .restore_state(
                adam.step_count(),
                |name| {
                    state
                        .iter()
                        .find(|(n, _, _)| n == name)
                        .map(|(_, _, d)| d.clone())
                },
                &params,
            )
            .unwrap();
        let mut p1 = params.clone();
        let mut p2 = params.clone();
        adam.step(&mut p1, &[vec![0.1, 0.1]]);
        adam2.step(&mut p2, &[vec![0.1, 0.1]]);
        assert_eq!(p1[0].data, p2[0].data);
    }
}
