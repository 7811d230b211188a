//! Adaptive moment estimation over the parameter tensors.

use crate::tape::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers are kept in the same fixed order as the parameter list, so
/// updates are reproducible across runs.
pub struct Adam {
    hyper: AdamHyper,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(hyper: AdamHyper, lens: &[usize]) -> Self {
        Adam {
            hyper,
            step: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.len(), g.len());
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize ||p||^2 from p = (3, -2)
        let mut p = Tensor::row_vec(vec![3.0, -2.0]);
        let mut adam = Adam::new(AdamHyper::with_lr(0.1), &[2]);
        for _ in 0..500 {
            let g = Tensor::row_vec(p.data.iter().map(|x| 2.0 * x).collect());
            adam.step(&mut [&mut p], &[g]);
        }
        assert!(p.data.iter().all(|x| x.abs() < 1e-2), "p = {:?}", p.data);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Tensor::row_vec(vec![1.0, 2.0, 3.0]);
            let mut adam = Adam::new(AdamHyper::with_lr(0.01), &[3]);
            for k in 0..50 {
                let g = Tensor::row_vec(p.data.iter().map(|x| x + k as f64).collect());
                adam.step(&mut [&mut p], &[g]);
            }
            p.data
        };
        assert_eq!(run(), run());
    }
}
