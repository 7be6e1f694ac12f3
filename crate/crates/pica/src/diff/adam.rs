//! Adam optimizer with bias correction.

use super::tensor::Tensor;
use crate::Real;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment state for a fixed list of parameter tensors.
/// The step counter is global; parameters whose gradient is absent in a step
/// keep their moments unchanged.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[Vec<usize>]) -> Adam {
        Adam {
            cfg,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` pairs with `params[i]`; `None` skips that
    /// parameter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) {
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        self.step_refs(&mut refs, grads);
    }

    /// [`Self::step`] for parameters borrowed individually (e.g. straight out
    /// of a `ParamSet`).
    pub fn step_refs(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let Some(g) = grads[i] else { continue };
            assert_eq!(g.shape, params[i].shape, "grad shape mismatch for param {}", i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for e in 0..g.data.len() {
                let gv = g.data[e];
                m.data[e] = self.cfg.beta1 * m.data[e] + (1.0 - self.cfg.beta1) * gv;
                v.data[e] = self.cfg.beta2 * v.data[e] + (1.0 - self.cfg.beta2) * gv * gv;
                let mhat = m.data[e] / b1t;
                let vhat = v.data[e] / b2t;
                params[i].data[e] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gradient_closed_form() {
        // With constant gradient g, mhat = g and vhat = g^2 exactly, so every
        // step moves the parameter by -lr * g / (|g| + eps).
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut adam = Adam::new(cfg, &[vec![1]]);
        let mut p = vec![Tensor::scalar(1.0)];
        let g = Tensor::scalar(0.5);
        for _ in 0..7 {
            adam.step(&mut p, &[Some(&g)]);
        }
        let expected = 1.0 - 7.0 * 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-5, "{} vs {}", p[0].item(), expected);
    }

    #[test]
    fn matches_reference_recurrence() {
        // Independent re-implementation of the update on a scripted gradient
        // sequence.
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &[vec![2]]);
        let mut p = vec![Tensor::new(vec![0.3, -0.8], &[2])];
        let seq: Vec<Vec<Real>> = vec![
            vec![0.1, -0.2],
            vec![-0.4, 0.9],
            vec![0.0, 0.3],
            vec![1.5, -0.1],
        ];

        let mut want = [0.3 as Real, -0.8];
        let (mut m, mut v) = ([0.0 as Real; 2], [0.0 as Real; 2]);
        for (t, g) in seq.iter().enumerate() {
            for e in 0..2 {
                m[e] = 0.9 * m[e] + 0.1 * g[e];
                v[e] = 0.999 * v[e] + 0.001 * g[e] * g[e];
                let mh = m[e] / (1.0 - (0.9 as Real).powi(t as i32 + 1));
                let vh = v[e] / (1.0 - (0.999 as Real).powi(t as i32 + 1));
                want[e] -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            }
            let gt = Tensor::new(g.clone(), &[2]);
            adam.step(&mut p, &[Some(&gt)]);
        }
        for e in 0..2 {
            assert!((p[0].data[e] - want[e]).abs() < 1e-7, "{} vs {}", p[0].data[e], want[e]);
        }
    }

    #[test]
    fn skipped_grads_leave_param_and_moments_alone() {
        let mut adam = Adam::new(AdamConfig::default(), &[vec![1], vec![1]]);
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let g = Tensor::scalar(1.0);
        adam.step(&mut p, &[Some(&g), None]);
        assert!(p[0].item() < 1.0);
        assert_eq!(p[1].item(), 2.0);
    }
}
