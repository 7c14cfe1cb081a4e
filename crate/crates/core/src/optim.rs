//! Rectified Adam with decoupled weight decay.

use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RAdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct RAdam {
    cfg: RAdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RAdam {
    pub fn new(cfg: RAdamConfig, params: &[Tensor]) -> Self {
        RAdam {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Length of the approximated simple moving average after `t` steps.
    pub fn rho(beta2: f64, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let b2t = beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Applies one update. The variance rectification engages once the
    /// moving-average length exceeds 5; before that the step is plain momentum.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let RAdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        } = self.cfg;
        let t = self.step;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = Self::rho(b2, t);
        let rect = (rho_t > 5.0)
            .then(|| ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt());
        let decay = 1.0 - lr * wd;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((x, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *x *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let update = match rect {
                    Some(r) => lr * m_hat * r * bc2.sqrt() / (v.sqrt() + eps),
                    None => lr * m_hat,
                };
                // -0.0 - -0.0 is +0.0, so skip zero updates to keep bits intact
                if update != 0.0 {
                    *x -= update;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> RAdamConfig {
        RAdamConfig {
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn warmup_length() {
        // rho_1 = 1 exactly for beta2 = 0.999; the rectified branch starts at step 6
        assert!((RAdam::rho(0.999, 1) - 1.0).abs() < 1e-9);
        let first = (1..20).find(|&t| RAdam::rho(0.999, t) > 5.0).unwrap();
        assert_eq!(first, 6);
    }

    #[test]
    fn scalar_trajectory_matches_hand_recursion() {
        let (lr, wd) = (0.01, 0.05);
        let mut params = vec![Tensor::vector(vec![1.5])];
        let mut opt = RAdam::new(cfg(lr, wd), &params);
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=30u64 {
            let g = 2.0 * params[0].data()[0] - 0.3;
            opt.step(&mut params, &[Tensor::vector(vec![g])]);

            x *= 1.0 - lr * wd;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t as i32));
            let b2t = 0.999f64.powi(t as i32);
            let rho_inf = 1999.0;
            let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
            if rho > 5.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                let v_hat = (v / (1.0 - b2t)).sqrt();
                // written in terms of the bias-corrected second moment
                x -= lr * m_hat * r / (v_hat + 1e-8 / (1.0 - b2t).sqrt());
            } else {
                x -= lr * m_hat;
            }
            assert!((params[0].data()[0] - x).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let init = vec![Tensor::vector(vec![0.3, -2.0, 0.0, -0.0]), Tensor::full(&[2, 2], 7.5)];
        let mut params = init.clone();
        let mut opt = RAdam::new(cfg(0.0, 0.05), &params);
        for s in 0..12 {
            let grads: Vec<Tensor> = params.iter().map(|p| p.map(|v| v * 3.0 - s as f64)).collect();
            opt.step(&mut params, &grads);
        }
        for (a, b) in params.iter().zip(&init) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut params = vec![Tensor::vector(vec![2.0])];
        let mut opt = RAdam::new(cfg(0.1, 0.5), &params);
        opt.step(&mut params, &[Tensor::vector(vec![0.0])]);
        assert!((params[0].data()[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut params = vec![Tensor::vector(vec![3.0, -4.0])];
        let mut opt = RAdam::new(cfg(0.05, 0.0), &params);
        for _ in 0..2000 {
            let g = params[0].map(|v| 2.0 * (v - 1.0));
            opt.step(&mut params, &[g]);
        }
        assert!(params[0].data().iter().all(|v| (v - 1.0).abs() < 1e-2));
        assert_eq!(opt.steps_taken(), 2000);
    }
}
