use serde::{Deserialize, Serialize};

use super::layers::HasParams;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one network, indexed in `params()` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, net: &impl HasParams<T>) -> Self {
        let sizes: Vec<usize> = net.params().iter().map(|(_, p)| p.len()).collect();
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn update(&mut self, net: &mut impl HasParams<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::c(c.beta1);
        let b2 = T::c(c.beta2);
        let one = T::one();
        let corr1 = one - T::c(c.beta1.powi(t));
        let corr2 = one - T::c(c.beta2.powi(t));
        let lr = T::c(c.lr);
        let eps = T::c(c.eps);
        for (i, (_, p)) in net.params_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mh = m[j] / corr1;
                let vh = v[j] / corr2;
                p.value[j] -= lr * mh / (vh.sqrt() + eps);
                p.grad[j] = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Quad {
        p: Param<f64>,
    }

    impl HasParams<f64> for Quad {
        fn collect_params<'a>(&'a self, _: &str, out: &mut Vec<(String, &'a Param<f64>)>) {
            out.push(("p".into(), &self.p));
        }
        fn collect_params_mut<'a>(
            &'a mut self,
            _: &str,
            out: &mut Vec<(String, &'a mut Param<f64>)>,
        ) {
            out.push(("p".into(), &mut self.p));
        }
    }

    #[test]
    fn first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let mut q = Quad {
            p: Param::new(vec![2], vec![1.0, -1.0]),
        };
        let mut adam = Adam::new(AdamConfig::default(), &q);
        q.p.grad = vec![3.0, -0.5];
        adam.update(&mut q);
        assert!((q.p.value[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((q.p.value[1] - (-1.0 + 2e-4)).abs() < 1e-9);
        assert_eq!(q.p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad {
            p: Param::new(vec![1], vec![2.0]),
        };
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &q,
        );
        for _ in 0..500 {
            q.p.grad[0] = 2.0 * (q.p.value[0] - 0.5);
            adam.update(&mut q);
        }
        assert!((q.p.value[0] - 0.5).abs() < 1e-2);
    }
}
