//! Adam with decoupled weight decay.

use std::collections::HashMap;

use crate::layers::Parameters;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients accumulated in `params`:
    /// `p ← p − lr·(m̂/(√v̂ + ε) + λ·p)`. Parameters are replaced by fresh
    /// leaves, which also clears their gradients.
    pub fn step<T: Scalar>(&mut self, params: &mut impl Parameters<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |name, p| {
            let n = p.len();
            let grad = p.grad();
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let data: Vec<T> = p
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64_lossy());
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let x = x.to_f64_lossy();
                    let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + eps) + wd * x;
                    s(x - lr * upd)
                })
                .collect();
            *p = Tensor::param(p.shape(), data).unwrap();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::join;

    struct One(Tensor<f64>);

    impl Parameters<f64> for One {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            f(&join(prefix, "x"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f(&join(prefix, "x"), &mut self.0);
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = One(Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut opt = Adam::new(0.01, 0.1);
        opt.step(&mut p);
        let want = [1.0 * 0.999, -2.0 * 0.999, 0.5 * 0.999];
        assert!(p.0.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(p.0.grad().is_none());
    }

    #[test]
    fn quadratic_converges() {
        let mut p = One(Tensor::param(&[2], vec![1.0, -0.6]).unwrap());
        let mut opt = Adam::new(0.01, 0.0);
        let start = p.0.square().sum().item();
        for _ in 0..200 {
            p.0.square().sum().backward().unwrap();
            opt.step(&mut p);
        }
        let end = p.0.square().sum().item();
        assert!(end < 1e-2 * start, "{start} -> {end}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first step exactly lr·sign(g)
        let mut p = One(Tensor::param(&[2], vec![3.0, -3.0]).unwrap());
        p.0.square().sum().backward().unwrap();
        let mut opt = Adam::new(0.05, 0.0);
        opt.step(&mut p);
        assert!((p.0.data()[0] - 2.95).abs() < 1e-9);
        assert!((p.0.data()[1] + 2.95).abs() < 1e-9);
    }
}
