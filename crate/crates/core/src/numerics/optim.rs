use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Adaptive-moment optimiser with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        let all: Vec<usize> = (0..params.len()).collect();
        self.step_subset(params, grads, &all);
    }

    /// Updates only `params[which[k]]`, using moment slot `k`. Tensors not
    /// listed are left untouched, weight decay included.
    pub fn step_subset(&mut self, params: &mut [Tensor], grads: &[Tensor], which: &[usize]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, &j) in which.iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in params[j].data_mut().iter_mut().zip(grads[j].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = vec![Tensor::vector(vec![3.0, -2.0])];
        let mut opt = Adam::new(0.1, 0.0, [2]);
        for _ in 0..500 {
            let g = vec![Tensor::vector(p[0].data().iter().map(|x| 2.0 * x).collect())];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        let after: f64 = g[0].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
