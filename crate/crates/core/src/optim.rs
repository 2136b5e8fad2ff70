//! Adam over flat parameter vectors, plus a cosine learning-rate schedule.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Grows the moment buffers for newly added parameters.
    pub fn resize(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.len() < params.len() {
            self.resize(params.len());
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    pub(crate) fn state(&self) -> (&[f64], &[f64], u64) {
        (&self.m, &self.v, self.t)
    }

    pub(crate) fn from_state(m: Vec<f64>, v: Vec<f64>, t: u64, weight_decay: f64) -> Self {
        Self {
            m,
            v,
            t,
            ..Self::new(0, weight_decay)
        }
    }
}

/// Adam for tables where only some coordinates receive gradients per step.
/// Each coordinate keeps its own step count, so untouched entries do not
/// move and their bias correction is not advanced.
#[derive(Debug, Clone, PartialEq)]
pub struct LazyAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) t: Vec<u32>,
}

impl LazyAdam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn resize(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
        self.t.resize(len, 0);
    }

    /// Updates `params[i]` for every `(i, grad)` pair; indices must be unique.
    pub fn step(&mut self, params: &mut [f64], grads: &[(usize, f64)], lr: f64) {
        if self.m.len() < params.len() {
            self.resize(params.len());
        }
        for &(i, grad) in grads {
            let g = grad + self.weight_decay * params[i];
            self.t[i] += 1;
            let t = self.t[i] as i32;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / (1.0 - self.beta1.powi(t));
            let vhat = self.v[i] / (1.0 - self.beta2.powi(t));
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps; constant once past it.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g, 0.01);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut x = vec![1.0];
        let mut opt = Adam::new(1, 0.1);
        opt.step(&mut x, &[0.0], 0.01);
        assert!(x[0] < 1.0);
    }

    #[test]
    fn lazy_adam_matches_dense_on_touched_coordinates() {
        let mut dense_x = vec![1.0, -1.0];
        let mut lazy_x = vec![1.0, -1.0, 5.0];
        let mut dense = Adam::new(2, 0.01);
        let mut lazy = LazyAdam::new(0.01);
        for _ in 0..20 {
            let g: Vec<f64> = dense_x.iter().map(|v| 2.0 * v).collect();
            dense.step(&mut dense_x, &g, 0.05);
            let sparse: Vec<(usize, f64)> = lazy_x[..2].iter().enumerate().map(|(i, v)| (i, 2.0 * v)).collect();
            lazy.step(&mut lazy_x, &sparse, 0.05);
        }
        assert_eq!(&lazy_x[..2], &dense_x[..]);
        assert_eq!(lazy_x[2], 5.0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
    }
}
