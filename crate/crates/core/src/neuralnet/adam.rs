use super::{shape_err, NetError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for an ordered list of parameter tensors. The slot order
/// must stay the same from step to step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One optimizer step over all tensors. `params[i]`, `grads[i]` and
    /// `lrs[i]` describe tensor `i`.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lrs: &[f64]) -> Result<(), NetError> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return shape_err(format!(
                "{} parameter tensors, {} gradients, {} learning rates",
                params.len(),
                grads.len(),
                lrs.len()
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return shape_err(format!("optimizer holds {} slots, got {}", self.m.len(), params.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return shape_err(format!(
                    "tensor {i}: {} params, {} grads, {} moments",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                ));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        for (i, p) in params.iter_mut().enumerate() {
            let step = T::of(lrs[i] / c1);
            let sc2 = T::of(1.0 / c2);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                p[j] -= step * m[j] / ((v[j] * sc2).sqrt() + e);
            }
        }
        Ok(())
    }
}
