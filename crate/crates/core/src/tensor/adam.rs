use super::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
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
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    /// Moment buffers are shaped after `params`.
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape().to_vec());
        Self {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update. A `None` gradient is treated as zero.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: m.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
        }
        if !(self.config.lr > 0.0) {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!("learning rate must be positive, got {}", self.config.lr),
            });
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));

        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i];
            for k in 0..m.len() {
                let gk = g.map_or(T::zero(), |g| g.data()[k]);
                m[k] = b1 * m[k] + one_b1 * gk;
                v[k] = b2 * v[k] + one_b2 * gk * gk;
                let m_hat = m[k] * inv_bc1;
                let v_hat = v[k] * inv_bc2;
                let d = p.data_mut();
                d[k] = d[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
