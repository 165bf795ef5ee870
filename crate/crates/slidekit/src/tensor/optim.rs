use super::{lit, Element, ParamSet, TensorError};
use indexmap::IndexMap;

struct Moments<E> {
    m: Vec<E>,
    v: Vec<E>,
}

/// AdamW with decoupled weight decay. With `weight_decay = 0` this is plain
/// Adam. State is created lazily per parameter, so frozen parameters that
/// never receive a gradient never get moment buffers.
pub struct AdamW<E> {
    beta1: E,
    beta2: E,
    eps: E,
    weight_decay: E,
    t: u64,
    state: IndexMap<String, Moments<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: lit(0.9),
            beta2: lit(0.999),
            eps: lit(1e-8),
            weight_decay: lit(weight_decay),
            t: 0,
            state: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn has_state_for(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    /// One optimizer step over every parameter that has a gradient entry.
    pub fn step(
        &mut self,
        params: &mut ParamSet<E>,
        grads: &IndexMap<String, Vec<E>>,
        lr: E,
    ) -> Result<(), TensorError> {
        self.t += 1;
        let bc1 = E::one() - self.beta1.powi(self.t as i32);
        let bc2 = E::one() - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = params.get_mut(name).ok_or_else(|| {
                TensorError::ShapeMismatch(format!("gradient for unknown parameter {name}"))
            })?;
            if param.numel() != grad.len() {
                return Err(TensorError::ShapeMismatch(format!(
                    "parameter {name}: {} values vs gradient {}",
                    param.numel(),
                    grad.len()
                )));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![E::zero(); grad.len()],
                v: vec![E::zero(); grad.len()],
            });
            let data = param.data_mut();
            for i in 0..grad.len() {
                st.m[i] = self.beta1 * st.m[i] + (E::one() - self.beta1) * grad[i];
                st.v[i] = self.beta2 * st.v[i] + (E::one() - self.beta2) * grad[i] * grad[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                data[i] = data[i]
                    - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Self { base_lr, warmup_steps, total_steps, min_lr: 1e-6 }
    }

    /// Constant learning rate (no warmup, no decay).
    pub fn constant(lr: f64, total_steps: usize) -> Self {
        Self { base_lr: lr, warmup_steps: 0, total_steps, min_lr: lr }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64, TensorError> {
        if step > self.total_steps {
            return Err(TensorError::StepOutOfRange { step, total: self.total_steps });
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
