use crate::scalar::{real, Real};

use super::params::ParamStore;
use super::tensor::{DiffError, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Real> Default for AdamConfig<F> {
    fn default() -> Self {
        AdamConfig {
            lr: real(1e-3),
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
        }
    }
}

impl<F: Real> AdamConfig<F> {
    pub fn with_lr(lr: F) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moment buffers follow the parameter order of
/// the store they were created for; updates walk that order, so a step is
/// deterministic for a given gradient state.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: AdamConfig<F>,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>, cfg: AdamConfig<F>) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig<F> {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers and step counter, for checkpointing.
    pub fn state(&self) -> (&[Tensor<F>], &[Tensor<F>], u64) {
        (&self.m, &self.v, self.step)
    }

    /// Restores moment buffers and step counter from a checkpoint.
    pub fn restore(
        &mut self,
        m: Vec<Tensor<F>>,
        v: Vec<Tensor<F>>,
        step: u64,
    ) -> Result<(), DiffError> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(DiffError::ShapeMismatch {
                op: "adam_restore",
                detail: format!(
                    "expected {} moment tensors, got {}/{}",
                    self.m.len(),
                    m.len(),
                    v.len()
                ),
            });
        }
        for (cur, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if cur.shape() != new.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_restore",
                    detail: format!("{:?} vs {:?}", cur.shape(), new.shape()),
                });
            }
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    /// Applies one update from the gradients accumulated in `store`, then
    /// leaves the gradients untouched for the caller to clear.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<(), DiffError> {
        if self.m.len() != store.len() {
            return Err(DiffError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "optimizer built for {} params, store has {}",
                    self.m.len(),
                    store.len()
                ),
            });
        }
        self.step += 1;
        let t = self.step;
        let one = F::one();
        let bc1 = one - self.cfg.beta1.powi(t as i32);
        let bc2 = one - self.cfg.beta2.powi(t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            for &g in store.grad(id).data() {
                if !g.is_finite() {
                    return Err(DiffError::NonFinite {
                        context: format!("gradient of parameter {}", store.name(id)),
                    });
                }
            }
            let grad = store.grad(id).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let value = store.value_mut(id);
            for j in 0..grad.len() {
                let g = grad.data()[j];
                let mj = self.cfg.beta1 * m.data()[j] + (one - self.cfg.beta1) * g;
                let vj = self.cfg.beta2 * v.data()[j] + (one - self.cfg.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                value.data_mut()[j] =
                    value.data()[j] - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            if !value.all_finite() {
                return Err(DiffError::NonFinite {
                    context: format!("updated value of parameter {}", store.name(id)),
                });
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(store: &mut ParamStore<F>, max_norm: F) -> F {
    let norm = store.grad_global_norm();
    if norm > max_norm && norm > F::zero() {
        store.scale_grads(max_norm / norm);
    }
    norm
}
