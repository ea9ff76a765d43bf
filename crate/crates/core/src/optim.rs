//! SGD and Adam over flat parameter vectors. Moment state is carried inside
//! the `Optimizer` value, so one optimizer serves one local training phase.

use crate::encoder::EncoderState;
use crate::params::ParameterVector;
use crate::{math, CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CoreError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, param_count: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        })
    }

    /// One descent step. Non-trainable segments are never touched; batch-norm
    /// segments are also skipped while the state is frozen.
    pub fn step(&mut self, state: &mut EncoderState, grads: &ParameterVector) -> Result<()> {
        if !state.params().same_layout(grads) {
            return Err(CoreError::LayoutMismatch);
        }
        if grads.len() != self.m.len() {
            return Err(CoreError::LayoutMismatch);
        }
        self.step += 1;
        let layout = state.spec().layout().clone();
        let frozen = state.bn_frozen;
        let lr = self.cfg.learning_rate;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for seg in layout.segments() {
                    if !seg.trainable || (frozen && seg.batch_norm) {
                        continue;
                    }
                    let g = grads.segment(seg);
                    let p = &mut state.params_mut().values_mut()[seg.offset..seg.offset + seg.len];
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = self.cfg.beta1;
                let b2 = self.cfg.beta2;
                let t = self.step as i32;
                let bias1 = 1.0 - math::powf(b1, t as f64);
                let bias2 = 1.0 - math::powf(b2, t as f64);
                for seg in layout.segments() {
                    if !seg.trainable || (frozen && seg.batch_norm) {
                        continue;
                    }
                    let g = grads.segment(seg);
                    for (k, gv) in g.iter().enumerate() {
                        let i = seg.offset + k;
                        self.m[i] = b1 * self.m[i] + (1.0 - b1) * gv;
                        self.v[i] = b2 * self.v[i] + (1.0 - b2) * gv * gv;
                        let m_hat = self.m[i] / bias1;
                        let v_hat = self.v[i] / bias2;
                        state.params_mut().values_mut()[i] -=
                            lr * m_hat / (math::sqrt(v_hat) + self.cfg.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
