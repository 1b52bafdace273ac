//! AdamW with decoupled weight decay and the staircase learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Moments per parameter tensor, aligned with the store's entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore, cfg: AdamWConfig) -> Self {
        let mut s = Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        };
        s.sync(store);
        s
    }

    /// Adds zero moments for tensors registered after construction.
    pub fn sync(&mut self, store: &ParameterStore) {
        for e in &store.entries()[self.m.len()..] {
            self.m.push(vec![0.0; e.value.numel()]);
            self.v.push(vec![0.0; e.value.numel()]);
        }
    }

    /// Whether the moments of entry `i` are still all zero.
    pub fn is_pristine(&self, i: usize) -> bool {
        self.m[i].iter().chain(&self.v[i]).all(|x| *x == 0.0)
    }
}

/// One update of every trainable tensor:
/// `θ ← θ − η (m̂ / (√v̂ + ε) + λ θ)`.
///
/// Trainable tensors without an accumulated gradient are updated with a zero
/// gradient; frozen tensors and their moments are left alone. Gradients are
/// cleared afterwards.
pub fn adamw_step(store: &mut ParameterStore, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Input(format!("learning rate {lr}")));
    }
    if opt.m.len() != store.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors, store holds {}",
            opt.m.len(),
            store.len()
        )));
    }
    if let Some(e) = store.entries().iter().find(|e| !e.trainable && e.grad.is_some()) {
        return Err(Error::Contract(format!("gradient present on frozen parameter '{}'", e.name)));
    }
    let c = opt.cfg;
    opt.step += 1;
    let bc1 = 1.0 - c.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - c.beta2.powi(opt.step as i32);
    for (i, e) in store.entries_mut().iter_mut().enumerate() {
        if !e.trainable {
            continue;
        }
        let grad = e.grad.take();
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        for (j, theta) in e.value.data_mut().iter_mut().enumerate() {
            let gj = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *theta);
        }
        if !e.value.is_finite() {
            return Err(Error::Numeric {
                op: "adamw_step",
                detail: format!("parameter '{}' diverged at step {}", e.name, opt.step),
            });
        }
    }
    Ok(())
}

/// Plateau values of the reference schedule over 30 epochs.
pub const REFERENCE_LR: [f64; 5] = [1.18e-5, 5.9e-6, 2.9e-6, 1.4e-6, 7e-7];
/// Epoch at which each reference plateau starts.
pub const REFERENCE_BOUNDARIES: [f64; 5] = [0.0, 22.0, 24.0, 26.0, 28.0];
pub const REFERENCE_EPOCHS: f64 = 30.0;

/// Staircase schedule scaled to `initial` and compressed onto `epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub epochs: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: REFERENCE_LR[0],
            epochs: REFERENCE_EPOCHS,
        }
    }
}

impl LrSchedule {
    pub fn new(initial: f64, epochs: f64) -> Result<Self> {
        if !(initial > 0.0 && initial.is_finite()) {
            return Err(Error::Config(format!("initial learning rate {initial} must be positive")));
        }
        if !(epochs > 0.0 && epochs.is_finite()) {
            return Err(Error::Config(format!("epoch budget {epochs} must be positive")));
        }
        Ok(Self { initial, epochs })
    }

    /// Multiplier relative to `initial` for every plateau.
    pub fn multipliers(&self) -> [f64; 5] {
        REFERENCE_LR.map(|v| v / REFERENCE_LR[0])
    }
}

/// Learning rate at a (possibly fractional) epoch in `[0, schedule.epochs]`.
pub fn lr_at(schedule: &LrSchedule, epoch: f64) -> Result<f64> {
    if epoch.is_nan() || epoch < 0.0 {
        return Err(Error::Input(format!("epoch {epoch} is negative")));
    }
    if epoch > schedule.epochs {
        return Err(Error::Input(format!("epoch {epoch} beyond the {} epoch budget", schedule.epochs)));
    }
    let reference = if schedule.epochs == REFERENCE_EPOCHS {
        epoch
    } else {
        epoch * REFERENCE_EPOCHS / schedule.epochs
    };
    let plateau = REFERENCE_BOUNDARIES.iter().rposition(|b| reference >= *b).unwrap_or(0);
    if schedule.initial == REFERENCE_LR[0] {
        return Ok(REFERENCE_LR[plateau]);
    }
    Ok(schedule.initial * (REFERENCE_LR[plateau] / REFERENCE_LR[0]))
}

/// Square-root batch-size rule: `η · √(actual / recommended)`.
pub fn scale_lr(recommended_lr: f64, recommended_batch: usize, actual_batch: usize) -> Result<f64> {
    if recommended_batch == 0 || actual_batch == 0 {
        return Err(Error::Input("batch sizes must be positive".into()));
    }
    Ok(recommended_lr * (actual_batch as f64 / recommended_batch as f64).sqrt())
}
