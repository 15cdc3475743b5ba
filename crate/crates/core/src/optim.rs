//! SGD with momentum, Adam, staircase learning-rate decay, and the SWATS
//! controller that runs Adam up to a fixed step and SGD with momentum after it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
    Swats,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Swats => "swats",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            "swats" => Ok(OptimizerKind::Swats),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected adam, sgd or swats)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Adam,
    Sgd,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Adam => "adam",
            Phase::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    /// Base learning rate while in the Adam phase.
    pub adam_lr: f64,
    /// Base learning rate while in the SGD phase.
    pub sgd_lr: f64,
    /// Staircase decay factor `d` in `(0, 1]`.
    pub decay: f64,
    /// Steps per decay stair.
    pub decay_interval: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
    /// First step (0-based) taken with SGD under [`OptimizerKind::Swats`].
    pub switch_step: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            adam_lr: 1e-3,
            sgd_lr: 1e-2,
            decay: 0.95,
            decay_interval: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.9,
            switch_step: u64::MAX,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(msg));
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {} not in (0, 1]", self.decay));
        }
        if self.decay_interval == 0 {
            return bad("decay interval must be at least one step".into());
        }
        if !(self.adam_lr > 0.0) || !(self.sgd_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("momentum", self.momentum)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} not in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        format!(
            "optimizer={}\nadam_lr={}\nsgd_lr={}\ndecay={}\ndecay_interval={}\nbeta1={}\nbeta2={}\nepsilon={}\nmomentum={}\nswitch_step={}\n",
            self.kind.as_str(),
            self.adam_lr,
            self.sgd_lr,
            self.decay,
            self.decay_interval,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.momentum,
            self.switch_step,
        )
    }

    /// Inverse of [`OptimConfig::to_text`]; missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            let bad = || Error::Config(format!("invalid value {v:?} for {k}"));
            match k {
                "optimizer" => c.kind = v.parse()?,
                "adam_lr" => c.adam_lr = v.parse().map_err(|_| bad())?,
                "sgd_lr" => c.sgd_lr = v.parse().map_err(|_| bad())?,
                "decay" => c.decay = v.parse().map_err(|_| bad())?,
                "decay_interval" => c.decay_interval = v.parse().map_err(|_| bad())?,
                "beta1" => c.beta1 = v.parse().map_err(|_| bad())?,
                "beta2" => c.beta2 = v.parse().map_err(|_| bad())?,
                "epsilon" => c.epsilon = v.parse().map_err(|_| bad())?,
                "momentum" => c.momentum = v.parse().map_err(|_| bad())?,
                "switch_step" => c.switch_step = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown optimizer key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Moments, velocities and step counter of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimConfig,
    step: u64,
    phase: Phase,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros = || -> Vec<Tensor> {
            params
                .iter()
                .map(|p| Tensor::from_parts(p.shape().to_vec(), vec![0.0; p.numel()]))
                .collect()
        };
        let phase = match config.kind {
            OptimizerKind::Adam => Phase::Adam,
            OptimizerKind::Sgd => Phase::Sgd,
            OptimizerKind::Swats if config.switch_step == 0 => Phase::Sgd,
            OptimizerKind::Swats => Phase::Adam,
        };
        Ok(Self {
            config,
            step: 0,
            phase,
            m: zeros(),
            v: zeros(),
            velocity: zeros(),
        })
    }

    /// Rebuilds a state from persisted parts.
    pub fn from_parts(
        config: OptimConfig,
        step: u64,
        phase: Phase,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        velocity: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        if m.len() != v.len() || m.len() != velocity.len() {
            return Err(Error::contract("optimizer slot counts differ"));
        }
        Ok(Self {
            config,
            step,
            phase,
            m,
            v,
            velocity,
        })
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `lr0 * d^floor(t / T)` for the current phase's base rate, `t` being the
    /// number of updates applied so far.
    pub fn decayed_lr(&self) -> Result<f64> {
        self.lr_for(self.phase)
    }

    /// Phase the next update will run in.
    pub fn next_phase(&self) -> Phase {
        match self.config.kind {
            OptimizerKind::Adam => Phase::Adam,
            OptimizerKind::Sgd => Phase::Sgd,
            OptimizerKind::Swats if self.step < self.config.switch_step => Phase::Adam,
            OptimizerKind::Swats => Phase::Sgd,
        }
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> Result<f64> {
        self.lr_for(self.next_phase())
    }

    fn lr_for(&self, phase: Phase) -> Result<f64> {
        let c = &self.config;
        if !(c.decay > 0.0 && c.decay <= 1.0) {
            return Err(Error::contract(format!("decay {} not in (0, 1]", c.decay)));
        }
        if c.decay_interval == 0 {
            return Err(Error::contract("decay interval must be at least one step"));
        }
        let base = match phase {
            Phase::Adam => c.adam_lr,
            Phase::Sgd => c.sgd_lr,
        };
        let stairs = self.step / c.decay_interval;
        Ok(base * c.decay.powi(stairs.min(i32::MAX as u64) as i32))
    }

    fn check_grads(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, m)) in params.iter().zip(&self.m).enumerate() {
            if p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "optimizer slot",
                    lhs: p.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
            if p.grad().is_none() {
                return Err(Error::contract(format!("parameter {i} has no gradient")));
            }
        }
        Ok(())
    }

    /// `velocity <- μ·velocity + g; param <- param - lr·velocity`.
    pub fn sgd_momentum_step(&mut self, params: &mut [Tensor]) -> Result<()> {
        self.check_grads(params)?;
        self.phase = Phase::Sgd;
        let lr = self.decayed_lr()?;
        let mu = self.config.momentum;
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let (data, grad) = p.data_and_grad_mut();
            let grad = grad.expect("checked");
            for ((w, u), g) in data.iter_mut().zip(vel.data_mut()).zip(grad) {
                *u = mu * *u + g;
                *w -= lr * *u;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Bias-corrected Adam update.
    pub fn adam_step(&mut self, params: &mut [Tensor]) -> Result<()> {
        self.check_grads(params)?;
        self.phase = Phase::Adam;
        let lr = self.decayed_lr()?;
        let OptimConfig {
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            ..
        } = self.config;
        let t = (self.step + 1).min(i32::MAX as u64) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = p.data_and_grad_mut();
            let grad = grad.expect("checked");
            let slots = m.data_mut().iter_mut().zip(v.data_mut());
            for ((w, (mi, vi)), g) in data.iter_mut().zip(slots).zip(grad) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Adam while `step < switch_step`, SGD with momentum afterwards. The
    /// velocity starts from zero at the switch.
    pub fn swats_step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.step < self.config.switch_step {
            return self.adam_step(params);
        }
        if self.phase == Phase::Adam {
            self.check_grads(params)?;
            for vel in &mut self.velocity {
                vel.data_mut().iter_mut().for_each(|u| *u = 0.0);
            }
        }
        self.sgd_momentum_step(params)
    }

    /// Applies one update according to the configured optimizer.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        match self.config.kind {
            OptimizerKind::Adam => self.adam_step(params),
            OptimizerKind::Sgd => self.sgd_momentum_step(params),
            OptimizerKind::Swats => self.swats_step(params),
        }
    }
}
