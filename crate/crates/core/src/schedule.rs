//! Training-phase logic: ops phase plan, KLD annealing, optimizer settings per
//! phase, Polyak averaging and teacher snapshot rotation.

use etts_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of the phase plan as written in the run configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    pub steps: u64,
    pub ops: usize,
    #[serde(default)]
    pub gan: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phase {
    pub name: String,
    pub start_step: u64,
    pub ops: usize,
    pub gan: bool,
}

/// Ordered, step-indexed training phases. Intervals are half-open and the
/// last phase extends past the end of the plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhasePlan {
    phases: Vec<Phase>,
    total_steps: u64,
}

/// Attributes of the phase active at a given step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivePhase<'a> {
    pub ops: usize,
    pub gan: bool,
    pub name: &'a str,
    pub index: usize,
}

impl PhasePlan {
    pub fn new(specs: &[PhaseSpec], max_ops: usize) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("phase plan is empty".into()));
        }
        let mut phases = Vec::with_capacity(specs.len());
        let mut start = 0;
        let mut seen_gan = false;
        for (i, s) in specs.iter().enumerate() {
            if s.ops == 0 || s.ops > max_ops {
                return Err(Error::Config(format!("phase {}: ops {} outside 1..={max_ops}", s.name, s.ops)));
            }
            if i > 0 && s.ops > specs[i - 1].ops {
                return Err(Error::Config(format!("phase {}: ops must be non-increasing", s.name)));
            }
            if seen_gan && !s.gan {
                return Err(Error::Config(format!("phase {}: non-GAN phase after a GAN phase", s.name)));
            }
            seen_gan |= s.gan;
            phases.push(Phase { name: s.name.clone(), start_step: start, ops: s.ops, gan: s.gan });
            start += s.steps;
        }
        Ok(Self { phases, total_steps: start })
    }

    /// ops5 → ops4 → ops3 → ops2 → GAN at ops 2.
    pub fn default_specs() -> Vec<PhaseSpec> {
        let p = |name: &str, steps, ops, gan| PhaseSpec { name: name.into(), steps, ops, gan };
        vec![p("ops5", 2000, 5, false), p("ops4", 1000, 4, false), p("ops3", 1000, 3, false), p("ops2", 2000, 2, false), p("gan", 2000, 2, true)]
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn ops_at_step(&self, step: u64) -> ActivePhase<'_> {
        let index = self.phases.iter().rposition(|p| p.start_step <= step).unwrap_or(0);
        let p = &self.phases[index];
        ActivePhase { ops: p.ops, gan: p.gan, name: &p.name, index }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSpec {
    pub ramp_start: u64,
    pub ramp_end: u64,
    pub period: u64,
}

impl Default for AnnealSpec {
    fn default() -> Self {
        Self { ramp_start: 500, ramp_end: 3000, period: 100 }
    }
}

impl AnnealSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ramp_start >= self.ramp_end || self.period == 0 {
            return Err(Error::Config(format!("invalid anneal spec {self:?}")));
        }
        Ok(())
    }
}

/// KLD weight: 0 before the ramp, linear up to 1 at `ramp_end`, then 1 only
/// every `period` steps.
pub fn beta_kld(spec: &AnnealSpec, step: u64) -> f64 {
    if step <= spec.ramp_start {
        0.0
    } else if step < spec.ramp_end {
        (step - spec.ramp_start) as f64 / (spec.ramp_end - spec.ramp_start) as f64
    } else if (step - spec.ramp_end) % spec.period == 0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gan_beta1: f64,
    pub teacher_lr: f64,
    pub teacher_lr_decay: f64,
    pub student_lr: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gan_beta1: 0.5,
            teacher_lr: 1e-3,
            teacher_lr_decay: 0.95,
            student_lr: 1e-3,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseOptim {
    pub lr: f64,
    pub beta1: f64,
    /// Multiplicative decay per epoch (1 = none).
    pub lr_decay: f64,
}

/// Optimizer settings for a phase. Acoustic phases are named `ops<k>`.
pub fn optimizer_phase_params(phase: &str, cfg: &OptimizerConfig, epoch: u64) -> Result<PhaseOptim> {
    let acoustic = phase.strip_prefix("ops").is_some_and(|k| !k.is_empty() && k.chars().all(|c| c.is_ascii_digit()));
    if acoustic {
        return Ok(PhaseOptim { lr: cfg.lr, beta1: cfg.beta1, lr_decay: 1.0 });
    }
    match phase {
        "gan" => Ok(PhaseOptim { lr: cfg.lr, beta1: cfg.gan_beta1, lr_decay: 1.0 }),
        "teacher" => {
            let lr = cfg.teacher_lr * cfg.teacher_lr_decay.powi(epoch as i32);
            Ok(PhaseOptim { lr, beta1: cfg.beta1, lr_decay: cfg.teacher_lr_decay })
        }
        "student" => Ok(PhaseOptim { lr: cfg.student_lr, beta1: cfg.beta1, lr_decay: 1.0 }),
        other => Err(Error::InvalidArgument(format!("unknown phase {other:?}"))),
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug)]
pub struct PolyakState {
    pub decay: f64,
    pub shadow: ParamStore,
}

impl PolyakState {
    pub fn new(live: &ParamStore, decay: f64) -> Self {
        Self { decay, shadow: live.clone() }
    }

    /// `shadow ← decay·shadow + (1−decay)·live`.
    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        polyak_update(&mut self.shadow, live, self.decay)
    }
}

pub fn polyak_update(shadow: &mut ParamStore, live: &ParamStore, decay: f64) -> Result<()> {
    if shadow.len() != live.len() {
        return Err(Error::Shape(format!("shadow has {} params, live has {}", shadow.len(), live.len())));
    }
    for (id, entry) in live.ids().zip(live.entries()) {
        let s = shadow.value_mut(id);
        if s.shape() != entry.value.shape() {
            return Err(Error::Shape(format!("{}: shadow {:?} vs live {:?}", entry.name, s.shape(), entry.value.shape())));
        }
        for (a, &b) in s.data_mut().iter_mut().zip(entry.value.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Elementwise Polyak update on a bare tensor.
pub fn polyak_tensor(shadow: &mut Tensor, live: &Tensor, decay: f64) -> Result<()> {
    if shadow.shape() != live.shape() {
        return Err(Error::Shape(format!("shadow {:?} vs live {:?}", shadow.shape(), live.shape())));
    }
    for (a, &b) in shadow.data_mut().iter_mut().zip(live.data()) {
        *a = decay * *a + (1.0 - decay) * b;
    }
    Ok(())
}

/// Index of the teacher snapshot used at `step` when `total_steps` student
/// steps are split into equal contiguous segments, earliest snapshot first.
pub fn snapshot_rotation(n_snapshots: usize, step: u64, total_steps: u64) -> Result<usize> {
    if n_snapshots == 0 {
        return Err(Error::InvalidArgument("no teacher snapshots".into()));
    }
    if total_steps == 0 {
        return Ok(0);
    }
    let idx = (u128::from(step) * n_snapshots as u128 / u128::from(total_steps)) as usize;
    Ok(idx.min(n_snapshots - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_boundaries() {
        let plan = PhasePlan::new(&PhasePlan::default_specs(), 5).unwrap();
        assert_eq!(plan.total_steps(), 8000);
        assert_eq!(plan.ops_at_step(0).ops, 5);
        assert_eq!(plan.ops_at_step(1999).ops, 5);
        assert_eq!(plan.ops_at_step(2000).ops, 4);
        let last = plan.ops_at_step(7999);
        assert_eq!((last.ops, last.gan, last.name), (2, true, "gan"));
        assert!(plan.ops_at_step(1_000_000).gan);
    }

    #[test]
    fn rejects_increasing_ops() {
        let mut specs = PhasePlan::default_specs();
        specs[2].ops = 5;
        assert!(PhasePlan::new(&specs, 5).is_err());
        assert!(PhasePlan::new(&[], 5).is_err());
    }

    #[test]
    fn beta_examples() {
        let s = AnnealSpec::default();
        assert_eq!(beta_kld(&s, 0), 0.0);
        assert_eq!(beta_kld(&s, 500), 0.0);
        assert_eq!(beta_kld(&s, 1750), 0.5);
        assert_eq!(beta_kld(&s, 3000), 1.0);
        assert_eq!(beta_kld(&s, 3100), 1.0);
        assert_eq!(beta_kld(&s, 3101), 0.0);
    }

    #[test]
    fn optimizer_phases() {
        let c = OptimizerConfig::default();
        assert_eq!(optimizer_phase_params("gan", &c, 0).unwrap().beta1, 0.5);
        assert_eq!(optimizer_phase_params("ops3", &c, 0).unwrap().beta1, 0.9);
        let t = optimizer_phase_params("teacher", &c, 2).unwrap();
        assert!((t.lr - 1e-3 * 0.95 * 0.95).abs() < 1e-15);
        assert_eq!(optimizer_phase_params("student", &c, 9).unwrap().lr, 1e-3);
        assert!(optimizer_phase_params("warmup", &c, 0).is_err());
    }

    #[test]
    fn snapshots() {
        assert_eq!(snapshot_rotation(3, 999, 3000).unwrap(), 0);
        assert_eq!(snapshot_rotation(3, 1000, 3000).unwrap(), 1);
        assert_eq!(snapshot_rotation(3, 2999, 3000).unwrap(), 2);
        assert_eq!(snapshot_rotation(1, 5, 10).unwrap(), 0);
        assert!(snapshot_rotation(0, 0, 10).is_err());
    }
}
