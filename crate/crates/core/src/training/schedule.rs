use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// "Nearly zero" regularization used as the end point of unregularized runs.
pub const TERMINAL_LAMBDA: f64 = 1e-20;

/// Constant learning rate with an exponential decay over the last
/// `decay_steps` steps of phase IV, ending near `base * final_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_steps: usize,
    pub final_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    /// Length of the gamma ramp at the start of phase II.
    pub gamma_ramp_steps: usize,
    pub phase3_steps: usize,
    pub phase4_steps: usize,
    pub gamma_target: f64,
    pub lambda_init: f64,
    pub lambda_target: f64,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            phase1_steps: 200,
            phase2_steps: 1300,
            gamma_ramp_steps: 800,
            phase3_steps: 2500,
            phase4_steps: 16000,
            gamma_target: 0.3,
            lambda_init: 1e-2,
            lambda_target: TERMINAL_LAMBDA,
            lr: LrSchedule {
                base: 1e-3,
                decay_steps: 4000,
                final_factor: 0.01,
            },
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Schedule values at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub phase: u8,
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
}

impl PhaseConfig {
    pub fn total_steps(&self) -> usize {
        self.phase1_steps + self.phase2_steps + self.phase3_steps + self.phase4_steps
    }

    /// Checks the invariants; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if !(0.0..=1.0).contains(&self.gamma_target) {
            return bad("gamma_target", format!("must lie in [0, 1], got {}", self.gamma_target));
        }
        if !(self.lambda_target >= 0.0) || !self.lambda_target.is_finite() {
            return bad("lambda_target", format!("must be finite and >= 0, got {}", self.lambda_target));
        }
        if !(self.lambda_init >= self.lambda_target) || !self.lambda_init.is_finite() {
            return bad(
                "lambda_init",
                format!("must be finite and >= lambda_target, got {}", self.lambda_init),
            );
        }
        if self.gamma_ramp_steps > self.phase2_steps {
            return bad(
                "gamma_ramp_steps",
                format!("{} exceeds phase2_steps {}", self.gamma_ramp_steps, self.phase2_steps),
            );
        }
        if self.lr.decay_steps > self.phase4_steps {
            return bad(
                "lr.decay_steps",
                format!("{} exceeds phase4_steps {}", self.lr.decay_steps, self.phase4_steps),
            );
        }
        if !(self.lr.base > 0.0) || !self.lr.base.is_finite() {
            return bad("lr.base", format!("must be positive, got {}", self.lr.base));
        }
        if !(self.lr.final_factor > 0.0 && self.lr.final_factor <= 1.0) {
            return bad("lr.final_factor", format!("must lie in (0, 1], got {}", self.lr.final_factor));
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        Ok(())
    }
}

/// `(gamma, lambda, lr)` and the phase number (1..=4) at `step`. Steps past the
/// end keep the final values.
pub fn phase_schedule(step: usize, cfg: &PhaseConfig) -> ScheduleValues {
    let base = cfg.lr.base;
    let e1 = cfg.phase1_steps;
    let e2 = e1 + cfg.phase2_steps;
    let e3 = e2 + cfg.phase3_steps;
    if step < e1 {
        return ScheduleValues {
            phase: 1,
            gamma: 0.0,
            lambda: cfg.lambda_init,
            lr: base,
        };
    }
    if step < e2 {
        let t = step - e1;
        let gamma = if t < cfg.gamma_ramp_steps {
            cfg.gamma_target * t as f64 / cfg.gamma_ramp_steps as f64
        } else {
            cfg.gamma_target
        };
        return ScheduleValues {
            phase: 2,
            gamma,
            lambda: cfg.lambda_init,
            lr: base,
        };
    }
    if step < e3 {
        let frac = (step - e2) as f64 / cfg.phase3_steps as f64;
        let (a, b) = (cfg.lambda_init, cfg.lambda_target);
        let lambda = if a > 0.0 && b > 0.0 {
            a * (b / a).powf(frac)
        } else {
            a + (b - a) * frac
        };
        return ScheduleValues {
            phase: 3,
            gamma: cfg.gamma_target,
            lambda: lambda.clamp(b, a),
            lr: base,
        };
    }
    let t = (step - e3).min(cfg.phase4_steps.saturating_sub(1));
    let start = cfg.phase4_steps - cfg.lr.decay_steps;
    let lr = if t < start {
        base
    } else {
        base * cfg.lr.final_factor.powf((t - start) as f64 / cfg.lr.decay_steps as f64)
    };
    ScheduleValues {
        phase: 4,
        gamma: cfg.gamma_target,
        lambda: cfg.lambda_target,
        lr,
    }
}
