//! JSON run configuration: sections `teacher`, `student`, `phases`,
//! `optimizer`, `io`. Every field has a desk-scale default.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use lmkan::io::DType;
use lmkan::training::{DistillConfig, LrSchedule, PhaseConfig, StudentSpec, TeacherSpec, TrainConfig, TERMINAL_LAMBDA};
use lmkan::{Activation, LmKanSpec, MlpSpec, PrecondMode};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub weight_scale: f64,
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            in_dim: 8,
            out_dim: 1,
            hidden_dim: 64,
            depth: 3,
            weight_scale: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentKind {
    Lmkan,
    Mlp,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub kind: StudentKind,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub grid: usize,
    pub precond: PrecondMode,
    pub init_scale: Option<f64>,
    pub input_norm: bool,
    /// MLP only.
    pub activation: Activation,
    /// MLP only.
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            kind: StudentKind::Lmkan,
            hidden_dim: 32,
            hidden_layers: 2,
            grid: 12,
            precond: PrecondMode::ReluFirst,
            init_scale: None,
            input_norm: false,
            activation: Activation::Relu,
            batch_norm: true,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhasesSection {
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub gamma_ramp_steps: usize,
    pub phase3_steps: usize,
    pub phase4_steps: usize,
    pub gamma_target: f64,
    pub lambda_init: f64,
    pub lambda_target: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PhasesSection {
    fn default() -> Self {
        let d = PhaseConfig::default();
        Self {
            phase1_steps: d.phase1_steps,
            phase2_steps: d.phase2_steps,
            gamma_ramp_steps: d.gamma_ramp_steps,
            phase3_steps: d.phase3_steps,
            phase4_steps: d.phase4_steps,
            gamma_target: d.gamma_target,
            lambda_init: d.lambda_init,
            lambda_target: TERMINAL_LAMBDA,
            batch_size: d.batch_size,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    /// Length of the terminal exponential decay at the end of phase IV.
    pub lr_decay_steps: usize,
    pub lr_final_factor: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = PhaseConfig::default().lr;
        Self {
            lr: d.base,
            lr_decay_steps: d.decay_steps,
            lr_final_factor: d.final_factor,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub model_out: PathBuf,
    pub history_csv: PathBuf,
    pub dtype: DType,
    pub eval_samples: usize,
    pub eval_seed: u64,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            model_out: "model.lmk".into(),
            history_csv: "history.csv".into(),
            dtype: DType::F64,
            eval_samples: 100_000,
            eval_seed: 2,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub phases: PhasesSection,
    pub optimizer: OptimizerSection,
    pub io: IoSection,
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-level checks, reported with the dotted field path.
    pub fn validate(&self) -> Result<(), CliError> {
        let t = &self.teacher;
        for (name, v) in [
            ("teacher.in_dim", t.in_dim),
            ("teacher.out_dim", t.out_dim),
            ("teacher.hidden_dim", t.hidden_dim),
            ("teacher.depth", t.depth),
        ] {
            if v == 0 {
                return Err(field(name, "must be positive"));
            }
        }
        if !(t.weight_scale >= 0.0 && t.weight_scale.is_finite()) {
            return Err(field("teacher.weight_scale", format!("must be >= 0, got {}", t.weight_scale)));
        }
        let s = &self.student;
        if s.hidden_dim == 0 {
            return Err(field("student.hidden_dim", "must be positive"));
        }
        if s.kind == StudentKind::Lmkan {
            if s.hidden_dim % 2 != 0 {
                return Err(field(
                    "student.hidden_dim",
                    format!("lmKAN layers pair their inputs, width must be even, got {}", s.hidden_dim),
                ));
            }
            if t.in_dim % 2 != 0 {
                return Err(field(
                    "teacher.in_dim",
                    format!("an lmKAN student needs an even input width, got {}", t.in_dim),
                ));
            }
            if s.grid < 3 {
                return Err(field("student.grid", format!("must be at least 3, got {}", s.grid)));
            }
            if let Some(scale) = s.init_scale {
                if !(scale >= 0.0 && scale.is_finite()) {
                    return Err(field("student.init_scale", format!("must be >= 0, got {scale}")));
                }
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(field("optimizer.lr", format!("must be positive, got {}", o.lr)));
        }
        if !(o.lr_final_factor > 0.0 && o.lr_final_factor <= 1.0) {
            return Err(field("optimizer.lr_final_factor", format!("must lie in (0, 1], got {}", o.lr_final_factor)));
        }
        if o.lr_decay_steps > self.phases.phase4_steps {
            return Err(field(
                "optimizer.lr_decay_steps",
                format!("{} exceeds phases.phase4_steps {}", o.lr_decay_steps, self.phases.phase4_steps),
            ));
        }
        if self.io.eval_samples == 0 {
            return Err(field("io.eval_samples", "must be positive"));
        }
        self.phase_config()
            .validate()
            .map_err(|e| CliError::Config(format!("phases.{}", e.to_string().trim_start_matches("configuration error: "))))?;
        Ok(())
    }

    pub fn teacher_spec(&self) -> TeacherSpec {
        let t = &self.teacher;
        TeacherSpec {
            in_dim: t.in_dim,
            out_dim: t.out_dim,
            hidden_dim: t.hidden_dim,
            depth: t.depth,
            weight_scale: t.weight_scale,
            seed: t.seed,
        }
    }

    pub fn student_spec(&self) -> StudentSpec {
        let s = &self.student;
        match s.kind {
            StudentKind::Lmkan => StudentSpec::LmKan(LmKanSpec {
                in_dim: self.teacher.in_dim,
                hidden_dim: s.hidden_dim,
                out_dim: self.teacher.out_dim,
                hidden_layers: s.hidden_layers,
                grid: s.grid,
                precond: s.precond,
                init_scale: s.init_scale,
                input_norm: s.input_norm,
                seed: s.seed,
            }),
            StudentKind::Mlp => StudentSpec::Mlp(MlpSpec {
                in_dim: self.teacher.in_dim,
                hidden_dim: s.hidden_dim,
                out_dim: self.teacher.out_dim,
                hidden_layers: s.hidden_layers,
                activation: s.activation,
                batch_norm: s.batch_norm,
                seed: s.seed,
            }),
        }
    }

    pub fn phase_config(&self) -> PhaseConfig {
        let p = &self.phases;
        PhaseConfig {
            phase1_steps: p.phase1_steps,
            phase2_steps: p.phase2_steps,
            gamma_ramp_steps: p.gamma_ramp_steps,
            phase3_steps: p.phase3_steps,
            phase4_steps: p.phase4_steps,
            gamma_target: p.gamma_target,
            lambda_init: p.lambda_init,
            lambda_target: p.lambda_target,
            lr: LrSchedule {
                base: self.optimizer.lr,
                decay_steps: self.optimizer.lr_decay_steps,
                final_factor: self.optimizer.lr_final_factor,
            },
            batch_size: p.batch_size,
            seed: p.seed,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            teacher: self.teacher_spec(),
            student: self.student_spec(),
            train: TrainConfig {
                phases: self.phase_config(),
                eval_samples: self.io.eval_samples,
                eval_seed: self.io.eval_seed,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_err(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(CliError::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_config_takes_defaults() {
        let c = RunConfig::parse("{}").unwrap();
        assert_eq!(c.student.grid, 12);
        assert_eq!(c.phase_config().total_steps(), 20_000);
    }

    #[test]
    fn errors_name_fields() {
        assert!(config_err(r#"{"student": {"hidden_dim": 7}}"#).starts_with("student.hidden_dim"));
        assert!(config_err(r#"{"student": {"hidden_dim": "wide"}}"#).starts_with("student.hidden_dim"));
        assert!(config_err(r#"{"student": {"width": 8}}"#).starts_with("student"));
        assert!(config_err(r#"{"phases": {"gamma_target": 2.0}}"#).starts_with("phases.gamma_target"));
        assert!(config_err(r#"{"optimizer": {"lr": 0}}"#).starts_with("optimizer.lr"));
        assert!(config_err(r#"{"student": {"precond": "relu"}}"#).starts_with("student.precond"));
    }

    #[test]
    fn odd_width_allowed_for_mlp() {
        assert!(RunConfig::parse(r#"{"student": {"kind": "mlp", "hidden_dim": 47}}"#).is_ok());
    }
}
