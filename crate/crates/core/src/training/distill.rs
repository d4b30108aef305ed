use std::io::Write;

use crate::error::{Error, Result};
use crate::hessian::{add_model_penalty_grad, HessianPenaltyConfig};
use crate::model::{LmKanSpec, MlpSpec, Model};
use crate::rng::{normal_matrix, stream, Stream, StreamRng};
use crate::tensor::Matrix;

use super::adam::AdamState;
use super::schedule::{phase_schedule, PhaseConfig};
use super::teacher::{make_teacher, Teacher, TeacherSpec};

const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum StudentSpec {
    LmKan(LmKanSpec),
    Mlp(MlpSpec),
}

impl StudentSpec {
    pub fn build(&self) -> Result<Model> {
        match self {
            StudentSpec::LmKan(s) => Model::lmkan(s),
            StudentSpec::Mlp(s) => Model::mlp(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phases: PhaseConfig,
    pub eval_samples: usize,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub teacher: TeacherSpec,
    pub student: StudentSpec,
    pub train: TrainConfig,
}

/// One optimization step. `penalty` is the `lambda`-scaled regularizer, so
/// `total_loss = pure_loss + penalty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub phase: u8,
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub pure_loss: f64,
    pub total_loss: f64,
    pub penalty: f64,
}

impl HistoryRow {
    pub const CSV_HEADER: &'static str = "step,phase,gamma,lambda,lr,pure_loss,total_loss";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.phase, self.gamma, self.lambda, self.lr, self.pure_loss, self.total_loss
        )
    }

    pub fn write_csv(rows: &[HistoryRow], mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in rows {
            writeln!(w, "{}", r.to_csv())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub final_mse: f64,
}

/// Exponential moving average, seeded with the first value.
pub fn ema(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = match values.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in values {
        acc += alpha * (v - acc);
        out.push(acc);
    }
    out
}

/// Standard-normal `batch x dim` inputs; advances `rng`.
pub fn sample_inputs(rng: &mut StreamRng, batch: usize, dim: usize) -> Matrix {
    normal_matrix(rng, batch, dim)
}

fn check_dims(model: &Model, teacher: &Teacher) -> Result<()> {
    if model.in_dim() != teacher.in_dim() || model.out_dim() != teacher.out_dim() {
        return Err(Error::Shape(format!(
            "student {}->{} does not match teacher {}->{}",
            model.in_dim(),
            model.out_dim(),
            teacher.in_dim(),
            teacher.out_dim()
        )));
    }
    Ok(())
}

/// Mean squared error over `n_samples` fresh inputs from the evaluation stream
/// of `seed`, batch norms in inference mode.
pub fn evaluate_mse(model: &Model, teacher: &Teacher, n_samples: usize, seed: u64) -> Result<f64> {
    check_dims(model, teacher)?;
    if n_samples == 0 {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    let mut rng = stream(seed, Stream::Eval);
    let mut sum = 0.0;
    let mut left = n_samples;
    while left > 0 {
        let n = left.min(EVAL_CHUNK);
        let x = sample_inputs(&mut rng, n, model.in_dim());
        let y = model.forward(&x)?;
        let t = teacher.forward(&x)?;
        sum += y
            .as_slice()
            .iter()
            .zip(t.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        left -= n;
    }
    Ok(sum / (n_samples * model.out_dim()) as f64)
}

/// Fits `student` to `teacher` under the phased schedule.
pub fn train_distill(mut student: Model, teacher: &Teacher, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let pc = &cfg.phases;
    pc.validate()?;
    check_dims(&student, teacher)?;
    let mut data = stream(pc.seed, Stream::Data);
    let mut adam = AdamState::for_params(&student.params(), pc.lr.base);
    let total = pc.total_steps();
    let mut history = Vec::with_capacity(total);
    let norm = 2.0 / (pc.batch_size * student.out_dim()) as f64;
    for step in 0..total {
        let s = phase_schedule(step, pc);
        student.set_gamma(s.gamma);
        let x = sample_inputs(&mut data, pc.batch_size, student.in_dim());
        let target = teacher.forward(&x)?;
        let (y, tape) = student.forward_train(&x)?;
        let mut dy = y;
        let mut sq = 0.0;
        for (d, &t) in dy.as_mut_slice().iter_mut().zip(target.as_slice()) {
            let r = *d - t;
            sq += r * r;
            *d = r * norm;
        }
        let pure_loss = sq * norm / 2.0;
        let mut grads = student.backward(&tape, &dy)?;
        let penalty = add_model_penalty_grad(&student, &HessianPenaltyConfig { lambda: s.lambda }, &mut grads)?;
        let total_loss = pure_loss + penalty;
        if !total_loss.is_finite() || !pure_loss.is_finite() {
            return Err(Error::NonFinite {
                phase: s.phase,
                step,
                pure_loss,
                total_loss,
            });
        }
        history.push(HistoryRow {
            step,
            phase: s.phase,
            gamma: s.gamma,
            lambda: s.lambda,
            lr: s.lr,
            pure_loss,
            total_loss,
            penalty,
        });
        adam.lr = s.lr;
        adam.step(&mut student.params_mut(), &grads)?;
    }
    let final_mse = evaluate_mse(&student, teacher, cfg.eval_samples, cfg.eval_seed)?;
    if !final_mse.is_finite() {
        return Err(Error::NonFinite {
            phase: 4,
            step: total,
            pure_loss: final_mse,
            total_loss: final_mse,
        });
    }
    Ok(TrainOutcome {
        model: student,
        history,
        final_mse,
    })
}

/// Builds teacher and student from their specs and trains.
pub fn run_distill(cfg: &DistillConfig) -> Result<TrainOutcome> {
    let teacher = make_teacher(&cfg.teacher)?;
    let student = cfg.student.build()?;
    train_distill(student, &teacher, &cfg.train)
}

#[derive(Debug)]
pub struct SweepRow {
    pub grid: usize,
    pub result: Result<f64>,
}

/// Trains one lmKAN student per grid resolution at a fixed budget. Errors are
/// recorded per row and the sweep continues.
pub fn sweep_grid_resolution(base: &DistillConfig, grids: &[usize]) -> Result<Vec<SweepRow>> {
    let StudentSpec::LmKan(spec) = &base.student else {
        return Err(Error::Config("grid sweep needs an lmKAN student".into()));
    };
    if let Some(&g) = grids.iter().find(|&&g| g < 3) {
        return Err(Error::Config(format!("grid resolution must be at least 3, got {g}")));
    }
    let teacher = make_teacher(&base.teacher)?;
    Ok(grids
        .iter()
        .map(|&g| {
            let spec = LmKanSpec { grid: g, ..spec.clone() };
            let result = Model::lmkan(&spec)
                .and_then(|m| train_distill(m, &teacher, &base.train))
                .map(|o| o.final_mse);
            SweepRow { grid: g, result }
        })
        .collect())
}
