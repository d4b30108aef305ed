//! Desk-scale distillation: lmKAN student vs FLOP-matched MLP.
//!
//! `cargo run --release -p lmkan --example desk_distill -- [steps] [lambda_init] [lr]`

use std::time::Instant;

use lmkan::cost::{matched_mlp_width, mlp_flops};
use lmkan::training::{ema, make_teacher, train_distill, LrSchedule, PhaseConfig, TeacherSpec, TrainConfig};
use lmkan::{Activation, LmKanSpec, MlpSpec, Model, PrecondMode};

fn main() -> lmkan::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(20_000, |s| s.parse().unwrap());
    let lambda_init: f64 = args.get(2).map_or(1e-2, |s| s.parse().unwrap());
    let lr: f64 = args.get(3).map_or(1e-3, |s| s.parse().unwrap());
    let g: usize = args.get(4).map_or(12, |s| s.parse().unwrap());

    let teacher = make_teacher(&TeacherSpec {
        in_dim: 8,
        out_dim: 1,
        hidden_dim: 64,
        depth: 3,
        weight_scale: 3.0,
        seed: 0,
    })?;
    let frac = |f: f64| (steps as f64 * f) as usize;
    let (p1, p2, p3) = (frac(0.01), frac(0.065), frac(0.125));
    let phases = PhaseConfig {
        phase1_steps: p1,
        phase2_steps: p2,
        gamma_ramp_steps: frac(0.04),
        phase3_steps: p3,
        phase4_steps: steps - p1 - p2 - p3,
        lambda_init,
        lr: LrSchedule {
            base: lr,
            decay_steps: frac(0.2),
            final_factor: 0.01,
        },
        batch_size: 256,
        seed: 1,
        ..PhaseConfig::default()
    };
    let cfg = TrainConfig {
        phases,
        eval_samples: 100_000,
        eval_seed: 2,
    };
    let student = Model::lmkan(&LmKanSpec {
        in_dim: 8,
        hidden_dim: 32,
        out_dim: 1,
        hidden_layers: 2,
        grid: g,
        precond: PrecondMode::ReluFirst,
        init_scale: None,
        input_norm: false,
        seed: 3,
    })?;
    let target = student.fused_main_term_flops();
    let h = matched_mlp_width(target, 8, 1, 2);
    println!("lmKAN fused flops {target}, MLP width {h} flops {}", mlp_flops(8, h, 1, 2));
    let t0 = Instant::now();
    let a = train_distill(student, &teacher, &cfg)?;
    let pure: Vec<f64> = a.history.iter().map(|r| r.pure_loss).collect();
    let sm = ema(&pure, 0.01);
    println!(
        "lmKAN mse {:.4e} smoothed {:.4e} -> {:.4e} ({:.1}s)",
        a.final_mse,
        sm[0],
        sm[sm.len() - 1],
        t0.elapsed().as_secs_f64()
    );
    let mlp = Model::mlp(&MlpSpec {
        in_dim: 8,
        hidden_dim: h,
        out_dim: 1,
        hidden_layers: 2,
        activation: Activation::Relu,
        batch_norm: true,
        seed: 3,
    })?;
    let t0 = Instant::now();
    let b = train_distill(mlp, &teacher, &cfg)?;
    println!("MLP mse {:.4e} ({:.1}s)", b.final_mse, t0.elapsed().as_secs_f64());
    println!("ratio {:.3}", a.final_mse / b.final_mse);
    Ok(())
}
