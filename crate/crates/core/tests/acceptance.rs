//! Acceptance runner. One line per criterion.
//!
//! `cargo test --release -p lmkan --test acceptance`
//!
//! FAIL lines are reported but do not fail the test target unless
//! `LMKAN_ACCEPTANCE_STRICT=1` is set.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use lmkan::bench::{bench_model, DEFAULT_TIMED, DEFAULT_WARMUP};
use lmkan::cost::{flops_linear, flops_main_term, matched_mlp_width, param_ratio_vs_linear};
use lmkan::training::{ema, make_teacher, train_distill, LrSchedule, PhaseConfig, TeacherSpec, TrainConfig};
use lmkan::{Activation, Block, LmKanLayer, LmKanSpec, MlpSpec, Model, PrecondBlock, PrecondMode};

struct Runner {
    failed: usize,
}

impl Runner {
    fn report(&mut self, n: usize, pass: bool, what: &str, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} criterion {n}: {what}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn desk_teacher() -> TeacherSpec {
    TeacherSpec {
        in_dim: 8,
        out_dim: 1,
        hidden_dim: 64,
        depth: 3,
        weight_scale: 3.0,
        seed: 0,
    }
}

fn desk_student() -> LmKanSpec {
    LmKanSpec {
        in_dim: 8,
        hidden_dim: 32,
        out_dim: 1,
        hidden_layers: 2,
        grid: 12,
        precond: PrecondMode::ReluFirst,
        init_scale: None,
        input_norm: false,
        seed: 3,
    }
}

fn c1(r: &mut Runner) {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for g in [3, 4, 12, 40] {
        let o = oracle_equivalence(g, 10_000, 11 + g as u64);
        worst = worst.max(o.eval2d_vs_oracle).max(o.dense_vs_oracle).max(o.forward_vs_oracle);
    }
    let secs = t.elapsed().as_secs_f64();
    r.report(
        1,
        worst <= 1e-12 && secs < 60.0,
        "oracle equivalence",
        format!("max rel {worst:.2e} <= 1e-12, {secs:.1}s < 60s"),
    );
}

fn c2(r: &mut Runner) {
    let (mut normal, mut cauchy_abs, mut cauchy_scaled) = (0.0f64, 0.0f64, 0.0f64);
    let (mut sup, mut pointwise, mut jump) = (0.0f64, 0.0f64, 0.0f64);
    for g in [3, 4, 12, 40] {
        let u = partition_of_unity(g, 100_000, 21 + g as u64);
        normal = normal.max(u.normal_abs);
        cauchy_abs = cauchy_abs.max(u.cauchy_abs);
        cauchy_scaled = cauchy_scaled.max(u.cauchy_scaled);
        let c = continuity(g, 200, 31 + g as u64);
        sup = sup.max(c.sup_scaled);
        pointwise = pointwise.max(c.pointwise);
        jump = jump.max(c.jump);
    }
    r.report(
        2,
        normal <= 1e-12 && cauchy_scaled <= 1e-12 && sup <= 1e-6 && jump <= 1e-12,
        "partition of unity and continuity",
        format!(
            "unity normal {normal:.2e}, cauchy scaled {cauchy_scaled:.2e} (abs {cauchy_abs:.2e}) <= 1e-12; \
             continuity sup-scaled {sup:.2e} <= 1e-6 (pointwise {pointwise:.2e}), jump {jump:.2e} <= 1e-12"
        ),
    );
}

fn c3(r: &mut Runner) {
    let t = Instant::now();
    let l = layer_gradients(100, 41);
    let h = hessian_gradients(120, 42);
    let secs = t.elapsed().as_secs_f64();
    r.report(
        3,
        l.d_params <= 1e-6 && l.d_input <= 1e-6 && h <= 1e-6 && secs < 120.0,
        "gradients vs central differences",
        format!(
            "{} layers dP {:.2e} dX {:.2e}, 120 sheets penalty {h:.2e} <= 1e-6, {secs:.1}s < 120s",
            l.instances, l.d_params, l.d_input
        ),
    );
}

fn c4(r: &mut Runner) {
    let h = hessian_exactness(200, 51);
    r.report(
        4,
        h.quadratic_abs <= 1e-10 && h.linear_max <= 1e-20,
        "hessian exactness",
        format!("quadratic {:.2e} <= 1e-10, linear {:.2e} <= 1e-20", h.quadratic_abs, h.linear_max),
    );
}

fn c5(r: &mut Runner) {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, f) in [
        ("block", block_fusion_error as fn(usize, u64, Tails) -> (f64, f64)),
        ("model", model_fusion_error),
    ] {
        for tails in [Tails::None, Tails::One, Tails::All] {
            let (mut d, mut s) = (0.0f64, 0.0f64);
            for g in [4, 12] {
                let (dd, ss) = f(g, 61 + g as u64, tails);
                d = d.max(dd);
                s = s.max(ss);
            }
            if tails == Tails::All {
                worst = worst.max(d);
            }
            parts.push(format!("{name} {tails:?} {d:.1e} (|y| {s:.1e})"));
        }
    }
    let relu = relu_representability(12, 62);
    r.report(
        5,
        worst <= 1e-10 && relu.abs <= 1e-12 && relu.conditioned <= 1e-12,
        "fusion with 1e3 tails",
        format!(
            "max abs {worst:.2e} <= 1e-10 [{}]; relu abs {:.2e} cond {:.2e} <= 1e-12",
            parts.join(", "),
            relu.abs,
            relu.conditioned
        ),
    );
}

fn c6(r: &mut Runner) {
    let ratio = flops_main_term(256, 256, 2, 2).unwrap() as f64 / flops_linear(256, 256) as f64;
    let (p20, p40) = (param_ratio_vs_linear(20), param_ratio_vs_linear(40));
    let base = 64 * 48;
    let general = [(1, 2, 2), (2, 2, 2), (4, 2, 4)]
        .iter()
        .all(|&(d, k, m)| flops_main_term(64, 48, d, k).unwrap() == m * base);
    r.report(
        6,
        ratio == 2.0 && p20 == 220.5 && p40 == 840.5 && general,
        "cost accounting",
        format!("flop ratio {ratio}, params G=20 {p20}, G=40 {p40}, (k^d/d) formula {general}"),
    );
}

fn c7(r: &mut Runner) {
    let t = Instant::now();
    let steps = 24_000;
    let teacher = make_teacher(&desk_teacher()).unwrap();
    let student = Model::lmkan(&desk_student()).unwrap();
    let (p1, p2, p3) = (steps / 20, steps / 10, steps / 10);
    let cfg = TrainConfig {
        phases: PhaseConfig {
            phase1_steps: p1,
            phase2_steps: p2,
            gamma_ramp_steps: p2 / 2,
            phase3_steps: p3,
            phase4_steps: steps - p1 - p2 - p3,
            lambda_init: 1e6,
            lambda_target: 1e6,
            lr: LrSchedule {
                base: 1e-2,
                decay_steps: steps / 2,
                final_factor: 0.01,
            },
            batch_size: 256,
            seed: 1,
            ..PhaseConfig::default()
        },
        eval_samples: 10_000,
        eval_seed: 2,
    };
    let out = train_distill(student, &teacher, &cfg).unwrap();
    let worst = worst_plane_fit(&out.model);
    let secs = t.elapsed().as_secs_f64();
    r.report(
        7,
        worst <= 1e-2 && secs < 300.0,
        "linearization at lambda 1e6",
        format!("worst plane-fit residual {worst:.2e} <= 1e-2, {secs:.1}s < 300s"),
    );
}

fn c8(r: &mut Runner) {
    let t = Instant::now();
    let steps = 20_000;
    let teacher = make_teacher(&desk_teacher()).unwrap();
    let frac = |f: f64| (steps as f64 * f) as usize;
    let (p1, p2, p3) = (frac(0.01), frac(0.065), frac(0.125));
    let cfg = TrainConfig {
        phases: PhaseConfig {
            phase1_steps: p1,
            phase2_steps: p2,
            gamma_ramp_steps: frac(0.04),
            phase3_steps: p3,
            phase4_steps: steps - p1 - p2 - p3,
            lambda_init: 1e-2,
            lr: LrSchedule {
                base: 1e-3,
                decay_steps: frac(0.2),
                final_factor: 0.01,
            },
            batch_size: 256,
            seed: 1,
            ..PhaseConfig::default()
        },
        eval_samples: 100_000,
        eval_seed: 2,
    };
    let student = Model::lmkan(&desk_student()).unwrap();
    let width = matched_mlp_width(student.fused_main_term_flops(), 8, 1, 2);
    let a = train_distill(student, &teacher, &cfg).unwrap();
    let mlp = Model::mlp(&MlpSpec {
        in_dim: 8,
        hidden_dim: width,
        out_dim: 1,
        hidden_layers: 2,
        activation: Activation::Relu,
        batch_norm: true,
        seed: 3,
    })
    .unwrap();
    let b = train_distill(mlp, &teacher, &cfg).unwrap();
    let finite = a
        .history
        .iter()
        .chain(&b.history)
        .all(|h| h.pure_loss.is_finite() && h.total_loss.is_finite())
        && a.final_mse.is_finite()
        && b.final_mse.is_finite();
    let pure: Vec<f64> = a.history.iter().map(|h| h.pure_loss).collect();
    let sm = ema(&pure, 0.01);
    let drop = sm[sm.len() - 1] / sm[0];
    let secs = t.elapsed().as_secs_f64();
    r.report(
        8,
        finite && drop < 0.2 && a.final_mse <= 1.1 * b.final_mse && secs < 900.0,
        "desk distillation",
        format!(
            "lmKAN mse {:.3e} vs MLP(width {width}) {:.3e}, ratio {:.3} <= 1.1; smoothed loss end/start {drop:.3} < 0.2; \
             finite {finite}; {secs:.0}s < 900s",
            a.final_mse,
            b.final_mse,
            a.final_mse / b.final_mse
        ),
    );
}

fn c9(r: &mut Runner) {
    let mut rates = Vec::new();
    for g in [4, 12, 40] {
        let mut layer = LmKanLayer::init(128, 128, g, 1, Some(1.0)).unwrap();
        layer.set_gamma(1.0);
        let model = Model::new(vec![Block::LmKan {
            block: PrecondBlock::pure(layer),
            norm: None,
        }])
        .unwrap();
        let rep = bench_model(&model, 16_384, DEFAULT_WARMUP, DEFAULT_TIMED, 0).unwrap();
        rates.push((g, rep.median_rows_per_sec));
    }
    let max = rates.iter().map(|r| r.1).fold(0.0, f64::max);
    let min = rates.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let spread = (max - min) / min;
    let listed: Vec<String> = rates.iter().map(|(g, v)| format!("G={g} {v:.3e} rows/s")).collect();
    r.report(
        9,
        spread <= 0.25,
        "throughput flat in G",
        format!("spread {:.1}% <= 25% [{}]", 100.0 * spread, listed.join(", ")),
    );
}

fn c10(r: &mut Runner) {
    let exact = roundtrips(1000, 71);
    let (mut rejected, mut tried) = (0, 0);
    for seed in 0..5 {
        let (a, b) = corruption_rejections(seed);
        rejected += a;
        tried += b;
    }
    r.report(
        10,
        exact == 1000 && rejected == tried,
        "serialization",
        format!("{exact}/1000 round trips bitwise exact, {rejected}/{tried} corrupted files rejected"),
    );
}

fn main() -> ExitCode {
    let mut r = Runner { failed: 0 };
    let criteria: [fn(&mut Runner); 10] = [c1, c2, c3, c4, c5, c6, c7, c8, c9, c10];
    for c in criteria {
        c(&mut r);
    }
    println!("{} of 10 criteria passed", 10 - r.failed);
    let strict = std::env::var("LMKAN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && r.failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
