//! Seedable, splittable random streams.
//!
//! Every consumer draws from a ChaCha8 generator seeded with the run seed and
//! placed on its own stream id, so data sampling, parameter initialization and
//! evaluation never share a sequence. Normal variates come from
//! `rand_distr::StandardNormal` (ziggurat method).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Matrix;

pub type StreamRng = ChaCha8Rng;

/// Stream ids; the numeric values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Data = 1,
    Eval = 2,
    Teacher = 3,
    Bench = 4,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

#[inline]
pub fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

/// `rows x cols` i.i.d. standard normal draws, filled row-major.
pub fn normal_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// Uniform draw on `[-bound, bound)`.
#[inline]
pub fn uniform_sym(rng: &mut StreamRng, bound: f64) -> f64 {
    if bound == 0.0 {
        return 0.0;
    }
    rng.random_range(-bound..bound)
}
