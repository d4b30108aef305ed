//! Unbounded static percentile grid.
//!
//! Interior grid points sit at the `k/G` percentiles of a cheap, single-exponential
//! sigmoid that approximates the standard normal CDF. Two ghost points extend the
//! grid by mirroring the outermost spacing, so the two unbounded edge intervals are
//! handled by the same bilinear formulas as the interior (weights then extrapolate
//! linearly and can leave `[0, 1]`).
//!
//! Layout of [`SigmaGrid::points`] for `G` intervals:
//!
//! ```text
//! index:   0        1 ..................... G-1      G
//!          ghost    sigma_inv(1/G) ... sigma_inv((G-1)/G)   ghost
//! ```
//!
//! Interval `i` spans `[points[i], points[i+1]]`; interval 0 and interval `G-1`
//! also cover the left and right infinite tails.

use crate::error::{Error, Result};

/// Fast sigmoid with exactly one exponential evaluation.
///
/// `0.5 e^x` for `x <= 0`, `1 - 0.5 e^-x` otherwise.
#[inline]
pub fn sigma(x: f64) -> f64 {
    let t = (-x.abs()).exp();
    if x > 0.0 {
        1.0 - 0.5 * t
    } else {
        0.5 * t
    }
}

/// Analytic inverse of [`sigma`] on the open interval `(0, 1)`.
pub fn sigma_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("sigma_inv expects 0 < p < 1, got {p}")));
    }
    Ok(if p <= 0.5 {
        (2.0 * p).ln()
    } else {
        -(2.0 * (1.0 - p)).ln()
    })
}

/// Active cell and bilinear weights for one input pair.
///
/// `w` is ordered `[w00, w10, w01, w11]`, matching nodes
/// `(i1, i2), (i1+1, i2), (i1, i2+1), (i1+1, i2+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preamble {
    pub i1: usize,
    pub i2: usize,
    pub w: [f64; 4],
}

/// Sigma grid with ghost points and precomputed inverse cell areas.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaGrid {
    g: usize,
    points: Vec<f64>,
    inv_areas: Vec<f64>,
}

impl SigmaGrid {
    /// Builds the grid with `g` intervals. `g` must be at least 3 so that the
    /// ghost rule has two interior points to extrapolate from.
    pub fn new(g: usize) -> Result<Self> {
        if g < 3 {
            return Err(Error::Config(format!(
                "grid needs at least 3 intervals, got G={g}"
            )));
        }
        let mut points = vec![0.0; g + 1];
        // Left half from the closed form, right half mirrored so the grid is
        // exactly antisymmetric; the centre node is exactly 0 for even G.
        for k in 1..g {
            if 2 * k < g {
                points[k] = sigma_inv(k as f64 / g as f64)?;
            } else if 2 * k == g {
                points[k] = 0.0;
            }
        }
        for k in 1..g {
            if 2 * k > g {
                points[k] = -points[g - k];
            }
        }
        points[0] = 2.0 * points[1] - points[2];
        points[g] = -points[0];

        let mut inv_areas = vec![0.0; g * g];
        for i1 in 0..g {
            let h1 = points[i1 + 1] - points[i1];
            for i2 in 0..g {
                let h2 = points[i2 + 1] - points[i2];
                inv_areas[i1 * g + i2] = 1.0 / (h1 * h2);
            }
        }
        Ok(Self {
            g,
            points,
            inv_areas,
        })
    }

    /// Number of intervals `G`.
    #[inline]
    pub fn intervals(&self) -> usize {
        self.g
    }

    /// Number of basis functions (and coefficient rows) per axis, `G + 1`.
    #[inline]
    pub fn nodes(&self) -> usize {
        self.g + 1
    }

    /// Grid points including both ghosts, length `G + 1`.
    #[inline]
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    #[inline]
    pub fn inv_area(&self, i1: usize, i2: usize) -> f64 {
        self.inv_areas[i1 * self.g + i2]
    }

    /// `clamp(floor(sigma(x) * G), 0, G-1)`.
    #[inline]
    pub fn interval_index(&self, x: f64) -> usize {
        let i = (sigma(x) * self.g as f64).floor();
        // `as` saturates: NaN and negatives map to 0.
        (i as usize).min(self.g - 1)
    }

    /// Interval lookup by binary search over the interior points. Slow path,
    /// used to validate [`SigmaGrid::interval_index`].
    pub fn interval_index_search(&self, x: f64) -> usize {
        let interior = &self.points[1..self.g];
        interior.partition_point(|&p| p <= x)
    }

    /// Cell indices and the four bilinear weights for `(x1, x2)`.
    #[inline]
    pub fn preamble(&self, x1: f64, x2: f64) -> Preamble {
        let i1 = self.interval_index(x1);
        let i2 = self.interval_index(x2);
        let p = &self.points;
        let inv = self.inv_areas[i1 * self.g + i2];
        let l1 = p[i1 + 1] - x1;
        let r1 = x1 - p[i1];
        let l2 = (p[i2 + 1] - x2) * inv;
        let r2 = (x2 - p[i2]) * inv;
        Preamble {
            i1,
            i2,
            w: [l1 * l2, r1 * l2, l1 * r2, r1 * r2],
        }
    }
}
