//! Standalone 2D splined functions over a [`SigmaGrid`].
//!
//! A function is a `(G+1) x (G+1)` sheet of coefficients `p[i1][i2]`, the value at
//! grid node `(i1, i2)`; on every cell it is the bilinear interpolant of its four
//! corner coefficients. Ghost-node coefficients set the slopes on the unbounded
//! edge intervals.

use crate::error::{Error, Result};
use crate::sigma_grid::SigmaGrid;

/// Coefficient sheet of one 2D function, row-major `coeffs[i1 * (G+1) + i2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Func2D {
    nodes: usize,
    coeffs: Vec<f64>,
}

impl Func2D {
    pub fn zeros(grid: &SigmaGrid) -> Self {
        let nodes = grid.nodes();
        Self {
            nodes,
            coeffs: vec![0.0; nodes * nodes],
        }
    }

    /// Sheet sampled from `f(points[i1], points[i2])`.
    pub fn from_node_fn(grid: &SigmaGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let p = grid.points();
        let nodes = grid.nodes();
        let mut coeffs = Vec::with_capacity(nodes * nodes);
        for &a in p {
            for &b in p {
                coeffs.push(f(a, b));
            }
        }
        Self { nodes, coeffs }
    }

    pub fn from_vec(grid: &SigmaGrid, coeffs: Vec<f64>) -> Result<Self> {
        let nodes = grid.nodes();
        if coeffs.len() != nodes * nodes {
            return Err(Error::Shape(format!(
                "sheet for G={} needs {} coefficients, got {}",
                grid.intervals(),
                nodes * nodes,
                coeffs.len()
            )));
        }
        if let Some(bad) = coeffs.iter().find(|c| !c.is_finite()) {
            return Err(Error::Domain(format!("non-finite coefficient {bad}")));
        }
        Ok(Self { nodes, coeffs })
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    #[inline]
    pub fn get(&self, i1: usize, i2: usize) -> f64 {
        self.coeffs[i1 * self.nodes + i2]
    }

    #[inline]
    pub fn set(&mut self, i1: usize, i2: usize, v: f64) {
        self.coeffs[i1 * self.nodes + i2] = v;
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub(crate) fn check_grid(&self, grid: &SigmaGrid) -> Result<()> {
        if self.nodes != grid.nodes() {
            return Err(Error::Shape(format!(
                "sheet has {} nodes per axis, grid has {}",
                self.nodes,
                grid.nodes()
            )));
        }
        Ok(())
    }
}

/// Value of the 1D basis function centred on node `i` at `x`.
///
/// Evaluated from the grid geometry alone (no sigma lookup): interior hats rise
/// from `points[i-1]` to `points[i]` and fall to `points[i+1]`; basis 0 and basis
/// `G` are the edge functions that are 1 at the ghosts and 0 at the outermost
/// interior points, and the hats on nodes 1 and `G-1` keep their outer slope
/// over the infinite tails.
pub fn basis_weight_1d(grid: &SigmaGrid, i: usize, x: f64) -> Result<f64> {
    let g = grid.intervals();
    if i > g {
        return Err(Error::Index { index: i, max: g });
    }
    let p = grid.points();
    let rising = |lo: usize| (x - p[lo]) / (p[lo + 1] - p[lo]);
    let falling = |lo: usize| (p[lo + 1] - x) / (p[lo + 1] - p[lo]);
    let v = if i == 0 {
        if x <= p[1] {
            falling(0)
        } else {
            0.0
        }
    } else if i == g {
        if x >= p[g - 1] {
            rising(g - 1)
        } else {
            0.0
        }
    } else if x <= p[i] {
        if i == 1 || x >= p[i - 1] {
            rising(i - 1)
        } else {
            0.0
        }
    } else if i == g - 1 || x <= p[i + 1] {
        falling(i)
    } else {
        0.0
    };
    Ok(v)
}

/// O(1) evaluation: one preamble and four multiply-adds.
pub fn eval2d(grid: &SigmaGrid, f: &Func2D, x1: f64, x2: f64) -> f64 {
    let pre = grid.preamble(x1, x2);
    let (i1, i2) = (pre.i1, pre.i2);
    pre.w[0] * f.get(i1, i2)
        + pre.w[1] * f.get(i1 + 1, i2)
        + pre.w[2] * f.get(i1, i2 + 1)
        + pre.w[3] * f.get(i1 + 1, i2 + 1)
}

/// Reference evaluation: the full `(G+1)^2` sum of basis products.
///
/// Deliberately O(G^2) and independent of the sigma lookup; every fast path is
/// checked against it.
pub fn eval2d_dense_oracle(grid: &SigmaGrid, f: &Func2D, x1: f64, x2: f64) -> f64 {
    let n = grid.nodes();
    let b1: Vec<f64> = (0..n)
        .map(|i| basis_weight_1d(grid, i, x1).expect("index in range"))
        .collect();
    let b2: Vec<f64> = (0..n)
        .map(|i| basis_weight_1d(grid, i, x2).expect("index in range"))
        .collect();
    let mut acc = 0.0;
    for i1 in 0..n {
        for i2 in 0..n {
            acc += f.get(i1, i2) * b1[i1] * b2[i2];
        }
    }
    acc
}

/// Input and coefficient derivatives of a 2D function at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grad2D {
    pub df_dx1: f64,
    pub df_dx2: f64,
    /// Active cell; coefficient gradients are nonzero only on its four corners.
    pub i1: usize,
    pub i2: usize,
    /// `d f / d p` at `(i1,i2), (i1+1,i2), (i1,i2+1), (i1+1,i2+1)`.
    pub coeff_grads: [f64; 4],
}

impl Grad2D {
    /// Dense `(G+1)^2` coefficient gradient sheet.
    pub fn coeff_sheet(&self, grid: &SigmaGrid) -> Func2D {
        let mut s = Func2D::zeros(grid);
        s.set(self.i1, self.i2, self.coeff_grads[0]);
        s.set(self.i1 + 1, self.i2, self.coeff_grads[1]);
        s.set(self.i1, self.i2 + 1, self.coeff_grads[2]);
        s.set(self.i1 + 1, self.i2 + 1, self.coeff_grads[3]);
        s
    }
}

/// Derivatives of the bilinear cell form. On a cell boundary the derivative of
/// the cell chosen by the floor index is returned.
pub fn grad2d(grid: &SigmaGrid, f: &Func2D, x1: f64, x2: f64) -> Grad2D {
    let pre = grid.preamble(x1, x2);
    let (i1, i2) = (pre.i1, pre.i2);
    let p = grid.points();
    let inv = grid.inv_area(i1, i2);
    let (p00, p10, p01, p11) = (
        f.get(i1, i2),
        f.get(i1 + 1, i2),
        f.get(i1, i2 + 1),
        f.get(i1 + 1, i2 + 1),
    );
    let df_dx1 = ((p10 - p00) * (p[i2 + 1] - x2) + (p11 - p01) * (x2 - p[i2])) * inv;
    let df_dx2 = ((p01 - p00) * (p[i1 + 1] - x1) + (p11 - p10) * (x1 - p[i1])) * inv;
    Grad2D {
        df_dx1,
        df_dx2,
        i1,
        i2,
        coeff_grads: pre.w,
    }
}
