//! Hessian regularization of coefficient sheets.
//!
//! Second derivatives are estimated at every interior node `(i, j)` with
//! `i, j in 1..=G-1` using non-uniform three-point stencils on the grid points
//! (ghost points included as neighbours):
//!
//! ```text
//! D11 = 2 (h+ f[i-1] - (h- + h+) f[i] + h- f[i+1]) / (h- h+ (h- + h+))
//! D12 = (f[i+1,j+1] - f[i+1,j-1] - f[i-1,j+1] + f[i-1,j-1]) / ((h-_i + h+_i)(h-_j + h+_j))
//! H   = D11^2 + 2 D12^2 + D22^2
//! ```
//!
//! where `h- = p[i] - p[i-1]` and `h+ = p[i+1] - p[i]`. The penalty of a sheet
//! is the mean of `H` over the `(G-1)^2` interior nodes. The stencils are exact
//! on quadratics, so the penalty vanishes exactly on planes.

use crate::error::{Error, Result};
use crate::layer::LmKanLayer;
use crate::model::{Block, Model, ParamKind};
use crate::sigma_grid::SigmaGrid;
use crate::spline2d::Func2D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianPenaltyConfig {
    pub lambda: f64,
}

impl HessianPenaltyConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }
}

/// Per-center stencil weights along one axis.
struct Stencils {
    /// `[a, b, c]` for centers `1..=G-1` (index `i - 1`).
    second: Vec<[f64; 3]>,
    /// `1 / (h- + h+)` per center.
    cross: Vec<f64>,
}

impl Stencils {
    fn new(grid: &SigmaGrid) -> Self {
        let p = grid.points();
        let g = grid.intervals();
        let mut second = Vec::with_capacity(g - 1);
        let mut cross = Vec::with_capacity(g - 1);
        for i in 1..g {
            let hm = p[i] - p[i - 1];
            let hp = p[i + 1] - p[i];
            let denom = hm * hp * (hm + hp);
            second.push([2.0 * hp / denom, -2.0 * (hm + hp) / denom, 2.0 * hm / denom]);
            cross.push(1.0 / (hm + hp));
        }
        Self { second, cross }
    }
}

/// Mean Hessian energy of `width` interleaved sheets stored node-major
/// (`coeffs[(i1 * (G+1) + i2) * width + f]`), summed over sheets.
///
/// When `grad` is given, `scale * d(sum)/d(coeffs)` is added to it.
fn penalty_strided(grid: &SigmaGrid, coeffs: &[f64], width: usize, mut grad: Option<(&mut [f64], f64)>) -> f64 {
    let g = grid.intervals();
    let n = g + 1;
    let st = Stencils::new(grid);
    let norm = 1.0 / ((g - 1) * (g - 1)) as f64;
    let at = |i: usize, j: usize| (i * n + j) * width;
    let mut acc = vec![0.0; width];
    for i in 1..g {
        let [a1, b1, c1] = st.second[i - 1];
        let e1 = st.cross[i - 1];
        for j in 1..g {
            let [a2, b2, c2] = st.second[j - 1];
            let e12 = e1 * st.cross[j - 1];
            let (im, ic, ip) = (at(i - 1, j), at(i, j), at(i + 1, j));
            let (jm, jp) = (at(i, j - 1), at(i, j + 1));
            let (pp, pm, mp, mm) = (at(i + 1, j + 1), at(i + 1, j - 1), at(i - 1, j + 1), at(i - 1, j - 1));
            for f in 0..width {
                let center = coeffs[ic + f];
                let d11 = a1 * coeffs[im + f] + b1 * center + c1 * coeffs[ip + f];
                let d22 = a2 * coeffs[jm + f] + b2 * center + c2 * coeffs[jp + f];
                let d12 = (coeffs[pp + f] - coeffs[pm + f] - coeffs[mp + f] + coeffs[mm + f]) * e12;
                acc[f] += d11 * d11 + 2.0 * d12 * d12 + d22 * d22;
                if let Some((gr, scale)) = grad.as_mut() {
                    let s = *scale * norm;
                    let (g11, g22, g12) = (2.0 * d11 * s, 2.0 * d22 * s, 4.0 * d12 * e12 * s);
                    gr[im + f] += g11 * a1;
                    gr[ic + f] += g11 * b1 + g22 * b2;
                    gr[ip + f] += g11 * c1;
                    gr[jm + f] += g22 * a2;
                    gr[jp + f] += g22 * c2;
                    gr[pp + f] += g12;
                    gr[pm + f] -= g12;
                    gr[mp + f] -= g12;
                    gr[mm + f] += g12;
                }
            }
        }
    }
    acc.iter().sum::<f64>() * norm
}

/// Mean Hessian energy of one sheet.
pub fn hessian_penalty(grid: &SigmaGrid, f: &Func2D) -> Result<f64> {
    f.check_grid(grid)?;
    Ok(penalty_strided(grid, f.coeffs(), 1, None))
}

/// Gradient of [`hessian_penalty`] with respect to every coefficient.
pub fn hessian_penalty_grad(grid: &SigmaGrid, f: &Func2D) -> Result<Func2D> {
    f.check_grid(grid)?;
    let mut g = Func2D::zeros(grid);
    penalty_strided(grid, f.coeffs(), 1, Some((g.coeffs_mut(), 1.0)));
    Ok(g)
}

/// Sum of the sheet penalties of every function of a layer (unscaled by `lambda`).
pub fn layer_penalty(layer: &LmKanLayer) -> f64 {
    penalty_strided(layer.grid(), layer.params(), layer.function_count(), None)
}

/// Adds `scale * d(layer_penalty)/dP` to `grad` and returns the penalty.
pub fn layer_penalty_grad(layer: &LmKanLayer, scale: f64, grad: &mut [f64]) -> Result<f64> {
    if grad.len() != layer.param_count() {
        return Err(Error::Shape(format!(
            "gradient buffer has {} entries, layer has {}",
            grad.len(),
            layer.param_count()
        )));
    }
    Ok(penalty_strided(
        layer.grid(),
        layer.params(),
        layer.function_count(),
        Some((grad, scale)),
    ))
}

/// `lambda` times the summed penalty over every sheet of every lmKAN layer.
pub fn model_penalty(model: &Model, cfg: &HessianPenaltyConfig) -> f64 {
    if cfg.lambda == 0.0 {
        return 0.0;
    }
    cfg.lambda * model.lmkan_layers().map(layer_penalty).sum::<f64>()
}

/// Adds the gradient of [`model_penalty`] to `grads` (in [`Model::params`]
/// order) and returns the penalty.
pub fn add_model_penalty_grad(model: &Model, cfg: &HessianPenaltyConfig, grads: &mut [Vec<f64>]) -> Result<f64> {
    let kinds = model.param_kinds();
    if grads.len() != kinds.len() {
        return Err(Error::Shape(format!(
            "{} gradient groups for {} parameter groups",
            grads.len(),
            kinds.len()
        )));
    }
    if cfg.lambda == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (kind, g) in kinds.iter().zip(grads.iter_mut()) {
        if let ParamKind::Coefficients { block } = kind {
            if let Block::LmKan { block, .. } = &model.blocks()[*block] {
                total += layer_penalty_grad(&block.layer, cfg.lambda, g)?;
            }
        }
    }
    Ok(cfg.lambda * total)
}

/// Least-squares plane `c + a p[i] + b p[j]` through all nodes of a sheet.
/// Returns `(residual_rms / coeff_rms, [c, a, b])`; the ratio is 0 for an
/// all-zero sheet.
pub fn plane_fit(grid: &SigmaGrid, f: &Func2D) -> Result<(f64, [f64; 3])> {
    f.check_grid(grid)?;
    let p = grid.points();
    let n = grid.nodes();
    // Normal equations; the node set is a tensor grid so the design is well posed.
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let row = [1.0, p[i], p[j]];
            let v = f.get(i, j);
            for r in 0..3 {
                atb[r] += row[r] * v;
                for c in 0..3 {
                    ata[r][c] += row[r] * row[c];
                }
            }
        }
    }
    let coef = solve3(ata, atb);
    let (mut res, mut tot) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = f.get(i, j);
            let fit = coef[0] + coef[1] * p[i] + coef[2] * p[j];
            res += (v - fit) * (v - fit);
            tot += v * v;
        }
    }
    let ratio = if tot == 0.0 { 0.0 } else { (res / tot).sqrt() };
    Ok((ratio, coef))
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for k in 0..3 {
        let piv = (k..3)
            .max_by(|&x, &y| a[x][k].abs().total_cmp(&a[y][k].abs()))
            .unwrap_or(k);
        a.swap(k, piv);
        b.swap(k, piv);
        for r in k + 1..3 {
            let m = a[r][k] / a[k][k];
            for c in k..3 {
                a[r][c] -= m * a[k][c];
            }
            b[r] -= m * b[k];
        }
    }
    let mut x = [0.0; 3];
    for k in (0..3).rev() {
        let s: f64 = (k + 1..3).map(|c| a[k][c] * x[c]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}
