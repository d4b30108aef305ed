//! Batched 2D lmKAN layer.
//!
//! Output `q` of a row is `gamma * sum_p f_qp(x[2p], x[2p+1])`. All functions of a
//! layer share one [`SigmaGrid`], so the cell index and the four bilinear weights
//! of an input pair are computed once per row and reused by every output; each
//! function then costs four multiply-adds.
//!
//! Parameters live in a single tensor with index order
//! `[i1: 0..=G][i2: 0..=G][pair: 0..n_in/2][output: 0..n_out]`, so for a fixed
//! grid node the coefficients of all functions that read the same input pair are
//! contiguous over outputs.
//!
//! Large batches are evaluated from a cached repacked copy laid out
//! `[pair][output tile][i1][i2][output within tile]`: the coefficients one tile
//! reads are then a single contiguous block of `(G+1)^2 * tile` values that
//! stays in cache across many rows, which keeps the cost per lookup flat in `G`.
//! Both layouts sum over pairs in the same order and give identical results.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{normal, stream, Stream};
use crate::sigma_grid::{Preamble, SigmaGrid};
use crate::spline2d::Func2D;
use crate::tensor::Matrix;

/// Blocking parameters for the batched kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    /// Rows processed per work item.
    pub rows: usize,
    /// Input pairs per block.
    pub pairs: usize,
    /// Outputs per block.
    pub outputs: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            rows: 512,
            pairs: 16,
            outputs: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmKanLayer {
    n_in: usize,
    n_out: usize,
    grid: SigmaGrid,
    params: Vec<f64>,
    gamma: f64,
    tiles: TileConfig,
    packed: OnceLock<Vec<f64>>,
}

impl PartialEq for LmKanLayer {
    fn eq(&self, other: &Self) -> bool {
        self.n_in == other.n_in
            && self.n_out == other.n_out
            && self.grid == other.grid
            && self.params == other.params
            && self.gamma == other.gamma
            && self.tiles == other.tiles
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub d_params: Vec<f64>,
    pub d_input: Matrix,
}

impl LmKanLayer {
    /// Layer with all coefficients zero and `gamma = 1`.
    pub fn zeros(n_in: usize, n_out: usize, g: usize) -> Result<Self> {
        if n_in == 0 || n_in % 2 != 0 {
            return Err(Error::Config(format!(
                "lmKAN input width must be even and positive, got {n_in}"
            )));
        }
        if n_out == 0 {
            return Err(Error::Config("lmKAN output width must be positive".into()));
        }
        let grid = SigmaGrid::new(g)?;
        let count = grid.nodes() * grid.nodes() * (n_in / 2) * n_out;
        Ok(Self {
            n_in,
            n_out,
            grid,
            params: vec![0.0; count],
            gamma: 1.0,
            tiles: TileConfig::default(),
            packed: OnceLock::new(),
        })
    }

    /// Random layer: coefficients i.i.d. `N(0, init_scale^2)` (default scale
    /// `(n_in/2)^-1/2`) from the init stream of `seed`; `gamma = 0`.
    pub fn init(n_in: usize, n_out: usize, g: usize, seed: u64, init_scale: Option<f64>) -> Result<Self> {
        let mut layer = Self::zeros(n_in, n_out, g)?;
        let mut rng = stream(seed, Stream::Init);
        layer.randomize(&mut rng, init_scale);
        layer.gamma = 0.0;
        Ok(layer)
    }

    pub(crate) fn randomize(&mut self, rng: &mut crate::rng::StreamRng, init_scale: Option<f64>) {
        let scale = init_scale.unwrap_or_else(|| 1.0 / ((self.n_in / 2) as f64).sqrt());
        self.packed = OnceLock::new();
        for p in &mut self.params {
            *p = scale * normal(rng);
        }
    }

    pub fn from_params(n_in: usize, n_out: usize, g: usize, params: Vec<f64>, gamma: f64) -> Result<Self> {
        let mut layer = Self::zeros(n_in, n_out, g)?;
        if params.len() != layer.params.len() {
            return Err(Error::Shape(format!(
                "parameter tensor for {n_in}->{n_out}, G={g} needs {} entries, got {}",
                layer.params.len(),
                params.len()
            )));
        }
        if let Some(bad) = params.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite coefficient {bad}")));
        }
        layer.params = params;
        layer.gamma = gamma;
        Ok(layer)
    }

    #[inline]
    pub fn n_in(&self) -> usize {
        self.n_in
    }

    #[inline]
    pub fn n_out(&self) -> usize {
        self.n_out
    }

    #[inline]
    pub fn pairs(&self) -> usize {
        self.n_in / 2
    }

    #[inline]
    pub fn grid(&self) -> &SigmaGrid {
        &self.grid
    }

    #[inline]
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    pub fn tiles(&self) -> TileConfig {
        self.tiles
    }

    pub fn set_tiles(&mut self, tiles: TileConfig) {
        self.tiles = TileConfig {
            rows: tiles.rows.max(1),
            pairs: tiles.pairs.max(1),
            outputs: tiles.outputs.max(1),
        };
        self.packed = OnceLock::new();
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.packed = OnceLock::new();
        &mut self.params
    }

    /// Number of trainable coefficients, `(G+1)^2 * (n_in/2) * n_out`.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Number of 2D functions, `(n_in/2) * n_out`.
    pub fn function_count(&self) -> usize {
        self.pairs() * self.n_out
    }

    #[inline]
    pub fn param_index(&self, i1: usize, i2: usize, pair: usize, out: usize) -> usize {
        ((i1 * self.grid.nodes() + i2) * self.pairs() + pair) * self.n_out + out
    }

    /// Copy of the coefficient sheet of `f_{out, pair}`.
    pub fn function(&self, pair: usize, out: usize) -> Func2D {
        let n = self.grid.nodes();
        let mut f = Func2D::zeros(&self.grid);
        for i1 in 0..n {
            for i2 in 0..n {
                f.set(i1, i2, self.params[self.param_index(i1, i2, pair, out)]);
            }
        }
        f
    }

    pub fn set_function(&mut self, pair: usize, out: usize, f: &Func2D) -> Result<()> {
        f.check_grid(&self.grid)?;
        self.packed = OnceLock::new();
        let n = self.grid.nodes();
        for i1 in 0..n {
            for i2 in 0..n {
                let k = self.param_index(i1, i2, pair, out);
                self.params[k] = f.get(i1, i2);
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.n_in {
            return Err(Error::Shape(format!(
                "lmKAN layer expects width {}, got {}",
                self.n_in,
                x.cols()
            )));
        }
        Ok(())
    }

    /// Preambles for a block of rows, laid out `[pair][row]`.
    fn preambles(&self, x: &[f64], rows: usize) -> Vec<Preamble> {
        let half = self.pairs();
        let mut pre = Vec::with_capacity(half * rows);
        for p in 0..half {
            for r in 0..rows {
                let base = r * self.n_in + 2 * p;
                pre.push(self.grid.preamble(x[base], x[base + 1]));
            }
        }
        pre
    }

    /// Coefficients repacked `[pair][output tile][i1][i2][output in tile]`.
    fn packed(&self) -> &[f64] {
        self.packed.get_or_init(|| {
            let n2 = self.grid.nodes() * self.grid.nodes();
            let (half, n_out, t) = (self.pairs(), self.n_out, self.tiles.outputs);
            let mut out = Vec::with_capacity(self.params.len());
            for p in 0..half {
                for q0 in (0..n_out).step_by(t) {
                    let q1 = (q0 + t).min(n_out);
                    for node in 0..n2 {
                        let base = (node * half + p) * n_out;
                        out.extend_from_slice(&self.params[base + q0..base + q1]);
                    }
                }
            }
            out
        })
    }

    /// Batched forward pass, `batch x n_in -> batch x n_out`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut out = Matrix::zeros(x.rows(), self.n_out);
        if x.rows() == 0 {
            return Ok(out);
        }
        let n2 = self.grid.nodes() * self.grid.nodes();
        // Repacking pays off once a tile is revisited by several rows.
        if self.packed.get().is_some() || x.rows() >= n2 {
            let packed = self.packed();
            // One chunk per worker at most: each sheet block is then streamed
            // from memory once per chunk.
            let per = x.rows().div_ceil(rayon::current_num_threads()).max(self.tiles.rows);
            out.as_mut_slice()
                .par_chunks_mut(per * self.n_out)
                .zip(x.as_slice().par_chunks(per * self.n_in))
                .for_each(|(y, xb)| self.forward_block_packed(packed, xb, y));
        } else {
            let rows_per = self.tiles.rows;
            out.as_mut_slice()
                .par_chunks_mut(rows_per * self.n_out)
                .zip(x.as_slice().par_chunks(rows_per * self.n_in))
                .for_each(|(y, xb)| self.forward_block(xb, y));
        }
        Ok(out)
    }

    fn forward_block_packed(&self, packed: &[f64], x: &[f64], y: &mut [f64]) {
        let rows = x.len() / self.n_in;
        let n_out = self.n_out;
        let n = self.grid.nodes();
        let n2 = n * n;
        let t = self.tiles.outputs;
        // Accumulators laid out [output tile][row][output in tile] so that each
        // sheet block streams through a contiguous slab.
        let mut acc = vec![0.0; rows * n_out];
        let mut pre = Vec::with_capacity(rows);
        for p in 0..self.pairs() {
            pre.clear();
            pre.extend((0..rows).map(|r| {
                let base = r * self.n_in + 2 * p;
                self.grid.preamble(x[base], x[base + 1])
            }));
            for q0 in (0..n_out).step_by(t) {
                let q1 = (q0 + t).min(n_out);
                let width = q1 - q0;
                let sheet = &packed[(p * n_out + q0) * n2..(p * n_out + q1) * n2];
                let slab = &mut acc[q0 * rows..q1 * rows];
                match width {
                    16 => lookup_rows::<16>(&pre, sheet, n, slab),
                    8 => lookup_rows::<8>(&pre, sheet, n, slab),
                    _ => {
                        let (d10, d01) = (n * width, width);
                        for (pr, yr) in pre.iter().zip(slab.chunks_exact_mut(width)) {
                            let b = (pr.i1 * n + pr.i2) * width;
                            let c00 = &sheet[b..b + width];
                            let c10 = &sheet[b + d10..b + d10 + width];
                            let c01 = &sheet[b + d01..b + d01 + width];
                            let c11 = &sheet[b + d10 + d01..b + d10 + d01 + width];
                            let [w00, w10, w01, w11] = pr.w;
                            for k in 0..width {
                                yr[k] += w00 * c00[k] + w10 * c10[k] + w01 * c01[k] + w11 * c11[k];
                            }
                        }
                    }
                }
            }
        }
        let g = self.gamma;
        for q0 in (0..n_out).step_by(t) {
            let q1 = (q0 + t).min(n_out);
            let width = q1 - q0;
            let slab = &acc[q0 * rows..q1 * rows];
            for (r, src) in slab.chunks_exact(width).enumerate() {
                let dst = &mut y[r * n_out + q0..r * n_out + q1];
                if g == 1.0 {
                    dst.copy_from_slice(src);
                } else {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s * g;
                    }
                }
            }
        }
    }

    fn forward_block(&self, x: &[f64], y: &mut [f64]) {
        let rows = x.len() / self.n_in;
        let half = self.pairs();
        let n_out = self.n_out;
        let pre = self.preambles(x, rows);
        let node_stride = half * n_out;
        let i1_stride = self.grid.nodes() * node_stride;
        let params = &self.params;

        for q0 in (0..n_out).step_by(self.tiles.outputs) {
            let q1 = (q0 + self.tiles.outputs).min(n_out);
            let width = q1 - q0;
            for p0 in (0..half).step_by(self.tiles.pairs) {
                let p1 = (p0 + self.tiles.pairs).min(half);
                for r in 0..rows {
                    let yr = &mut y[r * n_out + q0..r * n_out + q1];
                    for p in p0..p1 {
                        let pr = &pre[p * rows + r];
                        let base = pr.i1 * i1_stride + pr.i2 * node_stride + p * n_out + q0;
                        let c00 = &params[base..base + width];
                        let c10 = &params[base + i1_stride..base + i1_stride + width];
                        let c01 = &params[base + node_stride..base + node_stride + width];
                        let b11 = base + i1_stride + node_stride;
                        let c11 = &params[b11..b11 + width];
                        let [w00, w10, w01, w11] = pr.w;
                        for k in 0..width {
                            yr[k] += w00 * c00[k] + w10 * c10[k] + w01 * c01[k] + w11 * c11[k];
                        }
                    }
                }
            }
        }
        if self.gamma != 1.0 {
            let g = self.gamma;
            y.iter_mut().for_each(|v| *v *= g);
        }
    }

    /// Gradients of `sum(dY * forward(X))` with respect to the coefficients and
    /// the inputs. The result does not depend on the thread count: coefficient
    /// gradients are owned per input pair and input gradients per row.
    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<LayerGrads> {
        self.check_input(x)?;
        if dy.cols() != self.n_out || dy.rows() != x.rows() {
            return Err(Error::Shape(format!(
                "lmKAN backward: dY is {}x{}, expected {}x{}",
                dy.rows(),
                dy.cols(),
                x.rows(),
                self.n_out
            )));
        }
        let rows = x.rows();
        let half = self.pairs();
        let n_out = self.n_out;
        let nodes = self.grid.nodes();
        let gamma = self.gamma;
        let pre = self.preambles(x.as_slice(), rows);
        let dys = dy.as_slice();

        // Coefficient gradients: one scratch sheet-set [node][out] per pair.
        let per_pair: Vec<Vec<f64>> = (0..half)
            .into_par_iter()
            .map(|p| {
                let mut acc = vec![0.0; nodes * nodes * n_out];
                for r in 0..rows {
                    let pr = &pre[p * rows + r];
                    let dyr = &dys[r * n_out..(r + 1) * n_out];
                    let corners = [
                        pr.i1 * nodes + pr.i2,
                        (pr.i1 + 1) * nodes + pr.i2,
                        pr.i1 * nodes + pr.i2 + 1,
                        (pr.i1 + 1) * nodes + pr.i2 + 1,
                    ];
                    for (c, &node) in corners.iter().enumerate() {
                        let w = gamma * pr.w[c];
                        let dst = &mut acc[node * n_out..(node + 1) * n_out];
                        for (a, &g) in dst.iter_mut().zip(dyr) {
                            *a += w * g;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut d_params = vec![0.0; self.params.len()];
        for (p, acc) in per_pair.iter().enumerate() {
            for node in 0..nodes * nodes {
                let dst = (node * half + p) * n_out;
                d_params[dst..dst + n_out].copy_from_slice(&acc[node * n_out..(node + 1) * n_out]);
            }
        }

        // Input gradients, row-parallel.
        let node_stride = half * n_out;
        let i1_stride = nodes * node_stride;
        let points = self.grid.points();
        let params = &self.params;
        let mut d_input = Matrix::zeros(rows, self.n_in);
        d_input
            .as_mut_slice()
            .par_chunks_mut(self.n_in)
            .enumerate()
            .for_each(|(r, dx)| {
                let xr = &x.as_slice()[r * self.n_in..(r + 1) * self.n_in];
                let dyr = &dys[r * n_out..(r + 1) * n_out];
                for p in 0..half {
                    let pr = &pre[p * rows + r];
                    let base = pr.i1 * i1_stride + pr.i2 * node_stride + p * n_out;
                    let dot = |off: usize| -> f64 {
                        params[off..off + n_out]
                            .iter()
                            .zip(dyr)
                            .map(|(a, b)| a * b)
                            .sum()
                    };
                    let s00 = dot(base);
                    let s10 = dot(base + i1_stride);
                    let s01 = dot(base + node_stride);
                    let s11 = dot(base + i1_stride + node_stride);
                    let (x1, x2) = (xr[2 * p], xr[2 * p + 1]);
                    let inv = self.grid.inv_area(pr.i1, pr.i2);
                    let (i1, i2) = (pr.i1, pr.i2);
                    dx[2 * p] = gamma
                        * ((s10 - s00) * (points[i2 + 1] - x2) + (s11 - s01) * (x2 - points[i2]))
                        * inv;
                    dx[2 * p + 1] = gamma
                        * ((s01 - s00) * (points[i1 + 1] - x1) + (s11 - s10) * (x1 - points[i1]))
                        * inv;
                }
            });

        Ok(LayerGrads { d_params, d_input })
    }
}

const PREFETCH_DISTANCE: usize = 8;

/// Hints the cache lines of two horizontally adjacent corners (`2 * W` values).
#[inline(always)]
fn prefetch_corner<const W: usize>(sheet: &[f64], b: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
        let end = (b + 2 * W).min(sheet.len());
        let mut i = b;
        while i < end {
            // SAFETY: `i < sheet.len()`, and prefetching never faults.
            unsafe { _mm_prefetch::<_MM_HINT_T0>(sheet.as_ptr().add(i) as *const i8) };
            i += 8;
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = (sheet, b);
}

/// Fixed-width lookup of every row of one `(pair, output tile)` sheet block
/// into a contiguous `[row][W]` slab.
#[inline]
fn lookup_rows<const W: usize>(pre: &[Preamble], sheet: &[f64], n: usize, slab: &mut [f64]) {
    let (d10, d01) = (n * W, W);
    let corner = |b: usize| -> &[f64; W] { sheet[b..b + W].try_into().expect("tile width") };
    for (r, (pr, yr)) in pre.iter().zip(slab.chunks_exact_mut(W)).enumerate() {
        if let Some(ahead) = pre.get(r + PREFETCH_DISTANCE) {
            let b = (ahead.i1 * n + ahead.i2) * W;
            prefetch_corner::<W>(sheet, b);
            prefetch_corner::<W>(sheet, b + d10);
        }
        let b = (pr.i1 * n + pr.i2) * W;
        let (c00, c10, c01, c11) = (corner(b), corner(b + d10), corner(b + d01), corner(b + d10 + d01));
        let [w00, w10, w01, w11] = pr.w;
        for k in 0..W {
            yr[k] += w00 * c00[k] + w10 * c10[k] + w01 * c01[k] + w11 * c11[k];
        }
    }
}
