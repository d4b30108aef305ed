//! Lowering of strided 2D convolutions to row-wise fully connected layers.
//!
//! A `k x k` convolution over `C` channels is a map `R^{k*k*C} -> R^{C_out}`
//! applied at every output position. [`unfold_conv`] gathers the receptive
//! fields into rows so any layer (dense or lmKAN) can act as the kernel, and
//! [`fold_rows`] reshapes the per-position outputs back into an image.
//!
//! Images are `H x W x C`, channel-last, row-major. Patch columns are ordered
//! `(dy, dx, channel)` with channel fastest; output rows enumerate positions
//! row-major.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Returns the patch matrix and the output spatial dims `(out_h, out_w)`.
pub fn unfold_conv(image: &[f64], shape: ImageShape, kernel: usize, stride: usize) -> Result<(Matrix, (usize, usize))> {
    let ImageShape {
        height,
        width,
        channels,
    } = shape;
    if image.len() != height * width * channels {
        return Err(Error::Shape(format!(
            "image buffer has {} values, shape {height}x{width}x{channels} needs {}",
            image.len(),
            height * width * channels
        )));
    }
    if kernel == 0 || stride == 0 || kernel > height || kernel > width {
        return Err(Error::Shape(format!(
            "kernel {kernel} / stride {stride} invalid for a {height}x{width} image"
        )));
    }
    if (height - kernel) % stride != 0 || (width - kernel) % stride != 0 {
        return Err(Error::Shape(format!(
            "({height}-{kernel}) and ({width}-{kernel}) must be divisible by stride {stride}"
        )));
    }
    let out_h = (height - kernel) / stride + 1;
    let out_w = (width - kernel) / stride + 1;
    let cols = kernel * kernel * channels;
    let mut patches = Matrix::zeros(out_h * out_w, cols);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = patches.row_mut(oy * out_w + ox);
            let mut c = 0;
            for dy in 0..kernel {
                let y = oy * stride + dy;
                for dx in 0..kernel {
                    let x = ox * stride + dx;
                    let src = (y * width + x) * channels;
                    row[c..c + channels].copy_from_slice(&image[src..src + channels]);
                    c += channels;
                }
            }
        }
    }
    Ok((patches, (out_h, out_w)))
}

/// Reshapes `(out_h * out_w) x C_out` layer outputs into an `out_h x out_w x C_out` image.
pub fn fold_rows(rows: &Matrix, out_h: usize, out_w: usize) -> Result<(Vec<f64>, ImageShape)> {
    if rows.rows() != out_h * out_w {
        return Err(Error::Shape(format!(
            "{} rows cannot fold into {out_h}x{out_w}",
            rows.rows()
        )));
    }
    Ok((
        rows.as_slice().to_vec(),
        ImageShape {
            height: out_h,
            width: out_w,
            channels: rows.cols(),
        },
    ))
}
