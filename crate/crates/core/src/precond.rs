//! lmKAN layer with an additive linear preconditioning branch.
//!
//! | mode         | output                                  |
//! |--------------|-----------------------------------------|
//! | `relu_first` | `gamma * lmKAN(x) + W ReLU(x) + b`      |
//! | `relu_last`  | `gamma * lmKAN(x) + ReLU(W x + b)`      |
//! | `linear`     | `gamma * lmKAN(x) + W x + b`            |
//! | `none`       | `gamma * lmKAN(x)`                      |
//!
//! With `gamma = 0` a stack of these blocks is an ordinary ReLU MLP. In a
//! ReLU-first stack the first block has no ReLU (mode `linear`); in a ReLU-last
//! stack the last one has none.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{LayerGrads, LmKanLayer};
use crate::linear::{Linear, LinearGrads};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondMode {
    ReluFirst,
    ReluLast,
    Linear,
    None,
}

impl PrecondMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PrecondMode::ReluFirst => "relu_first",
            PrecondMode::ReluLast => "relu_last",
            PrecondMode::Linear => "linear",
            PrecondMode::None => "none",
        }
    }

    pub fn has_branch(self) -> bool {
        self != PrecondMode::None
    }
}

impl fmt::Display for PrecondMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrecondMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu_first" => Ok(PrecondMode::ReluFirst),
            "relu_last" => Ok(PrecondMode::ReluLast),
            "linear" => Ok(PrecondMode::Linear),
            "none" => Ok(PrecondMode::None),
            other => Err(Error::Config(format!("unknown preconditioning mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecondBlock {
    pub layer: LmKanLayer,
    /// Present iff `mode != None`; shape `n_out x n_in`.
    pub linear: Option<Linear>,
    mode: PrecondMode,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PrecondCache {
    /// Pre-activation of the linear branch (`relu_last` only).
    pre_act: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct PrecondGrads {
    pub layer: LayerGrads,
    pub linear: Option<LinearGrads>,
    pub d_input: Matrix,
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

impl PrecondBlock {
    pub fn new(layer: LmKanLayer, linear: Option<Linear>, mode: PrecondMode) -> Result<Self> {
        match (&linear, mode.has_branch()) {
            (Some(lin), true) => {
                if lin.n_in() != layer.n_in() || lin.n_out() != layer.n_out() {
                    return Err(Error::Shape(format!(
                        "linear branch {}->{} does not match lmKAN layer {}->{}",
                        lin.n_in(),
                        lin.n_out(),
                        layer.n_in(),
                        layer.n_out()
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Config("mode 'none' takes no linear branch".into()))
            }
            (None, true) => {
                return Err(Error::Config(format!("mode '{mode}' needs a linear branch")))
            }
        }
        Ok(Self { layer, linear, mode })
    }

    pub fn pure(layer: LmKanLayer) -> Self {
        Self {
            layer,
            linear: None,
            mode: PrecondMode::None,
        }
    }

    #[inline]
    pub fn mode(&self) -> PrecondMode {
        self.mode
    }

    pub fn n_in(&self) -> usize {
        self.layer.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layer.n_out()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, PrecondCache)> {
        let mut y = self.layer.forward(x)?;
        let mut pre_act = None;
        if let Some(lin) = &self.linear {
            let branch = match self.mode {
                PrecondMode::ReluFirst => lin.forward(&x.map(relu))?,
                PrecondMode::Linear => lin.forward(x)?,
                PrecondMode::ReluLast => {
                    let a = lin.forward(x)?;
                    let out = a.map(relu);
                    pre_act = Some(a);
                    out
                }
                PrecondMode::None => unreachable!("no branch in mode none"),
            };
            y.add_assign(&branch)?;
        }
        Ok((y, PrecondCache { pre_act }))
    }

    pub(crate) fn backward(&self, x: &Matrix, cache: &PrecondCache, dy: &Matrix) -> Result<PrecondGrads> {
        let layer = self.layer.backward(x, dy)?;
        let mut d_input = layer.d_input.clone();
        let linear = match &self.linear {
            None => None,
            Some(lin) => {
                let g = match self.mode {
                    PrecondMode::ReluFirst => {
                        let xr = x.map(relu);
                        let mut g = lin.backward(&xr, dy)?;
                        for (d, &xv) in g.d_input.as_mut_slice().iter_mut().zip(x.as_slice()) {
                            if xv <= 0.0 {
                                *d = 0.0;
                            }
                        }
                        g
                    }
                    PrecondMode::Linear => lin.backward(x, dy)?,
                    PrecondMode::ReluLast => {
                        let a = cache.pre_act.as_ref().expect("relu_last caches its pre-activation");
                        let mut da = dy.clone();
                        for (d, &av) in da.as_mut_slice().iter_mut().zip(a.as_slice()) {
                            if av <= 0.0 {
                                *d = 0.0;
                            }
                        }
                        lin.backward(x, &da)?
                    }
                    PrecondMode::None => unreachable!("no branch in mode none"),
                };
                d_input.add_assign(&g.d_input)?;
                Some(g)
            }
        };
        Ok(PrecondGrads {
            layer,
            linear,
            d_input,
        })
    }
}
