use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::model::{layer_dims, Activation, Block, Model};
use crate::rng::{stream, Stream};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub weight_scale: f64,
    pub seed: u64,
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_dim", self.in_dim),
            ("out_dim", self.out_dim),
            ("hidden_dim", self.hidden_dim),
            ("depth", self.depth),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.weight_scale >= 0.0) || !self.weight_scale.is_finite() {
            return Err(Error::Config(format!(
                "weight_scale must be finite and nonnegative, got {}",
                self.weight_scale
            )));
        }
        Ok(())
    }
}

/// Frozen random tanh network.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    model: Model,
}

/// `depth` tanh layers of `hidden_dim` and a linear read-out, fan-in uniform
/// initialization, every weight matrix then multiplied by `weight_scale`
/// (biases untouched).
pub fn make_teacher(spec: &TeacherSpec) -> Result<Teacher> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Teacher);
    let dims = layer_dims(spec.in_dim, spec.hidden_dim, spec.out_dim, spec.depth);
    let last = dims.len() - 1;
    let blocks = dims
        .iter()
        .enumerate()
        .map(|(k, &(n_in, n_out))| {
            let mut linear = Linear::init_uniform(n_in, n_out, &mut rng);
            linear.weight_mut().iter_mut().for_each(|w| *w *= spec.weight_scale);
            Block::Dense {
                linear,
                norm: None,
                activation: if k == last {
                    Activation::Identity
                } else {
                    Activation::Tanh
                },
            }
        })
        .collect();
    Ok(Teacher {
        model: Model::new(blocks)?,
    })
}

impl Teacher {
    /// Wraps an existing network as a frozen teacher.
    pub fn from_model(model: Model) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn in_dim(&self) -> usize {
        self.model.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.model.out_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.model.forward(x)
    }

    /// Output of every hidden layer (after the activation).
    pub fn hidden_activations(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let blocks = self.model.blocks();
        let mut h = x.clone();
        let mut out = Vec::new();
        for b in &blocks[..blocks.len() - 1] {
            h = Model::new(vec![b.clone()])?.forward(&h)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}
