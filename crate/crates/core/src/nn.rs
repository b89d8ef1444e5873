//! Small parameterized building blocks shared by the model modules.

use rand::Rng;

use crate::error::Result;
use crate::params::{trunc_normal, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// Standard deviation of the position embedding.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// `y = x·W + b` with `W` stored as `[in, out]`, initialized with standard
/// deviation `1/√in`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        Linear::with_std(store, rng, name, fan_in, fan_out, bias, (1.0 / fan_in as f64).sqrt())
    }

    /// Weights from a truncated normal of standard deviation `std`.
    pub fn with_std(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            trunc_normal(rng, &[fan_in, fan_out], std),
        );
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Accepts `[rows, in]` or a single vector `[in]` (returned as `[out]`).
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let is_vec = s.value(x).shape().len() == 1;
        let x2 = if is_vec {
            let n = s.value(x).numel();
            s.tape.reshape(x, &[1, n])?
        } else {
            x
        };
        let w = s.param(self.weight);
        let mut y = s.tape.matmul(x2, w)?;
        if let Some(b) = self.bias {
            let b = s.param(b);
            y = s.tape.add_row(y, b)?;
        }
        if is_vec {
            y = s.tape.reshape(y, &[self.fan_out])?;
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(&format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Layer norm followed by a linear map to class logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub norm: LayerNorm,
    pub linear: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, n_classes: usize) -> Self {
        Classifier {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            linear: Linear::new(store, rng, &format!("{name}.linear"), dim, n_classes, true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let x = self.norm.forward(s, x)?;
        self.linear.forward(s, x)
    }
}
