//! Multi-scale dynamic aggregation: a feature-conditioned sigmoid gate over
//! the stacked per-stage logits.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamStore, Session};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MsdaConfig {
    /// Stack `softmax(η_i)` instead of raw logits.
    pub pre_softmax: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Gate,
    Sum,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(Aggregation::Gate),
            "sum" => Ok(Aggregation::Sum),
            other => Err(Error::Config(format!(
                "aggregation must be `gate` or `sum`, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Gate => "gate",
            Aggregation::Sum => "sum",
        })
    }
}

/// `G = σ(W·MF + b)` with `W: Σc → 4n`.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub linear: Linear,
    pub n_classes: usize,
}

impl GateParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, feature_dim: usize, n_classes: usize) -> Self {
        GateParams {
            linear: Linear::new(store, rng, "msda.gate", feature_dim, 4 * n_classes, true),
            n_classes,
        }
    }
}

/// Concatenate the four stage cls tokens in stage order.
pub fn build_feature(s: &mut Session, cls_tokens: &[Var; 4], dims: &[usize; 4]) -> Result<Var> {
    for (i, (v, d)) in cls_tokens.iter().zip(dims).enumerate() {
        let shape = s.value(*v).shape();
        if shape != [*d] {
            return Err(Error::Contract(format!(
                "stage {} cls token has shape {shape:?}, expected [{d}]",
                i + 1
            )));
        }
    }
    s.tape.concat_cols(cls_tokens)
}

/// Stack four logit vectors into `MC[4, n]`.
pub fn stack_logits(s: &mut Session, etas: &[Var; 4], pre_softmax: bool) -> Result<Var> {
    let rows: Vec<Var> = if pre_softmax {
        etas.iter().map(|e| s.tape.softmax(*e)).collect()
    } else {
        etas.to_vec()
    };
    s.tape.concat_rows(&rows)
}

/// `σ(W·MF + b)` reshaped row-major to `[4, n]`, row `i` for stage `i + 1`.
pub fn gating_weights(s: &mut Session, mf: Var, gate: &GateParams) -> Result<Var> {
    let want = gate.linear.fan_in;
    if s.value(mf).shape() != [want] {
        return Err(Error::Contract(format!(
            "multi-scale feature has shape {:?}, gate expects [{want}]",
            s.value(mf).shape()
        )));
    }
    let g = gate.linear.forward(s, mf)?;
    let g = s.tape.sigmoid(g);
    s.tape.reshape(g, &[4, gate.n_classes])
}

fn column_sums(s: &mut Session, m: Var) -> Var {
    let rows = s.value(m).rows() as f64;
    let mean = s.tape.mean_rows(m);
    s.tape.scale(mean, rows)
}

/// `MR[t] = Σ_i MG[i,t]·MC[i,t]`.
pub fn aggregate(s: &mut Session, mc: Var, mg: Var) -> Result<Var> {
    if s.value(mc).shape() != s.value(mg).shape() || s.value(mc).shape().len() != 2 {
        return Err(Error::shape("aggregate", s.value(mc).shape(), s.value(mg).shape()));
    }
    let prod = s.tape.mul(mc, mg)?;
    Ok(column_sums(s, prod))
}

/// Plain column sums of `MC`.
pub fn aggregate_sum(s: &mut Session, mc: Var) -> Result<Var> {
    if s.value(mc).shape().len() != 2 {
        return Err(Error::Contract("aggregate_sum expects a matrix".into()));
    }
    let ones = s.constant(Tensor::ones(s.value(mc).shape()));
    let prod = s.tape.mul(mc, ones)?;
    Ok(column_sums(s, prod))
}
