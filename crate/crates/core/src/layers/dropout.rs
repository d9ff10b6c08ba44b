//! Inverted Bernoulli dropout.
//!
//! Kept activations are scaled by `1/(1-p)` when the mask is drawn, so the
//! weight-averaging pass is the identity map.

use std::str::FromStr;

use crate::autograd::{BackwardFn, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How a forward pass treats stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Batch statistics, fresh dropout masks, adjoints recorded.
    Train,
    /// Running statistics, fresh dropout masks: one draw from the approximate posterior.
    McSample,
    /// Running statistics, dropout disabled.
    WeightAvg,
}

impl Mode {
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Mode::WeightAvg)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "mc" | "mc_sample" => Ok(Mode::McSample),
            "wa" | "weight_avg" => Ok(Mode::WeightAvg),
            other => Err(Error::contract(format!("unknown mode `{other}`"))),
        }
    }
}

fn check_probability(p: f32) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::contract(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Mask of `0` (probability `p`) and `1/(1-p)` values, one per element.
pub fn draw_mask(shape: &[usize], p: f32, rng: &mut Rng) -> Result<Tensor> {
    check_probability(p)?;
    let keep_scale = 1.0 / (1.0 - p);
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep_scale })
        .collect();
    Tensor::new(shape, mask)
}

/// `x ⊙ mask` with a fixed mask.
pub fn apply_mask(g: &mut Graph, x: Var, mask: &Tensor) -> Result<Var> {
    let out = g.value(x).zip_map(mask, |a, m| a * m)?;
    let mask = mask.clone();
    let backward: BackwardFn = Box::new(move |gout, _, _| {
        vec![Some(
            gout.zip_map(&mask, |gv, m| gv * m)
                .expect("extents checked"),
        )]
    });
    Ok(g.record(out, &[x], backward))
}

/// Dropout with drop probability `p`. Returns `x` itself when nothing is dropped.
pub fn dropout(g: &mut Graph, x: Var, p: f32, mode: Mode, rng: &mut Rng) -> Result<Var> {
    check_probability(p)?;
    if p == 0.0 || !mode.is_stochastic() {
        return Ok(x);
    }
    let mask = draw_mask(g.value(x).shape(), p, rng)?;
    apply_mask(g, x, &mask)
}
