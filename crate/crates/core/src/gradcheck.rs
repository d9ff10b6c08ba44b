//! Central finite-difference verification of the adjoint rules.

use std::fmt;

use crate::autograd::{BackwardFn, Graph, ParamStore, Var};
use crate::error::Result;
use crate::layers::{
    apply_mask, batchnorm_train, conv2d, draw_mask, maxpool2x2, maxunpool2x2, softmax,
    weighted_cross_entropy, BN_EPSILON,
};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Tensor};

/// Default relative step, scaled per element by `max(1, |x|)`.
pub const DEFAULT_STEP: f32 = 1e-2;
/// Pass threshold for the layer suite.
pub const TOLERANCE: f32 = 1e-3;

/// Largest relative disagreement between the recorded adjoint of `f` at `x`
/// and a central difference, per element
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// The step for element `i` is `step * max(1, |x_i|)`. NaN anywhere in `f`
/// or its gradient is reported as NaN.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f32) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss, &mut ParamStore::new())?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros_like(x));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.input(probe);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item() as f64)
    };

    let mut worst = 0.0f32;
    for i in 0..x.len() {
        let xi = x.data()[i];
        let h = step * xi.abs().max(1.0);
        let mut plus = x.clone();
        plus.data_mut()[i] = xi + h;
        let mut minus = x.clone();
        minus.data_mut()[i] = xi - h;
        let span = (plus.data()[i] - minus.data()[i]) as f64;
        let numeric = ((eval(plus)? - eval(minus)?) / span) as f32;
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f32.max(a.abs()).max(numeric.abs());
        if err.is_nan() {
            return Ok(f32::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Layer families covered by [`run_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Relu,
    Pool,
    Unpool,
    Dropout,
    SoftmaxCrossEntropy,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Conv,
        LayerKind::BatchNorm,
        LayerKind::Relu,
        LayerKind::Pool,
        LayerKind::Unpool,
        LayerKind::Dropout,
        LayerKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Pool => "maxpool",
            LayerKind::Unpool => "maxunpool",
            LayerKind::Dropout => "dropout",
            LayerKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct LayerReport {
    pub layer: LayerKind,
    pub max_rel_error: f32,
}

impl LayerReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

/// Normal draws pushed at least `margin` away from zero.
fn away_from_zero(shape: &[usize], margin: f32, rng: &mut Rng) -> Tensor {
    normal(shape, rng).map(|v| if v < 0.0 { v - margin } else { v + margin })
}

/// A shuffled grid `0, spacing, 2·spacing, ...`: no two elements are closer than `spacing`.
fn separated(shape: &[usize], spacing: f32, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n)
        .map(|i| (i as f32 - n as f32 / 2.0) * spacing)
        .collect();
    rng.shuffle(&mut v);
    Tensor::from_parts(shape.to_vec(), v)
}

/// Identity whose adjoint is off by 10%; simulates a broken backward rule.
fn faulty_identity(g: &mut Graph, x: Var) -> Var {
    let value = g.value(x).clone();
    let backward: BackwardFn = Box::new(|gout, _, _| vec![Some(gout.map(|v| v * 1.1))]);
    g.record(value, &[x], backward)
}

/// `sum(y ⊙ proj)`: a smooth scalar read-out with a nonzero adjoint everywhere.
fn project(g: &mut Graph, y: Var, proj: &Tensor) -> Result<Var> {
    let p = g.constant(proj.clone());
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

/// Max relative error for one layer family and one seed.
pub fn check_layer(kind: LayerKind, seed: u64, fault: Option<LayerKind>) -> Result<f32> {
    let mut rng = Rng::stream(seed, kind as u64);
    let broken = fault == Some(kind);
    let tap = move |g: &mut Graph, y: Var| if broken { faulty_identity(g, y) } else { y };
    let step = DEFAULT_STEP;
    match kind {
        LayerKind::Conv => {
            let x = normal(&[2, 5, 5], &mut rng);
            let w = normal(&[3, 2, 3, 3], &mut rng).map(|v| v * 0.5);
            let b = normal(&[3], &mut rng);
            let proj = normal(&[3, 5, 5], &mut rng);
            let run = |g: &mut Graph, x: Var, w: Var, b: Var| -> Result<Var> {
                let y = conv2d(g, x, w, b)?;
                let y = tap(g, y);
                project(g, y, &proj)
            };
            let ex = finite_difference_check(
                |g, v| {
                    let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
                    run(g, v, wv, bv)
                },
                &x,
                step,
            )?;
            let ew = finite_difference_check(
                |g, v| {
                    let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
                    run(g, xv, v, bv)
                },
                &w,
                step,
            )?;
            let eb = finite_difference_check(
                |g, v| {
                    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                    run(g, xv, wv, v)
                },
                &b,
                step,
            )?;
            Ok(max3(ex, ew, eb))
        }
        LayerKind::BatchNorm => {
            let x = normal(&[2, 3, 4, 4], &mut rng);
            let gamma = normal(&[3], &mut rng);
            let beta = normal(&[3], &mut rng);
            let proj = normal(&[2, 3, 4, 4], &mut rng);
            let run = |g: &mut Graph, x: Var, ga: Var, be: Var| -> Result<Var> {
                let (y, _) = batchnorm_train(g, x, ga, be, BN_EPSILON)?;
                let y = tap(g, y);
                project(g, y, &proj)
            };
            let ex = finite_difference_check(
                |g, v| {
                    let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                    run(g, v, ga, be)
                },
                &x,
                step,
            )?;
            let eg = finite_difference_check(
                |g, v| {
                    let (xv, be) = (g.constant(x.clone()), g.constant(beta.clone()));
                    run(g, xv, v, be)
                },
                &gamma,
                step,
            )?;
            let eb = finite_difference_check(
                |g, v| {
                    let (xv, ga) = (g.constant(x.clone()), g.constant(gamma.clone()));
                    run(g, xv, ga, v)
                },
                &beta,
                step,
            )?;
            Ok(max3(ex, eg, eb))
        }
        LayerKind::Relu => {
            // Inputs stay > 0.05 from the kink, beyond any probe step.
            let x = away_from_zero(&[3, 4, 4], 0.05, &mut rng);
            let proj = normal(&[3, 4, 4], &mut rng);
            finite_difference_check(
                |g, v| {
                    let y = g.relu(v);
                    let y = tap(g, y);
                    project(g, y, &proj)
                },
                &x,
                step,
            )
        }
        LayerKind::Pool => {
            let x = separated(&[2, 4, 6], 0.1, &mut rng);
            let proj = normal(&[2, 2, 3], &mut rng);
            finite_difference_check(
                |g, v| {
                    let (y, _) = maxpool2x2(g, v)?;
                    let y = tap(g, y);
                    project(g, y, &proj)
                },
                &x,
                step,
            )
        }
        LayerKind::Unpool => {
            let source = separated(&[2, 4, 6], 0.1, &mut rng);
            let indices = {
                let mut g = Graph::inference();
                let s = g.constant(source);
                maxpool2x2(&mut g, s)?.1
            };
            let y = normal(&[2, 2, 3], &mut rng);
            let proj = normal(&[2, 4, 6], &mut rng);
            finite_difference_check(
                |g, v| {
                    let u = maxunpool2x2(g, v, &indices)?;
                    let u = tap(g, u);
                    project(g, u, &proj)
                },
                &y,
                step,
            )
        }
        LayerKind::Dropout => {
            let x = normal(&[2, 4, 4], &mut rng);
            let mask = draw_mask(&[2, 4, 4], 0.5, &mut rng)?;
            let proj = normal(&[2, 4, 4], &mut rng);
            finite_difference_check(
                |g, v| {
                    let y = apply_mask(g, v, &mask)?;
                    let y = tap(g, y);
                    project(g, y, &proj)
                },
                &x,
                step,
            )
        }
        LayerKind::SoftmaxCrossEntropy => {
            let (c, h, w) = (4, 3, 3);
            let logits = normal(&[c, h, w], &mut rng);
            let labels: Vec<u8> = (0..h * w)
                .map(|_| {
                    if rng.uniform() < 0.15 {
                        255
                    } else {
                        rng.below(c) as u8
                    }
                })
                .collect();
            let mut labels = LabelMap::new(h, w, labels)?;
            labels.data_mut()[0] = 0;
            let weights: Vec<f32> = (0..c).map(|_| 0.25 + rng.uniform() * 2.0).collect();
            finite_difference_check(
                |g, v| {
                    let p = softmax(g, v)?;
                    let p = tap(g, p);
                    weighted_cross_entropy(g, p, std::slice::from_ref(&labels), &weights, 255)
                },
                &logits,
                step,
            )
        }
    }
}

fn max3(a: f32, b: f32, c: f32) -> f32 {
    if a.is_nan() || b.is_nan() || c.is_nan() {
        f32::NAN
    } else {
        a.max(b).max(c)
    }
}

/// Worst error per layer family over `seeds`; `fault` deliberately breaks one adjoint.
pub fn run_suite(seeds: &[u64], fault: Option<LayerKind>) -> Result<Vec<LayerReport>> {
    LayerKind::ALL
        .into_iter()
        .map(|layer| {
            let mut worst = 0.0f32;
            for &seed in seeds {
                let e = check_layer(layer, seed, fault)?;
                worst = if e.is_nan() { f32::NAN } else { worst.max(e) };
            }
            Ok(LayerReport {
                layer,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        // Moderate magnitudes: the f32 loss resolution bounds what a central
        // difference can resolve.
        let x = normal(&[3, 4], &mut Rng::new(5));
        let err = finite_difference_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_slice(&[1.0, 2.0]);
        let err = finite_difference_check(
            |g, v| {
                let zero = g.constant(Tensor::scalar(0.0));
                let m = g.mul(v, zero)?;
                Ok(g.sum(m))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nan_is_reported() {
        let x = Tensor::from_slice(&[1.0]);
        let err = finite_difference_check(
            |g, v| {
                let nan = g.constant(Tensor::scalar(f32::NAN));
                let m = g.mul(v, nan)?;
                Ok(g.sum(m))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err.is_nan());
    }

    #[test]
    fn conv_relu_pool_stack() {
        let mut rng = Rng::new(2718);
        let x = normal(&[2, 6, 6], &mut rng);
        let w = normal(&[3, 2, 3, 3], &mut rng).map(|v| v * 0.4);
        let b = normal(&[3], &mut rng);
        let proj = normal(&[3, 3, 3], &mut rng);
        let stack = |g: &mut Graph, x: Var, w: Var| -> Result<Var> {
            let bv = g.constant(b.clone());
            let y = conv2d(g, x, w, bv)?;
            let y = g.relu(y);
            let (y, _) = maxpool2x2(g, y)?;
            project(g, y, &proj)
        };
        let ex = finite_difference_check(
            |g, v| {
                let wv = g.constant(w.clone());
                stack(g, v, wv)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        let ew = finite_difference_check(
            |g, v| {
                let xv = g.constant(x.clone());
                stack(g, xv, v)
            },
            &w,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(ex < 1e-3, "dx err {ex}");
        assert!(ew < 1e-3, "dw err {ew}");
    }

    #[test]
    fn suite_passes_on_one_seed() {
        for r in run_suite(&[0], None).unwrap() {
            assert!(r.passed(), "{} err {}", r.layer, r.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let reports = run_suite(&[0], Some(LayerKind::Pool)).unwrap();
        for r in reports {
            assert_eq!(r.passed(), r.layer != LayerKind::Pool, "{}", r.layer);
        }
    }
}
