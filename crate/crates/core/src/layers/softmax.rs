//! Per-pixel softmax and class-weighted cross-entropy.

use crate::autograd::{BackwardFn, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f32 = 1e-12;

/// Softmax over the channel axis of `[C,H,W]` logits (in place on a flat buffer).
pub(crate) fn softmax_channels(data: &mut [f32], n: usize, c: usize, plane: usize) {
    for i in 0..n {
        let block = &mut data[i * c * plane..][..c * plane];
        for p in 0..plane {
            let mut max = f32::NEG_INFINITY;
            for k in 0..c {
                max = max.max(block[k * plane + p]);
            }
            let mut total = 0.0f32;
            for k in 0..c {
                let e = (block[k * plane + p] - max).exp();
                block[k * plane + p] = e;
                total += e;
            }
            let inv = 1.0 / total;
            for k in 0..c {
                block[k * plane + p] *= inv;
            }
        }
    }
}

/// Softmax of a `[C,H,W]` (or batched) logit tensor, outside any graph.
pub fn softmax_tensor(logits: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = logits.nchw()?;
    let mut out = logits.clone();
    softmax_channels(out.data_mut(), n, c, h * w);
    Ok(out)
}

/// Per-pixel softmax with max subtraction.
pub fn softmax(g: &mut Graph, logits: Var) -> Result<Var> {
    let out = softmax_tensor(g.value(logits))?;
    let [n, c, h, w] = out.nchw()?;
    let plane = h * w;
    let backward: BackwardFn = Box::new(move |gout, _, probs| {
        let (gd, pd) = (gout.data(), probs.data());
        let mut dx = vec![0.0f32; pd.len()];
        for i in 0..n {
            let base = i * c * plane;
            for p in 0..plane {
                let dot: f32 = (0..c)
                    .map(|k| pd[base + k * plane + p] * gd[base + k * plane + p])
                    .sum();
                for k in 0..c {
                    let j = base + k * plane + p;
                    dx[j] = pd[j] * (gd[j] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(probs.shape().to_vec(), dx))]
    });
    Ok(g.record(out, &[logits], backward))
}

/// Mean over non-void pixels of `-w[y] * ln(p[y])`.
///
/// `labels` holds one map per batch item. Void pixels add nothing to the loss
/// or its gradient; a batch made only of void pixels is a contract error.
pub fn weighted_cross_entropy(
    g: &mut Graph,
    probs: Var,
    labels: &[LabelMap],
    class_weights: &[f32],
    void_label: u8,
) -> Result<Var> {
    let pv = g.value(probs);
    let [n, c, h, w] = pv.nchw()?;
    let plane = h * w;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{n} probability maps but {} label maps",
            labels.len()
        )));
    }
    if class_weights.len() != c {
        return Err(Error::shape(format!(
            "{c} classes but {} class weights",
            class_weights.len()
        )));
    }
    // (flat index into probs, class weight)
    let mut picks: Vec<(usize, f32)> = Vec::with_capacity(n * plane);
    for (i, map) in labels.iter().enumerate() {
        if map.height() != h || map.width() != w {
            return Err(Error::shape(format!(
                "label map {}x{} does not match {h}x{w}",
                map.height(),
                map.width()
            )));
        }
        for (p, &y) in map.data().iter().enumerate() {
            if y == void_label {
                continue;
            }
            let y = y as usize;
            if y >= c {
                return Err(Error::Mismatch(format!("label {y} outside 0..{c}")));
            }
            picks.push(((i * c + y) * plane + p, class_weights[y]));
        }
    }
    if picks.is_empty() {
        return Err(Error::contract("every pixel is void; the loss is empty"));
    }
    let count = picks.len() as f64;
    let pd = pv.data();
    let total: f64 = picks
        .iter()
        .map(|&(j, wt)| -(wt as f64) * (pd[j].max(LOG_CLAMP) as f64).ln())
        .sum();
    let out = Tensor::scalar((total / count) as f32);
    let backward: BackwardFn = Box::new(move |gout, inputs, _| {
        let pd = inputs[0].data();
        let scale = gout.item() as f64 / count;
        let mut dp = vec![0.0f32; pd.len()];
        for &(j, wt) in &picks {
            if pd[j] > LOG_CLAMP {
                dp[j] += (-(wt as f64) * scale / pd[j] as f64) as f32;
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dp))]
    });
    Ok(g.record(out, &[probs], backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::rng::Rng;

    fn probs_of(logits: Tensor) -> Tensor {
        softmax_tensor(&logits).unwrap()
    }

    fn ce(probs: Tensor, labels: LabelMap, weights: &[f32]) -> Result<f32> {
        let mut g = Graph::inference();
        let p = g.constant(probs);
        let l = weighted_cross_entropy(&mut g, p, &[labels], weights, 255)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn equal_logits_are_uniform() {
        let p = probs_of(Tensor::full(&[4, 1, 1], 2.5).unwrap());
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn closed_form_two_class() {
        let p = probs_of(Tensor::new(&[2, 1, 1], vec![0.0, 3f32.ln()]).unwrap());
        assert!((p.data()[0] - 0.25).abs() < 1e-6);
        assert!((p.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn shift_invariant() {
        let logits = Tensor::new(&[3, 1, 2], vec![0.1, -1.0, 2.0, 0.3, -0.5, 1.5]).unwrap();
        let shifted = logits.map(|v| v + 17.0);
        let (a, b) = (probs_of(logits), probs_of(shifted));
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn stable_for_huge_logits() {
        let mut rng = Rng::new(3);
        let logits =
            Tensor::new(&[5, 4, 4], (0..80).map(|_| rng.normal() * 1e4).collect()).unwrap();
        let p = probs_of(logits);
        for px in 0..16 {
            let s: f32 = (0..5).map(|k| p.data()[k * 16 + px]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let probs = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        assert!(ce(probs, labels, &[1.0, 1.0]).unwrap() <= 1e-6);
    }

    #[test]
    fn uniform_four_class_loss_is_ln4() {
        let probs = Tensor::full(&[4, 2, 2], 0.25).unwrap();
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let l = ce(probs, labels, &[1.0; 4]).unwrap();
        assert!((l - 4f32.ln()).abs() < 1e-6);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn doubling_weights_doubles_loss() {
        let mut rng = Rng::new(10);
        let probs =
            probs_of(Tensor::new(&[3, 2, 2], (0..12).map(|_| rng.normal()).collect()).unwrap());
        let labels = LabelMap::new(2, 2, vec![0, 2, 1, 255]).unwrap();
        let a = ce(probs.clone(), labels.clone(), &[0.5, 1.0, 2.0]).unwrap();
        let b = ce(probs, labels, &[1.0, 2.0, 4.0]).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-6);
    }

    #[test]
    fn all_void_is_contract_error() {
        let probs = Tensor::full(&[2, 1, 2], 0.5).unwrap();
        let labels = LabelMap::filled(1, 2, 255).unwrap();
        assert!(matches!(
            ce(probs, labels, &[1.0, 1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let probs = Tensor::full(&[2, 1, 1], 0.5).unwrap();
        let labels = LabelMap::filled(1, 1, 7).unwrap();
        assert!(ce(probs, labels, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn void_pixels_get_no_gradient() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::new(&[2, 1, 2], vec![0.3, -0.2, 0.1, 0.9]).unwrap());
        let p = softmax(&mut g, logits).unwrap();
        let labels = LabelMap::new(1, 2, vec![1, 255]).unwrap();
        let loss = weighted_cross_entropy(&mut g, p, &[labels], &[1.0, 1.0], 255).unwrap();
        let grads = g.backward(loss, &mut Default::default()).unwrap();
        let d = grads.get(logits).unwrap();
        // pixel 1 is void: both of its channels have zero gradient
        assert_eq!(d.data()[1], 0.0);
        assert_eq!(d.data()[3], 0.0);
        assert!(d.data()[0] != 0.0);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let mut rng = Rng::new(14);
        let logits = Tensor::new(&[4, 3, 3], (0..36).map(|_| rng.normal()).collect()).unwrap();
        let labels = LabelMap::new(3, 3, vec![0, 1, 2, 3, 255, 1, 2, 0, 3]).unwrap();
        let weights = [0.5, 1.0, 2.0, 1.5];
        let err = finite_difference_check(
            |g, x| {
                let p = softmax(g, x)?;
                weighted_cross_entropy(g, p, std::slice::from_ref(&labels), &weights, 255)
            },
            &logits,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-3, "err {err}");
    }
}
