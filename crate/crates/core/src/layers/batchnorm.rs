//! Per-channel batch normalization.

use crate::autograd::{BackwardFn, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EPSILON: f32 = 1e-5;
pub const MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
    pub momentum: f32,
}

impl BatchNormState {
    /// Registers `{name}.gamma` (ones) and `{name}.beta` (zeros).
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels])?, true)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels])?, true)?;
        Ok(BatchNormState {
            channels,
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: EPSILON,
            momentum: MOMENTUM,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: NormMode,
    ) -> Result<Var> {
        match mode {
            NormMode::Train => {
                let gamma = g.param(store, self.gamma);
                let beta = g.param(store, self.beta);
                let (y, stats) = batchnorm_train(g, x, gamma, beta, self.epsilon)?;
                let m = self.momentum;
                for c in 0..self.channels {
                    self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
                    self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c];
                }
                Ok(y)
            }
            NormMode::Eval => self.forward_eval(g, store, x),
        }
    }

    /// Eval-mode forward; never touches the running statistics.
    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        batchnorm_eval(
            g,
            x,
            gamma,
            beta,
            &self.running_mean,
            &self.running_var,
            self.epsilon,
        )
    }
}

/// Biased per-channel statistics of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Exact per-channel mean and biased variance, accumulated in `f64`.
pub fn channel_stats(x: &Tensor) -> Result<ChannelStats> {
    let [n, c, h, w] = x.nchw()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let slices = (0..n).map(|i| &x.data()[(i * c + ch) * plane..][..plane]);
        let mu = slices.clone().flatten().map(|&v| v as f64).sum::<f64>() / count;
        let ss = slices
            .flatten()
            .map(|&v| {
                let d = v as f64 - mu;
                d * d
            })
            .sum::<f64>();
        mean[ch] = mu as f32;
        var[ch] = (ss / count) as f32;
    }
    Ok(ChannelStats { mean, var })
}

fn check_affine(g: &Graph, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
    let dims = g.value(x).nchw()?;
    let c = dims[1];
    if g.value(gamma).shape() != [c] || g.value(beta).shape() != [c] {
        return Err(Error::shape(format!(
            "batchnorm over {c} channels got gamma {:?}, beta {:?}",
            g.value(gamma).shape(),
            g.value(beta).shape()
        )));
    }
    Ok(dims)
}

/// Training-mode normalization; returns the batch statistics it used.
pub fn batchnorm_train(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    epsilon: f32,
) -> Result<(Var, ChannelStats)> {
    let [n, c, h, w] = check_affine(g, x, gamma, beta)?;
    let plane = h * w;
    let stats = channel_stats(g.value(x))?;
    let inv_std: Vec<f32> = stats
        .var
        .iter()
        .map(|v| 1.0 / (v + epsilon).sqrt())
        .collect();
    let mean = stats.mean.clone();

    let xv = g.value(x);
    let (gv, bv) = (g.value(gamma).data(), g.value(beta).data());
    let mut out = vec![0.0f32; xv.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let (scale, mu, shift) = (gv[ch] * inv_std[ch], mean[ch], bv[ch]);
            for (o, &v) in out[off..off + plane]
                .iter_mut()
                .zip(&xv.data()[off..off + plane])
            {
                *o = (v - mu) * scale + shift;
            }
        }
    }
    let out = Tensor::from_parts(xv.shape().to_vec(), out);

    let backward: BackwardFn = Box::new(move |gout, inputs, _| {
        let (xv, gamma) = (inputs[0], inputs[1]);
        let count = (n * plane) as f64;
        let mut dx = vec![0.0f32; xv.len()];
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for (&dy, &v) in gout.data()[off..off + plane]
                    .iter()
                    .zip(&xv.data()[off..off + plane])
                {
                    sum_dy += dy as f64;
                    sum_dy_xhat += (dy * (v - mu) * is) as f64;
                }
            }
            dbeta[ch] = sum_dy as f32;
            dgamma[ch] = sum_dy_xhat as f32;
            let mean_dy = (sum_dy / count) as f32;
            let mean_dy_xhat = (sum_dy_xhat / count) as f32;
            let k = gamma.data()[ch] * is;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for ((d, &dy), &v) in dx[off..off + plane]
                    .iter_mut()
                    .zip(&gout.data()[off..off + plane])
                    .zip(&xv.data()[off..off + plane])
                {
                    let xhat = (v - mu) * is;
                    *d = k * (dy - mean_dy - xhat * mean_dy_xhat);
                }
            }
        }
        vec![
            Some(Tensor::from_parts(xv.shape().to_vec(), dx)),
            Some(Tensor::from_parts(vec![c], dgamma)),
            Some(Tensor::from_parts(vec![c], dbeta)),
        ]
    });
    Ok((g.record(out, &[x, gamma, beta], backward), stats))
}

/// Eval-mode normalization with fixed statistics (an affine map per channel).
pub fn batchnorm_eval(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[f32],
    var: &[f32],
    epsilon: f32,
) -> Result<Var> {
    let [n, c, h, w] = check_affine(g, x, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::shape(
            "running statistics do not match channel count",
        ));
    }
    let plane = h * w;
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mean = mean.to_vec();
    let xv = g.value(x);
    let (gv, bv) = (g.value(gamma).data(), g.value(beta).data());
    let mut out = vec![0.0f32; xv.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let (scale, mu, shift) = (gv[ch] * inv_std[ch], mean[ch], bv[ch]);
            for (o, &v) in out[off..off + plane]
                .iter_mut()
                .zip(&xv.data()[off..off + plane])
            {
                *o = (v - mu) * scale + shift;
            }
        }
    }
    let out = Tensor::from_parts(xv.shape().to_vec(), out);
    let backward: BackwardFn = Box::new(move |gout, inputs, _| {
        let (xv, gamma) = (inputs[0], inputs[1]);
        let mut dx = vec![0.0f32; xv.len()];
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let k = gamma.data()[ch] * inv_std[ch];
                for ((d, &dy), &v) in dx[off..off + plane]
                    .iter_mut()
                    .zip(&gout.data()[off..off + plane])
                    .zip(&xv.data()[off..off + plane])
                {
                    *d = dy * k;
                    dbeta[ch] += dy as f64;
                    dgamma[ch] += (dy * (v - mean[ch]) * inv_std[ch]) as f64;
                }
            }
        }
        vec![
            Some(Tensor::from_parts(xv.shape().to_vec(), dx)),
            Some(Tensor::from_parts(
                vec![c],
                dgamma.iter().map(|&v| v as f32).collect(),
            )),
            Some(Tensor::from_parts(
                vec![c],
                dbeta.iter().map(|&v| v as f32).collect(),
            )),
        ]
    });
    Ok(g.record(out, &[x, gamma, beta], backward))
}
