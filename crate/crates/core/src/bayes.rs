//! Monte Carlo dropout inference.
//!
//! Sample `t` of a run with base seed `s` draws its dropout masks from
//! `Rng::stream(s, t)`, so any prefix of a run is itself a valid run.

use crate::error::{Error, Result};
use crate::layers::{softmax_tensor, Mode};
use crate::model::SegModel;
use crate::rng::Rng;
use crate::tensor::{argmax, argmax_channels, LabelMap, Tensor};

/// The spec'd default number of posterior samples.
pub const DEFAULT_SAMPLES: usize = 50;

/// Summary of `t` softmax samples for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct McResult {
    pub t: usize,
    /// `[C,H,W]`
    pub mean_probs: Tensor,
    /// `[C,H,W]` population variance of the softmax samples.
    pub var_probs: Tensor,
    /// `[H,W]` channel mean of `var_probs`.
    pub overall_uncertainty: Tensor,
    /// `[H,W]` one minus the fraction of samples voting for the modal class.
    pub variation_ratio: Tensor,
    pub prediction: LabelMap,
}

/// Streaming (Welford) mean and variance of softmax samples, in f64, plus
/// per-pixel vote counts of the per-sample argmax.
#[derive(Clone, Debug)]
pub struct McAccumulator {
    classes: usize,
    height: usize,
    width: usize,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    votes: Vec<u32>,
}

impl McAccumulator {
    pub fn new(classes: usize, height: usize, width: usize) -> Self {
        let n = classes * height * width;
        McAccumulator {
            classes,
            height,
            width,
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            votes: vec![0; n],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Add one `[C,H,W]` softmax sample.
    pub fn push(&mut self, probs: &Tensor) -> Result<()> {
        if probs.shape() != [self.classes, self.height, self.width] {
            return Err(Error::shape(format!(
                "sample extents {:?} differ from [{}, {}, {}]",
                probs.shape(),
                self.classes,
                self.height,
                self.width
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        for (i, &p) in probs.data().iter().enumerate() {
            let p = p as f64;
            let delta = p - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (p - self.mean[i]);
        }
        let plane = self.height * self.width;
        let d = probs.data();
        for px in 0..plane {
            let k = argmax((0..self.classes).map(|c| d[c * plane + px]));
            self.votes[k * plane + px] += 1;
        }
        Ok(())
    }

    /// Statistics of the samples pushed so far.
    pub fn result(&self) -> Result<McResult> {
        if self.count == 0 {
            return Err(Error::contract("no Monte Carlo samples accumulated"));
        }
        let (c, h, w) = (self.classes, self.height, self.width);
        let plane = h * w;
        let t = self.count as f64;
        let mean_probs = Tensor::new(&[c, h, w], self.mean.iter().map(|&m| m as f32).collect())?;
        let var_probs = Tensor::new(
            &[c, h, w],
            self.m2.iter().map(|&m2| (m2 / t).max(0.0) as f32).collect(),
        )?;
        let vd = var_probs.data();
        let overall = (0..plane)
            .map(|px| (0..c).map(|k| vd[k * plane + px]).sum::<f32>() / c as f32)
            .collect();
        let ratio = (0..plane)
            .map(|px| {
                let modal = argmax((0..c).map(|k| self.votes[k * plane + px] as f32));
                1.0 - (self.votes[modal * plane + px] as f64 / t) as f32
            })
            .collect();
        Ok(McResult {
            t: self.count,
            prediction: argmax_channels(&mean_probs)?,
            mean_probs,
            var_probs,
            overall_uncertainty: Tensor::new(&[h, w], overall)?,
            variation_ratio: Tensor::new(&[h, w], ratio)?,
        })
    }
}

fn single_image_extents(model: &SegModel, x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [_, h, w] => {
            model.config().check_input(x.shape())?;
            Ok((h, w))
        }
        _ => Err(Error::shape(format!(
            "expected one [C,H,W] image, got {:?}",
            x.shape()
        ))),
    }
}

/// Softmax of the network output for MC sample `t`.
pub fn mc_sample(model: &SegModel, x: &Tensor, base_seed: u64, t: usize) -> Result<Tensor> {
    let logits = model.forward(x, Mode::McSample, &mut Rng::stream(base_seed, t as u64))?;
    softmax_tensor(&logits)
}

/// Run samples `0..t` through a fresh accumulator.
pub fn mc_accumulate(
    model: &SegModel,
    x: &Tensor,
    t: usize,
    base_seed: u64,
) -> Result<McAccumulator> {
    let (h, w) = single_image_extents(model, x)?;
    let mut acc = McAccumulator::new(model.config().num_classes, h, w);
    for i in 0..t {
        acc.push(&mc_sample(model, x, base_seed, i)?)?;
    }
    Ok(acc)
}

/// `t` stochastic passes summarized without keeping the samples.
pub fn mc_inference(model: &SegModel, x: &Tensor, t: usize, base_seed: u64) -> Result<McResult> {
    if t == 0 {
        return Err(Error::contract(
            "Monte Carlo inference needs at least one sample",
        ));
    }
    mc_accumulate(model, x, t, base_seed)?.result()
}

/// Every softmax sample of a run, for checking the streaming statistics.
pub fn mc_softmax_samples(
    model: &SegModel,
    x: &Tensor,
    t: usize,
    base_seed: u64,
) -> Result<Vec<Tensor>> {
    single_image_extents(model, x)?;
    (0..t).map(|i| mc_sample(model, x, base_seed, i)).collect()
}

/// Two-pass summary of stored samples; the reference for [`McAccumulator`].
pub fn summarize_samples(samples: &[Tensor]) -> Result<McResult> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("no Monte Carlo samples"))?;
    let (c, h, w) = match *first.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("samples must be [C,H,W]")),
    };
    let n = first.len();
    let t = samples.len() as f64;
    let mut mean = vec![0.0f64; n];
    for s in samples {
        first.expect_same_shape(s)?;
        for (m, &p) in mean.iter_mut().zip(s.data()) {
            *m += p as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    let mut var = vec![0.0f64; n];
    for s in samples {
        for ((v, &p), m) in var.iter_mut().zip(s.data()).zip(&mean) {
            *v += (p as f64 - m).powi(2);
        }
    }
    let maps: Vec<LabelMap> = samples.iter().map(argmax_channels).collect::<Result<_>>()?;
    let (ratio, _) = variation_ratio(&maps, c)?;
    let var_probs = Tensor::new(&[c, h, w], var.iter().map(|v| (v / t) as f32).collect())?;
    let plane = h * w;
    let overall = (0..plane)
        .map(|px| {
            (0..c)
                .map(|k| var_probs.data()[k * plane + px])
                .sum::<f32>()
                / c as f32
        })
        .collect();
    let mean_probs = Tensor::new(&[c, h, w], mean.iter().map(|&m| m as f32).collect())?;
    Ok(McResult {
        t: samples.len(),
        prediction: argmax_channels(&mean_probs)?,
        mean_probs,
        var_probs,
        overall_uncertainty: Tensor::new(&[h, w], overall)?,
        variation_ratio: ratio,
    })
}

/// Dropout off, running statistics on: one deterministic prediction.
pub fn weight_avg_inference(model: &SegModel, x: &Tensor) -> Result<(Tensor, LabelMap)> {
    single_image_extents(model, x)?;
    let logits = model.forward(x, Mode::WeightAvg, &mut Rng::new(0))?;
    let probs = softmax_tensor(&logits)?;
    let prediction = argmax_channels(&probs)?;
    Ok((probs, prediction))
}

/// Argmax map of each MC sample `0..t`.
pub fn per_pixel_argmax_samples(
    model: &SegModel,
    x: &Tensor,
    t: usize,
    base_seed: u64,
) -> Result<Vec<LabelMap>> {
    if t == 0 {
        return Err(Error::contract("need at least one sample"));
    }
    mc_softmax_samples(model, x, t, base_seed)?
        .iter()
        .map(argmax_channels)
        .collect()
}

/// Variation ratio `[H,W]` and modal class map of per-sample class maps.
/// Vote ties go to the lower class.
pub fn variation_ratio(samples: &[LabelMap], num_classes: usize) -> Result<(Tensor, LabelMap)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("no sample maps"))?;
    let (h, w) = (first.height(), first.width());
    let mut votes = vec![0u32; num_classes * h * w];
    let plane = h * w;
    for s in samples {
        if !s.same_extents(first) {
            return Err(Error::shape("sample maps differ in extents"));
        }
        for (px, &k) in s.data().iter().enumerate() {
            let k = k as usize;
            if k >= num_classes {
                return Err(Error::Mismatch(format!(
                    "sample class {k} outside 0..{num_classes}"
                )));
            }
            votes[k * plane + px] += 1;
        }
    }
    let t = samples.len() as f64;
    let mut modal = vec![0u8; plane];
    let mut ratio = vec![0.0f32; plane];
    for px in 0..plane {
        let k = argmax((0..num_classes).map(|c| votes[c * plane + px] as f32));
        modal[px] = k as u8;
        ratio[px] = 1.0 - (votes[k * plane + px] as f64 / t) as f32;
    }
    Ok((Tensor::new(&[h, w], ratio)?, LabelMap::new(h, w, modal)?))
}
