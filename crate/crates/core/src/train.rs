//! SGD training with median-frequency class balancing, and post-training
//! batch-norm statistic finalization.

use std::fmt::Write as _;

use crate::autograd::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::io::dataset::{Dataset, SampleRecord};
use crate::layers::{softmax, weighted_cross_entropy, Mode};
use crate::model::SegModel;
use crate::rng::{streams, Rng};
use crate::tensor::{argmax_batch, LabelMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives batch order and training-time dropout masks.
    pub seed: u64,
    pub class_balancing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            class_balancing: true,
        }
    }
}

impl TrainConfig {
    /// `learning_rate = 0` is accepted so a run can be a no-op on weights.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::contract(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Per-class pixel statistics and the resulting loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub pixel_counts: Vec<u64>,
    /// Non-void pixels of all images in which the class appears.
    pub present_totals: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub weights: Vec<f32>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median-frequency balancing: `w_c = median(f) / f_c` over present classes,
/// where `f_c` divides the pixels of class `c` by the non-void pixels of the
/// images containing it. Absent classes get weight 0.
pub fn class_frequencies(dataset: &Dataset) -> Result<ClassStats> {
    let c = dataset.num_classes;
    let mut pixel_counts = vec![0u64; c];
    let mut present_totals = vec![0u64; c];
    let mut image_counts = vec![0u64; c];
    for s in &dataset.samples {
        image_counts.fill(0);
        let mut labelled = 0u64;
        for &y in s.labels.data() {
            if y == dataset.void_label {
                continue;
            }
            let y = y as usize;
            if y >= c {
                return Err(Error::Mismatch(format!(
                    "label {y} outside 0..{c} in `{}`",
                    s.id
                )));
            }
            image_counts[y] += 1;
            labelled += 1;
        }
        for k in 0..c {
            if image_counts[k] > 0 {
                pixel_counts[k] += image_counts[k];
                present_totals[k] += labelled;
            }
        }
    }
    if pixel_counts.iter().all(|&n| n == 0) {
        return Err(Error::contract("dataset has no labelled pixels"));
    }
    let frequencies: Vec<f64> = pixel_counts
        .iter()
        .zip(&present_totals)
        .map(|(&n, &t)| if t == 0 { 0.0 } else { n as f64 / t as f64 })
        .collect();
    let mut present: Vec<f64> = frequencies.iter().copied().filter(|&f| f > 0.0).collect();
    let med = median(&mut present);
    let weights = frequencies
        .iter()
        .map(|&f| if f > 0.0 { (med / f) as f32 } else { 0.0 })
        .collect();
    Ok(ClassStats {
        pixel_counts,
        present_totals,
        frequencies,
        weights,
    })
}

/// One momentum-SGD update, then zero the gradients.
///
/// `v ← m·v + g + λ·w` (λ only where the parameter opts into decay), `w ← w − η·v`.
/// Nothing is touched if any gradient is non-finite.
pub fn sgd_step(params: &mut ParamStore, config: &TrainConfig) -> Result<()> {
    for p in params.iter() {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient of `{}` is {} at element {i}",
                p.name,
                p.grad.data()[i]
            )));
        }
    }
    let (lr, m) = (config.learning_rate, config.momentum);
    for p in params.iter_mut() {
        let decay = if p.decay { config.weight_decay } else { 0.0 };
        let w = p.value.data_mut();
        let v = p.momentum.data_mut();
        let g = p.grad.data_mut();
        for i in 0..w.len() {
            v[i] = m * v[i] + g[i] + decay * w[i];
            w[i] -= lr * v[i];
            g[i] = 0.0;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss per labelled pixel over the epoch.
    pub loss: f64,
    /// Pixel accuracy of the training-mode predictions made during the epoch.
    pub train_global_acc: f64,
}

/// The training log as CSV: header `epoch,loss,train_global_acc`, one row per epoch.
pub fn render_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,train_global_acc\n");
    for e in log {
        let _ = writeln!(out, "{},{:.6},{:.6}", e.epoch, e.loss, e.train_global_acc);
    }
    out
}

/// Stack `[C,H,W]` images into one `[N,C,H,W]` batch.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a SampleRecord>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for s in samples {
        match &shape {
            None => shape = Some(s.image.shape().to_vec()),
            Some(sh) if sh.as_slice() != s.image.shape() => {
                return Err(Error::shape(format!(
                    "cannot batch {:?} with {:?}",
                    s.image.shape(),
                    sh
                )))
            }
            Some(_) => {}
        }
        data.extend_from_slice(s.image.data());
        n += 1;
    }
    let shape = shape.ok_or_else(|| Error::contract("empty batch"))?;
    let mut full = vec![n];
    full.extend(shape);
    Tensor::new(&full, data)
}

fn check_compatible(model: &SegModel, dataset: &Dataset) -> Result<()> {
    if dataset.num_classes != model.config().num_classes {
        return Err(Error::Mismatch(format!(
            "dataset has {} classes, model predicts {}",
            dataset.num_classes,
            model.config().num_classes
        )));
    }
    if let Some(shape) = dataset.image_shape() {
        model.config().check_input(shape)?;
    }
    Ok(())
}

/// Count of (correct, labelled) pixels.
pub(crate) fn count_correct(prediction: &LabelMap, labels: &LabelMap, void: u8) -> (u64, u64) {
    let mut correct = 0;
    let mut total = 0;
    for (&p, &y) in prediction.data().iter().zip(labels.data()) {
        if y != void {
            total += 1;
            correct += u64::from(p == y);
        }
    }
    (correct, total)
}

/// Train for `config.epochs` epochs; see [`train_loop_with`].
pub fn train_loop(
    model: &mut SegModel,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    train_loop_with(model, dataset, config, |_| {})
}

/// Mini-batch SGD on weighted cross-entropy. Each epoch shuffles with stream
/// `SHUFFLE + epoch` and draws dropout masks from `TRAIN_DROPOUT + epoch`
/// of `config.seed`. Batches with no labelled pixel are skipped.
pub fn train_loop_with(
    model: &mut SegModel,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    check_compatible(model, dataset)?;
    let weights = if config.class_balancing {
        class_frequencies(dataset)?.weights
    } else {
        vec![1.0; dataset.num_classes]
    };
    let void = dataset.void_label;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        Rng::stream(config.seed, streams::SHUFFLE + epoch as u64).shuffle(&mut order);
        let mut dropout_rng = Rng::stream(config.seed, streams::TRAIN_DROPOUT + epoch as u64);
        let (mut loss_sum, mut correct, mut labelled) = (0.0f64, 0u64, 0u64);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let labels: Vec<LabelMap> = batch.iter().map(|s| s.labels.clone()).collect();
            let batch_pixels: u64 = labels
                .iter()
                .map(|l| l.data().iter().filter(|&&y| y != void).count() as u64)
                .sum();
            if batch_pixels == 0 {
                continue;
            }
            let mut g = Graph::new();
            let x = g.constant(stack_images(batch.iter().copied())?);
            let logits = model.forward_graph(&mut g, x, Mode::Train, &mut dropout_rng)?;
            let probs = softmax(&mut g, logits)?;
            let loss = weighted_cross_entropy(&mut g, probs, &labels, &weights, void)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {loss_value} in epoch {}",
                    epoch + 1
                )));
            }
            for (p, l) in argmax_batch(g.value(logits))?.iter().zip(&labels) {
                let (c, t) = count_correct(p, l, void);
                correct += c;
                labelled += t;
            }
            loss_sum += loss_value as f64 * batch_pixels as f64;
            g.backward(loss, model.params_mut())?;
            sgd_step(model.params_mut(), config)?;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: if labelled == 0 {
                0.0
            } else {
                loss_sum / labelled as f64
            },
            train_global_acc: if labelled == 0 {
                0.0
            } else {
                correct as f64 / labelled as f64
            },
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Replace every batch norm's running statistics with exact population
/// statistics over the whole training set, layer by layer, with dropout off.
/// Later layers see the already-finalized earlier layers, so running this
/// twice gives the same result.
pub fn finalize_batchnorm(model: &mut SegModel, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Ok(());
    }
    check_compatible(model, dataset)?;
    for k in 0..model.num_norm_layers() {
        let channels = model
            .norm_layers()
            .nth(k)
            .map(|(_, bn)| bn.channels)
            .expect("layer exists");
        let mut sum = vec![0.0f64; channels];
        let mut sum_sq = vec![0.0f64; channels];
        let mut count = 0usize;
        for s in &dataset.samples {
            let a = model.pre_norm_activations(&s.image, k)?;
            let plane = a.len() / channels;
            for (c, block) in a.data().chunks_exact(plane).enumerate() {
                let (mut s1, mut s2) = (0.0f64, 0.0f64);
                for &v in block {
                    s1 += v as f64;
                    s2 += v as f64 * v as f64;
                }
                sum[c] += s1;
                sum_sq[c] += s2;
            }
            count += plane;
        }
        let bn = model.norm_layers_mut().nth(k).expect("layer exists");
        for c in 0..channels {
            let mean = sum[c] / count as f64;
            bn.running_mean[c] = mean as f32;
            bn.running_var[c] = (sum_sq[c] / count as f64 - mean * mean).max(0.0) as f32;
        }
    }
    Ok(())
}
