//! Segmentation metrics, confidence percentiles, per-class uncertainty
//! analysis, and the sample-count study.

use std::fmt::Write as _;
use std::path::Path;

use crate::bayes::{mc_sample, weight_avg_inference, McAccumulator};
use crate::error::{Error, Result};
use crate::io::dataset::SampleRecord;
use crate::model::SegModel;
use crate::tensor::LabelMap;

/// `counts[i * C + j]` = pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row(&self, c: usize) -> u64 {
        self.counts[c * self.num_classes..][..self.num_classes]
            .iter()
            .sum()
    }

    pub fn col(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, c)).sum()
    }

    /// Count the non-void pixels of one image.
    pub fn accumulate(
        &mut self,
        prediction: &LabelMap,
        labels: &LabelMap,
        void_label: u8,
    ) -> Result<()> {
        if !prediction.same_extents(labels) {
            return Err(Error::shape(format!(
                "prediction is {}x{}, labels are {}x{}",
                prediction.height(),
                prediction.width(),
                labels.height(),
                labels.width()
            )));
        }
        let c = self.num_classes;
        for (&p, &y) in prediction.data().iter().zip(labels.data()) {
            if y == void_label {
                continue;
            }
            if y as usize >= c {
                return Err(Error::Mismatch(format!("label {y} outside 0..{c}")));
            }
            if p as usize >= c {
                return Err(Error::Mismatch(format!(
                    "predicted class {p} outside 0..{c}"
                )));
            }
            self.counts[y as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<MetricsReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::contract("confusion matrix is empty"));
        }
        let c = self.num_classes;
        let trace: u64 = (0..c).map(|k| self.get(k, k)).sum();
        let mut class_accuracy = Vec::with_capacity(c);
        let mut iou = Vec::with_capacity(c);
        for k in 0..c {
            let (hit, row, col) = (self.get(k, k), self.row(k), self.col(k));
            class_accuracy.push((row > 0).then(|| hit as f64 / row as f64));
            iou.push((row + col > 0).then(|| hit as f64 / (row + col - hit) as f64));
        }
        Ok(MetricsReport {
            global_accuracy: trace as f64 / total as f64,
            class_average: mean_defined(&class_accuracy),
            mean_iou: mean_defined(&iou),
            class_accuracy,
            iou,
        })
    }
}

fn mean_defined(values: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    defined.iter().sum::<f64>() / defined.len() as f64
}

/// Undefined per-class entries (no ground truth, or no pixels at all) are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub global_accuracy: f64,
    pub class_accuracy: Vec<Option<f64>>,
    /// Mean over classes with at least one ground-truth pixel.
    pub class_average: f64,
    pub iou: Vec<Option<f64>>,
    /// Mean over classes that appear in the labels or the predictions.
    pub mean_iou: f64,
}

pub const DEFAULT_PERCENTILES: [f64; 4] = [90.0, 50.0, 10.0, 0.0];

#[derive(Clone, Debug, PartialEq)]
pub struct PercentileRow {
    pub percentile: f64,
    pub pixels: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PercentileReport {
    pub rows: Vec<PercentileRow>,
}

/// Pixel accuracy among the most confident pixels.
///
/// All non-void pixels are pooled and sorted by ascending uncertainty; row `p`
/// scores the first `ceil((100 - p)% of N)` of them. A group of tied
/// uncertainties that straddles the cut contributes its mean correctness for
/// the positions it fills, so the result does not depend on pixel order.
pub fn percentile_table(
    uncertainty: &[&[f32]],
    predictions: &[LabelMap],
    labels: &[LabelMap],
    void_label: u8,
    percentiles: &[f64],
) -> Result<PercentileReport> {
    if uncertainty.len() != labels.len() || predictions.len() != labels.len() {
        return Err(Error::shape(
            "uncertainty, prediction and label lists differ in length",
        ));
    }
    let mut pool: Vec<(f32, bool)> = Vec::new();
    for ((u, p), y) in uncertainty.iter().zip(predictions).zip(labels) {
        if u.len() != y.len() || !p.same_extents(y) {
            return Err(Error::shape("uncertainty map does not match its label map"));
        }
        for i in 0..y.len() {
            if y.data()[i] != void_label {
                pool.push((u[i], p.data()[i] == y.data()[i]));
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::contract("no labelled pixels to rank"));
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pool.len();
    let mut correct_prefix = Vec::with_capacity(n + 1);
    correct_prefix.push(0usize);
    for &(_, ok) in &pool {
        correct_prefix.push(correct_prefix.last().unwrap() + usize::from(ok));
    }
    // start of the tie group holding each position, and one past its end
    let mut group_start = vec![0usize; n];
    let mut group_end = vec![n; n];
    for i in 1..n {
        group_start[i] = if pool[i].0 == pool[i - 1].0 {
            group_start[i - 1]
        } else {
            i
        };
    }
    for i in (0..n - 1).rev() {
        group_end[i] = if pool[i].0 == pool[i + 1].0 {
            group_end[i + 1]
        } else {
            i + 1
        };
    }
    let rows = percentiles
        .iter()
        .map(|&p| {
            if !(0.0..100.0).contains(&p) {
                return Err(Error::contract(format!("percentile {p} outside [0, 100)")));
            }
            let keep = (((100.0 - p) * n as f64 / 100.0) - 1e-9)
                .ceil()
                .clamp(1.0, n as f64) as usize;
            let (lo, hi) = (group_start[keep - 1], group_end[keep - 1]);
            let tied = (correct_prefix[hi] - correct_prefix[lo]) as f64;
            let correct = correct_prefix[lo] as f64 + tied * (keep - lo) as f64 / (hi - lo) as f64;
            Ok(PercentileRow {
                percentile: p,
                pixels: keep,
                accuracy: correct / keep as f64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PercentileReport { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassUncertaintyRow {
    pub class: usize,
    /// Mean overall uncertainty over ground-truth pixels of the class; `None` if absent.
    pub mean_uncertainty: Option<f64>,
    pub accuracy: Option<f64>,
    /// Share of all labelled pixels.
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassUncertaintyReport {
    pub rows: Vec<ClassUncertaintyRow>,
    /// Spearman correlation over present classes; `None` when undefined.
    pub uncertainty_vs_accuracy: Option<f64>,
    pub uncertainty_vs_frequency: Option<f64>,
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` for fewer than two points or a constant side.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Per-class mean uncertainty, accuracy and frequency, with rank correlations.
pub fn class_uncertainty_report(
    uncertainty: &[&[f32]],
    predictions: &[LabelMap],
    labels: &[LabelMap],
    num_classes: usize,
    void_label: u8,
) -> Result<ClassUncertaintyReport> {
    if uncertainty.len() != labels.len() || predictions.len() != labels.len() {
        return Err(Error::shape(
            "uncertainty, prediction and label lists differ in length",
        ));
    }
    if labels.is_empty() {
        return Err(Error::contract("nothing to evaluate"));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut unc_sum = vec![0.0f64; num_classes];
    let mut pixels = vec![0u64; num_classes];
    for ((u, p), y) in uncertainty.iter().zip(predictions).zip(labels) {
        if u.len() != y.len() {
            return Err(Error::shape("uncertainty map does not match its label map"));
        }
        cm.accumulate(p, y, void_label)?;
        for (i, &c) in y.data().iter().enumerate() {
            if c != void_label {
                unc_sum[c as usize] += u[i] as f64;
                pixels[c as usize] += 1;
            }
        }
    }
    let total: u64 = pixels.iter().sum();
    let per_class_acc = if total > 0 {
        cm.metrics()?.class_accuracy
    } else {
        vec![None; num_classes]
    };
    let rows: Vec<ClassUncertaintyRow> = (0..num_classes)
        .map(|c| ClassUncertaintyRow {
            class: c,
            mean_uncertainty: (pixels[c] > 0).then(|| unc_sum[c] / pixels[c] as f64),
            accuracy: per_class_acc[c],
            frequency: if total == 0 {
                0.0
            } else {
                pixels[c] as f64 / total as f64
            },
        })
        .collect();
    let present: Vec<&ClassUncertaintyRow> = rows
        .iter()
        .filter(|r| r.mean_uncertainty.is_some())
        .collect();
    let unc: Vec<f64> = present
        .iter()
        .map(|r| r.mean_uncertainty.unwrap())
        .collect();
    let acc: Vec<f64> = present.iter().map(|r| r.accuracy.unwrap_or(0.0)).collect();
    let freq: Vec<f64> = present.iter().map(|r| r.frequency).collect();
    Ok(ClassUncertaintyReport {
        uncertainty_vs_accuracy: spearman(&unc, &acc),
        uncertainty_vs_frequency: spearman(&unc, &freq),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub samples: usize,
    /// Global accuracy of each trial.
    pub trials: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over trials.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleStudy {
    pub rows: Vec<StudyRow>,
    pub weight_avg_accuracy: f64,
}

/// Trial `k` of a study with base seed `s` samples with base seed `s + k`.
pub fn trial_seed(base_seed: u64, trial: usize) -> u64 {
    base_seed.wrapping_add(trial as u64)
}

/// Global accuracy of the MC mean prediction for every `T` in `t_list` and
/// every trial, plus the weight-averaging reference. Each trial draws its
/// samples once and reads off every `T` from the running prefix.
pub fn sample_count_study(
    model: &SegModel,
    test: &[SampleRecord],
    t_list: &[usize],
    trials: usize,
    base_seed: u64,
    void_label: u8,
) -> Result<SampleStudy> {
    if trials < 2 {
        return Err(Error::contract("the study needs at least two trials"));
    }
    if t_list.is_empty() || t_list.contains(&0) {
        return Err(Error::contract("sample counts must be positive"));
    }
    if test.is_empty() {
        return Err(Error::contract("empty test set"));
    }
    let c = model.config().num_classes;
    let t_max = *t_list.iter().max().expect("non-empty");
    // correct[trial][index into t_list]
    let mut correct = vec![vec![0u64; t_list.len()]; trials];
    let mut labelled = 0u64;
    let mut wa_correct = 0u64;
    for s in test {
        let (h, w) = (s.labels.height(), s.labels.width());
        let (_, wa_pred) = weight_avg_inference(model, &s.image)?;
        let (ok, n) = crate::train::count_correct(&wa_pred, &s.labels, void_label);
        wa_correct += ok;
        labelled += n;
        for (trial, row) in correct.iter_mut().enumerate() {
            let seed = trial_seed(base_seed, trial);
            let mut acc = McAccumulator::new(c, h, w);
            for t in 0..t_max {
                acc.push(&mc_sample(model, &s.image, seed, t)?)?;
                for (slot, _) in t_list.iter().enumerate().filter(|(_, &tt)| tt == t + 1) {
                    let pred = acc.result()?.prediction;
                    row[slot] += crate::train::count_correct(&pred, &s.labels, void_label).0;
                }
            }
        }
    }
    if labelled == 0 {
        return Err(Error::contract("test set has no labelled pixels"));
    }
    let rows = t_list
        .iter()
        .enumerate()
        .map(|(slot, &t)| {
            let accs: Vec<f64> = correct
                .iter()
                .map(|r| r[slot] as f64 / labelled as f64)
                .collect();
            let hits: u64 = correct.iter().map(|r| r[slot]).sum();
            let mean = hits as f64 / (labelled * trials as u64) as f64;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            StudyRow {
                samples: t,
                trials: accs,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(SampleStudy {
        rows,
        weight_avg_accuracy: wa_correct as f64 / labelled as f64,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn opt_flagged(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// `class,accuracy,iou` rows, then `global`, `class_average` and `mean_iou`.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("class,accuracy,iou\n");
    for (c, (a, i)) in report.class_accuracy.iter().zip(&report.iou).enumerate() {
        let _ = writeln!(out, "{c},{},{}", opt(*a), opt(*i));
    }
    let _ = writeln!(out, "global,{:.6},", report.global_accuracy);
    let _ = writeln!(out, "class_average,{:.6},", report.class_average);
    let _ = writeln!(out, "mean_iou,,{:.6}", report.mean_iou);
    out
}

pub fn percentiles_csv(report: &PercentileReport) -> String {
    let mut out = String::from("percentile,accuracy\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{:.6}", r.percentile, r.accuracy);
    }
    out
}

/// Absent classes have an empty uncertainty cell; correlation rows follow.
pub fn class_uncertainty_csv(report: &ClassUncertaintyReport) -> String {
    let mut out = String::from("class,mean_uncertainty,accuracy,frequency\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6}",
            r.class,
            opt(r.mean_uncertainty),
            opt(r.accuracy),
            r.frequency
        );
    }
    let _ = writeln!(
        out,
        "spearman_uncertainty_accuracy,{},,",
        opt_flagged(report.uncertainty_vs_accuracy)
    );
    let _ = writeln!(
        out,
        "spearman_uncertainty_frequency,{},,",
        opt_flagged(report.uncertainty_vs_frequency)
    );
    out
}

/// `T,mean,std` rows plus the `wa` reference row.
pub fn samples_study_csv(study: &SampleStudy) -> String {
    let mut out = String::from("T,mean,std\n");
    for r in &study.rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", r.samples, r.mean, r.std);
    }
    let _ = writeln!(out, "wa,{:.6},0", study.weight_avg_accuracy);
    out
}

pub fn write_csv(path: impl AsRef<Path>, text: &str) -> Result<()> {
    crate::io::pnm::write(path.as_ref(), text.as_bytes())
}
