use std::path::Path;

use bayesseg::bayes::{
    mc_inference, per_pixel_argmax_samples, variation_ratio, weight_avg_inference,
};
use bayesseg::evalkit::{
    class_uncertainty_csv, class_uncertainty_report, metrics_csv, percentile_table,
    percentiles_csv, sample_count_study, samples_study_csv, write_csv, ConfusionMatrix,
    DEFAULT_PERCENTILES,
};
use bayesseg::gradcheck::{run_suite, LayerKind, TOLERANCE};
use bayesseg::io::pnm::{read_image, write_labels, write_uncertainty_map};
use bayesseg::io::{
    load_checkpoint, save_checkpoint, write_synthetic, Dataset, RunConfig, SynthConfig,
};
use bayesseg::model::SegModel;
use bayesseg::tensor::{LabelMap, Tensor};
use bayesseg::train::{finalize_batchnorm, render_log, train_loop_with};
use bayesseg::Error;

use crate::exit::{self, Context, Failure};
use crate::{EvalArgs, EvalMode, GradcheckArgs, PredictArgs, StudyArgs, SynthArgs, TrainArgs};

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        height: a.size.0,
        width: a.size.1,
        num_classes: a.classes as usize,
        rare_class_ratio: a.rare_class_ratio,
        seed: a.seed,
        count: a.count,
        ..SynthConfig::default()
    };
    // bad values here came from flags
    cfg.validate()
        .map_err(|e| Failure::new(exit::FLAGS, anyhow::Error::new(e)))?;
    let ds = write_synthetic(&cfg, &a.out).context(format!("writing {}", a.out.display()))?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Dataset::load(dir).context(format!("loading dataset {}", dir.display()))
}

fn check_compatible(model: &SegModel, ds: &Dataset) -> Result<(), Failure> {
    let cfg = model.config();
    if cfg.num_classes != ds.num_classes {
        return Err(Error::Mismatch(format!(
            "model has {} classes but the dataset declares {}",
            cfg.num_classes, ds.num_classes
        ))
        .into());
    }
    if let Some(shape) = ds.image_shape() {
        cfg.check_input(shape)?;
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let run = RunConfig::read(&a.config)?;
    let ds = load_dataset(&a.data)?;
    let mut model = SegModel::new(&run.model)?;
    check_compatible(&model, &ds)?;
    eprintln!(
        "training {} parameters on {} samples for {} epochs",
        run.model.parameter_count(),
        ds.len(),
        run.train.epochs
    );
    let log = train_loop_with(&mut model, &ds, &run.train, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  train acc {:.4}",
            e.epoch, e.loss, e.train_global_acc
        );
    })?;
    finalize_batchnorm(&mut model, &ds)?;
    save_checkpoint(&model, &a.out)?;
    if let Some(path) = &a.log {
        write_csv(path, &render_log(&log))?;
    }
    Ok(())
}

struct Scored {
    predictions: Vec<LabelMap>,
    uncertainty: Vec<Tensor>,
}

fn score(
    model: &SegModel,
    ds: &Dataset,
    mode: EvalMode,
    samples: usize,
    seed: u64,
) -> Result<Scored, Failure> {
    let mut out = Scored {
        predictions: Vec::with_capacity(ds.len()),
        uncertainty: Vec::with_capacity(ds.len()),
    };
    for s in &ds.samples {
        let (pred, unc) = match mode {
            EvalMode::Wa => {
                let (_, pred) = weight_avg_inference(model, &s.image)?;
                let zeros = Tensor::zeros(&[pred.height(), pred.width()])?;
                (pred, zeros)
            }
            EvalMode::Mc => {
                let r = mc_inference(model, &s.image, samples, seed)?;
                (r.prediction, r.overall_uncertainty)
            }
        };
        out.predictions.push(pred);
        out.uncertainty.push(unc);
    }
    Ok(out)
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    check_compatible(&model, &ds)?;
    let scored = score(&model, &ds, a.mode, a.samples, a.seed)?;
    let labels: Vec<LabelMap> = ds.samples.iter().map(|s| s.labels.clone()).collect();

    let mut cm = ConfusionMatrix::new(ds.num_classes);
    for (p, y) in scored.predictions.iter().zip(&labels) {
        cm.accumulate(p, y, ds.void_label)?;
    }
    let metrics = cm.metrics()?;
    let unc: Vec<&[f32]> = scored.uncertainty.iter().map(|u| u.data()).collect();
    let pct = percentile_table(
        &unc,
        &scored.predictions,
        &labels,
        ds.void_label,
        &DEFAULT_PERCENTILES,
    )?;
    let cls = class_uncertainty_report(
        &unc,
        &scored.predictions,
        &labels,
        ds.num_classes,
        ds.void_label,
    )?;

    std::fs::create_dir_all(&a.report_dir).map_err(|e| {
        Failure::new(
            exit::IO,
            anyhow::Error::new(e).context(format!("creating {}", a.report_dir.display())),
        )
    })?;
    write_csv(a.report_dir.join("metrics.csv"), &metrics_csv(&metrics))?;
    write_csv(a.report_dir.join("percentiles.csv"), &percentiles_csv(&pct))?;
    write_csv(
        a.report_dir.join("class_uncertainty.csv"),
        &class_uncertainty_csv(&cls),
    )?;
    println!(
        "global {:.4}  class average {:.4}  mean IoU {:.4}",
        metrics.global_accuracy, metrics.class_average, metrics.mean_iou
    );
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.ckpt)?;
    let image = read_image(&a.image)?;
    model.config().check_input(image.shape())?;
    let r = mc_inference(&model, &image, a.samples, a.seed)?;
    write_labels(&r.prediction, &a.out_seg)?;
    write_uncertainty_map(&r.overall_uncertainty, &a.out_unc, None)?;
    if let Some(path) = &a.variation_ratio {
        let maps = per_pixel_argmax_samples(&model, &image, a.samples, a.seed)?;
        let (ratio, _) = variation_ratio(&maps, model.config().num_classes)?;
        write_uncertainty_map(&ratio, path, None)?;
    }
    Ok(())
}

pub fn study(a: StudyArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    check_compatible(&model, &ds)?;
    let study = sample_count_study(
        &model,
        &ds.samples,
        &a.t_list,
        a.trials,
        a.seed,
        ds.void_label,
    )?;
    write_csv(&a.out, &samples_study_csv(&study))?;
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let fault =
        match a.inject_fault.as_deref() {
            None => None,
            Some(name) => Some(LayerKind::from_name(name).ok_or_else(|| {
                Failure::new(exit::FLAGS, anyhow::anyhow!("unknown layer `{name}`"))
            })?),
        };
    let seeds: Vec<u64> = (a.seed..a.seed + 20).collect();
    let reports = run_suite(&seeds, fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<22} {:.3e}  {verdict}", r.layer.name(), r.max_rel_error);
        if !r.passed() {
            failed.push(r.layer.name());
        }
    }
    if failed.is_empty() {
        return Ok(());
    }
    Err(Failure::new(
        exit::GRADCHECK,
        anyhow::anyhow!(
            "gradient check above {TOLERANCE:e} for: {}",
            failed.join(", ")
        ),
    ))
}
