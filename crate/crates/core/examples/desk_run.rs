//! Train the default model on synthetic shapes and report test metrics.
//!
//! `cargo run --release --example desk_run -- [epochs] [train_count] [batch] [checkpoint]`

use std::time::Instant;

use bayesseg::bayes::{mc_inference, weight_avg_inference};
use bayesseg::evalkit::{percentile_table, ConfusionMatrix, DEFAULT_PERCENTILES};
use bayesseg::io::{generate_synthetic, save_checkpoint, SynthConfig};
use bayesseg::model::{ModelConfig, SegModel};
use bayesseg::train::{finalize_batchnorm, train_loop_with, TrainConfig};

fn main() -> bayesseg::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let epochs = args.first().copied().unwrap_or(20);
    let count = args.get(1).copied().unwrap_or(200);
    let batch = args.get(2).copied().unwrap_or(4);
    let train = generate_synthetic(&SynthConfig {
        count,
        seed: 1,
        ..SynthConfig::default()
    })?;
    let test = generate_synthetic(&SynthConfig {
        count: 50,
        seed: 2,
        ..SynthConfig::default()
    })?;

    let mut model = SegModel::new(&ModelConfig::default())?;
    let config = TrainConfig {
        epochs,
        batch_size: batch,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    train_loop_with(&mut model, &train, &config, |e| {
        println!(
            "epoch {:>3} loss {:.4} fit {:.4} ({:.0?})",
            e.epoch,
            e.loss,
            e.train_global_acc,
            start.elapsed()
        );
    })?;
    {
        let mut wa = ConfusionMatrix::new(4);
        let mut mc = ConfusionMatrix::new(4);
        for s in &test.samples[..10] {
            wa.accumulate(&weight_avg_inference(&model, &s.image)?.1, &s.labels, 255)?;
            mc.accumulate(
                &mc_inference(&model, &s.image, 10, 0)?.prediction,
                &s.labels,
                255,
            )?;
        }
        println!(
            "running-average stats: wa {:.4} mc {:.4}",
            wa.metrics()?.global_accuracy,
            mc.metrics()?.global_accuracy
        );
    }
    finalize_batchnorm(&mut model, &train)?;
    if let Some(path) = std::env::args().nth(4) {
        save_checkpoint(&model, path)?;
    }

    let mut wa = ConfusionMatrix::new(4);
    let mut mc = ConfusionMatrix::new(4);
    let (mut unc, mut preds, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for s in &test.samples {
        let (_, p) = weight_avg_inference(&model, &s.image)?;
        wa.accumulate(&p, &s.labels, 255)?;
        let r = mc_inference(&model, &s.image, 50, 0)?;
        mc.accumulate(&r.prediction, &s.labels, 255)?;
        unc.push(r.overall_uncertainty.into_data());
        preds.push(r.prediction);
        labels.push(s.labels.clone());
    }
    let wa = wa.metrics()?;
    let mc = mc.metrics()?;
    println!(
        "weight averaging: G {:.4} C {:.4} mIoU {:.4}",
        wa.global_accuracy, wa.class_average, wa.mean_iou
    );
    println!(
        "mc (T=50):        G {:.4} C {:.4} mIoU {:.4}",
        mc.global_accuracy, mc.class_average, mc.mean_iou
    );
    let views: Vec<&[f32]> = unc.iter().map(|u| u.as_slice()).collect();
    let table = percentile_table(&views, &preds, &labels, 255, &DEFAULT_PERCENTILES)?;
    for row in table.rows {
        println!("percentile {:>2}: {:.4}", row.percentile, row.accuracy);
    }
    println!("total {:.1?}", start.elapsed());
    Ok(())
}
