use proptest::collection::vec;
use proptest::prelude::*;

use bayesseg::autograd::{Graph, ParamStore};
use bayesseg::bayes::{mc_inference, mc_softmax_samples, summarize_samples};
use bayesseg::evalkit::{percentile_table, spearman, ConfusionMatrix};
use bayesseg::io::checkpoint::{decode, encode};
use bayesseg::io::pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use bayesseg::io::DatasetManifest;
use bayesseg::layers::{
    dropout, maxpool2x2, maxunpool2x2, softmax, softmax_tensor, weighted_cross_entropy, Mode,
};
use bayesseg::model::{dropout_sites, DropoutVariant, ModelConfig, SegModel};
use bayesseg::rng::Rng;
use bayesseg::tensor::{LabelMap, Tensor};

fn tensor(shape: Vec<usize>, lo: f32, hi: f32) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    vec(lo..hi, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

/// `[C, 2h, 2w]` with small extents.
fn image(lo: f32, hi: f32) -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..5, 1usize..5)
        .prop_flat_map(move |(c, h, w)| tensor(vec![c, 2 * h, 2 * w], lo, hi))
}

fn label_pair(classes: u8) -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (1usize..6, 1usize..6).prop_flat_map(move |(h, w)| {
        let cell = prop_oneof![9 => 0..classes, 1 => Just(255u8)];
        (vec(0..classes, h * w), vec(cell, h * w)).prop_map(move |(p, y)| {
            (
                LabelMap::new(h, w, p).unwrap(),
                LabelMap::new(h, w, y).unwrap(),
            )
        })
    })
}

fn variant() -> impl Strategy<Value = DropoutVariant> {
    prop::sample::select(DropoutVariant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pool_unpool_pool_keeps_pooled_values(x in image(0.0, 5.0)) {
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let (pooled, idx) = maxpool2x2(&mut g, xv).unwrap();
        let up = maxunpool2x2(&mut g, pooled, &idx).unwrap();
        let (again, idx2) = maxpool2x2(&mut g, up).unwrap();
        prop_assert_eq!(g.value(again), g.value(pooled));
        prop_assert_eq!(idx2, idx);
    }

    #[test]
    fn softmax_is_normalized_for_huge_logits(x in image(-1e4, 1e4)) {
        let p = softmax_tensor(&x).unwrap();
        let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        for px in 0..h * w {
            let sum: f32 = (0..c).map(|k| p.data()[k * h * w + px]).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-5, "sum {}", sum);
            for k in 0..c {
                let v = p.data()[k * h * w + px];
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn weight_avg_dropout_is_identity(x in image(-3.0, 3.0), p in 0.0f32..0.95, seed: u64) {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = dropout(&mut g, xv, p, Mode::WeightAvg, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }

    #[test]
    fn unit_weights_give_plain_cross_entropy(
        logits in tensor(vec![1, 3, 2, 3], -4.0, 4.0),
        labels in vec(prop_oneof![0u8..3, Just(255u8)], 6),
    ) {
        prop_assume!(labels.iter().any(|&l| l != 255));
        let map = LabelMap::new(2, 3, labels.clone()).unwrap();
        let mut g = Graph::inference();
        let lv = g.constant(logits);
        let probs = softmax(&mut g, lv).unwrap();
        let loss = weighted_cross_entropy(&mut g, probs, &[map], &[1.0; 3], 255).unwrap();
        let pd = g.value(probs).data();
        let mut total = 0.0f64;
        let mut n = 0.0;
        for (px, &y) in labels.iter().enumerate() {
            if y != 255 {
                total -= (pd[y as usize * 6 + px] as f64).ln();
                n += 1.0;
            }
        }
        prop_assert_eq!(g.value(loss).item(), (total / n) as f32);
    }

    #[test]
    fn gradient_is_linear_in_the_loss(x in tensor(vec![5], -2.0, 2.0), a in -3.0f32..3.0, b in -3.0f32..3.0) {
        let grad_of = |wa: f32, wb: f32| {
            let mut store = ParamStore::new();
            let id = store.add("x", x.clone(), false).unwrap();
            let mut g = Graph::new();
            let v = g.param(&store, id);
            let sq = g.mul(v, v).unwrap();
            let l1 = g.sum(sq);
            let r = g.relu(v);
            let l2 = g.sum(r);
            let s1 = g.scale(l1, wa);
            let s2 = g.scale(l2, wb);
            let loss = g.add(s1, s2).unwrap();
            g.backward(loss, &mut store).unwrap();
            store.get(id).grad.clone()
        };
        let combined = grad_of(a, b);
        let (g1, g2) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
        for i in 0..5 {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            let got = combined.data()[i];
            prop_assert!((got - expect).abs() <= 1e-5 * expect.abs().max(1.0), "{} vs {}", got, expect);
        }
    }

    #[test]
    fn confusion_matrix_is_order_independent(pairs in vec(label_pair(4), 1..6)) {
        let mut whole = ConfusionMatrix::new(4);
        for (p, y) in &pairs {
            whole.accumulate(p, y, 255).unwrap();
        }
        let mut merged = ConfusionMatrix::new(4);
        for (p, y) in pairs.iter().rev() {
            let mut one = ConfusionMatrix::new(4);
            one.accumulate(p, y, 255).unwrap();
            merged.merge(&one).unwrap();
        }
        prop_assert_eq!(merged, whole);
    }

    #[test]
    fn metrics_ignore_class_relabelling(pairs in vec(label_pair(4), 1..4), perm in Just([0u8, 1, 2, 3]).prop_shuffle()) {
        let remap = |m: &LabelMap| {
            let data = m.data().iter().map(|&v| if v == 255 { v } else { perm[v as usize] }).collect();
            LabelMap::new(m.height(), m.width(), data).unwrap()
        };
        let (mut a, mut b) = (ConfusionMatrix::new(4), ConfusionMatrix::new(4));
        for (p, y) in &pairs {
            a.accumulate(p, y, 255).unwrap();
            b.accumulate(&remap(p), &remap(y), 255).unwrap();
        }
        prop_assume!(a.total() > 0);
        let (ma, mb) = (a.metrics().unwrap(), b.metrics().unwrap());
        prop_assert!((ma.global_accuracy - mb.global_accuracy).abs() < 1e-12);
        prop_assert!((ma.class_average - mb.class_average).abs() < 1e-12);
        prop_assert!((ma.mean_iou - mb.mean_iou).abs() < 1e-12);
    }

    #[test]
    fn most_uncertain_cut_is_global_accuracy(pairs in vec(label_pair(3), 1..4), seed: u64) {
        let mut rng = Rng::new(seed);
        let unc: Vec<Vec<f32>> = pairs.iter().map(|(p, _)| (0..p.len()).map(|_| rng.uniform()).collect()).collect();
        let views: Vec<&[f32]> = unc.iter().map(|u| u.as_slice()).collect();
        let preds: Vec<LabelMap> = pairs.iter().map(|(p, _)| p.clone()).collect();
        let labels: Vec<LabelMap> = pairs.iter().map(|(_, y)| y.clone()).collect();
        let mut cm = ConfusionMatrix::new(3);
        for (p, y) in &pairs {
            cm.accumulate(p, y, 255).unwrap();
        }
        prop_assume!(cm.total() > 0);
        let table = percentile_table(&views, &preds, &labels, 255, &[0.0]).unwrap();
        prop_assert!((table.rows[0].accuracy - cm.metrics().unwrap().global_accuracy).abs() < 1e-12);

        // constant uncertainty: every cut sees the same mix
        let flat: Vec<Vec<f32>> = unc.iter().map(|u| vec![0.5; u.len()]).collect();
        let views: Vec<&[f32]> = flat.iter().map(|u| u.as_slice()).collect();
        let table = percentile_table(&views, &preds, &labels, 255, &[90.0, 50.0, 10.0, 0.0]).unwrap();
        for row in &table.rows {
            prop_assert!((row.accuracy - table.rows[3].accuracy).abs() < 1e-9);
        }
    }

    #[test]
    fn spearman_is_bounded_and_symmetric(a in vec(-5.0f64..5.0, 2..12), seed: u64) {
        let mut rng = Rng::new(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.uniform_f64()).collect();
        if let Some(r) = spearman(&a, &b) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert_eq!(Some(r), spearman(&b, &a));
        }
        if let Some(r) = spearman(&a, &a) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ppm_and_pgm_round_trip(x in image(0.0, 1.0), labels in label_pair(255)) {
        let rgb = Tensor::new(&[3, x.shape()[1], x.shape()[2]], (0..3 * x.shape()[1] * x.shape()[2]).map(|i| x.data()[i % x.len()]).collect()).unwrap();
        let bytes = encode_ppm(&rgb).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(encode_ppm(&back).unwrap(), bytes);
        for (a, b) in back.data().iter().zip(rgb.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let (map, _) = labels;
        let bytes = encode_pgm(&map);
        prop_assert_eq!(decode_pgm(&bytes).unwrap(), map);
    }

    #[test]
    fn manifest_render_parse_round_trip(
        classes in 2usize..=255,
        ids in prop::collection::btree_set("[A-Za-z0-9_][A-Za-z0-9_.-]{0,8}", 0..8),
        split in prop::option::of("[a-z]{1,6}"),
    ) {
        let mut text = format!("classes={classes}\n");
        if let Some(s) = &split {
            text.push_str(&format!("split={s}\n"));
        }
        for id in &ids {
            text.push_str(id);
            text.push('\n');
        }
        let m = DatasetManifest::parse(&text, "m.txt", "root").unwrap();
        prop_assert_eq!(m.ids.len(), ids.len());
        prop_assert_eq!(&m.render(), &text);
        prop_assert_eq!(DatasetManifest::parse(&m.render(), "m.txt", "root").unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn site_counts_follow_the_variant(stages in 1usize..7, v in variant()) {
        let cfg = ModelConfig { stages, dropout_variant: v, ..ModelConfig::default() };
        let expect = match v {
            DropoutVariant::Encoder | DropoutVariant::Decoder => stages,
            DropoutVariant::EncDec => 2 * stages,
            DropoutVariant::CentralEncDec => 2 * stages.div_ceil(2),
            DropoutVariant::Center | DropoutVariant::Classifier => 1,
            DropoutVariant::None => 0,
        };
        prop_assert_eq!(dropout_sites(&cfg).len(), expect);
    }

    #[test]
    fn model_output_extents_and_checkpoint_round_trip(
        stages in 1usize..3,
        features in 1usize..5,
        classes in 2usize..5,
        v in variant(),
        hm in 1usize..3,
        wm in 1usize..3,
        seed: u64,
    ) {
        let cfg = ModelConfig {
            stages, features, num_classes: classes, dropout_variant: v, seed, ..ModelConfig::default()
        };
        let model = SegModel::new(&cfg).unwrap();
        let unit = 1 << stages;
        let x = Tensor::full(&[3, hm * unit, wm * unit], 0.3).unwrap();
        let out = model.forward(&x, Mode::WeightAvg, &mut Rng::new(0)).unwrap();
        prop_assert_eq!(out.shape(), &[classes, hm * unit, wm * unit][..]);
        let again = model.forward(&x, Mode::WeightAvg, &mut Rng::new(9)).unwrap();
        prop_assert_eq!(&out, &again);

        let bytes = encode(&model);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back), bytes);
        prop_assert_eq!(back.forward(&x, Mode::WeightAvg, &mut Rng::new(0)).unwrap(), out);
    }

    #[test]
    fn streaming_statistics_match_two_pass(seed: u64, t in 1usize..8, v in variant()) {
        let cfg = ModelConfig {
            stages: 2, features: 4, num_classes: 3, dropout_variant: v, seed, ..ModelConfig::default()
        };
        let model = SegModel::new(&cfg).unwrap();
        let mut rng = Rng::new(seed ^ 1);
        let x = Tensor::new(&[3, 8, 8], (0..192).map(|_| rng.uniform()).collect()).unwrap();
        let streamed = mc_inference(&model, &x, t, seed).unwrap();
        let brute = summarize_samples(&mc_softmax_samples(&model, &x, t, seed).unwrap()).unwrap();
        prop_assert!(streamed.mean_probs.max_abs_diff(&brute.mean_probs).unwrap() <= 1e-6);
        prop_assert!(streamed.var_probs.max_abs_diff(&brute.var_probs).unwrap() <= 1e-6);
        for px in 0..64 {
            let mean: f32 = (0..3).map(|c| streamed.var_probs.data()[c * 64 + px]).sum::<f32>() / 3.0;
            prop_assert_eq!(streamed.overall_uncertainty.data()[px], mean);
        }
        if t == 1 || v == DropoutVariant::None {
            prop_assert!(streamed.var_probs.data().iter().all(|&s| s == 0.0));
            prop_assert!(streamed.variation_ratio.data().iter().all(|&s| s == 0.0));
        }
    }
}
