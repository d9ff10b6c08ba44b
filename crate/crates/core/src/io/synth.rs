//! Synthetic shapes-on-background segmentation data.
//!
//! Class 0 is background; classes 1.. are shape kinds (rectangle, disk,
//! triangle, ellipse, diamond). Every shape kind has the same expected area,
//! so the class mix is set by how often each kind is drawn. The last class
//! is drawn `rare_class_ratio` times as often as each other shape class.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::dataset::{Dataset, SampleRecord, VOID_LABEL};
use crate::rng::{streams, Rng};
use crate::tensor::{LabelMap, Tensor};

/// Background plus the five shape kinds.
pub const MAX_SYNTH_CLASSES: usize = 6;

const BASE_COLORS: [[f32; 3]; MAX_SYNTH_CLASSES] = [
    [0.50, 0.50, 0.50],
    [0.80, 0.35, 0.30],
    [0.35, 0.70, 0.35],
    [0.35, 0.40, 0.80],
    [0.80, 0.75, 0.30],
    [0.70, 0.35, 0.75],
];

/// Color of occluding bars; they are labelled background.
const OCCLUDER_COLOR: [f32; 3] = [0.20, 0.20, 0.22];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Range of a shape's side (square root of its area) as a fraction of the shorter image side.
    pub shape_size: [f32; 2],
    /// Std of the per-pixel Gaussian noise added to every channel.
    pub noise_std: f32,
    /// Half-width of the uniform per-shape color jitter.
    pub color_jitter: f32,
    /// Probability that an image gets an occluding bar drawn over its shapes.
    pub occlusion_prob: f32,
    /// Fraction of shape-boundary pixels relabelled void.
    pub boundary_void: f32,
    /// Expected pixel frequency of the last class relative to each other shape class.
    pub rare_class_ratio: f32,
    pub seed: u64,
    pub count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            num_classes: 4,
            min_shapes: 2,
            max_shapes: 4,
            shape_size: [0.32, 0.45],
            noise_std: 0.03,
            color_jitter: 0.05,
            occlusion_prob: 0.0,
            boundary_void: 0.0,
            rare_class_ratio: 1.0,
            seed: 0,
            count: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SYNTH_CLASSES).contains(&self.num_classes) {
            return Err(Error::contract(format!(
                "synthetic data supports 2..={MAX_SYNTH_CLASSES} classes, got {}",
                self.num_classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::contract("synthetic images must be at least 16x16"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::contract("need 1 <= min_shapes <= max_shapes"));
        }
        let [lo, hi] = self.shape_size;
        if !(lo > 0.0 && lo <= hi && hi <= 0.45) {
            return Err(Error::contract(
                "shape_size must satisfy 0 < min <= max <= 0.45",
            ));
        }
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        if !unit(self.occlusion_prob) || !unit(self.boundary_void) {
            return Err(Error::contract("probabilities must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.color_jitter >= 0.0) {
            return Err(Error::contract("noise and jitter must be non-negative"));
        }
        if !(self.rare_class_ratio > 0.0 && self.rare_class_ratio.is_finite()) {
            return Err(Error::contract("rare class ratio must be positive"));
        }
        Ok(())
    }

    /// Probability of each class being picked for a shape (index 0 unused).
    fn shape_class_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.num_classes];
        for (c, slot) in w.iter_mut().enumerate().skip(1) {
            *slot = if c == self.num_classes - 1 && self.num_classes > 2 {
                self.rare_class_ratio as f64
            } else {
                1.0
            };
        }
        w
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Rectangle { hw: f64, hh: f64 },
    Disk { r: f64 },
    Triangle { half_base: f64, height: f64 },
    Ellipse { a: f64, b: f64 },
    Diamond { a: f64, b: f64 },
}

#[derive(Clone, Copy)]
struct Shape {
    class: u8,
    kind: Kind,
    cx: f64,
    cy: f64,
    color: [f32; 3],
}

impl Kind {
    /// Every kind has area `s * s`; `k` sets the aspect ratio.
    fn with_area(class: usize, s: f64, k: f64) -> Kind {
        use std::f64::consts::PI;
        match class {
            1 => Kind::Rectangle {
                hw: s * k / 2.0,
                hh: s / k / 2.0,
            },
            2 => Kind::Disk { r: s / PI.sqrt() },
            3 => Kind::Triangle {
                half_base: s * k / 2f64.sqrt(),
                height: s * 2f64.sqrt() / k,
            },
            4 => Kind::Ellipse {
                a: s * k / PI.sqrt(),
                b: s / k / PI.sqrt(),
            },
            _ => Kind::Diamond {
                a: s * k / 2f64.sqrt(),
                b: s / k / 2f64.sqrt(),
            },
        }
    }

    /// Half extents of the bounding box around the anchor point.
    fn half_extents(self) -> (f64, f64) {
        match self {
            Kind::Rectangle { hw, hh } => (hw, hh),
            Kind::Disk { r } => (r, r),
            Kind::Triangle { half_base, height } => (half_base, height / 2.0),
            Kind::Ellipse { a, b } | Kind::Diamond { a, b } => (a, b),
        }
    }

    /// Point test in coordinates relative to the shape center.
    fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            Kind::Rectangle { hw, hh } => dx.abs() <= hw && dy.abs() <= hh,
            Kind::Disk { r } => dx * dx + dy * dy <= r * r,
            Kind::Triangle { half_base, height } => {
                // apex up, base at dy = height/2
                let t = (dy + height / 2.0) / height;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * half_base
            }
            Kind::Ellipse { a, b } => (dx / a).powi(2) + (dy / b).powi(2) <= 1.0,
            Kind::Diamond { a, b } => dx.abs() / a + dy.abs() / b <= 1.0,
        }
    }
}

fn pick_class(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform_f64() * total;
    for (c, &w) in weights.iter().enumerate() {
        if u < w {
            return c;
        }
        u -= w;
    }
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .expect("some class has weight")
}

fn jittered(base: [f32; 3], jitter: f32, rng: &mut Rng) -> [f32; 3] {
    base.map(|v| v + (rng.uniform() * 2.0 - 1.0) * jitter)
}

/// One image and its labels; depends only on `(config.seed, index)`.
pub fn generate_sample(config: &SynthConfig, index: usize) -> Result<SampleRecord> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = Rng::stream(config.seed, streams::SYNTH + index as u64);
    let side = h.min(w) as f64;
    let weights = config.shape_class_weights();

    let n_shapes = config.min_shapes + rng.below(config.max_shapes - config.min_shapes + 1);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let class = pick_class(&weights, &mut rng);
        let s = rng.range(config.shape_size[0] as f64, config.shape_size[1] as f64) * side;
        let k = rng.range(0.75, 1.33);
        let kind = Kind::with_area(class, s, k);
        let (ex, ey) = kind.half_extents();
        // keep the whole shape inside the frame
        let cx = rng.range(ex + 0.5, w as f64 - ex - 0.5);
        let cy = rng.range(ey + 0.5, h as f64 - ey - 0.5);
        let color = jittered(BASE_COLORS[class], config.color_jitter, &mut rng);
        shapes.push(Shape {
            class: class as u8,
            kind,
            cx,
            cy,
            color,
        });
    }
    let background = jittered(BASE_COLORS[0], config.color_jitter * 1.5, &mut rng);

    let plane = h * w;
    let mut labels = vec![0u8; plane];
    let mut rgb = vec![background; plane];
    for shape in &shapes {
        for y in 0..h {
            let dy = y as f64 + 0.5 - shape.cy;
            for x in 0..w {
                if shape.kind.contains(x as f64 + 0.5 - shape.cx, dy) {
                    labels[y * w + x] = shape.class;
                    rgb[y * w + x] = shape.color;
                }
            }
        }
    }

    if rng.uniform() < config.occlusion_prob {
        let bar = (side * 0.06).max(2.0) as usize;
        let x0 = rng.below(w - bar);
        for y in 0..h {
            for x in x0..x0 + bar {
                labels[y * w + x] = 0;
                rgb[y * w + x] = OCCLUDER_COLOR;
            }
        }
    }

    if config.boundary_void > 0.0 {
        let original = labels.clone();
        for y in 0..h {
            for x in 0..w {
                let here = original[y * w + x];
                let edge = (x > 0 && original[y * w + x - 1] != here)
                    || (x + 1 < w && original[y * w + x + 1] != here)
                    || (y > 0 && original[(y - 1) * w + x] != here)
                    || (y + 1 < h && original[(y + 1) * w + x] != here);
                if edge && rng.uniform() < config.boundary_void {
                    labels[y * w + x] = VOID_LABEL;
                }
            }
        }
    }

    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            let noisy = px[c] + rng.normal() * config.noise_std;
            // quantize now so the in-memory sample equals its file form
            data[c * plane + i] = crate::io::pnm::quantize(noisy) as f32 / 255.0;
        }
    }

    Ok(SampleRecord {
        id: format!("img_{index:05}"),
        image: Tensor::new(&[3, h, w], data)?,
        labels: LabelMap::new(h, w, labels)?,
    })
}

/// `config.count` samples in index order.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    let samples = (0..config.count)
        .map(|i| generate_sample(config, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, config.num_classes)
}

/// Generate and write images, labels and `manifest.txt` into `dir`.
pub fn write_synthetic(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<Dataset> {
    let ds = generate_synthetic(config)?;
    ds.save(dir)?;
    Ok(ds)
}
