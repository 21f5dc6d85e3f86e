//! Procedural few-shot benchmark: every class is a coloured motif drawn at a
//! class-specific position, at a random per-image scale, over a noisy
//! background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassSamples, DatasetSplit, LoadingMode, Sample, SampleSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    HorizontalBar,
    VerticalBar,
    DiagonalBar,
    Blob,
    Ring,
    Corner,
    Cross,
    Frame,
}

impl Motif {
    pub const ALL: [Motif; 8] = [
        Motif::HorizontalBar,
        Motif::VerticalBar,
        Motif::DiagonalBar,
        Motif::Blob,
        Motif::Ring,
        Motif::Corner,
        Motif::Cross,
        Motif::Frame,
    ];

    /// Opacity at motif coordinates `(u, v)` (unit radius).
    fn coverage(self, u: f64, v: f64) -> f64 {
        let d2 = u * u + v * v;
        let inside = |b: bool| if b { 1.0 } else { 0.0 };
        let hbar = u.abs() <= 1.0 && v.abs() <= 0.3;
        let vbar = v.abs() <= 1.0 && u.abs() <= 0.3;
        match self {
            Motif::HorizontalBar => inside(hbar),
            Motif::VerticalBar => inside(vbar),
            Motif::DiagonalBar => {
                let (a, b) = ((u + v) / 2f64.sqrt(), (u - v) / 2f64.sqrt());
                inside(a.abs() <= 1.0 && b.abs() <= 0.3)
            }
            Motif::Blob => (-2.0 * d2).exp(),
            Motif::Ring => inside((0.55 * 0.55..=1.0).contains(&d2)),
            Motif::Corner => inside(
                (u.abs() <= 1.0 && (-1.0..=-0.45).contains(&v)) || (v.abs() <= 1.0 && (-1.0..=-0.45).contains(&u)),
            ),
            Motif::Cross => inside(hbar || vbar),
            Motif::Frame => inside((0.5..=0.9).contains(&u.abs().max(v.abs()))),
        }
    }
}

pub const PALETTE: [[f32; 3]; 6] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.15, 0.2, 0.95],
    [0.9, 0.85, 0.1],
    [0.1, 0.85, 0.85],
    [0.85, 0.1, 0.85],
];

/// Fixed appearance of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassDef {
    pub motif: Motif,
    pub color: [f32; 3],
    /// Centre as fractions of the image side.
    pub center: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of the background noise.
    pub noise: f64,
    /// Random motifs drawn under the class motif in every image.
    pub distractors: usize,
    pub seed: u64,
    /// Global index of this split's first class; splits generated from one
    /// seed with non-overlapping ranges have disjoint classes.
    pub first_class: usize,
    pub split_name: String,
}

/// Motif radius at scale 1, as a fraction of the image side.
pub const BASE_RADIUS: f64 = 0.2;
/// Per-image motif scale is uniform in this range.
pub const SCALE_RANGE: (f64, f64) = (0.6, 1.4);
/// Each image's background colour is uniform in this range per channel.
pub const BACKGROUND_RANGE: (f32, f32) = (0.15, 0.85);
/// Per-image centre jitter, as a fraction of the image side.
pub const JITTER: f64 = 0.06;

/// Appearance of global class `index` for a given seed.
pub fn class_def(seed: u64, index: usize) -> ClassDef {
    let combos = Motif::ALL.len() * PALETTE.len();
    let round = index / combos;
    let mut order: Vec<usize> = (0..combos).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + round as u64);
    order.shuffle(&mut rng);
    let combo = order[index % combos];
    let mut pos = ChaCha8Rng::seed_from_u64(seed);
    pos.set_stream(1 << 32 | index as u64);
    ClassDef {
        motif: Motif::ALL[combo / PALETTE.len()],
        color: PALETTE[combo % PALETTE.len()],
        center: (pos.random_range(0.3..0.7), pos.random_range(0.3..0.7)),
    }
}

/// Renders a motif with centre `(cx, cy)` and radius in pixels onto
/// `background` (`[3, size, size]`).
pub fn render(def: &ClassDef, cx: f64, cy: f64, radius: f64, size: usize, background: &mut [f32]) {
    const SUB: usize = 3;
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let mut cov = 0.0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                    cov += def.motif.coverage((px - cx) / radius, (py - cy) / radius);
                }
            }
            let a = (cov / (SUB * SUB) as f64) as f32;
            if a > 0.0 {
                for (ch, &c) in def.color.iter().enumerate() {
                    let v = &mut background[ch * plane + y * size + x];
                    *v = (1.0 - a) * *v + a * c;
                }
            }
        }
    }
}

/// Quantises to 8 bits and back, so every generated value is exactly `q/255`.
fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One image of class `index`, image number `image`.
pub fn render_image(spec: &SyntheticSpec, index: usize, image: usize) -> Vec<f32> {
    let def = class_def(spec.seed, index);
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2 << 32 | (index as u64) << 20 | image as u64);
    let amp = (spec.noise * 3f64.sqrt()) as f32;
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(BACKGROUND_RANGE.0..=BACKGROUND_RANGE.1));
    let mut img: Vec<f32> = (0..3 * s * s)
        .map(|i| base[i / (s * s)] + amp * rng.random_range(-1.0f32..=1.0))
        .collect();
    let side = s as f64;
    for _ in 0..spec.distractors {
        let clutter = ClassDef {
            motif: Motif::ALL[rng.random_range(0..Motif::ALL.len())],
            color: PALETTE[rng.random_range(0..PALETTE.len())],
            center: (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)),
        };
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        render(
            &clutter,
            clutter.center.0 * side,
            clutter.center.1 * side,
            BASE_RADIUS * scale * side,
            s,
            &mut img,
        );
    }
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let jx = rng.random_range(-JITTER..=JITTER);
    let jy = rng.random_range(-JITTER..=JITTER);
    render(
        &def,
        (def.center.0 + jx) * side,
        (def.center.1 + jy) * side,
        BASE_RADIUS * scale * side,
        s,
        &mut img,
    );
    img.into_iter().map(quantize).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> DatasetSplit {
    let classes = (0..spec.classes)
        .map(|c| {
            let index = spec.first_class + c;
            ClassSamples {
                name: format!("synth{index:03}"),
                id: index as u32,
                samples: (0..spec.images_per_class)
                    .map(|i| Sample {
                        source: SampleSource::Generated(i),
                        data: render_image(spec, index, i),
                    })
                    .collect(),
            }
        })
        .collect();
    DatasetSplit {
        name: spec.split_name.clone(),
        mode: LoadingMode::Synthetic,
        sample_shape: [3, spec.image_size, spec.image_size],
        classes,
    }
}

/// Train and test splits with disjoint classes drawn from one seed.
pub fn synthetic_benchmark(
    train_classes: usize,
    test_classes: usize,
    images_per_class: usize,
    image_size: usize,
    noise: f64,
    distractors: usize,
    seed: u64,
) -> (DatasetSplit, DatasetSplit) {
    let spec = |classes, first_class, name: &str| SyntheticSpec {
        classes,
        images_per_class,
        image_size,
        noise,
        distractors,
        seed,
        first_class,
        split_name: name.into(),
    };
    (
        generate_synthetic(&spec(train_classes, 0, "train")),
        generate_synthetic(&spec(test_classes, train_classes, "test")),
    )
}

/// 8-bit channel values of a generated sample.
pub fn to_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().map(|&v| (v * 255.0).round() as u8).collect()
}
