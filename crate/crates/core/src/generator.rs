//! Multi-scale feature generator: five parallel branches over the backbone
//! output.
//!
//! | scale | branch                         | spatial extent (21×21 input) |
//! |-------|--------------------------------|------------------------------|
//! | 1     | identity                       | 21×21                        |
//! | 2     | 2×2 max-pool, stride 2         | 10×10                        |
//! | 3     | 3×3 conv, padding 1            | 21×21                        |
//! | 4     | 5×5 conv, padding 2            | 21×21                        |
//! | 5     | 1×7 then 7×1 conv, same size   | 21×21                        |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Padding, Var};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::layers::{ConvBlock, Mode, ParamStore, Session};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SCALES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generator {
    pub conv3: ConvBlock,
    pub conv5: ConvBlock,
    pub conv1x7: ConvBlock,
    pub conv7x1: ConvBlock,
    pub channels: usize,
}

/// One scale's feature block `[B, C, h, w]` on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleBlock {
    pub scale: usize,
    pub block: Var,
    pub height: usize,
    pub width: usize,
}

impl ScaleBlock {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

impl Generator {
    pub fn init<T: Real>(store: &mut ParamStore<T>, arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let c = arch.width;
        let norm = arch.branch_norm;
        Generator {
            conv3: ConvBlock::init(store, "generator.conv3x3", c, c, (3, 3), Padding::same(1), norm, &mut rng),
            conv5: ConvBlock::init(store, "generator.conv5x5", c, c, (5, 5), Padding::same(2), norm, &mut rng),
            conv1x7: ConvBlock::init(store, "generator.conv1x7", c, c, (1, 7), Padding::hw(0, 3), false, &mut rng),
            conv7x1: ConvBlock::init(store, "generator.conv7x1", c, c, (7, 1), Padding::hw(3, 0), norm, &mut rng),
            channels: c,
        }
    }

    /// Feature blocks for the requested scales (1-based), in the given order.
    pub fn generate<T: Real>(&self, s: &mut Session<'_, T>, features: Var, scales: &[usize]) -> Result<Vec<ScaleBlock>> {
        let shape = s.graph.shape(features).to_vec();
        let [_, c, h, w] = shape[..] else {
            return Err(Error::dim("generator", format!("expected [B,C,H,W], got {shape:?}")));
        };
        if c != self.channels {
            return Err(Error::dim(
                "generator",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        let mut out = Vec::with_capacity(scales.len());
        for &scale in scales {
            let block = match scale {
                1 => features,
                2 => s.graph.maxpool2d(features)?,
                3 => self.conv3.forward(s, features)?,
                4 => self.conv5.forward(s, features)?,
                5 => {
                    let x = self.conv1x7.forward(s, features)?;
                    self.conv7x1.forward(s, x)?
                }
                other => return Err(Error::Parameter(format!("no generator scale {other}"))),
            };
            let bs = s.graph.shape(block);
            out.push(ScaleBlock {
                scale,
                block,
                height: bs[2],
                width: bs[3],
            });
            debug_assert!(scale == 2 || (bs[2], bs[3]) == (h, w));
        }
        Ok(out)
    }
}

/// Row layout of a scale block: `[B, C, h, w]` to `[B·h·w, C]`, one LR per row,
/// images in batch order.
pub fn lr_rows<T: Real>(s: &mut Session<'_, T>, block: &ScaleBlock) -> Result<Var> {
    let shape = s.graph.shape(block.block).to_vec();
    let (b, c, p) = (shape[0], shape[1], block.positions());
    let x = s.graph.reshape(block.block, vec![b, c, p])?;
    let x = s.graph.swap_last2(x)?;
    s.graph.reshape(x, vec![b * p, c])
}

/// Per-scale LR matrices in column layout: scale `z` holds `C × (B·H_z·W_z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleLrs<T> {
    pub matrices: Vec<Tensor<T>>,
    pub extents: Vec<(usize, usize)>,
}

impl<T: Real> MultiScaleLrs<T> {
    pub fn columns(&self, scale: usize) -> usize {
        self.matrices[scale - 1].shape()[1]
    }
}

/// Runs all five branches on `features[B, C, h, w]` and flattens each block to
/// its LR matrix.
pub fn generate<T: Real>(
    features: &Tensor<T>,
    store: &ParamStore<T>,
    generator: &Generator,
    mode: Mode,
    arch: &ArchConfig,
) -> Result<MultiScaleLrs<T>> {
    let mut s = match mode {
        Mode::Train => Session::new(store, Mode::Train, arch.norm),
        Mode::Eval => Session::inference(store, arch.norm),
    };
    let x = s.graph.constant(features.clone());
    let blocks = generator.generate(&mut s, x, &[1, 2, 3, 4, 5])?;
    let mut matrices = Vec::with_capacity(SCALES);
    let mut extents = Vec::with_capacity(SCALES);
    for block in &blocks {
        let shape = s.graph.shape(block.block).to_vec();
        let (b, c, p) = (shape[0], shape[1], block.positions());
        let data = s.graph.value(block.block).data();
        // [B, C, P] -> [C, B·P]
        let mut m = vec![T::zero(); c * b * p];
        for bi in 0..b {
            for ci in 0..c {
                m[ci * b * p + bi * p..][..p].copy_from_slice(&data[(bi * c + ci) * p..][..p]);
            }
        }
        matrices.push(Tensor::from_parts(vec![c, b * p], m));
        extents.push((block.height, block.width));
    }
    Ok(MultiScaleLrs { matrices, extents })
}

pub fn init_generator<T: Real>(arch: &ArchConfig, seed: u64) -> (ParamStore<T>, Generator) {
    let mut store = ParamStore::new();
    let g = Generator::init(&mut store, arch, seed);
    (store, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> ArchConfig {
        ArchConfig {
            width: 4,
            ..ArchConfig::default()
        }
    }

    fn features(b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(vec![b, 4, 21, 21], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn column_counts_per_scale() {
        let a = arch();
        let (store, g) = init_generator::<f64>(&a, 0);
        let ms = generate(&features(5, 1), &store, &g, Mode::Eval, &a).unwrap();
        assert_eq!(ms.matrices.len(), SCALES);
        let cols: Vec<usize> = (1..=SCALES).map(|z| ms.columns(z)).collect();
        assert_eq!(cols, [2205, 500, 2205, 2205, 2205]);
        assert_eq!(ms.extents, [(21, 21), (10, 10), (21, 21), (21, 21), (21, 21)]);
        assert!(ms.matrices.iter().all(|m| m.is_finite() && m.shape()[0] == 4));
    }

    #[test]
    fn scale_one_is_the_input_reshaped() {
        let a = arch();
        let (store, g) = init_generator::<f64>(&a, 0);
        let x = features(2, 2);
        let ms = generate(&x, &store, &g, Mode::Eval, &a).unwrap();
        let m = &ms.matrices[0];
        for b in 0..2 {
            for c in 0..4 {
                for p in 0..441 {
                    assert_eq!(m.get(&[c, b * 441 + p]), x.data()[(b * 4 + c) * 441 + p]);
                }
            }
        }
    }

    #[test]
    fn conv_branch_matches_direct_computation() {
        let a = arch();
        let (store, g) = init_generator::<f64>(&a, 3);
        let x = features(1, 4);
        let ms = generate(&x, &store, &g, Mode::Eval, &a).unwrap();
        let k = store.get(g.conv3.kernel);
        let scale = 1.0 / (1.0 + a.norm.eps).sqrt();
        for o in 0..4 {
            for y in 0..21 {
                for xx in 0..21 {
                    let mut acc = 0.0;
                    for c in 0..4 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (iy, ix) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                if (0..21).contains(&iy) && (0..21).contains(&ix) {
                                    acc += x.data()[(c * 21 + iy as usize) * 21 + ix as usize] * k.get(&[o, c, dy, dx]);
                                }
                            }
                        }
                    }
                    let z = acc * scale;
                    let want = if z >= 0.0 { z } else { a.norm.leaky_slope * z };
                    let got = ms.matrices[2].get(&[o, y * 21 + xx]);
                    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn seeded_and_finite_on_zeros() {
        let a = arch();
        let (s1, g1) = init_generator::<f32>(&a, 9);
        let (s2, _) = init_generator::<f32>(&a, 9);
        let (s3, _) = init_generator::<f32>(&a, 10);
        assert_eq!(s1.values(), s2.values());
        assert_ne!(s1.values(), s3.values());
        let ms = generate(&Tensor::zeros(vec![1, 4, 21, 21]), &s1, &g1, Mode::Eval, &a).unwrap();
        assert!(ms.matrices.iter().all(|m| m.is_finite()));
    }

    #[test]
    fn batch_order_permutes_column_blocks() {
        let a = arch();
        let (store, g) = init_generator::<f64>(&a, 0);
        let x = features(3, 5);
        let per = x.numel() / 3;
        let order = [2, 0, 1];
        let mut swapped = Vec::with_capacity(x.numel());
        for &b in &order {
            swapped.extend_from_slice(&x.data()[b * per..(b + 1) * per]);
        }
        let y = Tensor::new(vec![3, 4, 21, 21], swapped).unwrap();
        let (mx, my) = (
            generate(&x, &store, &g, Mode::Eval, &a).unwrap(),
            generate(&y, &store, &g, Mode::Eval, &a).unwrap(),
        );
        for z in 0..SCALES {
            let p = mx.columns(z + 1) / 3;
            for c in 0..4 {
                for (dst, &src) in order.iter().enumerate() {
                    for j in 0..p {
                        assert_eq!(my.matrices[z].get(&[c, dst * p + j]), mx.matrices[z].get(&[c, src * p + j]));
                    }
                }
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let a = arch();
        let (store, g) = init_generator::<f64>(&a, 0);
        assert!(generate(&Tensor::zeros(vec![1, 3, 21, 21]), &store, &g, Mode::Eval, &a).is_err());
        assert!(generate(&Tensor::zeros(vec![4, 21, 21]), &store, &g, Mode::Eval, &a).is_err());
    }
}
