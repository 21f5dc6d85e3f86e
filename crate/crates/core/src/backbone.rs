//! Conv-64F feature extractor: four 3×3 conv blocks (conv → batch-norm →
//! leaky ReLU), the first `pooled_blocks` followed by 2×2 max-pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Padding, Var};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::layers::{ConvBlock, Mode, ParamStore, Session};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Backbone {
    pub blocks: Vec<ConvBlock>,
    pub pooled_blocks: usize,
    pub in_channels: usize,
    pub input_size: usize,
}

impl Backbone {
    pub fn init<T: Real>(store: &mut ParamStore<T>, arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let blocks = (0..arch.blocks)
            .map(|i| {
                let cin = if i == 0 { arch.in_channels } else { arch.width };
                ConvBlock::init(
                    store,
                    &format!("backbone.block{}", i + 1),
                    cin,
                    arch.width,
                    (3, 3),
                    Padding::same(1),
                    true,
                    &mut rng,
                )
            })
            .collect();
        Backbone {
            blocks,
            pooled_blocks: arch.pooled_blocks,
            in_channels: arch.in_channels,
            input_size: arch.image_size,
        }
    }

    /// Spatial extent of the output block for a square input of side `input`.
    pub fn output_extent(&self, input: usize) -> usize {
        (0..self.pooled_blocks.min(self.blocks.len())).fold(input, |s, _| s / 2)
    }

    /// `images[B, C, S, S]` (or a single `[C, S, S]`) to `[B, width, s, s]`.
    pub fn extract<T: Real>(&self, s: &mut Session<'_, T>, images: Var) -> Result<Var> {
        let shape = s.graph.shape(images).to_vec();
        let want = [self.in_channels, self.input_size, self.input_size];
        let ok = match shape.len() {
            3 => shape[..] == want,
            4 => shape[1..] == want,
            _ => false,
        };
        if !ok {
            return Err(Error::dim(
                "backbone",
                format!("expected images of shape {want:?}, got {shape:?}"),
            ));
        }
        let single = shape.len() == 3;
        let mut x = if single {
            s.graph.reshape(images, [1, shape[0], shape[1], shape[2]])?
        } else {
            images
        };
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(s, x)?;
            if i < self.pooled_blocks {
                x = s.graph.maxpool2d(x)?;
            }
        }
        if single {
            let out = s.graph.shape(x)[1..].to_vec();
            x = s.graph.reshape(x, out)?;
        }
        Ok(x)
    }
}

/// Freshly initialised backbone in its own parameter store.
pub fn init_backbone<T: Real>(arch: &ArchConfig, seed: u64) -> (ParamStore<T>, Backbone) {
    let mut store = ParamStore::new();
    let backbone = Backbone::init(&mut store, arch, seed);
    (store, backbone)
}

/// Runs the backbone on a single image `[C,S,S]` or a batch `[B,C,S,S]`.
pub fn extract<T: Real>(
    images: &Tensor<T>,
    store: &ParamStore<T>,
    backbone: &Backbone,
    mode: Mode,
    arch: &ArchConfig,
) -> Result<Tensor<T>> {
    let mut s = match mode {
        Mode::Train => Session::new(store, Mode::Train, arch.norm),
        Mode::Eval => Session::inference(store, arch.norm),
    };
    let x = s.graph.constant(images.clone());
    let y = backbone.extract(&mut s, x)?;
    Ok(s.graph.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            image_size: 12,
            width: 4,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let (a, _) = init_backbone::<f32>(&tiny(), 3);
        let (b, _) = init_backbone::<f32>(&tiny(), 3);
        let (c, _) = init_backbone::<f32>(&tiny(), 4);
        assert_eq!(a, b);
        assert_ne!(a.values()[0], c.values()[0]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let arch = tiny();
        let (store, bb) = init_backbone::<f32>(&arch, 0);
        let img = Tensor::zeros(vec![3, 10, 10]);
        assert!(matches!(
            extract(&img, &store, &bb, Mode::Eval, &arch),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn batchnorm_defaults_are_identity_stats() {
        let (store, _) = init_backbone::<f64>(&tiny(), 0);
        for s in store.all_stats() {
            assert!(s.mean.iter().all(|&m| m == 0.0));
            assert!(s.var.iter().all(|&v| v == 1.0));
        }
    }
}
