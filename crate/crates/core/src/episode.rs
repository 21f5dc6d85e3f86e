//! N-way K-shot episode sampling.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::EpisodeShape;
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// One task. Support and query are ordered class-major; labels are positions
/// in `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTask<T> {
    pub shape: EpisodeShape,
    pub split: String,
    /// Indices into the split's class list.
    pub classes: Vec<usize>,
    pub support: Tensor<T>,
    pub support_labels: Vec<usize>,
    /// `(class, sample)` references into the split.
    pub support_refs: Vec<(usize, usize)>,
    pub query: Tensor<T>,
    pub query_labels: Vec<usize>,
    pub query_refs: Vec<(usize, usize)>,
}

impl<T: Real> EpisodeTask<T> {
    pub fn way(&self) -> usize {
        self.shape.way
    }

    pub fn shot(&self) -> usize {
        self.shape.shot
    }
}

/// Independent generator for episode `index` of a run seeded with `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_episode<T: Real, R: Rng + ?Sized>(split: &DatasetSplit, shape: EpisodeShape, rng: &mut R) -> Result<EpisodeTask<T>> {
    let EpisodeShape { way, shot, queries } = shape;
    if split.num_classes() < way {
        return Err(Error::Data(format!(
            "split `{}` has {} classes, a {way}-way episode needs {way}",
            split.name,
            split.num_classes()
        )));
    }
    let need = shot + queries;
    if let Some(c) = split.classes.iter().find(|c| c.samples.len() < need) {
        return Err(Error::Data(format!(
            "class `{}` has {} images, episodes need {need}",
            c.name,
            c.samples.len()
        )));
    }
    let classes = index::sample(rng, split.num_classes(), way).into_vec();
    let mut support_refs = Vec::with_capacity(way * shot);
    let mut query_refs = Vec::with_capacity(way * queries);
    for &c in &classes {
        let picks = index::sample(rng, split.classes[c].samples.len(), need).into_vec();
        support_refs.extend(picks[..shot].iter().map(|&i| (c, i)));
        query_refs.extend(picks[shot..].iter().map(|&i| (c, i)));
    }
    Ok(EpisodeTask {
        shape,
        split: split.name.clone(),
        support: split.gather(&support_refs)?,
        support_labels: (0..way).flat_map(|n| std::iter::repeat_n(n, shot)).collect(),
        support_refs,
        query: split.gather(&query_refs)?,
        query_labels: (0..way).flat_map(|n| std::iter::repeat_n(n, queries)).collect(),
        query_refs,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};

    fn split(classes: usize, images: usize) -> DatasetSplit {
        generate_synthetic(&SyntheticSpec {
            classes,
            images_per_class: images,
            image_size: 8,
            noise: 0.1,
            distractors: 0,
            seed: 0,
            first_class: 0,
            split_name: "train".into(),
        })
    }

    #[test]
    fn counts_and_disjointness() {
        let s = split(6, 20);
        let shape = EpisodeShape {
            way: 5,
            shot: 1,
            queries: 15,
        };
        let t: EpisodeTask<f32> = sample_episode(&s, shape, &mut episode_rng(1, 0)).unwrap();
        assert_eq!(t.support.shape()[0], 5);
        assert_eq!(t.query.shape()[0], 75);
        for r in &t.support_refs {
            assert!(!t.query_refs.contains(r));
        }
        let mut cls = t.classes.clone();
        cls.sort();
        cls.dedup();
        assert_eq!(cls.len(), 5);
        let shape = EpisodeShape {
            way: 5,
            shot: 5,
            queries: 10,
        };
        let t: EpisodeTask<f32> = sample_episode(&s, shape, &mut episode_rng(1, 0)).unwrap();
        assert_eq!((t.support.shape()[0], t.query.shape()[0]), (25, 50));
        assert_eq!(&t.support_labels[..6], &[0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let s = split(6, 10);
        let shape = EpisodeShape {
            way: 3,
            shot: 2,
            queries: 3,
        };
        let a: EpisodeTask<f32> = sample_episode(&s, shape, &mut episode_rng(4, 2)).unwrap();
        let b: EpisodeTask<f32> = sample_episode(&s, shape, &mut episode_rng(4, 2)).unwrap();
        let c: EpisodeTask<f32> = sample_episode(&s, shape, &mut episode_rng(4, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.query_refs, c.query_refs);
    }

    #[test]
    fn deficient_splits_are_named() {
        let shape = EpisodeShape {
            way: 5,
            shot: 1,
            queries: 15,
        };
        let err = sample_episode::<f32, _>(&split(4, 20), shape, &mut episode_rng(0, 0)).unwrap_err();
        assert!(err.to_string().contains("4 classes"));
        let err = sample_episode::<f32, _>(&split(5, 10), shape, &mut episode_rng(0, 0)).unwrap_err();
        assert!(err.to_string().contains("synth000"));
    }
}
