//! Datasets, feature files and checkpoints.

pub mod checkpoint;
pub mod features;
pub mod images;
pub mod synthetic;

use std::collections::HashMap;
use std::path::PathBuf;

use crate::config::{Config, DataSource, InputKind};
use crate::error::{Error, Result};
use crate::model::InputNorm;
use crate::real::Real;
use crate::tensor::Tensor;

/// How the samples of a split were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadingMode {
    Images,
    Features,
    Synthetic,
}

/// Where a sample came from.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleSource {
    File(PathBuf),
    /// Record index within a feature file.
    Record(usize),
    /// Index within its class of a generated image.
    Generated(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub source: SampleSource,
    /// `[C, H, W]` values, row-major.
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSamples {
    pub name: String,
    /// Dataset-wide class id; unique across splits.
    pub id: u32,
    pub samples: Vec<Sample>,
}

/// One split (train, val or test) held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub mode: LoadingMode,
    /// `[C, H, W]` of every sample.
    pub sample_shape: [usize; 3],
    pub classes: Vec<ClassSamples>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Stacks `(class, sample)` pairs into a `[B, C, H, W]` batch.
    pub fn gather<T: Real>(&self, picks: &[(usize, usize)]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(picks.len() * self.sample_len());
        for &(c, i) in picks {
            let class = self.classes.get(c).ok_or(Error::Index {
                op: "gather",
                index: c,
                bound: self.classes.len(),
            })?;
            let sample = class.samples.get(i).ok_or(Error::Index {
                op: "gather",
                index: i,
                bound: class.samples.len(),
            })?;
            data.extend(sample.data.iter().map(|&v| T::from_f32(v).unwrap_or_else(T::nan)));
        }
        let [c, h, w] = self.sample_shape;
        Tensor::new(vec![picks.len(), c, h, w], data)
    }

    /// Per-channel mean and standard deviation over every sample.
    pub fn channel_stats(&self) -> InputNorm {
        let [c, h, w] = self.sample_shape;
        let plane = h * w;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let mut n = 0usize;
        for s in self.classes.iter().flat_map(|c| &c.samples) {
            for (ch, vals) in s.data.chunks_exact(plane).enumerate() {
                for &v in vals {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            n += plane;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        InputNorm {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn normalize(&mut self, norm: &InputNorm) -> Result<()> {
        let [c, h, w] = self.sample_shape;
        if norm.mean.len() != c || norm.std.len() != c {
            return Err(Error::Data(format!(
                "normalisation has {} channels, split `{}` has {c}",
                norm.mean.len(),
                self.name
            )));
        }
        for s in self.classes.iter_mut().flat_map(|c| &mut c.samples) {
            norm.apply(&mut s.data, h * w);
        }
        Ok(())
    }
}

/// Rejects any class name or id that appears in more than one split.
pub fn check_disjoint(splits: &[&DatasetSplit]) -> Result<()> {
    let mut names: HashMap<&str, &str> = HashMap::new();
    let mut ids: HashMap<u32, &str> = HashMap::new();
    for split in splits {
        for class in &split.classes {
            if let Some(other) = names.insert(&class.name, &split.name) {
                return Err(Error::Data(format!(
                    "class `{}` appears in splits `{other}` and `{}`",
                    class.name, split.name
                )));
            }
            if let Some(other) = ids.insert(class.id, &split.name) {
                return Err(Error::Data(format!(
                    "class id {} appears in splits `{other}` and `{}`",
                    class.id, split.name
                )));
            }
        }
    }
    Ok(())
}

/// Training and test splits of a run, already standardised.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub norm: InputNorm,
}

/// Loads the configured data source. Inputs are standardised with `norm` when
/// given (e.g. from a checkpoint), otherwise with train-split statistics.
pub fn load_splits(config: &Config, norm: Option<&InputNorm>) -> Result<Splits> {
    let d = &config.data;
    let a = &config.arch;
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone()
            .ok_or_else(|| Error::Config(format!("data source {:?} needs `{key}`", d.source)))
    };
    let expect_input = |kind: InputKind| {
        if a.input != kind {
            return Err(Error::Config(format!(
                "data source {:?} does not match input kind {:?}",
                d.source, a.input
            )));
        }
        Ok(())
    };
    let (mut train, mut test) = match d.source {
        DataSource::Synthetic => {
            expect_input(InputKind::Images)?;
            synthetic::synthetic_benchmark(
                d.synth_train_classes,
                d.synth_test_classes,
                d.synth_images,
                a.image_size,
                d.synth_noise,
                d.synth_distractors,
                d.synth_seed,
            )
        }
        DataSource::Images => {
            expect_input(InputKind::Images)?;
            let manifest = images::Manifest::load(&need(&d.manifest, "manifest")?)?;
            let set = images::load_image_dataset(&need(&d.root, "data_root")?, &manifest, a.image_size, norm)?;
            if set.skipped > 0 {
                log::warn!("{} undecodable images skipped", set.skipped);
            }
            let train = set.split("train")?.clone();
            let test = set.split("test")?.clone();
            return Ok(Splits {
                train,
                test,
                norm: set.norm,
            });
        }
        DataSource::Features => {
            expect_input(InputKind::Features)?;
            let train = features::read_feature_file(&need(&d.train_features, "train_features")?)?.into_split("train")?;
            let test = features::read_feature_file(&need(&d.test_features, "test_features")?)?.into_split("test")?;
            check_disjoint(&[&train, &test])?;
            let want = [a.in_channels, a.image_size, a.image_size];
            for s in [&train, &test] {
                if s.sample_shape != want {
                    return Err(Error::Data(format!(
                        "feature split `{}` has blocks {:?}, the architecture expects {want:?}",
                        s.name, s.sample_shape
                    )));
                }
            }
            let norm = InputNorm::identity(a.in_channels);
            return Ok(Splits { train, test, norm });
        }
    };
    check_disjoint(&[&train, &test])?;
    let norm = norm.cloned().unwrap_or_else(|| train.channel_stats());
    train.normalize(&norm)?;
    test.normalize(&norm)?;
    Ok(Splits { train, test, norm })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(name: &str, classes: &[(&str, u32)]) -> DatasetSplit {
        DatasetSplit {
            name: name.into(),
            mode: LoadingMode::Synthetic,
            sample_shape: [1, 1, 2],
            classes: classes
                .iter()
                .map(|&(n, id)| ClassSamples {
                    name: n.into(),
                    id,
                    samples: vec![Sample {
                        source: SampleSource::Generated(0),
                        data: vec![id as f32, 1.0],
                    }],
                })
                .collect(),
        }
    }

    #[test]
    fn disjointness_is_checked() {
        let a = split("train", &[("cat", 0), ("dog", 1)]);
        let b = split("test", &[("eel", 2)]);
        let c = split("val", &[("dog", 3)]);
        assert!(check_disjoint(&[&a, &b]).is_ok());
        assert!(matches!(check_disjoint(&[&a, &b, &c]), Err(Error::Data(_))));
    }

    #[test]
    fn gather_and_stats() {
        let s = split("train", &[("a", 0), ("b", 2)]);
        let t: Tensor<f64> = s.gather(&[(1, 0), (0, 0)]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 1, 2]);
        assert_eq!(t.data(), &[2.0, 1.0, 0.0, 1.0]);
        assert!(s.gather::<f32>(&[(2, 0)]).is_err());
        let st = s.channel_stats();
        assert!((st.mean[0] - 1.0).abs() < 1e-6);
        assert!((st.std[0] - 0.70710677).abs() < 1e-5);
    }
}
