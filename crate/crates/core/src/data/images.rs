//! Image-directory datasets: `root/<class>/<image>`, with a manifest of
//! `<split> <class>` lines assigning classes to splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{check_disjoint, ClassSamples, DatasetSplit, LoadingMode, Sample, SampleSource};
use crate::error::{Error, Result};
use crate::model::InputNorm;

/// Class list per split, in manifest order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub splits: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(split), Some(class), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Data(format!("manifest line {}: expected `<split> <class>`", n + 1)));
            };
            splits.entry(split.into()).or_default().push(class.into());
        }
        Ok(Manifest { splits })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (split, classes) in &self.splits {
            for c in classes {
                out.push_str(&format!("{split} {c}\n"));
            }
        }
        out
    }
}

/// Every split of a manifest, standardised with one set of channel statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub splits: Vec<DatasetSplit>,
    pub norm: InputNorm,
    /// Files that failed to decode.
    pub skipped: usize,
}

impl ImageDataset {
    pub fn split(&self, name: &str) -> Result<&DatasetSplit> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Data(format!("no `{name}` split in the manifest")))
    }
}

/// Decodes one image to `[3, size, size]` values in `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.dimensions() == (size as u32, size as u32) {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    };
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = px[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every split listed in the manifest. Inputs are standardised with
/// `norm` when given, otherwise with statistics of the `train` split.
pub fn load_image_dataset(root: &Path, manifest: &Manifest, size: usize, norm: Option<&InputNorm>) -> Result<ImageDataset> {
    let mut splits = Vec::new();
    let mut skipped = 0;
    let mut next_id = 0u32;
    for (split, class_names) in &manifest.splits {
        let mut classes = Vec::with_capacity(class_names.len());
        for name in class_names {
            let mut samples = Vec::new();
            for path in image_files(&root.join(name))? {
                match load_image(&path, size) {
                    Ok(data) => samples.push(Sample {
                        source: SampleSource::File(path),
                        data,
                    }),
                    Err(e) => {
                        log::warn!("skipping undecodable image: {e}");
                        skipped += 1;
                    }
                }
            }
            if samples.is_empty() {
                return Err(Error::Data(format!("class `{name}` in split `{split}` has no images")));
            }
            classes.push(ClassSamples {
                name: name.clone(),
                id: next_id,
                samples,
            });
            next_id += 1;
        }
        splits.push(DatasetSplit {
            name: split.clone(),
            mode: LoadingMode::Images,
            sample_shape: [3, size, size],
            classes,
        });
    }
    check_disjoint(&splits.iter().collect::<Vec<_>>())?;
    let norm = match norm {
        Some(n) => n.clone(),
        None => splits
            .iter()
            .find(|s| s.name == "train")
            .ok_or_else(|| Error::Data("manifest has no `train` split for normalisation statistics".into()))?
            .channel_stats(),
    };
    for s in &mut splits {
        s.normalize(&norm)?;
    }
    Ok(ImageDataset { splits, norm, skipped })
}
