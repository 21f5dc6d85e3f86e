//! Binary container of precomputed feature blocks.
//!
//! Little-endian layout: magic `MATA`, then `u32` version (1), record count,
//! channels, height and width; then per record a `u32` label followed by
//! `channels·height·width` `f32` values in row-major order.

use std::fs;
use std::path::Path;

use super::{ClassSamples, DatasetSplit, LoadingMode, Sample, SampleSource};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MATA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub label: u32,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub records: Vec<FeatureRecord>,
}

impl FeatureFile {
    pub fn new(channels: u32, height: u32, width: u32) -> Self {
        FeatureFile {
            channels,
            height,
            width,
            records: Vec::new(),
        }
    }

    pub fn record_len(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }

    pub fn push(&mut self, label: u32, values: Vec<f32>) -> Result<()> {
        if values.len() != self.record_len() {
            return Err(Error::dim(
                "feature_file",
                format!("record of {} values, expected {}", values.len(), self.record_len()),
            ));
        }
        self.records.push(FeatureRecord { label, values });
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * (4 + 4 * self.record_len()));
        out.extend_from_slice(&MAGIC);
        for v in [
            VERSION,
            self.records.len() as u32,
            self.channels,
            self.height,
            self.width,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&r.label.to_le_bytes());
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                detail: "file ends inside the magic".into(),
            });
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {:02X?}", &bytes[..4]),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                detail: format!("header needs {HEADER_LEN} bytes"),
            });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let (count, channels, height, width) = (word(8) as usize, word(12), word(16), word(20));
        let mut file = FeatureFile::new(channels, height, width);
        let rec = file.record_len();
        let stride = 4 + 4 * rec;
        let expected = count
            .checked_mul(stride)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format {
                offset: 8,
                detail: "record count overflows".into(),
            })?;
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected) as u64,
                detail: format!("size {} but header implies {expected}", bytes.len()),
            });
        }
        file.records.reserve(count);
        for chunk in bytes[HEADER_LEN..].chunks_exact(stride) {
            let label = u32::from_le_bytes(chunk[..4].try_into().expect("4 bytes"));
            let values = chunk[4..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            file.records.push(FeatureRecord { label, values });
        }
        Ok(file)
    }

    /// Groups records by label; class names are the decimal labels.
    pub fn into_split(self, name: &str) -> Result<DatasetSplit> {
        let shape = [self.channels as usize, self.height as usize, self.width as usize];
        let mut classes: Vec<ClassSamples> = Vec::new();
        for (i, r) in self.records.into_iter().enumerate() {
            let sample = Sample {
                source: SampleSource::Record(i),
                data: r.values,
            };
            match classes.iter_mut().find(|c| c.id == r.label) {
                Some(c) => c.samples.push(sample),
                None => classes.push(ClassSamples {
                    name: r.label.to_string(),
                    id: r.label,
                    samples: vec![sample],
                }),
            }
        }
        if classes.is_empty() {
            return Err(Error::Data(format!("feature split `{name}` has no records")));
        }
        Ok(DatasetSplit {
            name: name.into(),
            mode: LoadingMode::Features,
            sample_shape: shape,
            classes,
        })
    }
}

pub fn write_feature_file(path: &Path, file: &FeatureFile) -> Result<()> {
    fs::write(path, file.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureFile {
        let mut f = FeatureFile::new(2, 1, 2);
        f.push(7, vec![1.0, -2.5, 0.0, f32::MAX]).unwrap();
        f.push(3, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        f
    }

    #[test]
    fn round_trip() {
        let f = sample();
        assert_eq!(FeatureFile::from_bytes(&f.to_bytes()).unwrap(), f);
    }

    #[test]
    fn empty_file_is_header_only() {
        let f = FeatureFile::new(64, 21, 21);
        let b = f.to_bytes();
        assert_eq!(b.len(), HEADER_LEN);
        assert_eq!(&b[..4], &[0x4D, 0x41, 0x54, 0x41]);
        assert_eq!(FeatureFile::from_bytes(&b).unwrap(), f);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(matches!(FeatureFile::from_bytes(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = sample().to_bytes();
        b[4] = 2;
        assert!(matches!(FeatureFile::from_bytes(&b), Err(Error::Format { offset: 4, .. })));
        let b = sample().to_bytes();
        assert!(matches!(
            FeatureFile::from_bytes(&b[..b.len() - 1]),
            Err(Error::Format { .. })
        ));
        assert!(FeatureFile::from_bytes(&b[..10]).is_err());
    }

    #[test]
    fn push_checks_length() {
        assert!(FeatureFile::new(1, 2, 2).push(0, vec![0.0; 3]).is_err());
    }

    #[test]
    fn split_groups_by_label() {
        let s = sample().into_split("test").unwrap();
        assert_eq!(s.num_classes(), 2);
        assert_eq!(s.classes[0].id, 7);
        assert_eq!(s.sample_shape, [2, 1, 2]);
    }
}
