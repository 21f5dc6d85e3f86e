//! Model checkpoints.
//!
//! Little-endian layout: magic `MATC`, `u32` version, `u32` scalar width in
//! bytes, `u64` seed, `u64` optimizer step, the configuration echo as a
//! length-prefixed UTF-8 `key = value` text, then the parameters (name, rank,
//! extents, values, first and second Adam moments), the running statistics
//! (name, channels, mean, variance) and the input standardisation (channels,
//! means, standard deviations as `f32`).

use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{InputNorm, ModelState};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MATC";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn text(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn reals<T: Real>(&mut self, v: &[T]) {
        for &x in v {
            x.to_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let at = self.at;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            detail: format!("{what} is not UTF-8"),
        })
    }

    fn reals<T: Real>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let bytes = self.take(n.saturating_mul(T::BYTES), what)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::from_le).collect())
    }

    fn mismatch(&self, detail: String) -> Error {
        Error::Format {
            offset: self.at as u64,
            detail,
        }
    }
}

pub fn to_bytes<T: Real>(model: &ModelState<T>, config: &Config) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize);
    w.u32(T::BYTES);
    w.u64(model.seed);
    w.u64(model.optimizer.step);
    let mut echo = config.clone();
    echo.arch = model.arch.clone();
    w.text(&echo.to_text());
    let store = &model.store;
    w.u32(store.len());
    for (i, (name, t)) in store.names().iter().zip(store.values()).enumerate() {
        w.text(name);
        w.u32(t.rank());
        for &d in t.shape() {
            w.u32(d);
        }
        w.reals(t.data());
        w.reals(model.optimizer.first[i].data());
        w.reals(model.optimizer.second[i].data());
    }
    w.u32(store.all_stats().len());
    for (name, s) in store.stats_names().iter().zip(store.all_stats()) {
        w.text(name);
        w.u32(s.mean.len());
        w.reals(&s.mean);
        w.reals(&s.var);
    }
    w.u32(model.input_norm.mean.len());
    w.reals(&model.input_norm.mean);
    w.reals(&model.input_norm.std);
    w.0
}

/// Parses a checkpoint, rebuilding the model from its configuration echo.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(ModelState<T>, Config)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let width = r.u32("scalar width")?;
    if width != T::BYTES {
        return Err(Error::Format {
            offset: 8,
            detail: format!("checkpoint holds {width}-byte reals, expected {}", T::BYTES),
        });
    }
    let seed = r.u64("seed")?;
    let step = r.u64("step")?;
    let config_at = r.at;
    let config = Config::from_text(&r.text("configuration")?).map_err(|e| Error::Format {
        offset: config_at as u64,
        detail: format!("configuration echo: {e}"),
    })?;
    let mut model = ModelState::<T>::init(&config.arch, seed)?;
    model.optimizer.step = step;
    let count = r.u32("parameter count")?;
    if count != model.store.len() {
        return Err(r.mismatch(format!(
            "{count} parameters in file, architecture has {}",
            model.store.len()
        )));
    }
    for i in 0..count {
        let name = r.text("parameter name")?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>>>()?;
        if name != model.store.names()[i] || shape != model.store.values()[i].shape() {
            return Err(r.mismatch(format!(
                "parameter `{name}` {shape:?} does not match `{}` {:?}",
                model.store.names()[i],
                model.store.values()[i].shape()
            )));
        }
        let n = shape.iter().product();
        *model.store.values_mut().get_mut(i).expect("index checked") = Tensor::new(shape.clone(), r.reals(n, &name)?)?;
        model.optimizer.first[i] = Tensor::new(shape.clone(), r.reals(n, "first moment")?)?;
        model.optimizer.second[i] = Tensor::new(shape, r.reals(n, "second moment")?)?;
    }
    let count = r.u32("statistics count")?;
    if count != model.store.all_stats().len() {
        return Err(r.mismatch(format!("{count} statistics in file")));
    }
    for i in 0..count {
        let name = r.text("statistics name")?;
        let channels = r.u32("channels")?;
        let expected = &model.store.stats_names()[i];
        if &name != expected || channels != model.store.all_stats()[i].mean.len() {
            return Err(r.mismatch(format!("statistics `{name}` do not match `{expected}`")));
        }
        let mean = r.reals(channels, "running mean")?;
        let var = r.reals(channels, "running variance")?;
        let s = &mut model.store.all_stats_mut()[i];
        s.mean = mean;
        s.var = var;
    }
    let channels = r.u32("input channels")?;
    model.input_norm = InputNorm {
        mean: r.reals(channels, "input mean")?,
        std: r.reals(channels, "input deviation")?,
    };
    if r.at != bytes.len() {
        return Err(r.mismatch("trailing bytes".into()));
    }
    Ok((model, config))
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &ModelState<T>, config: &Config) -> Result<()> {
    fs::write(path, to_bytes(model, config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelState<T>, Config)> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint, rejecting it unless it was built for `arch`.
pub fn load_checkpoint_for<T: Real>(path: &Path, arch: &crate::config::ArchConfig) -> Result<(ModelState<T>, Config)> {
    let (model, config) = load_checkpoint(path)?;
    if &model.arch != arch {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} differs from the requested {arch:?}",
            model.arch
        )));
    }
    Ok((model, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArchConfig;

    fn small() -> Config {
        let mut c = Config::default();
        c.arch = ArchConfig {
            image_size: 16,
            width: 4,
            ..ArchConfig::default()
        };
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = small();
        let mut m = ModelState::<f32>::init(&c.arch, 9).unwrap();
        m.store.values_mut()[0].data_mut()[0] = 0.123;
        m.optimizer.step = 17;
        m.optimizer.second[2].data_mut()[1] = 4.5;
        m.store.all_stats_mut()[0].var[0] = 2.0;
        m.input_norm.mean[1] = 0.4;
        let (back, cfg) = from_bytes::<f32>(&to_bytes(&m, &c)).unwrap();
        assert_eq!(back, m);
        assert_eq!(cfg, c);
    }

    #[test]
    fn fresh_checkpoint_equals_init() {
        let c = small();
        let m = ModelState::<f32>::init(&c.arch, 3).unwrap();
        let (back, _) = from_bytes::<f32>(&to_bytes(&m, &c)).unwrap();
        assert_eq!(back, ModelState::init(&c.arch, 3).unwrap());
    }

    #[test]
    fn rejects_version_width_and_truncation() {
        let c = small();
        let m = ModelState::<f32>::init(&c.arch, 0).unwrap();
        let mut b = to_bytes(&m, &c);
        assert!(from_bytes::<f64>(&b).is_err());
        assert!(from_bytes::<f32>(&b[..b.len() - 3]).is_err());
        b[4] = 9;
        assert!(matches!(from_bytes::<f32>(&b), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn rejects_other_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = small();
        save_checkpoint(&path, &ModelState::<f32>::init(&c.arch, 0).unwrap(), &c).unwrap();
        let other = ArchConfig { width: 8, ..c.arch.clone() };
        assert!(load_checkpoint_for::<f32>(&path, &other).is_err());
        assert!(load_checkpoint_for::<f32>(&path, &c.arch).is_ok());
    }
}
