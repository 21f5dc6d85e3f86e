//! Run configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::{Metric, TanimotoForm};
use crate::error::{Error, Result};
use crate::layers::NormConfig;

/// What the network consumes: raw images through the backbone, or
/// precomputed backbone feature blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputKind {
    #[default]
    Images,
    Features,
}

/// Everything that determines parameter shapes. Checkpoints refuse to load
/// into a different architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub input: InputKind,
    /// 3 for RGB images; the feature channel count in feature mode.
    pub in_channels: usize,
    /// Side of the square input (image side, or feature-block side).
    pub image_size: usize,
    pub width: usize,
    pub blocks: usize,
    pub pooled_blocks: usize,
    /// Batch-norm + leaky ReLU after the generator's conv branches.
    pub branch_norm: bool,
    /// Per-scale batch-norm before fusion.
    pub fusion_norm: bool,
    pub norm: NormConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input: InputKind::Images,
            in_channels: 3,
            image_size: 84,
            width: 64,
            blocks: 4,
            pooled_blocks: 2,
            branch_norm: true,
            fusion_norm: true,
            norm: NormConfig::default(),
        }
    }
}

impl ArchConfig {
    /// Spatial side of the backbone output.
    pub fn feature_size(&self) -> usize {
        match self.input {
            InputKind::Images => (0..self.pooled_blocks.min(self.blocks)).fold(self.image_size, |s, _| s / 2),
            InputKind::Features => self.image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.in_channels == 0 || self.image_size == 0 {
            return Err(Error::Config("width, in_channels and image_size must be positive".into()));
        }
        if self.input == InputKind::Features && self.in_channels != self.width {
            return Err(Error::Config(format!(
                "feature input has {} channels but width is {}",
                self.in_channels, self.width
            )));
        }
        if self.feature_size() < 2 {
            return Err(Error::Config(format!(
                "backbone output side {} is too small for the pooling branch",
                self.feature_size()
            )));
        }
        Ok(())
    }
}

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Off: only scale 1 (the backbone output) is used.
    pub use_generator: bool,
    /// Off: the attention mask is all ones.
    pub use_attention: bool,
    /// Off: each class score sums the full class block.
    pub use_topk: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_generator: true,
        use_attention: true,
        use_topk: true,
    };
    pub const BASELINE: Ablation = Ablation {
        use_generator: false,
        use_attention: false,
        use_topk: false,
    };
    pub const NO_GENERATOR: Ablation = Ablation {
        use_generator: false,
        ..Ablation::FULL
    };
    pub const NO_ATTENTION: Ablation = Ablation {
        use_attention: false,
        ..Ablation::FULL
    };
    pub const NO_TOPK: Ablation = Ablation {
        use_topk: false,
        ..Ablation::FULL
    };

    pub fn scales(&self) -> Vec<usize> {
        if self.use_generator {
            vec![1, 2, 3, 4, 5]
        } else {
            vec![1]
        }
    }

    pub fn label(&self) -> &'static str {
        match (self.use_generator, self.use_attention, self.use_topk) {
            (true, true, true) => "full",
            (false, true, true) => "w/o generator",
            (true, false, true) => "w/o attention",
            (true, true, false) => "w/o top-k",
            (false, false, false) => "baseline",
            _ => "custom",
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

/// Metric head settings that carry no parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub k: usize,
    pub metric: Metric,
    pub ablation: Ablation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            k: 3,
            metric: Metric::Cosine,
            ablation: Ablation::FULL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    /// Query images per class.
    pub queries: usize,
}

impl EpisodeShape {
    pub fn support_len(&self) -> usize {
        self.way * self.shot
    }

    pub fn query_len(&self) -> usize {
        self.way * self.queries
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub episode: EpisodeShape,
    pub episodes: usize,
    pub lr: f64,
    /// Episodes between learning-rate halvings.
    pub lr_halving: usize,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episode: EpisodeShape,
    pub episodes: usize,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DataSource {
    #[default]
    Synthetic,
    Images,
    Features,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub train_features: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
    pub synth_train_classes: usize,
    pub synth_test_classes: usize,
    pub synth_images: usize,
    pub synth_noise: f64,
    pub synth_distractors: usize,
    pub synth_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            root: None,
            manifest: None,
            train_features: None,
            test_features: None,
            synth_train_classes: 20,
            synth_test_classes: 5,
            synth_images: 30,
            synth_noise: 0.1,
            synth_distractors: 0,
            synth_seed: 0,
        }
    }
}

/// Complete run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub arch: ArchConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for Config {
    /// Conv-64F on 84×84 inputs with desk-scale episode counts.
    fn default() -> Self {
        Config {
            arch: ArchConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig {
                episode: EpisodeShape {
                    way: 5,
                    shot: 1,
                    queries: 15,
                },
                episodes: 2000,
                lr: 1e-3,
                lr_halving: 800,
                seed: 0,
                log_every: 50,
                checkpoint_every: 0,
            },
            eval: EvalConfig {
                episode: EpisodeShape {
                    way: 5,
                    shot: 1,
                    queries: 15,
                },
                episodes: 600,
                repeats: 5,
                seed: 1,
            },
            data: DataConfig::default(),
        }
    }
}

/// Every recognised configuration key.
pub const KEYS: &[&str] = &[
    "input",
    "in_channels",
    "image_size",
    "width",
    "blocks",
    "pooled_blocks",
    "branch_norm",
    "fusion_norm",
    "bn_eps",
    "bn_momentum",
    "leaky_slope",
    "k",
    "metric",
    "tanimoto_form",
    "use_generator",
    "use_attention",
    "use_topk",
    "way",
    "shot",
    "queries",
    "episodes",
    "lr",
    "lr_halving",
    "seed",
    "log_every",
    "checkpoint_every",
    "eval_queries",
    "eval_episodes",
    "repeats",
    "eval_seed",
    "data",
    "data_root",
    "manifest",
    "train_features",
    "test_features",
    "synth_train_classes",
    "synth_test_classes",
    "synth_images",
    "synth_noise",
    "synth_distractors",
    "synth_seed",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl Config {
    /// Long schedule for full-size runs on real image data.
    pub fn paper_scale() -> Self {
        let mut c = Config::default();
        c.train.episodes = 250_000;
        c.train.lr_halving = 50_000;
        c.train.log_every = 1000;
        c
    }

    /// Reduced-resolution, narrow network on the synthetic benchmark; small
    /// enough to train and evaluate in minutes on one CPU core.
    pub fn compact() -> Self {
        let mut c = Config::default();
        c.arch.image_size = 32;
        c.arch.width = 16;
        c.train.episode.queries = 5;
        c.train.episodes = 1000;
        c.train.lr_halving = 400;
        c.train.log_every = 100;
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "input" => {
                self.arch.input = match value {
                    "images" => InputKind::Images,
                    "features" => InputKind::Features,
                    _ => return Err(Error::Config(format!("invalid input `{value}`"))),
                }
            }
            "in_channels" => self.arch.in_channels = parse(key, value)?,
            "image_size" => self.arch.image_size = parse(key, value)?,
            "width" => self.arch.width = parse(key, value)?,
            "blocks" => self.arch.blocks = parse(key, value)?,
            "pooled_blocks" => self.arch.pooled_blocks = parse(key, value)?,
            "branch_norm" => self.arch.branch_norm = parse_bool(key, value)?,
            "fusion_norm" => self.arch.fusion_norm = parse_bool(key, value)?,
            "bn_eps" => self.arch.norm.eps = parse(key, value)?,
            "bn_momentum" => self.arch.norm.momentum = parse(key, value)?,
            "leaky_slope" => self.arch.norm.leaky_slope = parse(key, value)?,
            "k" => self.head.k = parse(key, value)?,
            "metric" => {
                let form = match self.head.metric {
                    Metric::Tanimoto(f) => f,
                    _ => TanimotoForm::Printed,
                };
                self.head.metric = match value.parse()? {
                    Metric::Tanimoto(_) => Metric::Tanimoto(form),
                    m => m,
                };
            }
            "tanimoto_form" => {
                let form = match value {
                    "printed" => TanimotoForm::Printed,
                    "standard" => TanimotoForm::Standard,
                    _ => return Err(Error::Config(format!("invalid tanimoto_form `{value}`"))),
                };
                if let Metric::Tanimoto(f) = &mut self.head.metric {
                    *f = form;
                } else if form == TanimotoForm::Standard {
                    // remembered only when the metric is tanimoto
                    self.head.metric = Metric::Tanimoto(form);
                }
            }
            "use_generator" => self.head.ablation.use_generator = parse_bool(key, value)?,
            "use_attention" => self.head.ablation.use_attention = parse_bool(key, value)?,
            "use_topk" => self.head.ablation.use_topk = parse_bool(key, value)?,
            "way" => {
                self.train.episode.way = parse(key, value)?;
                self.eval.episode.way = self.train.episode.way;
            }
            "shot" => {
                self.train.episode.shot = parse(key, value)?;
                self.eval.episode.shot = self.train.episode.shot;
            }
            "queries" => self.train.episode.queries = parse(key, value)?,
            "episodes" => self.train.episodes = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "lr_halving" => self.train.lr_halving = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "log_every" => self.train.log_every = parse(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "eval_queries" => self.eval.episode.queries = parse(key, value)?,
            "eval_episodes" => self.eval.episodes = parse(key, value)?,
            "repeats" => self.eval.repeats = parse(key, value)?,
            "eval_seed" => self.eval.seed = parse(key, value)?,
            "data" => {
                self.data.source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "images" => DataSource::Images,
                    "features" => DataSource::Features,
                    _ => return Err(Error::Config(format!("invalid data source `{value}`"))),
                }
            }
            "data_root" => self.data.root = Some(PathBuf::from(value)),
            "manifest" => self.data.manifest = Some(PathBuf::from(value)),
            "train_features" => self.data.train_features = Some(PathBuf::from(value)),
            "test_features" => self.data.test_features = Some(PathBuf::from(value)),
            "synth_train_classes" => self.data.synth_train_classes = parse(key, value)?,
            "synth_test_classes" => self.data.synth_test_classes = parse(key, value)?,
            "synth_images" => self.data.synth_images = parse(key, value)?,
            "synth_noise" => self.data.synth_noise = parse(key, value)?,
            "synth_distractors" => self.data.synth_distractors = parse(key, value)?,
            "synth_seed" => self.data.synth_seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let a = &self.arch;
        let h = &self.head;
        let t = &self.train;
        let e = &self.eval;
        let d = &self.data;
        let tanimoto_form = match h.metric {
            Metric::Tanimoto(TanimotoForm::Standard) => "standard",
            _ => "printed",
        };
        vec![
            ("input", match a.input {
                InputKind::Images => "images".into(),
                InputKind::Features => "features".into(),
            }),
            ("in_channels", a.in_channels.to_string()),
            ("image_size", a.image_size.to_string()),
            ("width", a.width.to_string()),
            ("blocks", a.blocks.to_string()),
            ("pooled_blocks", a.pooled_blocks.to_string()),
            ("branch_norm", a.branch_norm.to_string()),
            ("fusion_norm", a.fusion_norm.to_string()),
            ("bn_eps", a.norm.eps.to_string()),
            ("bn_momentum", a.norm.momentum.to_string()),
            ("leaky_slope", a.norm.leaky_slope.to_string()),
            ("k", h.k.to_string()),
            ("metric", h.metric.to_string()),
            ("tanimoto_form", tanimoto_form.into()),
            ("use_generator", h.ablation.use_generator.to_string()),
            ("use_attention", h.ablation.use_attention.to_string()),
            ("use_topk", h.ablation.use_topk.to_string()),
            ("way", t.episode.way.to_string()),
            ("shot", t.episode.shot.to_string()),
            ("queries", t.episode.queries.to_string()),
            ("episodes", t.episodes.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_halving", t.lr_halving.to_string()),
            ("seed", t.seed.to_string()),
            ("log_every", t.log_every.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("eval_queries", e.episode.queries.to_string()),
            ("eval_episodes", e.episodes.to_string()),
            ("repeats", e.repeats.to_string()),
            ("eval_seed", e.seed.to_string()),
            ("data", match d.source {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Images => "images".into(),
                DataSource::Features => "features".into(),
            }),
            ("data_root", path(&d.root)),
            ("manifest", path(&d.manifest)),
            ("train_features", path(&d.train_features)),
            ("test_features", path(&d.test_features)),
            ("synth_train_classes", d.synth_train_classes.to_string()),
            ("synth_test_classes", d.synth_test_classes.to_string()),
            ("synth_images", d.synth_images.to_string()),
            ("synth_noise", d.synth_noise.to_string()),
            ("synth_distractors", d.synth_distractors.to_string()),
            ("synth_seed", d.synth_seed.to_string()),
        ]
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() && matches!(key, "data_root" | "manifest" | "train_features" | "test_features") {
                continue;
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let t = &self.train;
        if t.lr < 0.0 || !t.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", t.lr)));
        }
        if t.episodes == 0 || t.lr_halving == 0 {
            return Err(Error::Config("episodes and lr_halving must be at least 1".into()));
        }
        for ep in [&t.episode, &self.eval.episode] {
            if ep.way == 0 || ep.shot == 0 || ep.queries == 0 {
                return Err(Error::Config("way, shot and queries must be positive".into()));
            }
        }
        if self.head.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.eval.episodes == 0 || self.eval.repeats == 0 {
            return Err(Error::Config("eval_episodes and repeats must be positive".into()));
        }
        Ok(())
    }
}
