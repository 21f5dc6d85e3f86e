//! Parameter storage, forward sessions and the conv → norm → activation block
//! shared by the backbone and the multi-scale generator.

use rand::Rng;

use crate::autodiff::{BatchStats, Gradients, Graph, NormStats, Padding, Var};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// Running mean/variance of one normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running = (1 - momentum)·running + momentum·observed`.
    pub fn update(&mut self, observed: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &o) in self.mean.iter_mut().zip(&observed.mean) {
            *r = keep * *r + momentum * o;
        }
        for (r, &o) in self.var.iter_mut().zip(&observed.var) {
            *r = keep * *r + momentum * o;
        }
    }
}

/// Named trainable tensors plus normalisation buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    stats_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            stats_names: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats_names.push(name.into());
        self.stats.push(RunningStats::new(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.stats[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn stats_names(&self) -> &[String] {
        &self.stats_names
    }

    pub fn all_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            stats_names: self.stats_names.clone(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: Tensor::from_vec(s.mean.clone()).cast().into_data(),
                    var: Tensor::from_vec(s.var.clone()).cast().into_data(),
                })
                .collect(),
        }
    }
}

/// Train mode normalises with batch statistics and records them; eval mode
/// reads running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Constants of every normalisation/activation pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormConfig {
    pub eps: f64,
    pub momentum: f64,
    pub leaky_slope: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            eps: 1e-5,
            momentum: 0.1,
            leaky_slope: 0.01,
        }
    }
}

/// One forward pass over a parameter store: owns the tape, binds parameters on
/// first use and collects the batch statistics seen in train mode.
pub struct Session<'a, T> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    observed: Vec<(StatsId, BatchStats<T>)>,
    pub mode: Mode,
    pub norm: NormConfig,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, norm: NormConfig) -> Self {
        Self::with_graph(Graph::new(), store, mode, norm)
    }

    pub fn inference(store: &'a ParamStore<T>, norm: NormConfig) -> Self {
        Self::with_graph(Graph::inference(), store, Mode::Eval, norm)
    }

    fn with_graph(graph: Graph<T>, store: &'a ParamStore<T>, mode: Mode, norm: NormConfig) -> Self {
        Session {
            graph,
            store,
            bound: vec![None; store.len()],
            observed: Vec::new(),
            mode,
            norm,
        }
    }

    /// Rolls the tape back to `len` nodes, unbinding parameters recorded later.
    pub fn truncate(&mut self, len: usize) {
        self.graph.truncate(len);
        for b in &mut self.bound {
            if b.is_some_and(|v| v.index() >= len) {
                *b = None;
            }
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// `conv → batch-norm`, honouring the session mode.
    pub fn norm(&mut self, x: Var, layer: &NormLayer) -> Result<Var> {
        let gamma = self.param(layer.gamma);
        let beta = self.param(layer.beta);
        let eps = T::lit(self.norm.eps);
        let store = self.store;
        let stats = match self.mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => {
                let s = store.stats(layer.stats);
                NormStats::Running {
                    mean: &s.mean,
                    var: &s.var,
                }
            }
        };
        let (y, observed) = self.graph.batch_norm(x, gamma, beta, stats, eps)?;
        if let Some(o) = observed {
            self.observed.push((layer.stats, o));
        }
        Ok(y)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.graph.leaky_relu(x, T::lit(self.norm.leaky_slope))
    }

    /// Gradient for every parameter in the store (zeros for unused ones).
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.values()[i].shape().to_vec()))
            })
            .collect()
    }

    pub fn take_observed(&mut self) -> Vec<(StatsId, BatchStats<T>)> {
        std::mem::take(&mut self.observed)
    }
}

/// Batch-norm affine parameters plus their running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl NormLayer {
    pub fn init<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        NormLayer {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            stats: store.add_stats(name, channels),
        }
    }
}

/// Convolution optionally followed by batch-norm and leaky ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub padding: Padding,
    pub norm: Option<NormLayer>,
}

impl ConvBlock {
    /// Kernel `[cout, cin, kh, kw]` drawn uniformly in `±sqrt(6 / fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        padding: Padding,
        with_norm: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel.0 * kernel.1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let k = Tensor::uniform(vec![cout, cin, kernel.0, kernel.1], -bound, bound, rng);
        ConvBlock {
            kernel: store.add(format!("{name}.kernel"), k),
            padding,
            norm: with_norm.then(|| NormLayer::init(store, &format!("{name}.bn"), cout)),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let k = s.param(self.kernel);
        let y = s.graph.conv2d(x, k, self.padding, (1, 1))?;
        match &self.norm {
            Some(layer) => {
                let y = s.norm(y, layer)?;
                Ok(s.leaky_relu(y))
            }
            None => Ok(y),
        }
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.kernel).shape()[0]
    }
}
