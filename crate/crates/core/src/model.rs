//! The full network: backbone, generator, metric head and fusion, plus the
//! optimizer state that travels with it.

use crate::attention::{
    attention_mask, attention_mask_op, relation_matrix, relation_op, weight_relations, weight_relations_op,
    TaskAttentionMask,
};
use crate::autodiff::Var;
use crate::backbone::Backbone;
use crate::config::{ArchConfig, HeadConfig, InputKind};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::generator::{lr_rows, Generator, ScaleBlock};
use crate::layers::{Mode, ParamStore, Session};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::similarity::{class_scores_op, explain, ClassPartition, ExplanationRecord};
use crate::tensor::Tensor;

/// Per-channel standardisation applied to raw inputs before the network.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        InputNorm {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Standardises `data` laid out as consecutive `[C, H·W]` images in place.
    pub fn apply(&self, data: &mut [f32], plane: usize) {
        let c = self.mean.len();
        for img in data.chunks_exact_mut(c * plane) {
            for (ch, vals) in img.chunks_exact_mut(plane).enumerate() {
                let (m, s) = (self.mean[ch], self.std[ch]);
                vals.iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
    }
}

/// All trainable parameters, running statistics and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub arch: ArchConfig,
    pub seed: u64,
    pub store: ParamStore<T>,
    /// Absent when the model consumes precomputed feature blocks.
    pub backbone: Option<Backbone>,
    pub generator: Generator,
    pub fusion: Fusion,
    pub optimizer: Adam<T>,
    pub input_norm: InputNorm,
}

/// Query rows per inference chunk; bounds the size of the relation matrices.
pub const EVAL_CHUNK: usize = 16;

impl<T: Real> ModelState<T> {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let backbone = match arch.input {
            InputKind::Images => Some(Backbone::init(&mut store, arch, seed)),
            InputKind::Features => None,
        };
        let generator = Generator::init(&mut store, arch, seed);
        let fusion = Fusion::init(&mut store, arch.fusion_norm);
        let optimizer = Adam::new(store.values().iter().map(|t| t.shape()), AdamConfig::default());
        Ok(ModelState {
            arch: arch.clone(),
            seed,
            store,
            backbone,
            generator,
            fusion,
            optimizer,
            input_norm: InputNorm::identity(arch.in_channels),
        })
    }

    /// Same model in another precision (optimizer moments included).
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            arch: self.arch.clone(),
            seed: self.seed,
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            generator: self.generator.clone(),
            fusion: self.fusion.clone(),
            optimizer: Adam {
                config: self.optimizer.config,
                first: self.optimizer.first.iter().map(Tensor::cast).collect(),
                second: self.optimizer.second.iter().map(Tensor::cast).collect(),
                step: self.optimizer.step,
            },
            input_norm: self.input_norm.clone(),
        }
    }

    pub fn session(&self, mode: Mode) -> Session<'_, T> {
        match mode {
            Mode::Train => Session::new(&self.store, Mode::Train, self.arch.norm),
            Mode::Eval => Session::inference(&self.store, self.arch.norm),
        }
    }

    /// Backbone output for a batch of inputs (the inputs themselves in
    /// feature mode).
    pub fn embed(&self, s: &mut Session<'_, T>, inputs: Var) -> Result<Var> {
        match &self.backbone {
            Some(b) => b.extract(s, inputs),
            None => {
                let shape = s.graph.shape(inputs);
                let side = self.arch.image_size;
                if shape.len() != 4 || shape[1..] != [self.arch.in_channels, side, side] {
                    return Err(Error::dim(
                        "embed",
                        format!(
                            "expected feature blocks [B,{},{side},{side}], got {shape:?}",
                            self.arch.in_channels
                        ),
                    ));
                }
                Ok(inputs)
            }
        }
    }

    /// Logits `[Q, N]` for an episode whose support is ordered class-major
    /// (`way` classes × `shot` images). Train mode normalises support and query
    /// together as one batch.
    pub fn forward(
        &self,
        s: &mut Session<'_, T>,
        head: &HeadConfig,
        way: usize,
        shot: usize,
        support: &Tensor<T>,
        query: &Tensor<T>,
    ) -> Result<Var> {
        let (ns, nq) = check_episode(support, query, way, shot)?;
        let batch = concat_batch(support, query)?;
        let x = s.graph.constant(batch);
        let feats = self.embed(s, x)?;
        let blocks = self.generator.generate(s, feats, &head.ablation.scales())?;
        let mut per_scale = Vec::with_capacity(blocks.len());
        for block in &blocks {
            let rows = lr_rows(s, block)?;
            let p = block.positions();
            let s_rows = s.graph.narrow(rows, 0, 0, ns * p)?;
            let q_rows = s.graph.narrow(rows, 0, ns * p, nq * p)?;
            per_scale.push((block.scale, self.head(s, head, way, shot, p, q_rows, s_rows)?));
        }
        self.fusion.fuse(s, &per_scale)
    }

    /// Per-scale class scores `[Q, N]` from query rows `[Q·P, C]` and support
    /// rows `[N·K·P, C]`.
    #[allow(clippy::too_many_arguments)]
    fn head(
        &self,
        s: &mut Session<'_, T>,
        head: &HeadConfig,
        way: usize,
        shot: usize,
        positions: usize,
        q_rows: Var,
        s_rows: Var,
    ) -> Result<Var> {
        let g = &mut s.graph;
        let r = relation_op(g, q_rows, s_rows, head.metric)?;
        let m = if head.ablation.use_attention {
            let alpha = attention_mask_op(g, r, positions)?;
            weight_relations_op(g, r, alpha)?
        } else {
            r
        };
        let k = if head.ablation.use_topk { head.k } else { shot * positions };
        class_scores_op(g, m, positions, way, k)
    }

    /// Eval-mode logits, computing the support once and the queries in chunks
    /// of [`EVAL_CHUNK`].
    pub fn predict(
        &self,
        head: &HeadConfig,
        way: usize,
        shot: usize,
        support: &Tensor<T>,
        query: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (ns, nq) = check_episode(support, query, way, shot)?;
        debug_assert_eq!(ns, way * shot);
        let mut s = self.session(Mode::Eval);
        let x = s.graph.constant(support.clone());
        let feats = self.embed(&mut s, x)?;
        let scales = head.ablation.scales();
        let support_blocks = self.generator.generate(&mut s, feats, &scales)?;
        let mut support_rows = Vec::with_capacity(support_blocks.len());
        for block in &support_blocks {
            support_rows.push(lr_rows(&mut s, block)?);
        }
        let mark = s.graph.len();
        let item = support.numel() / ns;
        let mut out = Vec::with_capacity(nq * way);
        for start in (0..nq).step_by(EVAL_CHUNK) {
            let len = EVAL_CHUNK.min(nq - start);
            let mut shape = query.shape().to_vec();
            shape[0] = len;
            let chunk = Tensor::from_parts(shape, query.data()[start * item..(start + len) * item].to_vec());
            let x = s.graph.constant(chunk);
            let feats = self.embed(&mut s, x)?;
            let blocks: Vec<ScaleBlock> = self.generator.generate(&mut s, feats, &scales)?;
            let mut per_scale = Vec::with_capacity(blocks.len());
            for (block, &s_rows) in blocks.iter().zip(&support_rows) {
                let q_rows = lr_rows(&mut s, block)?;
                per_scale.push((
                    block.scale,
                    self.head(&mut s, head, way, shot, block.positions(), q_rows, s_rows)?,
                ));
            }
            let logits = self.fusion.fuse(&mut s, &per_scale)?;
            out.extend_from_slice(s.graph.value(logits).data());
            s.truncate(mark);
        }
        Ok(Tensor::from_parts(vec![nq, way], out))
    }
}

impl<T: Real> ModelState<T> {
    /// Which support LRs each LR of a single query image selects at `scale`,
    /// in eval mode.
    pub fn explain(
        &self,
        head: &HeadConfig,
        way: usize,
        shot: usize,
        support: &Tensor<T>,
        query: &Tensor<T>,
        scale: usize,
    ) -> Result<ExplanationRecord<T>> {
        let (_, nq) = check_episode(support, query, way, shot)?;
        if nq != 1 {
            return Err(Error::dim("explain", format!("expected one query image, got {nq}")));
        }
        if !head.ablation.scales().contains(&scale) {
            return Err(Error::Parameter(format!("scale {scale} is not active")));
        }
        let mut s = self.session(Mode::Eval);
        let mut columns = Vec::with_capacity(2);
        let mut positions = 0;
        for batch in [support, query] {
            let x = s.graph.constant(batch.clone());
            let feats = self.embed(&mut s, x)?;
            let block = self.generator.generate(&mut s, feats, &[scale])?[0];
            positions = block.positions();
            let rows = lr_rows(&mut s, &block)?;
            let shape = s.graph.shape(rows).to_vec();
            let cols = crate::autodiff::transpose_batched(s.graph.value(rows).data(), shape[0], shape[1]);
            columns.push(Tensor::new(vec![shape[1], shape[0]], cols)?);
        }
        let r = relation_matrix(&columns[1], &columns[0], head.metric, way, scale)?;
        let mask = if head.ablation.use_attention {
            attention_mask(&r)
        } else {
            TaskAttentionMask {
                alpha: vec![T::one(); r.rows()],
                scale,
            }
        };
        let m = weight_relations(&r, &mask)?;
        let k = if head.ablation.use_topk { head.k } else { shot * positions };
        let partition = ClassPartition {
            classes: way,
            shots: shot,
            positions,
        };
        explain(&m, &mask, partition, k)
    }
}

fn check_episode<T: Real>(support: &Tensor<T>, query: &Tensor<T>, way: usize, shot: usize) -> Result<(usize, usize)> {
    let (ss, qs) = (support.shape(), query.shape());
    if ss.len() != 4 || qs.len() != 4 || ss[1..] != qs[1..] {
        return Err(Error::dim(
            "forward_episode",
            format!("support {ss:?} and query {qs:?} must be [B,C,H,W] batches of one shape"),
        ));
    }
    if way == 0 || shot == 0 || ss[0] != way * shot {
        return Err(Error::dim(
            "forward_episode",
            format!("{} support images for {way}-way {shot}-shot", ss[0]),
        ));
    }
    Ok((ss[0], qs[0]))
}

fn concat_batch<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::Ablation;

    fn tiny() -> ArchConfig {
        ArchConfig {
            image_size: 16,
            width: 4,
            ..ArchConfig::default()
        }
    }

    fn batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(vec![n, 3, 16, 16], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn predict_matches_unchunked_eval_forward() {
        let model = ModelState::<f64>::init(&tiny(), 5).unwrap();
        let head = HeadConfig::default();
        let (support, query) = (batch(3, 1), batch(20, 2));
        let fast = model.predict(&head, 3, 1, &support, &query).unwrap();
        let mut s = model.session(Mode::Eval);
        let v = model.forward(&mut s, &head, 3, 1, &support, &query).unwrap();
        assert_eq!(fast.shape(), &[20, 3]);
        assert!(fast.max_abs_diff(s.graph.value(v)) < 1e-9);
    }

    #[test]
    fn ablations_produce_logits() {
        let model = ModelState::<f64>::init(&tiny(), 0).unwrap();
        for ablation in [Ablation::FULL, Ablation::BASELINE, Ablation::NO_TOPK] {
            let head = HeadConfig {
                ablation,
                ..HeadConfig::default()
            };
            let l = model.predict(&head, 2, 2, &batch(4, 3), &batch(2, 4)).unwrap();
            assert!(l.is_finite());
        }
    }

    #[test]
    fn copied_query_picks_its_class() {
        let model = ModelState::<f64>::init(&tiny(), 2).unwrap();
        let head = HeadConfig {
            k: 1,
            ..HeadConfig::default()
        };
        for target in 0..4 {
            let mut support = batch(4, 10 + target as u64);
            let query = batch(1, 20 + target as u64);
            let item = query.numel();
            support.data_mut()[target * item..(target + 1) * item].copy_from_slice(query.data());
            let logits = model.predict(&head, 4, 1, &support, &query).unwrap();
            assert_eq!(crate::fusion::classify(&logits), [target]);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = ModelState::<f32>::init(&tiny(), 4).unwrap();
        let head = HeadConfig::default();
        let support = batch(2, 1).cast::<f32>();
        let query = batch(3, 2).cast::<f32>();
        let a = model.predict(&head, 2, 1, &support, &query).unwrap();
        let b = model.predict(&head, 2, 1, &support, &query).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn explanation_has_k_entries_per_pair() {
        let model = ModelState::<f64>::init(&tiny(), 4).unwrap();
        let head = HeadConfig::default();
        let rec = model.explain(&head, 2, 2, &batch(4, 1), &batch(1, 2), 1).unwrap();
        assert_eq!(rec.k, 3);
        assert_eq!(rec.entries.len(), 16 * 2 * 3);
    }

    #[test]
    fn rejects_bad_support_count() {
        let model = ModelState::<f64>::init(&tiny(), 0).unwrap();
        let r = model.predict(&HeadConfig::default(), 2, 2, &batch(3, 0), &batch(2, 1));
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
