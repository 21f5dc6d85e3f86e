//! Central finite-difference checks of every differentiable operation and of
//! the full episode loss, in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_mask_op, relation_op, weight_relations_op, Metric, TanimotoForm};
use crate::autodiff::{Graph, NormStats, Padding, Var};
use crate::config::{Ablation, ArchConfig, EpisodeShape, HeadConfig};
use crate::error::{Error, Result};
use crate::fusion::{episode_loss, Fusion};
use crate::layers::{Mode, ParamStore, Session};
use crate::model::ModelState;
use crate::similarity::class_scores_op;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Tolerance on the relative error of a single operation.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Tolerance on the relative error of the end-to-end episode loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-2;
/// Points closer than this to a selection tie are not checked.
pub const TIE_MARGIN: f64 = 1e-4;
/// Points closer than this to an activation breakpoint are not checked; a
/// kernel step of `STEP` moves normalised pre-activations by up to ~1e-4.
pub const ACTIVATION_MARGIN: f64 = 1e-3;
/// Gradient norms below this count as zero in the relative error.
pub const GRADIENT_FLOOR: f64 = 1e-6;
const ATTEMPTS: u64 = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error over the checked tensors.
    pub rel_error: f64,
    pub tolerance: f64,
    /// Name of the tensor with the worst error.
    pub worst: String,
    /// Seed of the accepted (tie-free) instance.
    pub seed: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(GRADIENT_FLOOR);
    diff / scale
}

fn near_kink(g: &Graph<f64>) -> bool {
    g.nearest_tie().is_some_and(|d| d < TIE_MARGIN)
        || g.nearest_activation_kink().is_some_and(|d| d < ACTIVATION_MARGIN)
}

type OpFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::uniform(g.shape(out).to_vec(), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn scalar_loss(f: &OpFn, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = project(&mut g, out, seed)?;
    Ok(g.value(loss).data()[0])
}

/// Checks `f` at inputs drawn by `make`, redrawing while the point is within
/// the kink margins.
pub fn check_op(
    name: &str,
    make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    f: &OpFn,
    base_seed: u64,
) -> Result<CheckResult> {
    for attempt in 0..ATTEMPTS {
        let seed = base_seed * 1000 + attempt;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if near_kink(&g) {
            continue;
        }
        let loss = project(&mut g, out, seed)?;
        let grads = g.backward(loss)?;
        let mut worst = (0.0, String::new());
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("tracked input").data().to_vec();
            let mut numeric = Vec::with_capacity(analytic.len());
            let mut probe = inputs.clone();
            for j in 0..inputs[i].numel() {
                let x = inputs[i].data()[j];
                probe[i].data_mut()[j] = x + STEP;
                let up = scalar_loss(f, &probe, seed)?;
                probe[i].data_mut()[j] = x - STEP;
                let down = scalar_loss(f, &probe, seed)?;
                probe[i].data_mut()[j] = x;
                numeric.push((up - down) / (2.0 * STEP));
            }
            let e = relative_error(&analytic, &numeric);
            if e >= worst.0 {
                worst = (e, format!("input {i}"));
            }
        }
        return Ok(CheckResult {
            name: name.into(),
            rel_error: worst.0,
            tolerance: OP_TOLERANCE,
            worst: worst.1,
            seed,
        });
    }
    Err(Error::Parameter(format!(
        "{name}: no tie-free instance in {ATTEMPTS} draws"
    )))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Values bounded away from zero with random signs.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.5, 1.5);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>, Box<OpFn>);

fn op_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = vec![
        (
            "add",
            Box::new(|r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)]),
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            Box::new(|r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)]),
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            Box::new(|r| vec![uniform(r, &[2, 5], -1.0, 1.0), uniform(r, &[2, 5], -1.0, 1.0)]),
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "div",
            Box::new(|r| vec![uniform(r, &[2, 5], -1.0, 1.0), signed_away_from_zero(r, &[2, 5])]),
            Box::new(|g, v| g.div(v[0], v[1])),
        ),
        (
            "sqrt",
            Box::new(|r| vec![uniform(r, &[6], 0.2, 2.0)]),
            Box::new(|g, v| g.sqrt(v[0])),
        ),
        (
            "scalar_affine",
            Box::new(|r| vec![uniform(r, &[4], -1.0, 1.0)]),
            Box::new(|g, v| {
                let a = g.mul_scalar(v[0], -1.7);
                Ok(g.add_scalar(a, 0.3))
            }),
        ),
        (
            "sum",
            Box::new(|r| vec![uniform(r, &[2, 3], -1.0, 1.0)]),
            Box::new(|g, v| Ok(g.sum(v[0]))),
        ),
        (
            "sum_axis",
            Box::new(|r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)]),
            Box::new(|g, v| g.sum_axis(v[0], 1)),
        ),
        (
            "matmul",
            Box::new(|r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)]),
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "reshape_swap_narrow",
            Box::new(|r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)]),
            Box::new(|g, v| {
                let x = g.swap_last2(v[0])?;
                let x = g.reshape(x, vec![8, 3])?;
                g.narrow(x, 0, 2, 5)
            }),
        ),
        (
            "concat_stack",
            Box::new(|r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0)]),
            Box::new(|g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let c2 = g.mul_scalar(c, 2.0);
                g.stack(&[c, c2], 0)
            }),
        ),
        (
            "leaky_relu",
            Box::new(|r| vec![signed_away_from_zero(r, &[10])]),
            Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.01))),
        ),
        (
            "scale_channels",
            Box::new(|r| vec![uniform(r, &[2, 3, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)]),
            Box::new(|g, v| g.scale_channels(v[0], v[1])),
        ),
        (
            "conv2d",
            Box::new(|r| vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)]),
            Box::new(|g, v| g.conv2d(v[0], v[1], Padding::same(1), (1, 1))),
        ),
        (
            "conv2d_asymmetric_strided",
            Box::new(|r| vec![uniform(r, &[2, 6, 5], -1.0, 1.0), uniform(r, &[2, 2, 1, 3], -1.0, 1.0)]),
            Box::new(|g, v| {
                let pad = Padding {
                    top: 0,
                    bottom: 1,
                    left: 2,
                    right: 0,
                };
                g.conv2d(v[0], v[1], pad, (2, 1))
            }),
        ),
        (
            "maxpool2d",
            Box::new(|r| vec![uniform(r, &[2, 2, 5, 4], -1.0, 1.0)]),
            Box::new(|g, v| g.maxpool2d(v[0])),
        ),
        (
            "batch_norm_train",
            Box::new(|r| {
                vec![
                    uniform(r, &[3, 2, 2, 2], -1.0, 1.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -0.5, 0.5),
                ]
            }),
            Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?.0)),
        ),
        (
            "batch_norm_eval",
            Box::new(|r| {
                vec![
                    uniform(r, &[3, 2, 2], -1.0, 1.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -0.5, 0.5),
                ]
            }),
            Box::new(|g, v| {
                let (mean, var) = (vec![0.1, -0.2], vec![0.5, 2.0]);
                Ok(g
                    .batch_norm(v[0], v[1], v[2], NormStats::Running { mean: &mean, var: &var }, 1e-5)?
                    .0)
            }),
        ),
        (
            "softmax_cross_entropy",
            Box::new(|r| vec![uniform(r, &[4, 5], -2.0, 2.0)]),
            Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 3, 4, 1])),
        ),
        (
            "attention_mask",
            Box::new(|r| vec![uniform(r, &[6, 5], 0.0, 1.0)]),
            Box::new(|g, v| attention_mask_op(g, v[0], 3)),
        ),
        (
            "weight_relations",
            Box::new(|r| vec![uniform(r, &[4, 6], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)]),
            Box::new(|g, v| weight_relations_op(g, v[0], v[1])),
        ),
        (
            "relation_attention_weighting",
            Box::new(|r| vec![uniform(r, &[4, 3], 0.0, 1.0), uniform(r, &[6, 3], 0.0, 1.0)]),
            Box::new(|g, v| {
                let rel = relation_op(g, v[0], v[1], Metric::Cosine)?;
                let alpha = attention_mask_op(g, rel, 2)?;
                weight_relations_op(g, rel, alpha)
            }),
        ),
    ];
    for k in [1usize, 3] {
        cases.push((
            if k == 1 { "class_scores_k1" } else { "class_scores_k3" },
            Box::new(|r| vec![uniform(r, &[6, 8], -1.0, 1.0)]),
            Box::new(move |g, v| class_scores_op(g, v[0], 3, 2, k)),
        ));
    }
    let metrics: [(&'static str, Metric); 5] = [
        ("relation_cosine", Metric::Cosine),
        ("relation_exp_euclidean", Metric::ExpEuclidean),
        ("relation_inv_euclidean", Metric::InvEuclidean),
        ("relation_tanimoto_printed", Metric::Tanimoto(TanimotoForm::Printed)),
        ("relation_tanimoto_standard", Metric::Tanimoto(TanimotoForm::Standard)),
    ];
    for (name, metric) in metrics {
        cases.push((
            name,
            Box::new(|r| vec![uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[6, 5], -1.0, 1.0)]),
            Box::new(move |g, v| relation_op(g, v[0], v[1], metric)),
        ));
    }
    cases
}

/// Gradient checks of the primitive and metric-head operations.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out: Vec<CheckResult> = op_cases()
        .iter()
        .map(|(name, make, f)| check_op(name, make.as_ref(), f.as_ref(), seed))
        .collect::<Result<_>>()?;
    out.push(check_fusion(seed)?);
    Ok(out)
}

/// Fusion with train-mode per-scale normalisation, differentiated with respect
/// to the scale scores and every fusion parameter.
fn check_fusion(seed: u64) -> Result<CheckResult> {
    let mut store = ParamStore::<f64>::new();
    let fusion = Fusion::init(&mut store, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let scores: Vec<Tensor<f64>> = (0..5).map(|_| uniform(&mut rng, &[3, 4], -1.0, 1.0)).collect();
    let forward = |store: &ParamStore<f64>, scores: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut s = Session::new(store, Mode::Train, Default::default());
        let vars: Vec<Var> = scores.iter().map(|t| s.graph.param(t.clone())).collect();
        let per_scale: Vec<(usize, Var)> = (1..=5).zip(vars.iter().copied()).collect();
        let fused = fusion.fuse(&mut s, &per_scale)?;
        let loss = project(&mut s.graph, fused, seed)?;
        let value = s.graph.value(loss).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut g = s.graph.backward(loss)?;
        let mut out: Vec<Tensor<f64>> = vars.iter().map(|v| g.get(*v).expect("tracked").clone()).collect();
        out.extend(s.param_grads(&mut g));
        Ok((value, out))
    };
    let analytic = forward(&store, &scores, true)?.1;
    let mut worst = (0.0, String::new());
    let mut probe_scores = scores.clone();
    let mut probe_store = store.clone();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.numel());
        for j in 0..a.numel() {
            let slot = |ps: &mut Vec<Tensor<f64>>, st: &mut ParamStore<f64>, v: Option<f64>| -> f64 {
                let cell = if i < 5 {
                    &mut ps[i].data_mut()[j]
                } else {
                    &mut st.values_mut()[i - 5].data_mut()[j]
                };
                let old = *cell;
                if let Some(v) = v {
                    *cell = v;
                }
                old
            };
            let x = slot(&mut probe_scores, &mut probe_store, None);
            slot(&mut probe_scores, &mut probe_store, Some(x + STEP));
            let up = forward(&probe_store, &probe_scores, false)?.0;
            slot(&mut probe_scores, &mut probe_store, Some(x - STEP));
            let down = forward(&probe_store, &probe_scores, false)?.0;
            slot(&mut probe_scores, &mut probe_store, Some(x));
            numeric.push((up - down) / (2.0 * STEP));
        }
        let e = relative_error(a.data(), &numeric);
        if e >= worst.0 {
            worst = (
                e,
                if i < 5 {
                    format!("scale {} scores", i + 1)
                } else {
                    store.names()[i - 5].clone()
                },
            );
        }
    }
    Ok(CheckResult {
        name: "fusion".into(),
        rel_error: worst.0,
        tolerance: OP_TOLERANCE,
        worst: worst.1,
        seed,
    })
}

/// Tiny configuration for the end-to-end check: 2-way 1-shot, 8×8 inputs,
/// 4-channel backbone.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        image_size: 8,
        width: 4,
        ..ArchConfig::default()
    }
}

/// Gradient of the train-mode episode loss with respect to every parameter
/// group of a freshly initialised tiny model.
pub fn end_to_end(ablation: Ablation, seed: u64) -> Result<Vec<CheckResult>> {
    let arch = tiny_arch();
    let head = HeadConfig {
        k: 1,
        metric: Metric::Cosine,
        ablation,
    };
    let shape = EpisodeShape {
        way: 2,
        shot: 1,
        queries: 2,
    };
    let loss_at = |model: &ModelState<f64>, support: &Tensor<f64>, query: &Tensor<f64>, labels: &[usize]| -> Result<f64> {
        let mut s = model.session(Mode::Train);
        let logits = model.forward(&mut s, &head, shape.way, shape.shot, support, query)?;
        let loss = episode_loss(&mut s.graph, logits, labels)?;
        Ok(s.graph.value(loss).data()[0])
    };
    for attempt in 0..ATTEMPTS {
        let run_seed = seed * 1000 + attempt;
        let model = ModelState::<f64>::init(&arch, run_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        let support = uniform(&mut rng, &[shape.support_len(), 3, 8, 8], -1.0, 1.0);
        let query = uniform(&mut rng, &[shape.query_len(), 3, 8, 8], -1.0, 1.0);
        let labels: Vec<usize> = (0..shape.way).flat_map(|n| std::iter::repeat_n(n, shape.queries)).collect();
        let (analytic, kink) = {
            let mut s = model.session(Mode::Train);
            let logits = model.forward(&mut s, &head, shape.way, shape.shot, &support, &query)?;
            let loss = episode_loss(&mut s.graph, logits, &labels)?;
            let kink = near_kink(&s.graph);
            let mut g = s.graph.backward(loss)?;
            (s.param_grads(&mut g), kink)
        };
        if kink {
            continue;
        }
        let mut results = Vec::with_capacity(model.store.len());
        let mut probe = model.clone();
        for (i, name) in model.store.names().iter().enumerate() {
            let mut numeric = Vec::with_capacity(analytic[i].numel());
            for j in 0..analytic[i].numel() {
                let x = model.store.values()[i].data()[j];
                probe.store.values_mut()[i].data_mut()[j] = x + STEP;
                let up = loss_at(&probe, &support, &query, &labels)?;
                probe.store.values_mut()[i].data_mut()[j] = x - STEP;
                let down = loss_at(&probe, &support, &query, &labels)?;
                probe.store.values_mut()[i].data_mut()[j] = x;
                numeric.push((up - down) / (2.0 * STEP));
            }
            results.push(CheckResult {
                name: format!("end_to_end[{}] {name}", ablation.label()),
                rel_error: relative_error(analytic[i].data(), &numeric),
                tolerance: END_TO_END_TOLERANCE,
                worst: name.clone(),
                seed: run_seed,
            });
        }
        return Ok(results);
    }
    Err(Error::Parameter(format!(
        "end-to-end check: no tie-free instance in {ATTEMPTS} draws"
    )))
}

/// Every operation check plus the end-to-end checks of the full and baseline
/// models.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_suite(seed)?;
    out.extend(end_to_end(Ablation::FULL, seed)?);
    out.extend(end_to_end(Ablation::BASELINE, seed)?);
    Ok(out)
}
