//! Per-scale score normalisation and the learned weighted sum over scales.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::generator::SCALES;
use crate::layers::{NormLayer, ParamId, ParamStore, Session};
use crate::real::Real;
use crate::tensor::Tensor;

/// Initial value of every fusion weight.
pub const INITIAL_WEIGHT: f64 = 0.2;

/// `w` (one weight per scale) and, optionally, one scalar batch-norm per scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fusion {
    pub weights: ParamId,
    pub norms: Option<Vec<NormLayer>>,
}

impl Fusion {
    pub fn init<T: Real>(store: &mut ParamStore<T>, with_norm: bool) -> Self {
        let weights = store.add("fusion.w", Tensor::full(vec![SCALES], T::lit(INITIAL_WEIGHT)));
        let norms = with_norm.then(|| {
            (1..=SCALES)
                .map(|z| NormLayer::init(store, &format!("fusion.bn{z}"), 1))
                .collect()
        });
        Fusion { weights, norms }
    }

    /// Combines per-scale score batches `[Q, N]` (tagged with their 1-based
    /// scale) into logits `Σ_z w_z · normalise_z(P^z)`.
    pub fn fuse<T: Real>(&self, s: &mut Session<'_, T>, per_scale: &[(usize, Var)]) -> Result<Var> {
        let Some(&(_, first)) = per_scale.first() else {
            return Err(Error::dim("fuse", "no scale scores"));
        };
        let shape = s.graph.shape(first).to_vec();
        let [q, n] = shape[..] else {
            return Err(Error::dim("fuse", format!("scores must be [Q,N], got {shape:?}")));
        };
        let w = s.param(self.weights);
        let mut normalised = Vec::with_capacity(per_scale.len());
        let mut picked = Vec::with_capacity(per_scale.len());
        for &(scale, scores) in per_scale {
            if s.graph.shape(scores) != [q, n] {
                return Err(Error::dim(
                    "fuse",
                    format!("scale {scale} scores {:?} differ from {shape:?}", s.graph.shape(scores)),
                ));
            }
            if !(1..=SCALES).contains(&scale) {
                return Err(Error::Parameter(format!("no fusion weight for scale {scale}")));
            }
            let x = s.graph.reshape(scores, vec![q, 1, n])?;
            let x = match &self.norms {
                Some(norms) => s.norm(x, &norms[scale - 1])?,
                None => x,
            };
            normalised.push(x);
            picked.push(s.graph.narrow(w, 0, scale - 1, 1)?);
        }
        let stacked = s.graph.concat(&normalised, 1)?;
        let weights = s.graph.concat(&picked, 0)?;
        let weighted = s.graph.scale_channels(stacked, weights)?;
        s.graph.sum_axis(weighted, 1)
    }
}

/// Argmax per row; ties resolve to the lowest class index.
pub fn classify<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let n = *logits.shape().last().expect("non-empty shape");
    logits
        .data()
        .chunks_exact(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Mean cross-entropy of an episode's query logits.
pub fn episode_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Mode, NormConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Fuses `scores[z]` (`[Q, N]` each) with the given weights and no
    /// normalisation.
    fn fuse_plain(weights: [f64; 5], scores: &[Tensor<f64>]) -> Tensor<f64> {
        let mut store = ParamStore::new();
        let f = Fusion::init(&mut store, false);
        store.get_mut(f.weights).data_mut().copy_from_slice(&weights);
        let mut s = Session::new(&store, Mode::Eval, NormConfig::default());
        let vars: Vec<(usize, Var)> = scores
            .iter()
            .enumerate()
            .map(|(z, t)| (z + 1, s.graph.constant(t.clone())))
            .collect();
        let out = f.fuse(&mut s, &vars).unwrap();
        s.graph.value(out).clone()
    }

    fn random_scores(seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5).map(|_| Tensor::uniform(vec![3, 4], -2.0, 2.0, &mut rng)).collect()
    }

    #[test]
    fn single_scale_weight_selects_that_scale() {
        let p = random_scores(1);
        assert_eq!(fuse_plain([1.0, 0.0, 0.0, 0.0, 0.0], &p), p[0]);
    }

    #[test]
    fn convex_weights_on_identical_scales_return_them() {
        let v = random_scores(2).remove(0);
        let out = fuse_plain([0.1, 0.3, 0.2, 0.25, 0.15], &vec![v.clone(); 5]);
        assert!(out.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn weighted_sum_oracle() {
        let p = random_scores(3);
        let w = [0.7, -0.2, 1.3, 0.05, 0.4];
        let out = fuse_plain(w, &p);
        for i in 0..12 {
            let want: f64 = (0..5).map(|z| w[z] * p[z].data()[i]).sum();
            assert!((out.data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_scores_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let f = Fusion::init(&mut store, true);
        let mut s = Session::new(&store, Mode::Eval, NormConfig::default());
        let a = s.graph.constant(Tensor::zeros(vec![2, 3]));
        let b = s.graph.constant(Tensor::zeros(vec![2, 4]));
        assert!(f.fuse(&mut s, &[(1, a), (2, b)]).is_err());
        assert!(f.fuse(&mut s, &[(6, a)]).is_err());
        assert!(f.fuse(&mut s, &[]).is_err());
    }

    #[test]
    fn classify_ignores_shifts() {
        let l = Tensor::new(vec![2, 3], vec![0.3f64, -1.0, 0.9, 2.0, 2.5, -0.5]).unwrap();
        assert_eq!(classify(&l), classify(&l.map(|v| v + 17.0)));
        assert_eq!(classify(&l), vec![2, 1]);
    }

    #[test]
    fn loss_of_confident_and_uniform_logits() {
        let mut g = Graph::new();
        let sure = g.constant(Tensor::new(vec![1, 5], vec![50.0f64, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let l = episode_loss(&mut g, sure, &[0]).unwrap();
        assert!(g.value(l).data()[0] < 1e-12);
        let flat = g.constant(Tensor::<f64>::zeros(vec![1, 5]));
        let l = episode_loss(&mut g, flat, &[4]).unwrap();
        assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classify_examples() {
        let l = Tensor::new(vec![1, 5], vec![0.1f32, 0.9, 0.2, 0.0, 0.0]).unwrap();
        assert_eq!(classify(&l), vec![1]);
        let u = Tensor::new(vec![2, 3], vec![0.5f32; 6]).unwrap();
        assert_eq!(classify(&u), vec![0, 0]);
    }
}
