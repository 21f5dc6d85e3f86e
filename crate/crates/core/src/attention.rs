//! Semantic relation matrices, the task-attention mask and
//! row re-weighting.
//!
//! Local representations (LRs) are handled row-wise inside the graph ops
//! (`[count, channels]`); the public matrix functions accept the column layout
//! `[channels, count]` used to describe LR sets.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Kink, Var};
use crate::error::{Error, Result};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Added to vector norms before dividing in the cosine metric.
pub const COSINE_NORM_EPS: f64 = 1e-8;
/// Lower clamp on the total relation sum under the square root of the mask.
pub const MASK_TOTAL_EPS: f64 = 1e-6;
/// Lower clamp on Tanimoto denominators.
pub const TANIMOTO_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TanimotoForm {
    /// `a·b / (‖a‖‖b‖ − a·b)`.
    #[default]
    Printed,
    /// `a·b / (‖a‖² + ‖b‖² − a·b)`.
    Standard,
}

/// Similarity between two local representations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Cosine,
    /// `exp(−‖a − b‖)`.
    ExpEuclidean,
    /// `1 / (1 + ‖a − b‖)`.
    InvEuclidean,
    Tanimoto(TanimotoForm),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::ExpEuclidean => "exp_euclidean",
            Metric::InvEuclidean => "inv_euclidean",
            Metric::Tanimoto(_) => "tanimoto",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "exp_euclidean" => Ok(Metric::ExpEuclidean),
            "inv_euclidean" => Ok(Metric::InvEuclidean),
            "tanimoto" => Ok(Metric::Tanimoto(TanimotoForm::Printed)),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Value of a metric and its partial derivatives with respect to
/// `p = a·b`, `u = ‖a‖²` and `v = ‖b‖²`.
#[derive(Clone, Copy, Debug)]
struct Partials<T> {
    f: T,
    fp: T,
    fu: T,
    fv: T,
}

impl Metric {
    fn partials<T: Real>(self, p: T, u: T, v: T) -> Partials<T> {
        let zero = T::zero();
        let half = T::lit(0.5);
        match self {
            Metric::Cosine => {
                let eps = T::lit(COSINE_NORM_EPS);
                let (ru, rv) = (u.sqrt(), v.sqrt());
                let (na, nb) = (ru + eps, rv + eps);
                let f = p / (na * nb);
                let fu = if ru > zero { -f / na * half / ru } else { zero };
                let fv = if rv > zero { -f / nb * half / rv } else { zero };
                Partials {
                    f,
                    fp: T::one() / (na * nb),
                    fu,
                    fv,
                }
            }
            Metric::ExpEuclidean | Metric::InvEuclidean => {
                let d = (u + v - p - p).max(zero).sqrt();
                let (f, fd) = if self == Metric::ExpEuclidean {
                    let f = (-d).exp();
                    (f, -f)
                } else {
                    let f = T::one() / (T::one() + d);
                    (f, -f * f)
                };
                if d > T::lit(1e-12) {
                    let dd = half / d;
                    Partials {
                        f,
                        fp: -fd * (dd + dd),
                        fu: fd * dd,
                        fv: fd * dd,
                    }
                } else {
                    Partials {
                        f,
                        fp: zero,
                        fu: zero,
                        fv: zero,
                    }
                }
            }
            Metric::Tanimoto(form) => {
                let eps = T::lit(TANIMOTO_EPS);
                let (ru, rv) = (u.sqrt(), v.sqrt());
                let den = match form {
                    TanimotoForm::Printed => ru * rv - p,
                    TanimotoForm::Standard => u + v - p,
                };
                if den < eps {
                    return Partials {
                        f: p / eps,
                        fp: T::one() / eps,
                        fu: zero,
                        fv: zero,
                    };
                }
                let f = p / den;
                let q = -p / (den * den);
                let (fu, fv) = match form {
                    TanimotoForm::Printed => (
                        if ru > zero { q * rv * half / ru } else { zero },
                        if rv > zero { q * ru * half / rv } else { zero },
                    ),
                    TanimotoForm::Standard => (q, q),
                };
                Partials {
                    f,
                    fp: (den + p) / (den * den),
                    fu,
                    fv,
                }
            }
        }
    }

    /// Metric value for a single pair of vectors.
    pub fn eval<T: Real>(self, a: &[T], b: &[T]) -> T {
        assert_eq!(a.len(), b.len(), "metric operands differ in length");
        let p = dot(a, b);
        self.partials(p, dot(a, a), dot(b, b)).f
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn row_sq_norms<T: Real>(rows: &[T], width: usize) -> Vec<T> {
    rows.chunks_exact(width).map(|r| dot(r, r)).collect()
}

/// `T(a, b) = a·b / (‖a‖‖b‖ − a·b)`, denominator clamped to [`TANIMOTO_EPS`].
pub fn tanimoto<T: Real>(a: &[T], b: &[T]) -> T {
    let p = dot(a, b);
    let den = dot(a, a).sqrt() * dot(b, b).sqrt() - p;
    if den < T::lit(TANIMOTO_EPS) {
        log::debug!("degenerate tanimoto denominator {den}; clamped");
    }
    Metric::Tanimoto(TanimotoForm::Printed).eval(a, b)
}

/// Pairwise metric between the rows of `a[m,c]` and `b[n,c]`.
pub(crate) fn pairwise_rows<T: Real>(a: &[T], b: &[T], c: usize, metric: Metric) -> Vec<T> {
    let (m, n) = (a.len() / c, b.len() / c);
    let mut dots = vec![T::zero(); m * n];
    gemm(false, true, m, n, c, a, b, &mut dots, false);
    let u = row_sq_norms(a, c);
    let v = row_sq_norms(b, c);
    for (i, row) in dots.chunks_exact_mut(n).enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = metric.partials(*x, u[i], v[j]).f;
        }
    }
    dots
}

/// Relation matrix between query and support LR sets at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticRelationMatrix<T> {
    /// `[query LRs, support LRs]`.
    pub values: Tensor<T>,
    pub scale: usize,
    /// Number of classes; columns split into this many equal contiguous blocks.
    pub classes: usize,
}

impl<T: Real> SemanticRelationMatrix<T> {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn block_width(&self) -> usize {
        self.cols() / self.classes
    }
}

/// Relation matrix `R[i,j] = metric(query LR i, support LR j)` from LR sets in
/// column layout (`query[C, P]`, `support[C, N·K·P]`).
pub fn relation_matrix<T: Real>(
    query: &Tensor<T>,
    support: &Tensor<T>,
    metric: Metric,
    classes: usize,
    scale: usize,
) -> Result<SemanticRelationMatrix<T>> {
    let (qs, ss) = (query.shape(), support.shape());
    if qs.len() != 2 || ss.len() != 2 || qs[0] != ss[0] {
        return Err(Error::dim(
            "relation_matrix",
            format!("query {qs:?} and support {ss:?} must share the channel axis"),
        ));
    }
    if classes == 0 || ss[1] % classes != 0 {
        return Err(Error::dim(
            "relation_matrix",
            format!("{} support columns do not split into {classes} classes", ss[1]),
        ));
    }
    let c = qs[0];
    let q_rows = crate::autodiff::transpose_batched(query.data(), c, qs[1]);
    let s_rows = crate::autodiff::transpose_batched(support.data(), c, ss[1]);
    let values = pairwise_rows(&q_rows, &s_rows, c, metric);
    Ok(SemanticRelationMatrix {
        values: Tensor::from_parts(vec![qs[1], ss[1]], values),
        scale,
        classes,
    })
}

/// Per-query-LR attention weights of one relation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAttentionMask<T> {
    pub alpha: Vec<T>,
    pub scale: usize,
}

/// `alpha_i = rowsum_i(R) / sqrt(max(sum(R), ε))`, applied independently to
/// consecutive groups of `group` rows.
pub(crate) fn mask_values<T: Real>(r: &[T], cols: usize, group: usize) -> (Vec<T>, Vec<T>) {
    let row_sums: Vec<T> = r.chunks_exact(cols).map(|row| row.iter().copied().sum()).collect();
    let eps = T::lit(MASK_TOTAL_EPS);
    let mut alpha = Vec::with_capacity(row_sums.len());
    let mut totals = Vec::with_capacity(row_sums.len() / group);
    for chunk in row_sums.chunks_exact(group) {
        let total: T = chunk.iter().copied().sum();
        let denom = total.max(eps).sqrt();
        alpha.extend(chunk.iter().map(|&s| s / denom));
        totals.push(total);
    }
    (alpha, totals)
}

pub fn attention_mask<T: Real>(r: &SemanticRelationMatrix<T>) -> TaskAttentionMask<T> {
    let (alpha, _) = mask_values(r.values.data(), r.cols(), r.rows());
    TaskAttentionMask {
        alpha,
        scale: r.scale,
    }
}

/// `M_i = alpha_i · R_i`.
pub fn weight_relations<T: Real>(
    r: &SemanticRelationMatrix<T>,
    mask: &TaskAttentionMask<T>,
) -> Result<SemanticRelationMatrix<T>> {
    if mask.alpha.len() != r.rows() {
        return Err(Error::dim(
            "weight_relations",
            format!("{} mask entries for {} rows", mask.alpha.len(), r.rows()),
        ));
    }
    Ok(SemanticRelationMatrix {
        values: Tensor::from_parts(
            r.values.shape().to_vec(),
            scale_rows(r.values.data(), r.cols(), &mask.alpha),
        ),
        scale: r.scale,
        classes: r.classes,
    })
}

fn scale_rows<T: Real>(r: &[T], cols: usize, alpha: &[T]) -> Vec<T> {
    r.chunks_exact(cols)
        .zip(alpha)
        .flat_map(|(row, &a)| row.iter().map(move |&x| a * x))
        .collect()
}

/// Differentiable relation matrix between the rows of `query[m,c]` and `support[n,c]`.
pub fn relation_op<T: Real>(g: &mut Graph<T>, query: Var, support: Var, metric: Metric) -> Result<Var> {
    let (qs, ss) = (g.shape(query).to_vec(), g.shape(support).to_vec());
    if qs.len() != 2 || ss.len() != 2 || qs[1] != ss[1] {
        return Err(Error::dim(
            "relation_matrix",
            format!("row-layout operands {qs:?} and {ss:?} disagree on channels"),
        ));
    }
    let (m, n, c) = (qs[0], ss[0], qs[1]);
    let out = pairwise_rows(g.value(query).data(), g.value(support).data(), c, metric);
    Ok(g.push(
        Tensor::from_parts(vec![m, n], out),
        &[query, support],
        Box::new(move |ctx| {
            let a = ctx.inputs[0].data();
            let b = ctx.inputs[1].data();
            let grad = ctx.grad.data();
            let mut dots = vec![T::zero(); m * n];
            gemm(false, true, m, n, c, a, b, &mut dots, false);
            let u = row_sq_norms(a, c);
            let v = row_sq_norms(b, c);
            let two = T::lit(2.0);
            let mut wp = dots;
            let mut row_u = vec![T::zero(); m];
            let mut col_v = vec![T::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    let idx = i * n + j;
                    let parts = metric.partials(wp[idx], u[i], v[j]);
                    let gij = grad[idx];
                    wp[idx] = gij * parts.fp;
                    row_u[i] = row_u[i] + gij * parts.fu;
                    col_v[j] = col_v[j] + gij * parts.fv;
                }
            }
            let da = ctx.needs[0].then(|| {
                let mut d = vec![T::zero(); m * c];
                gemm(false, false, m, c, n, &wp, b, &mut d, false);
                for (i, row) in d.chunks_exact_mut(c).enumerate() {
                    let s = two * row_u[i];
                    for (x, &ai) in row.iter_mut().zip(&a[i * c..(i + 1) * c]) {
                        *x = *x + s * ai;
                    }
                }
                Tensor::from_parts(vec![m, c], d)
            });
            let db = ctx.needs[1].then(|| {
                let mut d = vec![T::zero(); n * c];
                gemm(true, false, n, c, m, &wp, a, &mut d, false);
                for (j, row) in d.chunks_exact_mut(c).enumerate() {
                    let s = two * col_v[j];
                    for (x, &bj) in row.iter_mut().zip(&b[j * c..(j + 1) * c]) {
                        *x = *x + s * bj;
                    }
                }
                Tensor::from_parts(vec![n, c], d)
            });
            vec![da, db]
        }),
    ))
}

/// Differentiable attention mask over `r[Q·group, cols]`, one mask per group
/// of `group` consecutive rows. Output shape `[Q·group]`.
pub fn attention_mask_op<T: Real>(g: &mut Graph<T>, r: Var, group: usize) -> Result<Var> {
    let shape = g.shape(r).to_vec();
    if shape.len() != 2 || group == 0 || !shape[0].is_multiple_of(group) {
        return Err(Error::dim(
            "attention_mask",
            format!("relation shape {shape:?} with {group} rows per query"),
        ));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let (alpha, totals) = mask_values(g.value(r).data(), cols, group);
    let eps = T::lit(MASK_TOTAL_EPS);
    let clamp_gap = totals.iter().map(|&t| (t - eps).abs()).fold(T::infinity(), T::min);
    g.note_kink(Kink::Tie, clamp_gap);
    Ok(g.push(
        Tensor::from_parts(vec![rows], alpha),
        &[r],
        Box::new(move |ctx| {
            let rv = ctx.inputs[0].data();
            let ga = ctx.grad.data();
            let mut d = Vec::with_capacity(rows * cols);
            for (q, &total) in totals.iter().enumerate() {
                let clamped = total < eps;
                let s = total.max(eps);
                let root = s.sqrt();
                let rows_q = q * group..(q + 1) * group;
                // d alpha_i / d R_{i'j} = δ_ii'/√S − [S > ε]·r_i / (2 S^{3/2})
                let shared = if clamped {
                    T::zero()
                } else {
                    let weighted: T = rows_q
                        .clone()
                        .map(|i| ga[i] * rv[i * cols..(i + 1) * cols].iter().copied().sum::<T>())
                        .sum();
                    weighted / (T::lit(2.0) * s * root)
                };
                for i in rows_q {
                    let v = ga[i] / root - shared;
                    d.extend(std::iter::repeat_n(v, cols));
                }
            }
            vec![Some(Tensor::from_parts(vec![rows, cols], d))]
        }),
    ))
}

/// Row-scales `r[rows, cols]` by `alpha[rows]`.
pub fn weight_relations_op<T: Real>(g: &mut Graph<T>, r: Var, alpha: Var) -> Result<Var> {
    let shape = g.shape(r).to_vec();
    if shape.len() != 2 || g.shape(alpha) != [shape[0]] {
        return Err(Error::dim(
            "weight_relations",
            format!("mask {:?} for relation {shape:?}", g.shape(alpha)),
        ));
    }
    let cols = shape[1];
    let out = scale_rows(g.value(r).data(), cols, g.value(alpha).data());
    Ok(g.push(
        Tensor::from_parts(shape.clone(), out),
        &[r, alpha],
        Box::new(move |ctx| {
            let grad = ctx.grad.data();
            let rv = ctx.inputs[0].data();
            let av = ctx.inputs[1].data();
            let dr = ctx.needs[0].then(|| Tensor::from_parts(shape.clone(), scale_rows(grad, cols, av)));
            let da = ctx.needs[1].then(|| {
                let d = grad
                    .chunks_exact(cols)
                    .zip(rv.chunks_exact(cols))
                    .map(|(gr, rr)| dot(gr, rr))
                    .collect();
                Tensor::from_parts(vec![shape[0]], d)
            });
            vec![dr, da]
        }),
    ))
}
