//! Similarity-to-class scoring: every query LR keeps its `k` strongest
//! weighted relations inside each class block, and a class scores the sum of
//! everything kept.

use std::fmt::Write as _;

use crate::attention::{SemanticRelationMatrix, TaskAttentionMask};
use crate::autodiff::{Graph, Kink, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Indices of the `k` largest entries of `row`, ordered by value descending;
/// equal values prefer the lower index.
pub fn top_k_indices<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (j, &v) in row.iter().enumerate() {
        if best.len() == k && !(v > row[best[k - 1]]) {
            continue;
        }
        let pos = best.partition_point(|&b| row[b] >= v);
        best.insert(pos, j);
        best.truncate(k);
    }
    best
}

/// Largest gap between the k-th selected value and the best unselected one;
/// infinite when everything is selected.
fn selection_margin<T: Real>(row: &[T], selected: &[usize]) -> T {
    if selected.len() == row.len() {
        return T::infinity();
    }
    let kth = row[*selected.last().expect("k > 0")];
    let runner_up = row
        .iter()
        .enumerate()
        .filter(|(j, _)| !selected.contains(j))
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    kth - runner_up
}

fn check_k(k: usize, width: usize) -> Result<()> {
    if k == 0 || k > width {
        return Err(Error::Parameter(format!(
            "top-k with k = {k} needs 1 ≤ k ≤ {width} (class block width)"
        )));
    }
    Ok(())
}

/// Sum over rows of the `k` largest entries of each row of `block[rows, width]`.
pub fn class_score<T: Real>(block: &Tensor<T>, k: usize) -> Result<T> {
    let [_, width] = block.shape()[..] else {
        return Err(Error::dim("class_score", format!("expected a matrix, got {:?}", block.shape())));
    };
    check_k(k, width)?;
    Ok(block
        .data()
        .chunks_exact(width)
        .map(|row| top_k_indices(row, k).into_iter().map(|j| row[j]).sum::<T>())
        .sum())
}

/// One score per support class at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityVector<T> {
    pub scores: Vec<T>,
    pub scale: usize,
}

/// `scores[n] = class_score(M restricted to class block n, k)`.
pub fn similarity_vector<T: Real>(m: &SemanticRelationMatrix<T>, k: usize) -> Result<SimilarityVector<T>> {
    let (rows, cols, classes) = (m.rows(), m.cols(), m.classes);
    if classes == 0 || cols % classes != 0 {
        return Err(Error::dim(
            "similarity_vector",
            format!("{cols} columns do not partition into {classes} class blocks"),
        ));
    }
    let scores = block_scores(m.values.data(), rows, cols, classes, k)?.0;
    Ok(SimilarityVector {
        scores,
        scale: m.scale,
    })
}

/// Scores of every class block for one group of rows, plus the flat selected
/// column indices (row-major over rows, then classes, then rank).
fn block_scores<T: Real>(
    m: &[T],
    rows: usize,
    cols: usize,
    classes: usize,
    k: usize,
) -> Result<(Vec<T>, Vec<u32>, T)> {
    let width = cols / classes;
    check_k(k, width)?;
    let mut scores = vec![T::zero(); classes];
    let mut picked = Vec::with_capacity(rows * classes * k);
    let mut margin = T::infinity();
    for row in m.chunks_exact(cols).take(rows) {
        for (n, score) in scores.iter_mut().enumerate() {
            let block = &row[n * width..(n + 1) * width];
            let sel = top_k_indices(block, k);
            margin = margin.min(selection_margin(block, &sel));
            for &j in &sel {
                *score = *score + block[j];
                picked.push((n * width + j) as u32);
            }
        }
    }
    Ok((scores, picked, margin))
}

/// Differentiable class scores for `m[Q·group, N·width]`: output `[Q, N]`.
/// Gradient flows only into the selected entries.
pub fn class_scores_op<T: Real>(g: &mut Graph<T>, m: Var, group: usize, classes: usize, k: usize) -> Result<Var> {
    let shape = g.shape(m).to_vec();
    if shape.len() != 2 || group == 0 || !shape[0].is_multiple_of(group) || classes == 0 || !shape[1].is_multiple_of(classes) {
        return Err(Error::dim(
            "similarity_vector",
            format!("matrix {shape:?} with {group} rows per query and {classes} classes"),
        ));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let queries = rows / group;
    let values = g.value(m).data();
    let mut out = Vec::with_capacity(queries * classes);
    let mut picked = Vec::with_capacity(rows * classes * k);
    let mut margin = T::infinity();
    for q in 0..queries {
        let (scores, sel, gap) = block_scores(&values[q * group * cols..(q + 1) * group * cols], group, cols, classes, k)?;
        out.extend(scores);
        picked.extend(sel);
        margin = margin.min(gap);
    }
    g.note_kink(Kink::Tie, margin);
    Ok(g.push(
        Tensor::from_parts(vec![queries, classes], out),
        &[m],
        Box::new(move |ctx| {
            let grad = ctx.grad.data();
            let mut d = vec![T::zero(); rows * cols];
            for (flat, &col) in picked.iter().enumerate() {
                let row = flat / (classes * k);
                let class = (flat / k) % classes;
                let q = row / group;
                let idx = row * cols + col as usize;
                d[idx] = d[idx] + grad[q * classes + class];
            }
            vec![Some(Tensor::from_parts(vec![rows, cols], d))]
        }),
    ))
}

/// Geometry of the support columns of a relation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassPartition {
    pub classes: usize,
    pub shots: usize,
    /// LRs per support image at this scale.
    pub positions: usize,
}

impl ClassPartition {
    pub fn block_width(&self) -> usize {
        self.shots * self.positions
    }

    pub fn columns(&self) -> usize {
        self.classes * self.block_width()
    }
}

/// One selected support LR for a query LR.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedLr<T> {
    pub query_lr: usize,
    pub class: usize,
    /// Image index within the class (shot).
    pub image: usize,
    /// Spatial index within the image's LR grid.
    pub spatial: usize,
    /// Weighted relation value `M[i, j]`.
    pub similarity: T,
    pub alpha: T,
}

/// The `k` selected support LRs of every (query LR, class) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationRecord<T> {
    pub scale: usize,
    pub k: usize,
    pub entries: Vec<SelectedLr<T>>,
}

pub fn explain<T: Real>(
    m: &SemanticRelationMatrix<T>,
    mask: &TaskAttentionMask<T>,
    partition: ClassPartition,
    k: usize,
) -> Result<ExplanationRecord<T>> {
    if m.cols() != partition.columns() || m.classes != partition.classes {
        return Err(Error::dim(
            "explain",
            format!(
                "{} columns / {} classes vs partition {partition:?}",
                m.cols(),
                m.classes
            ),
        ));
    }
    if mask.alpha.len() != m.rows() {
        return Err(Error::dim("explain", "mask length differs from row count"));
    }
    let width = partition.block_width();
    check_k(k, width)?;
    let mut entries = Vec::with_capacity(m.rows() * partition.classes * k);
    for (i, row) in m.values.data().chunks_exact(m.cols()).enumerate() {
        for class in 0..partition.classes {
            let block = &row[class * width..(class + 1) * width];
            for j in top_k_indices(block, k) {
                entries.push(SelectedLr {
                    query_lr: i,
                    class,
                    image: j / partition.positions,
                    spatial: j % partition.positions,
                    similarity: block[j],
                    alpha: mask.alpha[i],
                });
            }
        }
    }
    Ok(ExplanationRecord {
        scale: m.scale,
        k,
        entries,
    })
}

impl<T: Real> ExplanationRecord<T> {
    /// One line per selection:
    /// `query_lr_index class image spatial_index similarity alpha`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                e.query_lr,
                e.class,
                e.image,
                e.spatial,
                format_sig6(e.similarity.to_f64().unwrap_or(f64::NAN)),
                format_sig6(e.alpha.to_f64().unwrap_or(f64::NAN)),
            );
        }
        out
    }
}

/// Decimal rendering with six significant digits, `%g` style.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_prefers_lower_index_on_ties() {
        assert_eq!(top_k_indices(&[0.5f64, 0.9, 0.5, 0.9], 3), vec![1, 3, 0]);
        assert_eq!(top_k_indices(&[1.0f64; 4], 2), vec![0, 1]);
    }

    #[test]
    fn score_examples() {
        let m = Tensor::new(vec![1, 4], vec![0.9f64, 0.5, 0.7, 0.1]).unwrap();
        assert!((class_score(&m, 2).unwrap() - 1.6).abs() < 1e-12);
        assert!((class_score(&m, 4).unwrap() - 2.2).abs() < 1e-12);
        assert!(matches!(class_score(&m, 5), Err(Error::Parameter(_))));
        assert!(class_score(&m, 0).is_err());
    }

    #[test]
    fn duplicated_class_blocks_score_equally() {
        let values = Tensor::new(vec![2, 6], vec![0.3f64, 0.1, 0.3, 0.1, 0.9, 0.2, 0.4, 0.5, 0.4, 0.5, 0.0, 0.1]).unwrap();
        let m = SemanticRelationMatrix {
            values,
            scale: 1,
            classes: 3,
        };
        let s = similarity_vector(&m, 1).unwrap();
        assert_eq!(s.scores[0], s.scores[1]);
        assert!(similarity_vector(&SemanticRelationMatrix { classes: 4, ..m }, 1).is_err());
    }

    #[test]
    fn explanation_lines() {
        let m = SemanticRelationMatrix {
            values: Tensor::new(vec![1, 4], vec![0.25f64, 0.5, 0.125, 1.0]).unwrap(),
            scale: 1,
            classes: 2,
        };
        let mask = TaskAttentionMask {
            alpha: vec![0.75],
            scale: 1,
        };
        let part = ClassPartition {
            classes: 2,
            shots: 1,
            positions: 2,
        };
        let rec = explain(&m, &mask, part, 1).unwrap();
        assert_eq!(rec.to_text(), "0 0 0 1 0.5 0.75\n0 1 0 1 1 0.75\n");
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.0689999), "0.0689999");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(-2.5e-7), "-2.5e-07");
        assert_eq!(format_sig6(0.041), "0.041");
    }
}
