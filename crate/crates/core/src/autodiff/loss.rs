use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [batch, classes] = shape[..] else {
            return Err(Error::dim("softmax_cross_entropy", format!("logits shape {shape:?}")));
        };
        if labels.len() != batch {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {batch} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: classes,
            });
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(z.len());
        let mut loss = T::zero();
        for (row, &label) in z.chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            loss = loss - (row[label] - max - log_denom);
            probs.extend(row.iter().map(|&v| (v - max - log_denom).exp()));
        }
        let bf = T::of(batch);
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss / bf),
            &[logits],
            Box::new(move |c| {
                let g = c.grad.data()[0] / bf;
                let mut d: Vec<T> = probs.iter().map(|&p| p * g).collect();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * classes + l] = d[b * classes + l] - g;
                }
                vec![Some(Tensor::from_parts(vec![batch, classes], d))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_n() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros(vec![1, 5]));
        for label in 0..5 {
            let l = g.softmax_cross_entropy(z, &[label]).unwrap();
            assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn large_margins_do_not_overflow() {
        let mut g = Graph::new();
        let z = g.param(Tensor::<f32>::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        let v = g.value(l).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-6);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(z).unwrap().is_finite());
    }

    #[test]
    fn labels_are_range_checked() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros(vec![2, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(z, &[0, 3]),
            Err(Error::Index { index: 3, bound: 3, .. })
        ));
        assert!(g.softmax_cross_entropy(z, &[0]).is_err());
    }
}
