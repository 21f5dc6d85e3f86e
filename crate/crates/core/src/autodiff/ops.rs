//! Elementwise, reduction, linear-algebra and layout operations.

use super::graph::{Graph, Kink, Var};
use crate::error::{Error, Result};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(
            op,
            format!("operand shapes {:?} and {:?} differ", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| zip_map(c.grad, c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| zip_map(c.grad, c.inputs[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    /// Elementwise quotient; any zero in the divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "div", a, b)?;
        if let Some(pos) = self.value(b).data().iter().position(|v| v.is_zero()) {
            return Err(Error::domain("div", format!("division by zero at flat index {pos}")));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| zip_map(c.grad, c.inputs[1], |g, y| g / y)),
                    c.needs[1].then(|| {
                        let gq = zip_map(c.grad, c.output, |g, q| g * q);
                        zip_map(&gq, c.inputs[1], |v, y| -v / y)
                    }),
                ]
            }),
        ))
    }

    /// Elementwise square root; negative inputs are a domain error.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(pos) = self.value(a).data().iter().position(|v| *v < T::zero()) {
            return Err(Error::domain("sqrt", format!("negative input at flat index {pos}")));
        }
        let out = self.value(a).map(T::sqrt);
        Ok(self.push(
            out,
            &[a],
            Box::new(|c| {
                let half = T::lit(0.5);
                vec![Some(zip_map(c.grad, c.output, |g, s| g * half / s))]
            }),
        ))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, &[a], Box::new(|c| vec![Some(c.grad.clone())]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(
            out,
            &[a],
            Box::new(|c| {
                let g = c.grad.data()[0];
                vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    /// Sum along one axis, removing it (rank-1 inputs reduce to shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let row = &src[(o * extent + e) * inner..][..inner];
                for (d, &v) in data[o * inner..][..inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(move |c| {
                let g = c.grad.data();
                let mut dx = Vec::with_capacity(outer * extent * inner);
                for o in 0..outer {
                    for _ in 0..extent {
                        dx.extend_from_slice(&g[o * inner..][..inner]);
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), dx))]
            }),
        ))
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, self.value(a).data(), self.value(b).data(), &mut out, false);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Box::new(move |c| {
                let g = c.grad.data();
                let da = c.needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm(false, true, m, k, n, g, c.inputs[1].data(), &mut d, false);
                    Tensor::from_parts(vec![m, k], d)
                });
                let db = c.needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm(true, false, k, n, m, c.inputs[0].data(), g, &mut d, false);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![da, db]
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(
            out,
            &[a],
            Box::new(|c| {
                let g = c.grad.clone().reshape(c.inputs[0].shape().to_vec());
                vec![Some(g.expect("same element count"))]
            }),
        ))
    }

    /// Swaps the last two axes, treating leading axes as a batch.
    pub fn swap_last2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("swap_last2", format!("rank {} < 2", shape.len())));
        }
        let r = shape[shape.len() - 2];
        let cdim = shape[shape.len() - 1];
        let out = transpose_batched(self.value(a).data(), r, cdim);
        let mut out_shape = shape.clone();
        let last = out_shape.len() - 1;
        out_shape.swap(last - 1, last);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            &[a],
            Box::new(move |c| {
                let d = transpose_batched(c.grad.data(), cdim, r);
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * extent + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(move |c| {
                let mut d = vec![T::zero(); outer * extent * inner];
                let g = c.grad.data();
                for o in 0..outer {
                    d[(o * extent + start) * inner..][..len * inner]
                        .copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    /// Concatenation along an existing axis; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat", "no operands"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", format!("shape {s:?} incompatible with {base:?}")));
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&self.value(p).data()[o * e * inner..][..e * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            parts,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut offset = 0;
                let mut out = Vec::with_capacity(extents.len());
                for (i, &e) in extents.iter().enumerate() {
                    if c.needs[i] {
                        let mut d = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g[(o * total + offset) * inner..][..e * inner]);
                        }
                        out.push(Some(Tensor::from_parts(c.inputs[i].shape().to_vec(), d)));
                    } else {
                        out.push(None);
                    }
                    offset += e;
                }
                out
            }),
        ))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = self.shape(p).to_vec();
            if axis > s.len() {
                return Err(Error::dim("stack", format!("axis {axis} for shape {s:?}")));
            }
            s.insert(axis, 1);
            expanded.push(self.reshape(p, s)?);
        }
        self.concat(&expanded, axis)
    }

    /// `x ≥ 0 → x`, `x < 0 → slope·x`.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let x = self.value(a);
        let out = x.map(|v| if v >= T::zero() { v } else { slope * v });
        let kink = x.data().iter().map(|v| v.abs()).fold(T::infinity(), T::min);
        self.note_kink(Kink::Activation, kink);
        self.push(
            out,
            &[a],
            Box::new(move |c| {
                vec![Some(zip_map(c.grad, c.inputs[0], |g, v| {
                    if v >= T::zero() {
                        g
                    } else {
                        g * slope
                    }
                }))]
            }),
        )
    }

    /// Multiplies channel `c` of `x[B,C,...]` by `w[c]`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ws = self.shape(w);
        if shape.len() < 2 || ws.len() != 1 || ws[0] != shape[1] {
            return Err(Error::dim(
                "scale_channels",
                format!("weights {ws:?} for input {shape:?}"),
            ));
        }
        let (outer, channels, inner) = axis_split(&shape, 1);
        let weights = self.value(w).data().to_vec();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for o in 0..outer {
            for ch in 0..channels {
                let off = (o * channels + ch) * inner;
                data.extend(src[off..off + inner].iter().map(|&v| v * weights[ch]));
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, data),
            &[x, w],
            Box::new(move |c| {
                let g = c.grad.data();
                let xv = c.inputs[0].data();
                let wv = c.inputs[1].data();
                let dx = c.needs[0].then(|| {
                    let mut d = Vec::with_capacity(g.len());
                    for o in 0..outer {
                        for ch in 0..channels {
                            let off = (o * channels + ch) * inner;
                            d.extend(g[off..off + inner].iter().map(|&v| v * wv[ch]));
                        }
                    }
                    Tensor::from_parts(c.inputs[0].shape().to_vec(), d)
                });
                let dw = c.needs[1].then(|| {
                    let mut d = vec![T::zero(); channels];
                    for o in 0..outer {
                        for (ch, slot) in d.iter_mut().enumerate() {
                            let off = (o * channels + ch) * inner;
                            *slot = *slot
                                + g[off..off + inner]
                                    .iter()
                                    .zip(&xv[off..off + inner])
                                    .map(|(&a, &b)| a * b)
                                    .sum::<T>();
                        }
                    }
                    Tensor::from_parts(vec![channels], d)
                });
                vec![dx, dw]
            }),
        ))
    }
}

/// Transposes each trailing `rows×cols` block of a batched buffer.
pub(crate) fn transpose_batched<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let block = rows * cols;
    let mut out = Vec::with_capacity(src.len());
    for chunk in src.chunks_exact(block) {
        for j in 0..cols {
            out.extend((0..rows).map(|i| chunk[i * cols + j]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_matmul_and_sum() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
        let v = g.constant(t(&[3], vec![1.0, 2.0, 3.0]));
        let s = g.sum(v);
        assert_eq!(g.value(s).data(), [6.0]);
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let neg = g.constant(t(&[2], vec![1.0, -1e-12]));
        assert!(matches!(g.sqrt(neg), Err(Error::Domain { op: "sqrt", .. })));
        let a = g.constant(t(&[2], vec![1.0, 1.0]));
        let z = g.constant(t(&[2], vec![2.0, 0.0]));
        assert!(matches!(g.div(a, z), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn leaky_relu_values_and_slopes() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], vec![5.0, -2.0, -3.0]));
        let y = g.leaky_relu(x, 0.01);
        let out = g.value(y).data().to_vec();
        assert_eq!(out[0], 5.0);
        assert!((out[1] + 0.02).abs() < 1e-15);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [1.0, 0.01, 0.01]);

        let f = |v: f64| {
            let mut g = Graph::new();
            let x = g.constant(t(&[1], vec![v]));
            let y = g.leaky_relu(x, 0.01);
            g.value(y).data()[0]
        };
        let h = 1e-5;
        assert!(((f(-3.0 + h) - f(-3.0 - h)) / (2.0 * h) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a0 = Tensor::<f64>::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let b0 = Tensor::<f64>::uniform(vec![4, 2], -1.0, 1.0, &mut rng);
        let run = |which: u8| {
            let mut g = Graph::new();
            let a = g.param(a0.clone());
            let b = g.param(b0.clone());
            let p = g.matmul(a, b).unwrap();
            let l1 = g.sum(p);
            let sq = g.mul(a, a).unwrap();
            let l2 = g.sum(sq);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            let grads = g.backward(loss).unwrap();
            (grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
        };
        let (a1, b1) = run(1);
        let (a2, b2) = run(2);
        let (a12, b12) = run(0);
        for ((x, y), z) in a1.data().iter().zip(a2.data()).zip(a12.data()) {
            assert!((x + y - z).abs() < 1e-6);
        }
        for ((x, y), z) in b1.data().iter().zip(b2.data()).zip(b12.data()) {
            assert!((x + y - z).abs() < 1e-6);
        }
    }

    #[test]
    fn operations_leave_inputs_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a0 = Tensor::<f64>::uniform(vec![2, 3], 0.5, 1.5, &mut rng);
        let b0 = Tensor::<f64>::uniform(vec![2, 3], 0.5, 1.5, &mut rng);
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.param(b0.clone());
        let q = g.div(a, b).unwrap();
        let r = g.sqrt(q).unwrap();
        let c = g.concat(&[r, a], 0).unwrap();
        let n = g.narrow(c, 1, 1, 2).unwrap();
        let s = g.swap_last2(n).unwrap();
        let l = g.leaky_relu(s, 0.01);
        let m = g.sum_axis(l, 0).unwrap();
        let loss = g.sum(m);
        g.backward(loss).unwrap();
        assert_eq!(g.value(a), &a0);
        assert_eq!(g.value(b), &b0);
    }

    #[test]
    fn shape_plumbing() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = g.swap_last2(a).unwrap();
        assert_eq!(g.value(s).data(), [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let n = g.narrow(a, 1, 1, 2).unwrap();
        assert_eq!(g.value(n).data(), [2.0, 3.0, 5.0, 6.0]);
        let c = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.shape(c), [4, 3]);
        let st = g.stack(&[a, a], 0).unwrap();
        assert_eq!(g.shape(st), [2, 2, 3]);
        let r = g.sum_axis(a, 1).unwrap();
        assert_eq!(g.value(r).data(), [6.0, 15.0]);
        assert!(g.reshape(a, vec![4, 2]).is_err());
    }
}
