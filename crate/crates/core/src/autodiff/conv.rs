//! 2-D convolution (im2col + GEMM) and 2×2 max-pooling.

use super::graph::{Graph, Kink, Var};
use crate::error::{Error, Result};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Per-side zero padding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const fn same(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub const fn hw(h: usize, w: usize) -> Self {
        Padding {
            top: h,
            bottom: h,
            left: w,
            right: w,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: Padding,
    sh: usize,
    sw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Real>(&self, img: &[T], col: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * cols..][..cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.sh + ki) as isize - self.pad.top as isize;
                        let line = &mut dst[oy * self.wo..][..self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.sw + kj) as isize - self.pad.left as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, col: &[T], img: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * cols..][..cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.sh + ki) as isize - self.pad.top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.sw + kj) as isize - self.pad.left as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Views a rank-3 `[C,H,W]` or rank-4 `[B,C,H,W]` shape as `(B, C, H, W)`.
fn batch_view(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(op, format!("expected [C,H,W] or [B,C,H,W], got {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `input` (`[C,H,W]` or `[B,C,H,W]`) with
    /// `kernel[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: Padding, stride: (usize, usize)) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (batch, cin, h, w) = batch_view("conv2d", &in_shape)?;
        let ks = self.shape(kernel).to_vec();
        let [cout, kcin, kh, kw] = ks[..] else {
            return Err(Error::dim("conv2d", format!("kernel must be rank 4, got {ks:?}")));
        };
        if kcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("kernel expects {kcin} input channels, input has {cin}"),
            ));
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
        if ph < kh || pw < kw {
            return Err(Error::dim(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel {kh}x{kw}"),
            ));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            pad,
            sh,
            sw,
            ho: (ph - kh) / sh + 1,
            wo: (pw - kw) / sw + 1,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::zero(); batch * cout * cols];
        let mut col = vec![T::zero(); rows * cols];
        for b in 0..batch {
            geom.im2col(&x[b * cin * h * w..][..cin * h * w], &mut col);
            gemm(false, false, cout, cols, rows, k, &col, &mut out[b * cout * cols..][..cout * cols], false);
        }
        let out_shape = if in_shape.len() == 3 {
            vec![cout, geom.ho, geom.wo]
        } else {
            vec![batch, cout, geom.ho, geom.wo]
        };
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            &[input, kernel],
            Box::new(move |c| {
                let x = c.inputs[0].data();
                let k = c.inputs[1].data();
                let g = c.grad.data();
                let mut dx = c.needs[0].then(|| vec![T::zero(); x.len()]);
                let mut dk = c.needs[1].then(|| vec![T::zero(); k.len()]);
                let mut col = vec![T::zero(); rows * cols];
                for b in 0..batch {
                    let gb = &g[b * cout * cols..][..cout * cols];
                    if let Some(dk) = dk.as_mut() {
                        geom.im2col(&x[b * cin * h * w..][..cin * h * w], &mut col);
                        gemm(false, true, cout, rows, cols, gb, &col, dk, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(true, false, rows, cols, cout, k, gb, &mut col, false);
                        geom.col2im_add(&col, &mut dx[b * cin * h * w..][..cin * h * w]);
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_parts(c.inputs[0].shape().to_vec(), d)),
                    dk.map(|d| Tensor::from_parts(c.inputs[1].shape().to_vec(), d)),
                ]
            }),
        ))
    }

    /// 2×2 max-pooling with stride 2 (floor on odd extents). Gradient flows to
    /// the first row-major maximum of each window.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (batch, ch, h, w) = batch_view("maxpool2d", &in_shape)?;
        if h < 2 || w < 2 {
            return Err(Error::dim("maxpool2d", format!("spatial extent {h}x{w} below 2x2")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(batch * ch * ho * wo);
        let mut argmax = Vec::with_capacity(batch * ch * ho * wo);
        let mut gap = T::infinity();
        for plane in 0..batch * ch {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    let mut second = T::neg_infinity();
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            second = x[best];
                            best = idx;
                        } else if x[idx] > second {
                            second = x[idx];
                        }
                    }
                    gap = gap.min(x[best] - second);
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        self.note_kink(Kink::Tie, gap);
        let out_shape = if in_shape.len() == 3 {
            vec![ch, ho, wo]
        } else {
            vec![batch, ch, ho, wo]
        };
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            &[input],
            Box::new(move |c| {
                let mut dx = vec![T::zero(); c.inputs[0].numel()];
                for (&src, &g) in argmax.iter().zip(c.grad.data()) {
                    dx[src as usize] = dx[src as usize] + g;
                }
                vec![Some(Tensor::from_parts(c.inputs[0].shape().to_vec(), dx))]
            }),
        ))
    }
}
