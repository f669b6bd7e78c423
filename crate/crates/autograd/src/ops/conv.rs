//! Padding, 2D convolution (im2col + GEMM) and nearest upsampling.

use crate::element::{gemm, Element, MatRef};
use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How the horizontal border is filled. The vertical border is always zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WidthPad {
    Zero,
    /// Wrap around: column `-1` reads column `W-1`.
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub width: WidthPad,
}

impl Padding {
    pub fn uniform(p: usize, width: WidthPad) -> Self {
        Self { top: p, bottom: p, left: p, right: p, width }
    }

    pub fn is_zero(&self) -> bool {
        self.top == 0 && self.bottom == 0 && self.left == 0 && self.right == 0
    }
}

/// Stride and dilation of a convolution applied to an already padded input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self { stride: 1, dilation: 1 }
    }
}

impl ConvGeom {
    /// Output extent along one axis, `None` if the kernel does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        (input >= span).then(|| (input - span) / self.stride + 1)
    }
}

/// Source column for padded column `j`, or `None` for a zero.
fn src_col(j: usize, left: usize, w: usize, mode: WidthPad) -> Option<usize> {
    let rel = j as isize - left as isize;
    match mode {
        WidthPad::Zero => (rel >= 0 && rel < w as isize).then_some(rel as usize),
        WidthPad::Circular => Some(rel.rem_euclid(w as isize) as usize),
    }
}

/// Pad an NCHW tensor (no tape).
pub fn pad_tensor<T: Element>(x: &Tensor<T>, p: Padding) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    if p.width == WidthPad::Circular {
        assert!(p.left <= w && p.right <= w, "circular padding wider than the input");
    }
    let (hp, wp) = (h + p.top + p.bottom, w + p.left + p.right);
    let cols: Vec<Option<usize>> = (0..wp).map(|j| src_col(j, p.left, w, p.width)).collect();
    let mut out = vec![T::zero(); n * c * hp * wp];
    let src = x.data();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        for i in 0..h {
            let srow = &s[i * w..(i + 1) * w];
            let drow = &mut d[(i + p.top) * wp..(i + p.top + 1) * wp];
            for (dv, col) in drow.iter_mut().zip(&cols) {
                if let Some(jj) = *col {
                    *dv = srow[jj];
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, hp, wp], out).expect("padded length")
}

fn unpad_grad<T: Element>(g: &Tensor<T>, shape: &[usize], p: Padding) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (hp, wp) = (h + p.top + p.bottom, w + p.left + p.right);
    let cols: Vec<Option<usize>> = (0..wp).map(|j| src_col(j, p.left, w, p.width)).collect();
    let mut out = vec![T::zero(); n * c * h * w];
    let gd = g.data();
    for plane in 0..n * c {
        let s = &gd[plane * hp * wp..(plane + 1) * hp * wp];
        let d = &mut out[plane * h * w..(plane + 1) * h * w];
        for i in 0..h {
            let srow = &s[(i + p.top) * wp..(i + p.top + 1) * wp];
            let drow = &mut d[i * w..(i + 1) * w];
            for (&gv, col) in srow.iter().zip(&cols) {
                if let Some(jj) = *col {
                    drow[jj] = drow[jj] + gv;
                }
            }
        }
    }
    Tensor::from_vec(shape, out).expect("unpadded length")
}

/// Column matrix `(C·kh·kw, ho·wo)` of a padded image, built row by row.
fn im2col<T: Element>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let (s, d) = (geom.stride, geom.dilation);
    let mut cols = Vec::with_capacity(c * kh * kw * ho * wo);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                for oy in 0..ho {
                    let iy = oy * s + ki * d;
                    let src = &plane[iy * w..(iy + 1) * w];
                    if s == 1 {
                        cols.extend_from_slice(&src[kj * d..kj * d + wo]);
                    } else {
                        cols.extend((0..wo).map(|ox| src[ox * s + kj * d]));
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
    x: &mut [T],
) {
    let p = ho * wo;
    let (s, d) = (geom.stride, geom.dilation);
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = oy * s + ki * d;
                    let drow = &mut plane[iy * w..(iy + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = ox * s + kj * d;
                        drow[ix] = drow[ix] + v;
                    }
                }
            }
        }
    }
}

/// Valid (unpadded) convolution without a tape.
/// `x`: (N, Cin, H, W), `w`: (Cout, Cin, kh, kw), `b`: (Cout).
pub fn conv2d_tensor<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geom: ConvGeom) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
    let ho = geom.out_len(h, kh).unwrap_or_else(|| panic!("conv2d: kernel {kh} taller than input {h}"));
    let wo = geom.out_len(wd, kw).unwrap_or_else(|| panic!("conv2d: kernel {kw} wider than input {wd}"));
    if let Some(b) = b {
        assert_eq!(b.numel(), cout, "conv2d: bias length");
    }
    let k = cin * kh * kw;
    let p = ho * wo;
    let mut out = vec![T::zero(); n * cout * p];
    let xd = x.data();
    let wdata = w.data();
    par::for_each_chunk(&mut out, cout * p, |s, chunk| {
        let cols = im2col(&xd[s * cin * h * wd..(s + 1) * cin * h * wd], (cin, h, wd), (kh, kw), geom, (ho, wo));
        gemm(MatRef::new(wdata, cout, k), MatRef::new(&cols, k, p), chunk, false);
        if let Some(b) = b {
            for (co, row) in chunk.chunks_mut(p).enumerate() {
                let bias = b.data()[co];
                row.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
    });
    Tensor::from_vec(&[n, cout, ho, wo], out).expect("conv output length")
}

/// Nearest-neighbour 2x upsampling without a tape.
pub fn upsample2x_tensor<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for plane in 0..n * c {
        let s = &x.data()[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for i in 0..h2 {
            let srow = &s[(i / 2) * w..(i / 2 + 1) * w];
            for (j, dv) in d[i * w2..(i + 1) * w2].iter_mut().enumerate() {
                *dv = srow[j / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, h2, w2], out).expect("upsample length")
}

impl<T: Element> Tape<T> {
    pub fn pad2d(&self, x: Var, p: Padding) -> Var {
        if p.is_zero() {
            return x;
        }
        let xv = self.value(x);
        let y = pad_tensor(&xv, p);
        self.op(&[x], y, move |ctx| vec![Some(unpad_grad(ctx.grad, ctx.inputs[0].shape(), p))])
    }

    /// Valid convolution of an already padded input.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let y = conv2d_tensor(&xv, &wv, bv.as_deref(), geom);
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.op(&parents, y, move |ctx| {
            let has_bias = ctx.inputs.len() > 2;
            let need_b = has_bias && ctx.needs(2);
            let mut grads = conv2d_backward(ctx.grad, ctx.inputs[0], ctx.inputs[1], geom, ctx.needs(0), ctx.needs(1), need_b);
            if !has_bias {
                grads.truncate(2);
            }
            grads
        })
    }

    pub fn upsample2x(&self, x: Var) -> Var {
        let y = upsample2x_tensor(&self.value(x));
        self.op(&[x], y, |ctx| {
            let (n, c, h, w) = ctx.inputs[0].dims4();
            let w2 = 2 * w;
            let g = ctx.grad.data();
            let mut d = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                let gs = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                let ds = &mut d[plane * h * w..(plane + 1) * h * w];
                for i in 0..2 * h {
                    for j in 0..w2 {
                        let t = &mut ds[(i / 2) * w + j / 2];
                        *t = *t + gs[i * w2 + j];
                    }
                }
            }
            vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), d).expect("upsample grad"))]
        })
    }
}

fn conv2d_backward<T: Element>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeom,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> Vec<Option<Tensor<T>>> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, kh, kw) = w.dims4();
    let (_, _, ho, wo) = g.dims4();
    let k = cin * kh * kw;
    let p = ho * wo;
    let gd = g.data();
    let xd = x.data();

    let dx = need_x.then(|| {
        let mut dx = vec![T::zero(); n * cin * h * wd];
        par::for_each_chunk(&mut dx, cin * h * wd, |s, chunk| {
            let mut dcols = vec![T::zero(); k * p];
            gemm(MatRef::new(w.data(), cout, k).t(), MatRef::new(&gd[s * cout * p..(s + 1) * cout * p], cout, p), &mut dcols, false);
            col2im(&dcols, (cin, h, wd), (kh, kw), geom, (ho, wo), chunk);
        });
        Tensor::from_vec(x.shape(), dx).expect("dx length")
    });

    let dw = need_w.then(|| {
        let partials = par::map_range(n, |s| {
            let cols = im2col(&xd[s * cin * h * wd..(s + 1) * cin * h * wd], (cin, h, wd), (kh, kw), geom, (ho, wo));
            let mut dw = vec![T::zero(); cout * k];
            gemm(MatRef::new(&gd[s * cout * p..(s + 1) * cout * p], cout, p), MatRef::new(&cols, k, p).t(), &mut dw, false);
            dw
        });
        let mut acc = vec![T::zero(); cout * k];
        for part in partials {
            for (a, v) in acc.iter_mut().zip(part) {
                *a = *a + v;
            }
        }
        Tensor::from_vec(w.shape(), acc).expect("dw length")
    });

    let db = need_b.then(|| {
        let mut acc = vec![T::zero(); cout];
        for (i, row) in gd.chunks(p).enumerate() {
            acc[i % cout] = acc[i % cout] + row.iter().copied().sum::<T>();
        }
        Tensor::from_vec(&[cout], acc).expect("db length")
    });

    vec![dx, dw, db]
}
