//! Dense layers, Gram matrices and spectral normalization.

use crate::element::{gemm, Element, MatRef};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One power-iteration step for the largest singular value of `w`
/// viewed as `(rows, numel / rows)`. Returns `(u, v, sigma)`.
pub fn power_iteration<T: Element>(w: &Tensor<T>, u: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    assert_eq!(u.len(), rows, "power_iteration: u length");
    let wd = w.data();
    let mut v = vec![0.0; cols];
    for (r, &ur) in u.iter().enumerate() {
        for (vj, &wv) in v.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
            *vj += ur * wv.f64();
        }
    }
    normalize_vec(&mut v);
    let mut u_new: Vec<f64> = (0..rows)
        .map(|r| wd[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&wv, &vj)| wv.f64() * vj).sum())
        .collect();
    normalize_vec(&mut u_new);
    let sigma = sigma_of(w, &u_new, &v);
    (u_new, v, sigma)
}

fn normalize_vec(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    x.iter_mut().for_each(|v| *v /= n);
}

fn sigma_of<T: Element>(w: &Tensor<T>, u: &[f64], v: &[f64]) -> f64 {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| ur * w.data()[r * cols..(r + 1) * cols].iter().zip(v).map(|(&wv, &vj)| wv.f64() * vj).sum::<f64>())
        .sum()
}

impl<T: Element> Tape<T> {
    /// `x (R, I) -> x w^T + b`, with `w (O, I)` and `b (O)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.shape().len(), 2, "linear: input must be (rows, features)");
        let (r, i) = (xv.shape()[0], xv.shape()[1]);
        let (o, wi) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(i, wi, "linear: {i} features into a layer expecting {wi}");
        let mut y = vec![T::zero(); r * o];
        gemm(MatRef::new(xv.data(), r, i), MatRef::new(wv.data(), o, i).t(), &mut y, false);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.numel(), o, "linear: bias length");
            for row in y.chunks_mut(o) {
                row.iter_mut().zip(bv.data()).for_each(|(v, &bb)| *v = *v + bb);
            }
        }
        let y = Tensor::from_vec(&[r, o], y).expect("linear output");
        let parents: Vec<Var> = b.map_or_else(|| vec![x, w], |b| vec![x, w, b]);
        self.op(&parents, y, move |ctx| {
            let g = ctx.grad.data();
            let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dx = ctx.needs(0).then(|| {
                let mut d = vec![T::zero(); r * i];
                gemm(MatRef::new(g, r, o), MatRef::new(wd, o, i), &mut d, false);
                Tensor::from_vec(&[r, i], d).expect("dx")
            });
            let dw = ctx.needs(1).then(|| {
                let mut d = vec![T::zero(); o * i];
                gemm(MatRef::new(g, r, o).t(), MatRef::new(xd, r, i), &mut d, false);
                Tensor::from_vec(&[o, i], d).expect("dw")
            });
            let mut out = vec![dx, dw];
            if ctx.inputs.len() > 2 {
                out.push(ctx.needs(2).then(|| {
                    let mut d = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    Tensor::from_vec(ctx.inputs[2].shape(), d).expect("db")
                }));
            }
            out
        })
    }

    /// Per-sample Gram matrix `F F^T / (C H W)` of an NCHW activation.
    pub fn gram(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let p = h * w;
        let norm = T::of(1.0 / (c * p) as f64);
        let mut y = vec![T::zero(); n * c * c];
        for s in 0..n {
            let f = &xv.data()[s * c * p..(s + 1) * c * p];
            let out = &mut y[s * c * c..(s + 1) * c * c];
            gemm(MatRef::new(f, c, p), MatRef::new(f, c, p).t(), out, false);
            out.iter_mut().for_each(|v| *v = *v * norm);
        }
        let y = Tensor::from_vec(&[n, c, c], y).expect("gram output");
        self.op(&[x], y, move |ctx| {
            let g = ctx.grad.data();
            let xd = ctx.inputs[0].data();
            let mut dx = vec![T::zero(); n * c * p];
            for s in 0..n {
                let gs = &g[s * c * c..(s + 1) * c * c];
                let sym: Vec<T> = (0..c * c).map(|k| (gs[k] + gs[(k % c) * c + k / c]) * norm).collect();
                gemm(MatRef::new(&sym, c, c), MatRef::new(&xd[s * c * p..(s + 1) * c * p], c, p), &mut dx[s * c * p..(s + 1) * c * p], false);
            }
            vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dx).expect("gram dx"))]
        })
    }

    /// `w / sigma` with `sigma = u^T W v` for fixed singular-vector
    /// estimates `u`, `v`; the gradient flows through `sigma`.
    pub fn spectral_normalize(&self, w: Var, u: &[f64], v: &[f64]) -> Var {
        let wv = self.value(w);
        let rows = wv.shape()[0];
        let cols = wv.numel() / rows;
        assert_eq!((u.len(), v.len()), (rows, cols), "spectral_normalize: vector lengths");
        let sigma = sigma_of(&wv, u, v);
        let inv = T::of(1.0 / sigma);
        let y = wv.map(|x| x * inv);
        let (u, v) = (u.to_vec(), v.to_vec());
        self.op(&[w], y, move |ctx| {
            let g = ctx.grad.data();
            let wn = ctx.output.data();
            // d(W/s) = g/s - (sum g*W/s) / s * u v^T
            let dot: f64 = g.iter().zip(wn).map(|(&a, &b)| a.f64() * b.f64()).sum();
            let k = dot / sigma;
            let d: Vec<T> = (0..rows * cols)
                .map(|idx| T::of(g[idx].f64() / sigma - k * u[idx / cols] * v[idx % cols]))
                .collect();
            vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), d).expect("sn grad"))]
        })
    }
}
