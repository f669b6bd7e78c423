//! Parameter-free normalization over instance or batch statistics.

use std::ops::Range;

use crate::element::Element;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which elements share one mean/variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormGroups {
    /// Per sample and channel, over H x W.
    Instance,
    /// Per channel, over N x H x W.
    Batch,
}

/// Per-group statistics of a normalization pass (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn groups(shape: &[usize], kind: NormGroups) -> Vec<Vec<Range<usize>>> {
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    match kind {
        NormGroups::Instance => (0..n * c).map(|g| vec![g * inner..(g + 1) * inner]).collect(),
        NormGroups::Batch => (0..c)
            .map(|ch| (0..n).map(|s| (s * c + ch) * inner..(s * c + ch + 1) * inner).collect())
            .collect(),
    }
}

impl<T: Element> Tape<T> {
    /// `(x - mean) / sqrt(var + eps)` with statistics from the input itself.
    pub fn normalize(&self, x: Var, kind: NormGroups, eps: f64) -> (Var, NormStats) {
        let xv = self.value(x);
        let gs = groups(xv.shape(), kind);
        let mut y = vec![T::zero(); xv.numel()];
        let mut stats = NormStats { mean: Vec::with_capacity(gs.len()), var: Vec::with_capacity(gs.len()) };
        let mut inv_std = Vec::with_capacity(gs.len());
        let xd = xv.data();
        for ranges in &gs {
            let count: usize = ranges.iter().map(|r| r.len()).sum();
            let cnt = T::of(count as f64);
            let mean = ranges.iter().flat_map(|r| xd[r.clone()].iter().copied()).sum::<T>() / cnt;
            let var = ranges
                .iter()
                .flat_map(|r| xd[r.clone()].iter().map(move |&v| (v - mean) * (v - mean)))
                .sum::<T>()
                / cnt;
            let istd = T::one() / (var + T::of(eps)).sqrt();
            for r in ranges {
                for i in r.clone() {
                    y[i] = (xd[i] - mean) * istd;
                }
            }
            stats.mean.push(mean.f64());
            stats.var.push(var.f64());
            inv_std.push(istd);
        }
        let y = Tensor::from_vec(xv.shape(), y).expect("normalize length");
        let var = self.op(&[x], y, move |ctx| {
            let g = ctx.grad.data();
            let xhat = ctx.output.data();
            let mut dx = vec![T::zero(); g.len()];
            for (ranges, &istd) in gs.iter().zip(&inv_std) {
                let count: usize = ranges.iter().map(|r| r.len()).sum();
                let cnt = T::of(count as f64);
                let mut mg = T::zero();
                let mut mgx = T::zero();
                for r in ranges {
                    for i in r.clone() {
                        mg = mg + g[i];
                        mgx = mgx + g[i] * xhat[i];
                    }
                }
                mg = mg / cnt;
                mgx = mgx / cnt;
                for r in ranges {
                    for i in r.clone() {
                        dx[i] = (g[i] - mg - xhat[i] * mgx) * istd;
                    }
                }
            }
            vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dx).expect("dx length"))]
        });
        (var, stats)
    }

    /// Per-channel normalization with fixed (e.g. running) statistics.
    pub fn normalize_with(&self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[1];
        assert_eq!(mean.len(), c, "normalize_with: {} means for {} channels", mean.len(), c);
        let inner: usize = xv.shape()[2..].iter().product();
        let scale: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
        let shift: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let mut y = (*xv).clone();
        for (i, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
            let (m, s) = (shift[i % c], scale[i % c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
        }
        self.op(&[x], y, move |ctx| {
            let mut d = ctx.grad.clone();
            for (i, chunk) in d.data_mut().chunks_mut(inner).enumerate() {
                let s = scale[i % c];
                chunk.iter_mut().for_each(|v| *v = *v * s);
            }
            vec![Some(d)]
        })
    }
}
