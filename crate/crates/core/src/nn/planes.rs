//! Plane-wise average pooling into style codes and broadcasting them back.

use std::collections::BTreeMap;

use panofill_autograd::{Element, Tape, Tensor, Var};

use crate::raster::LabelMap;

/// Per-plane codes for a batch: a `(N, P, S)` tensor on the tape plus which
/// planes actually had pixels to pool.
#[derive(Clone, Debug)]
pub struct StyleCodes {
    pub codes: Var,
    /// `present[n][p]`; absent planes hold zero codes.
    pub present: Vec<Vec<bool>>,
}

impl StyleCodes {
    /// Codes of the present planes of sample `n`, keyed by plane id.
    pub fn to_map<T: Element>(&self, tape: &Tape<T>, n: usize) -> BTreeMap<u8, Vec<f64>> {
        let v = tape.value(self.codes);
        let (p, s) = (v.shape()[1], v.shape()[2]);
        (0..p)
            .filter(|&k| self.present[n][k])
            .map(|k| (k as u8, v.data()[(n * p + k) * s..(n * p + k + 1) * s].iter().map(|x| x.f64()).collect()))
            .collect()
    }

    /// Plane ids that some label map uses but that had no code to pool.
    pub fn missing(&self, labels: &[LabelMap]) -> Vec<(usize, u8)> {
        let mut out = Vec::new();
        for (n, l) in labels.iter().enumerate() {
            let mut seen = [false; 256];
            for &id in l.data() {
                seen[id as usize] = true;
            }
            for id in 0..256 {
                let have = self.present[n].get(id).copied().unwrap_or(false);
                if seen[id] && !have {
                    out.push((n, id as u8));
                }
            }
        }
        out
    }
}

/// Number of plane slots needed for a batch of label maps.
pub fn plane_count(labels: &[LabelMap]) -> usize {
    labels.iter().flat_map(|l| l.data().iter()).map(|&v| v as usize + 1).max().unwrap_or(1)
}

fn check_labels(shape: &[usize], labels: &[LabelMap], what: &str) -> (usize, usize, usize) {
    let (n, h, w) = (shape[0], shape[shape.len() - 2], shape[shape.len() - 1]);
    assert_eq!(labels.len(), n, "{what}: {} label maps for batch {n}", labels.len());
    for l in labels {
        assert_eq!(l.dims(), (h, w), "{what}: label map {:?} for features {h}x{w}", l.dims());
    }
    (n, h, w)
}

/// `code[n][p][c]` = mean of `F[n, c, i, j]` over pixels labeled `p`.
pub fn plane_pool<T: Element>(tape: &Tape<T>, features: Var, labels: &[LabelMap], n_planes: usize) -> StyleCodes {
    let fv = tape.value(features);
    let c = fv.shape()[1];
    let (n, h, w) = check_labels(fv.shape(), labels, "plane_pool");
    let hw = h * w;
    let counts: Vec<Vec<usize>> = labels
        .iter()
        .map(|l| {
            let mut k = vec![0usize; n_planes];
            for &id in l.data() {
                assert!((id as usize) < n_planes, "plane id {id} beyond {n_planes} slots");
                k[id as usize] += 1;
            }
            k
        })
        .collect();
    let mut out = vec![T::zero(); n * n_planes * c];
    let fd = fv.data();
    for s in 0..n {
        let lab = labels[s].data();
        for ch in 0..c {
            let plane = &fd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for (&id, &v) in lab.iter().zip(plane) {
                let o = &mut out[(s * n_planes + id as usize) * c + ch];
                *o = *o + v;
            }
        }
        for p in 0..n_planes {
            if counts[s][p] > 0 {
                let inv = T::of(1.0 / counts[s][p] as f64);
                out[(s * n_planes + p) * c..(s * n_planes + p + 1) * c].iter_mut().for_each(|v| *v = *v * inv);
            }
        }
    }
    let present = counts.iter().map(|k| k.iter().map(|&v| v > 0).collect()).collect();
    let y = Tensor::from_vec(&[n, n_planes, c], out).expect("codes length");
    let labels: Vec<Vec<u8>> = labels.iter().map(|l| l.data().to_vec()).collect();
    let codes = tape.op(&[features], y, move |ctx| {
        let g = ctx.grad.data();
        let mut d = vec![T::zero(); n * c * hw];
        for s in 0..n {
            for ch in 0..c {
                let dst = &mut d[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (o, &id) in dst.iter_mut().zip(&labels[s]) {
                    let p = id as usize;
                    *o = g[(s * n_planes + p) * c + ch] * T::of(1.0 / counts[s][p] as f64);
                }
            }
        }
        vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), d).expect("pool grad"))]
    });
    StyleCodes { codes, present }
}

/// `out[n, c, i, j] = codes[n, l(i, j), c]`.
pub fn plane_broadcast<T: Element>(tape: &Tape<T>, codes: Var, labels: &[LabelMap]) -> Var {
    let cv = tape.value(codes);
    let (n, p, c) = (cv.shape()[0], cv.shape()[1], cv.shape()[2]);
    assert_eq!(labels.len(), n, "plane_broadcast: {} label maps for batch {n}", labels.len());
    let (h, w) = labels[0].dims();
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    let cd = cv.data();
    for s in 0..n {
        assert_eq!(labels[s].dims(), (h, w), "plane_broadcast: label maps differ in size");
        let lab = labels[s].data();
        for ch in 0..c {
            let dst = &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for (o, &id) in dst.iter_mut().zip(lab) {
                assert!((id as usize) < p, "plane id {id} beyond {p} code slots");
                *o = cd[(s * p + id as usize) * c + ch];
            }
        }
    }
    let y = Tensor::from_vec(&[n, c, h, w], out).expect("broadcast length");
    let labels: Vec<Vec<u8>> = labels.iter().map(|l| l.data().to_vec()).collect();
    tape.op(&[codes], y, move |ctx| {
        let g = ctx.grad.data();
        let mut d = vec![T::zero(); n * p * c];
        for s in 0..n {
            for ch in 0..c {
                let src = &g[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (&v, &id) in src.iter().zip(&labels[s]) {
                    let o = &mut d[(s * p + id as usize) * c + ch];
                    *o = *o + v;
                }
            }
        }
        vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), d).expect("broadcast grad"))]
    })
}

/// One-hot `(N, K, H, W)` encoding of label maps with `K` classes.
pub fn one_hot<T: Element>(labels: &[LabelMap], classes: usize) -> Tensor<T> {
    let (h, w) = labels[0].dims();
    let hw = h * w;
    let mut out = vec![T::zero(); labels.len() * classes * hw];
    for (s, l) in labels.iter().enumerate() {
        for (i, &id) in l.data().iter().enumerate() {
            assert!((id as usize) < classes, "label {id} beyond {classes} classes");
            out[(s * classes + id as usize) * hw + i] = T::one();
        }
    }
    Tensor::from_vec(&[labels.len(), classes, h, w], out).expect("one-hot length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;

    fn labels() -> LabelMap {
        Grid::from_fn(4, 6, |i, j| match i {
            0 => 0,
            3 => 1,
            _ => 2 + (j / 3) as u8,
        })
    }

    #[test]
    fn piecewise_constant_pooling() {
        let l = labels();
        let tape = Tape::<f64>::new();
        let f = Tensor::from_fn(&[1, 1, 4, 6], |k| match l.data()[k] {
            0 => 1.0,
            1 => 2.0,
            _ => 3.0,
        });
        let fv = tape.constant(f.clone());
        let codes = plane_pool(&tape, fv, std::slice::from_ref(&l), 4);
        let map = codes.to_map(&tape, 0);
        assert_eq!(map[&0], vec![1.0]);
        assert_eq!(map[&1], vec![2.0]);
        assert_eq!(map[&2], vec![3.0]);
        assert_eq!(map[&3], vec![3.0]);
        let back = plane_broadcast(&tape, codes.codes, std::slice::from_ref(&l));
        assert_eq!(*tape.value(back), f);
    }

    #[test]
    fn absent_planes_are_zero_and_flagged() {
        let l = Grid::filled(2, 2, 1u8);
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::full(&[1, 2, 2, 2], 5.0));
        let codes = plane_pool(&tape, f, std::slice::from_ref(&l), 3);
        assert_eq!(codes.present[0], vec![false, true, false]);
        assert_eq!(tape.value(codes.codes).data(), &[0.0, 0.0, 5.0, 5.0, 0.0, 0.0]);
        let finer = Grid::from_fn(2, 2, |i, _| if i == 0 { 1 } else { 2 });
        assert_eq!(codes.missing(&[finer]), vec![(0, 2)]);
    }

    #[test]
    fn single_plane_broadcast_is_constant() {
        let tape = Tape::<f64>::new();
        let codes = tape.constant(Tensor::from_vec(&[1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let out = plane_broadcast(&tape, codes, &[Grid::filled(3, 5, 0u8)]);
        let v = tape.value(out);
        for c in 0..3 {
            assert!(v.data()[c * 15..(c + 1) * 15].iter().all(|&x| x == [0.5, -1.0, 2.0][c]));
        }
    }
}
