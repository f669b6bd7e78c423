use crate::element::Element;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn same_shape(op: &str, a: &[usize], b: &[usize]) {
    assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
}

impl<T: Element> Tape<T> {
    /// Elementwise map with derivative `dy/dx = deriv(x, y)`.
    fn unary(&self, x: Var, f: impl Fn(T) -> T, deriv: impl Fn(T, T) -> T + 'static) -> Var {
        let xv = self.value(x);
        let y = xv.map(f);
        self.op(&[x], y, move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let dx: Vec<T> = (0..g.len()).map(|i| g[i] * deriv(x[i], y[i])).collect();
            vec![Some(Tensor::from_vec(ctx.grad.shape(), dx).expect("same length"))]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av.shape(), bv.shape());
        let y = av.zip_map(&bv, |p, q| p + q);
        self.op(&[a, b], y, |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av.shape(), bv.shape());
        let y = av.zip_map(&bv, |p, q| p - q);
        self.op(&[a, b], y, |ctx| {
            let neg = if ctx.needs(1) { Some(ctx.grad.map(|g| -g)) } else { None };
            vec![Some(ctx.grad.clone()), neg]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av.shape(), bv.shape());
        let y = av.zip_map(&bv, |p, q| p * q);
        self.op(&[a, b], y, |ctx| {
            let da = ctx.needs(0).then(|| ctx.grad.zip_map(ctx.inputs[1], |g, q| g * q));
            let db = ctx.needs(1).then(|| ctx.grad.zip_map(ctx.inputs[0], |g, p| g * p));
            vec![da, db]
        })
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, move |v| v + c, |_, _| T::one())
    }

    /// `|x|`, with derivative 0 at the kink.
    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// `s * x` for a single-element `s`.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.numel(), 1, "mul_scalar: scale must have one element");
        let k = sv.item();
        let y = xv.map(|v| v * k);
        self.op(&[x, s], y, |ctx| {
            let k = ctx.inputs[1].item();
            let dx = ctx.needs(0).then(|| ctx.grad.map(|g| g * k));
            let ds = ctx.needs(1).then(|| {
                let dot: T = ctx.grad.data().iter().zip(ctx.inputs[0].data()).map(|(&g, &v)| g * v).sum();
                Tensor::from_vec(ctx.inputs[1].shape(), vec![dot]).expect("scalar")
            });
            vec![dx, ds]
        })
    }

    /// `x[n, c, ..] + b[c]`.
    pub fn add_channel(&self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let (n, c, inner) = channel_layout(xv.shape());
        assert_eq!(bv.numel(), c, "add_channel: {} biases for {} channels", bv.numel(), c);
        let mut y = (*xv).clone();
        for (i, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
            let bias = bv.data()[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
        let _ = n;
        self.op(&[x, b], y, move |ctx| {
            let db = ctx.needs(1).then(|| {
                let mut acc = vec![T::zero(); c];
                for (i, chunk) in ctx.grad.data().chunks(inner).enumerate() {
                    acc[i % c] = acc[i % c] + chunk.iter().copied().sum::<T>();
                }
                Tensor::from_vec(ctx.inputs[1].shape(), acc).expect("bias length")
            });
            vec![Some(ctx.grad.clone()), db]
        })
    }

    /// `x[n, c, ..] * g[c]`.
    pub fn mul_channel(&self, x: Var, g: Var) -> Var {
        let (xv, gv) = (self.value(x), self.value(g));
        let (_, c, inner) = channel_layout(xv.shape());
        assert_eq!(gv.numel(), c, "mul_channel: {} scales for {} channels", gv.numel(), c);
        let mut y = (*xv).clone();
        for (i, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
            let k = gv.data()[i % c];
            chunk.iter_mut().for_each(|v| *v = *v * k);
        }
        self.op(&[x, g], y, move |ctx| {
            let gd = ctx.inputs[1].data();
            let dx = ctx.needs(0).then(|| {
                let mut d = ctx.grad.clone();
                for (i, chunk) in d.data_mut().chunks_mut(inner).enumerate() {
                    let k = gd[i % c];
                    chunk.iter_mut().for_each(|v| *v = *v * k);
                }
                d
            });
            let dg = ctx.needs(1).then(|| {
                let mut acc = vec![T::zero(); c];
                for (i, (gc, xc)) in ctx.grad.data().chunks(inner).zip(ctx.inputs[0].data().chunks(inner)).enumerate() {
                    let dot: T = gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                    acc[i % c] = acc[i % c] + dot;
                }
                Tensor::from_vec(ctx.inputs[1].shape(), acc).expect("scale length")
            });
            vec![dx, dg]
        })
    }

    /// `x[n, c, h, w] * m[n, 0, h, w]`: a single-channel map broadcast over channels.
    pub fn mul_spatial(&self, x: Var, m: Var) -> Var {
        let (xv, mv) = (self.value(x), self.value(m));
        let (n, c, h, w) = xv.dims4();
        assert_eq!(mv.shape(), &[n, 1, h, w], "mul_spatial: map shape {:?} for input {:?}", mv.shape(), xv.shape());
        let hw = h * w;
        let mut y = (*xv).clone();
        for (i, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
            let mm = &mv.data()[(i / c) * hw..(i / c + 1) * hw];
            chunk.iter_mut().zip(mm).for_each(|(v, &k)| *v = *v * k);
        }
        self.op(&[x, m], y, move |ctx| {
            let md = ctx.inputs[1].data();
            let dx = ctx.needs(0).then(|| {
                let mut d = ctx.grad.clone();
                for (i, chunk) in d.data_mut().chunks_mut(hw).enumerate() {
                    let mm = &md[(i / c) * hw..(i / c + 1) * hw];
                    chunk.iter_mut().zip(mm).for_each(|(v, &k)| *v = *v * k);
                }
                d
            });
            let dm = ctx.needs(1).then(|| {
                let mut acc = vec![T::zero(); n * hw];
                for (i, (gc, xc)) in ctx.grad.data().chunks(hw).zip(ctx.inputs[0].data().chunks(hw)).enumerate() {
                    let dst = &mut acc[(i / c) * hw..(i / c + 1) * hw];
                    for ((d, &g), &v) in dst.iter_mut().zip(gc).zip(xc) {
                        *d = *d + g * v;
                    }
                }
                Tensor::from_vec(ctx.inputs[1].shape(), acc).expect("map length")
            });
            vec![dx, dm]
        })
    }

    pub fn sum(&self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.op(&[x], y, |ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))])
    }

    pub fn mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.numel() as f64);
        let y = Tensor::scalar(xv.sum() / n);
        self.op(&[x], y, move |ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item() / n))])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let y = (*self.value(x)).clone().reshaped(shape).expect("reshape preserves element count");
        self.op(&[x], y, |ctx| {
            vec![Some(ctx.grad.clone().reshaped(ctx.inputs[0].shape()).expect("same count"))]
        })
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_channels: no inputs");
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let (n, _, h, w) = values[0].dims4();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat_channels: spatial/batch mismatch");
                vc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (v, &c) in values.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let y = Tensor::from_vec(&[n, total, h, w], out).expect("concat length");
        self.op(parts, y, move |ctx| {
            let g = ctx.grad.data();
            let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
            for s in 0..n {
                let mut off = s * total * hw;
                for (k, &c) in chans.iter().enumerate() {
                    grads[k].extend_from_slice(&g[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .enumerate()
                .map(|(k, (d, &c))| ctx.needs(k).then(|| Tensor::from_vec(&[n, c, h, w], d).expect("part length")))
                .collect()
        })
    }
}

/// `(batch, channels, elements per channel)` for a tensor of rank >= 2.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected (N, C, ...) tensor, got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}
