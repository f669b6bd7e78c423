//! Parameterized layers on top of the tape ops.

use panofill_autograd::{Binding, ConvGeom, Element, NormGroups, Padding, ParamId, ParamStore, Tensor, Var, WidthPad};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Normal(0, std) tensor drawn in f64 and cast.
pub fn normal_tensor<T: Element, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// Vertical zero padding and horizontal wrap-around, sized to keep the
/// spatial size of a stride-1 convolution.
pub fn same_padding(kernel: usize, dilation: usize) -> Padding {
    Padding::uniform(dilation * (kernel - 1) / 2, WidthPad::Circular)
}

/// 2D convolution with its own padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub padding: Padding,
}

pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
    pub padding: Padding,
    pub bias: bool,
    /// Initial bias value.
    pub bias_init: f64,
    /// He-normal gain; `sqrt(2)` for ReLU-like successors.
    pub gain: f64,
}

impl ConvSpec {
    /// Stride-1 "same" convolution.
    pub fn same(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            geom: ConvGeom::default(),
            padding: same_padding(kernel, 1),
            bias: true,
            bias_init: 0.0,
            gain: std::f64::consts::SQRT_2,
        }
    }

    pub fn dilated(cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        Self { geom: ConvGeom { stride: 1, dilation }, padding: same_padding(kernel, dilation), ..Self::same(cin, cout, kernel) }
    }

    /// 4x4 stride-2 convolution halving both spatial sizes.
    pub fn down(cin: usize, cout: usize) -> Self {
        Self {
            geom: ConvGeom { stride: 2, dilation: 1 },
            padding: Padding::uniform(1, WidthPad::Circular),
            ..Self::same(cin, cout, 4)
        }
    }

    pub fn gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn bias_init(mut self, v: f64) -> Self {
        self.bias_init = v;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, spec: ConvSpec) -> Self {
        let fan_in = spec.cin * spec.kernel * spec.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(&[spec.cout, spec.cin, spec.kernel, spec.kernel], spec.gain / (fan_in as f64).sqrt(), rng),
        );
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::full(&[spec.cout], T::of(spec.bias_init))));
        Self { weight, bias, geom: spec.geom, padding: spec.padding }
    }

    pub fn forward<T: Element>(&self, p: &Binding<'_, T>, x: Var) -> Var {
        let x = if self.padding.is_zero() { x } else { p.tape.pad2d(x, self.padding) };
        p.tape.conv2d(x, p.get(self.weight), self.bias.map(|b| p.get(b)), self.geom)
    }

    pub fn out_channels<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Fully connected layer on `(rows, features)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        gain: f64,
        bias_init: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), normal_tensor(&[output, input], gain / (input as f64).sqrt(), rng));
        let bias = store.add(format!("{name}.bias"), Tensor::full(&[output], T::of(bias_init)));
        Self { weight, bias }
    }

    pub fn forward<T: Element>(&self, p: &Binding<'_, T>, x: Var) -> Var {
        p.tape.linear(x, p.get(self.weight), Some(p.get(self.bias)))
    }
}

pub const NORM_EPS: f64 = 1e-5;

pub fn instance_norm<T: Element>(p: &Binding<'_, T>, x: Var) -> Var {
    p.tape.normalize(x, NormGroups::Instance, NORM_EPS).0
}
