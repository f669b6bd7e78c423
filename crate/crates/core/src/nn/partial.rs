//! Convolution renormalized over valid pixels, with a propagated validity map.

use panofill_autograd::{conv2d_tensor, pad_tensor, Binding, ConvGeom, Element, Padding, Tape, Tensor, Var};

use super::layers::Conv;
use crate::error::{Error, Result};

/// `Y = W·(X⊙M)·(k²/Σ_window M) + b` where the window holds any valid
/// pixel, `Y = 0` elsewhere; the new validity map marks the former.
///
/// `valid` is `(N, 1, H, W)` with entries in {0, 1} and carries no gradient.
pub fn partial_conv<T: Element>(
    tape: &Tape<T>,
    x: Var,
    valid: &Tensor<T>,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeom,
    padding: Padding,
) -> Result<(Var, Tensor<T>)> {
    let (n, _, h, w) = tape.value(x).dims4();
    if valid.shape() != [n, 1, h, w] {
        return Err(Error::ShapeMismatch { what: "partial_conv validity", expected: vec![n, 1, h, w], got: valid.shape().to_vec() });
    }
    if let Some(v) = valid.data().iter().find(|v| **v != T::zero() && **v != T::one()) {
        return Err(Error::NonBinaryMask(v.f64() as f32));
    }
    let wshape = tape.shape(weight);
    let (kh, kw) = (wshape[2], wshape[3]);
    let (ph, pw) = (h + padding.top + padding.bottom, w + padding.left + padding.right);
    if geom.out_len(ph, kh).is_none() || geom.out_len(pw, kw).is_none() {
        return Err(Error::InvalidArgument(format!("{kh}x{kw} kernel does not fit the padded {ph}x{pw} input")));
    }
    let ones = Tensor::ones(&[1, 1, kh, kw]);
    let winsum = conv2d_tensor(&pad_tensor(valid, padding), &ones, None, geom);
    let taps = (kh * kw) as f64;
    let ratio = winsum.map(|s| if s.f64() > 0.5 { T::of(taps / s.f64()) } else { T::zero() });
    let new_valid = winsum.map(|s| if s.f64() > 0.5 { T::one() } else { T::zero() });

    let vm = tape.constant(valid.clone());
    let masked = tape.mul_spatial(x, vm);
    let padded = if padding.is_zero() { masked } else { tape.pad2d(masked, padding) };
    let raw = tape.conv2d(padded, weight, None, geom);
    let scaled = tape.mul_spatial(raw, tape.constant(ratio));
    let y = match bias {
        Some(b) => {
            let shifted = tape.add_channel(scaled, b);
            tape.mul_spatial(shifted, tape.constant(new_valid.clone()))
        }
        None => scaled,
    };
    Ok((y, new_valid))
}

/// A [`Conv`] evaluated as a partial convolution.
#[derive(Clone, Debug)]
pub struct PartialConv(pub Conv);

impl PartialConv {
    pub fn forward<T: Element>(&self, p: &Binding<'_, T>, x: Var, valid: &Tensor<T>) -> Result<(Var, Tensor<T>)> {
        let c = &self.0;
        partial_conv(p.tape, x, valid, p.get(c.weight), c.bias.map(|b| p.get(b)), c.geom, c.padding)
    }
}
