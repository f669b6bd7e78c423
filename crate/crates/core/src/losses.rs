//! Reconstruction, perceptual, style and hinge adversarial losses.
//!
//! Every L1 term is a mean over elements. Gram matrices are normalized by
//! `C·H·W`.

use std::sync::Arc;

use panofill_autograd::{ConvGeom, Element, Padding, Tape, Tensor, Var, WidthPad};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{normal_tensor, same_padding};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rec: f64,
    pub perc: f64,
    pub sty: f64,
    pub g: f64,
    pub d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 1.0, perc: 0.1, sty: 250.0, g: 0.1, d: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        if [self.rec, self.perc, self.sty, self.g, self.d].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(crate::Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Fixed feature maps `φ_i` of an image batch.
pub trait FeatureExtractor<T: Element>: Send + Sync {
    /// Activations for `(N, 3, H, W)` images in [0, 1], shallow to deep.
    fn layers(&self, tape: &Tape<T>, image: Var) -> Vec<Var>;
}

/// Returns the image itself as the only layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Element> FeatureExtractor<T> for IdentityExtractor {
    fn layers(&self, _: &Tape<T>, image: Var) -> Vec<Var> {
        vec![image]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    /// Output channels per stage; every stage after the first halves the
    /// resolution.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { channels: vec![16, 32, 48, 64], seed: 0x9e37_79b9 }
    }
}

/// A frozen, randomly initialized convolutional pyramid.
#[derive(Clone, Debug)]
pub struct RandomPyramid<T> {
    stages: Vec<(Arc<Tensor<T>>, Arc<Tensor<T>>, ConvGeom, Padding)>,
}

impl<T: Element> RandomPyramid<T> {
    pub fn new(config: &PyramidConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut cin = 3;
        let stages = config
            .channels
            .iter()
            .enumerate()
            .map(|(k, &cout)| {
                let (kernel, geom, pad) = if k == 0 {
                    (3, ConvGeom::default(), same_padding(3, 1))
                } else {
                    (4, ConvGeom { stride: 2, dilation: 1 }, Padding::uniform(1, WidthPad::Circular))
                };
                let fan_in = (cin * kernel * kernel) as f64;
                let w = normal_tensor(&[cout, cin, kernel, kernel], (2.0 / fan_in).sqrt(), &mut rng);
                cin = cout;
                (Arc::new(w), Arc::new(Tensor::zeros(&[cout])), geom, pad)
            })
            .collect();
        Self { stages }
    }
}

impl<T: Element> FeatureExtractor<T> for RandomPyramid<T> {
    fn layers(&self, tape: &Tape<T>, image: Var) -> Vec<Var> {
        let scaled = tape.scale(image, 2.0);
        let mut x = tape.add_scalar(scaled, -1.0);
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b, geom, pad) in &self.stages {
            let xp = tape.pad2d(x, *pad);
            let y = tape.conv2d(xp, tape.constant_shared(w), Some(tape.constant_shared(b)), *geom);
            x = tape.relu(y);
            out.push(x);
        }
        out
    }
}

fn l1_mean<T: Element>(t: &Tape<T>, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    t.mean(t.abs(d))
}

fn sum_all<T: Element>(t: &Tape<T>, terms: Vec<Var>) -> Var {
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one term");
    it.fold(first, |acc, v| t.add(acc, v))
}

/// `mean(|M⊙I_gt − M⊙I_out|) + mean(|I_gt − I_out|)`, `M` as `(N, 1, H, W)`.
pub fn reconstruction_loss<T: Element>(t: &Tape<T>, out: Var, gt: Var, mask: Var) -> Var {
    let diff = t.sub(gt, out);
    let hole = t.mean(t.abs(t.mul_spatial(diff, mask)));
    let all = t.mean(t.abs(diff));
    t.add(hole, all)
}

/// `Σ_i mean(|φ_i(I_gt) − φ_i(I_out)|)`.
pub fn perceptual_loss<T: Element>(t: &Tape<T>, fx: &dyn FeatureExtractor<T>, out: Var, gt: Var) -> Var {
    perceptual_from(t, &fx.layers(t, out), &fx.layers(t, gt))
}

/// `Σ_i mean(|G(φ_i(I_gt)) − G(φ_i(I_out))|)`.
pub fn style_loss<T: Element>(t: &Tape<T>, fx: &dyn FeatureExtractor<T>, out: Var, gt: Var) -> Var {
    style_from(t, &fx.layers(t, out), &fx.layers(t, gt))
}

pub fn perceptual_from<T: Element>(t: &Tape<T>, f_out: &[Var], f_gt: &[Var]) -> Var {
    sum_all(t, f_out.iter().zip(f_gt).map(|(&o, &g)| l1_mean(t, g, o)).collect())
}

pub fn style_from<T: Element>(t: &Tape<T>, f_out: &[Var], f_gt: &[Var]) -> Var {
    sum_all(t, f_out.iter().zip(f_gt).map(|(&o, &g)| l1_mean(t, t.gram(g), t.gram(o))).collect())
}

/// Per-sample Gram matrix `φ φᵀ / (C·H·W)`.
pub fn gram<T: Element>(t: &Tape<T>, features: Var) -> Var {
    t.gram(features)
}

/// `−mean(D(I_out))`.
pub fn gen_adversarial_loss<T: Element>(t: &Tape<T>, scores: Var) -> Var {
    t.scale(t.mean(scores), -1.0)
}

/// `λ_D·(mean(max(0, 1 + D(fake))) + mean(max(0, 1 − D(real))))`.
pub fn disc_hinge_loss<T: Element>(t: &Tape<T>, fake: Var, real: Var, lambda_d: f64) -> Var {
    let f = t.mean(t.relu(t.add_scalar(fake, 1.0)));
    let neg_real = t.scale(real, -1.0);
    let r = t.mean(t.relu(t.add_scalar(neg_real, 1.0)));
    t.scale(t.add(f, r), lambda_d)
}

/// Generator loss terms on one tape.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub rec: Var,
    pub perc: Var,
    pub sty: Var,
    pub g: Var,
}

/// Weighted contribution of each generator term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerms {
    pub rec: f64,
    pub perc: f64,
    pub sty: f64,
    pub g: f64,
}

/// `λ_rec L_rec + λ_perc L_perc + λ_sty L_sty + λ_G L_G`, with the weighted
/// terms it summed.
pub fn total_loss<T: Element>(t: &Tape<T>, c: &LossComponents, w: &LossWeights) -> (Var, WeightedTerms) {
    let parts = [(c.rec, w.rec), (c.perc, w.perc), (c.sty, w.sty), (c.g, w.g)];
    let scaled: Vec<Var> = parts.iter().map(|&(v, k)| t.scale(v, k)).collect();
    let value = |v: Var| t.value(v).item().f64();
    let terms = WeightedTerms { rec: value(scaled[0]), perc: value(scaled[1]), sty: value(scaled[2]), g: value(scaled[3]) };
    (sum_all(t, scaled), terms)
}

/// One logged row of loss values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    #[serde(rename = "L_rec")]
    pub rec: f64,
    #[serde(rename = "L_perc")]
    pub perc: f64,
    #[serde(rename = "L_sty")]
    pub sty: f64,
    #[serde(rename = "L_G")]
    pub g: f64,
    #[serde(rename = "L_D")]
    pub d: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.perc, self.sty, self.g, self.d, self.total].iter().all(|v| v.is_finite())
    }
}
