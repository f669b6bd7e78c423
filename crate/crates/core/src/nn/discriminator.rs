//! Patch discriminator with spectrally normalized convolutions.

use panofill_autograd::{power_iteration, Binding, Element, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{Conv, ConvSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Number of stride-2 stages.
    pub n_layers: usize,
    /// Channel cap.
    pub max_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self { base_channels: 16, n_layers: 4, max_channels: 128 }
    }

    pub fn paper() -> Self {
        Self { base_channels: 64, n_layers: 4, max_channels: 512 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.n_layers == 0 || self.max_channels == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        Ok(())
    }

    /// Smallest input side the stride-2 stack accepts.
    pub fn min_size(&self) -> usize {
        1 << self.n_layers
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    pub config: DiscriminatorConfig,
    layers: Vec<Conv>,
}

impl DiscriminatorNet {
    pub fn new<T: Element>(config: DiscriminatorConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = |k: usize| (config.base_channels << k).min(config.max_channels);
        let mut layers = Vec::new();
        let mut cin = 3;
        for k in 0..config.n_layers {
            layers.push(Conv::new(store, &mut rng, &format!("disc.conv{k}"), ConvSpec::down(cin, ch(k))));
            cin = ch(k);
        }
        layers.push(Conv::new(store, &mut rng, "disc.head", ConvSpec::same(cin, 1, 3).gain(1.0)));
        Ok(Self { config, layers })
    }

    /// Initial left singular-vector estimates, one per layer.
    pub fn init_vectors<T: Element>(&self, store: &ParamStore<T>, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        self.layers
            .iter()
            .map(|l| {
                let rows = store.get(l.weight).shape()[0];
                let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                u.iter_mut().for_each(|v| *v /= n);
                u
            })
            .collect()
    }

    /// Singular-vector pairs `(u, v)` per layer for the current weights.
    /// With `power_step`, one power iteration refines each `u` first.
    pub fn vectors<T: Element>(&self, store: &ParamStore<T>, u: &[Vec<f64>], power_step: bool) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .zip(u)
            .map(|(layer, uk)| {
                let w = store.get(layer.weight);
                if power_step {
                    let (u2, v2, _) = power_iteration(&**w, uk);
                    (u2, v2)
                } else {
                    (uk.clone(), right_vector(&**w, uk))
                }
            })
            .collect()
    }

    /// Score map for images in [0, 1], normalizing each layer with `uv`.
    pub fn forward<T: Element>(&self, p: &Binding<'_, T>, image: Var, uv: &[(Vec<f64>, Vec<f64>)]) -> Result<Var> {
        let t = p.tape;
        let shape = t.shape(image);
        let min = self.config.min_size();
        if shape.len() != 4 || shape[1] != 3 || shape[2] < min || shape[3] < min {
            return Err(Error::ImageTooSmall { window: min, height: shape.get(2).copied().unwrap_or(0), width: shape.get(3).copied().unwrap_or(0) });
        }
        let scaled = t.scale(image, 2.0);
        let mut x = t.add_scalar(scaled, -1.0);
        let last = self.layers.len() - 1;
        for (k, (layer, (uk, vk))) in self.layers.iter().zip(uv).enumerate() {
            let wn = t.spectral_normalize(p.get(layer.weight), uk, vk);
            let xp = t.pad2d(x, layer.padding);
            let y = t.conv2d(xp, wn, layer.bias.map(|b| p.get(b)), layer.geom);
            x = if k == last { y } else { t.leaky_relu(y, 0.2) };
        }
        if !t.value(x).is_finite() {
            return Err(Error::NonFinite("discriminator scores".into()));
        }
        Ok(x)
    }

    /// Total stride of the stack.
    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.geom.stride).product()
    }
}

fn right_vector<T: Element>(w: &Tensor<T>, u: &[f64]) -> Vec<f64> {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let mut v = vec![0.0; cols];
    for (r, &ur) in u.iter().enumerate() {
        for (vj, &wv) in v.iter_mut().zip(&w.data()[r * cols..(r + 1) * cols]) {
            *vj += ur * wv.f64();
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Discriminator parameters plus power-iteration state.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub net: DiscriminatorNet,
    pub params: ParamStore<T>,
    pub u: Vec<Vec<f64>>,
}

impl<T: Element> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = DiscriminatorNet::new(config, &mut params, seed)?;
        let u = net.init_vectors(&params, seed);
        Ok(Self { net, params, u })
    }

    /// Scores without touching any state.
    pub fn score(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let p = Binding::frozen(&tape, &self.params);
        let x = tape.constant(images.clone());
        let uv = self.net.vectors(&self.params, &self.u, false);
        let y = self.net.forward(&p, x, &uv)?;
        Ok((*tape.value(y)).clone())
    }
}

