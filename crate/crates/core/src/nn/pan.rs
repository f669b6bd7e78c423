//! Plane-aware normalization: batch-normalized activations modulated by a
//! learned blend of per-plane style modulation and 3-class layout modulation.

use panofill_autograd::{Binding, Element, NormGroups, NormStats, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, ConvSpec, Linear, NORM_EPS};
use super::planes::{plane_broadcast, StyleCodes};
use crate::raster::LabelMap;

/// Per-channel running statistics for inference-mode normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// Exponential moving average towards a batch's statistics.
    pub fn update(&mut self, batch: &NormStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Batch statistics (training) or stored running statistics (inference).
#[derive(Clone, Copy, Debug)]
pub enum StatsMode<'a> {
    Batch,
    Running(&'a [RunningStats]),
}

/// Which modulation source drives the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modulation {
    /// Blend of style (local) and layout (global) modulation.
    Blend,
    /// Layout modulation only (blend weights forced to 0).
    GlobalOnly,
    /// Learned per-channel affine, no spatial modulation.
    Affine,
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// Always trained.
    Core,
    /// Style encoder, local mapping and blend weights.
    Style,
    /// 3-class layout modulation convolutions.
    Global,
    /// Per-channel affine used only by the backbone variant.
    Affine,
}

/// The spatial modulation maps and blend weights of one block.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams {
    pub gamma_local: Var,
    pub beta_local: Var,
    pub gamma_global: Var,
    pub beta_global: Var,
    pub alpha_gamma: Var,
    pub alpha_beta: Var,
}

/// Style and layout inputs at the block's resolution.
#[derive(Clone, Copy)]
pub struct PanContext<'a> {
    /// One-hot 3-class map, `(N, 3, h, w)`.
    pub layout: Var,
    /// Style codes with plane-wise labels at this resolution.
    pub style: Option<(&'a StyleCodes, &'a [LabelMap])>,
}

#[derive(Clone, Debug)]
pub struct PlaneAwareNorm {
    pub channels: usize,
    global_shared: Conv,
    global_gamma: Conv,
    global_beta: Conv,
    local_fc: Linear,
    local_gamma: Linear,
    local_beta: Linear,
    alpha_gamma: ParamId,
    alpha_beta: ParamId,
    affine_gamma: ParamId,
    affine_beta: ParamId,
}

impl PlaneAwareNorm {
    /// Registers the block's parameters, returning it with each
    /// parameter's [`Branch`].
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        style_dim: usize,
        hidden: usize,
    ) -> (Self, Vec<(ParamId, Branch)>) {
        let first = store.len();
        let global_shared = Conv::new(store, rng, &format!("{name}.global.shared"), ConvSpec::same(3, hidden, 3));
        let global_gamma =
            Conv::new(store, rng, &format!("{name}.global.gamma"), ConvSpec::same(hidden, channels, 3).gain(0.5).bias_init(1.0));
        let global_beta = Conv::new(store, rng, &format!("{name}.global.beta"), ConvSpec::same(hidden, channels, 3).gain(0.5));
        let n_global = store.len();
        let sqrt2 = std::f64::consts::SQRT_2;
        let local_fc = Linear::new(store, rng, &format!("{name}.local.fc"), style_dim, hidden, sqrt2, 0.0);
        let local_gamma = Linear::new(store, rng, &format!("{name}.local.gamma"), hidden, channels, 0.5, 1.0);
        let local_beta = Linear::new(store, rng, &format!("{name}.local.beta"), hidden, channels, 0.5, 0.0);
        let alpha_gamma = store.add(format!("{name}.alpha_gamma"), Tensor::zeros(&[1]));
        let alpha_beta = store.add(format!("{name}.alpha_beta"), Tensor::zeros(&[1]));
        let n_style = store.len();
        let affine_gamma = store.add(format!("{name}.affine.gamma"), Tensor::ones(&[channels]));
        let affine_beta = store.add(format!("{name}.affine.beta"), Tensor::zeros(&[channels]));
        let branches = (first..store.len())
            .map(|i| {
                let b = if i < n_global {
                    Branch::Global
                } else if i < n_style {
                    Branch::Style
                } else {
                    Branch::Affine
                };
                (ParamId(i), b)
            })
            .collect();
        let block = Self {
            channels,
            global_shared,
            global_gamma,
            global_beta,
            local_fc,
            local_gamma,
            local_beta,
            alpha_gamma,
            alpha_beta,
            affine_gamma,
            affine_beta,
        };
        (block, branches)
    }

    /// Layout-driven `(γ', β')`.
    pub fn global_maps<T: Element>(&self, p: &Binding<'_, T>, layout: Var) -> (Var, Var) {
        let h = self.global_shared.forward(p, layout);
        let h = p.tape.relu(h);
        (self.global_gamma.forward(p, h), self.global_beta.forward(p, h))
    }

    /// Style-driven `(γ, β)`: a two-layer mapping of each plane's code,
    /// broadcast over that plane's pixels.
    pub fn local_maps<T: Element>(&self, p: &Binding<'_, T>, codes: &StyleCodes, labels: &[LabelMap]) -> (Var, Var) {
        let t = p.tape;
        let shape = t.shape(codes.codes);
        let (n, planes, s) = (shape[0], shape[1], shape[2]);
        let flat = t.reshape(codes.codes, &[n * planes, s]);
        let h = t.relu(self.local_fc.forward(p, flat));
        let per_plane = |layer: &Linear| {
            let v = layer.forward(p, h);
            let v = t.reshape(v, &[n, planes, self.channels]);
            plane_broadcast(t, v, labels)
        };
        (per_plane(&self.local_gamma), per_plane(&self.local_beta))
    }

    pub fn modulation<T: Element>(&self, p: &Binding<'_, T>, ctx: PanContext<'_>) -> ModulationParams {
        let (gamma_global, beta_global) = self.global_maps(p, ctx.layout);
        let (codes, labels) = ctx.style.expect("blended modulation needs style codes");
        let (gamma_local, beta_local) = self.local_maps(p, codes, labels);
        let alpha_gamma = p.tape.sigmoid(p.get(self.alpha_gamma));
        let alpha_beta = p.tape.sigmoid(p.get(self.alpha_beta));
        ModulationParams { gamma_local, beta_local, gamma_global, beta_global, alpha_gamma, alpha_beta }
    }

    /// `γ* = α_γ·γ_local + (1 − α_γ)·γ'` and likewise for β.
    pub fn blend<T: Element>(p: &Binding<'_, T>, m: &ModulationParams) -> (Var, Var) {
        let t = p.tape;
        let mix = |local: Var, global: Var, alpha: Var| {
            let diff = t.sub(local, global);
            let scaled = t.mul_scalar(diff, alpha);
            t.add(global, scaled)
        };
        (mix(m.gamma_local, m.gamma_global, m.alpha_gamma), mix(m.beta_local, m.beta_global, m.alpha_beta))
    }

    /// Parameter-free normalization of `x` under `stats`; `index` picks the
    /// running statistics of this block.
    pub fn normalize<T: Element>(p: &Binding<'_, T>, x: Var, stats: StatsMode<'_>, index: usize) -> (Var, Option<NormStats>) {
        match stats {
            StatsMode::Batch => {
                let (y, s) = p.tape.normalize(x, NormGroups::Batch, NORM_EPS);
                (y, Some(s))
            }
            StatsMode::Running(r) => (p.tape.normalize_with(x, &r[index].mean, &r[index].var, NORM_EPS), None),
        }
    }

    /// Normalize then modulate. Returns the batch statistics when
    /// normalizing with them.
    pub fn forward<T: Element>(
        &self,
        p: &Binding<'_, T>,
        x: Var,
        mode: Modulation,
        ctx: PanContext<'_>,
        stats: StatsMode<'_>,
        index: usize,
    ) -> (Var, Option<NormStats>) {
        let t = p.tape;
        let (xhat, observed) = Self::normalize(p, x, stats, index);
        let out = match mode {
            Modulation::Affine => {
                let y = t.mul_channel(xhat, p.get(self.affine_gamma));
                t.add_channel(y, p.get(self.affine_beta))
            }
            Modulation::GlobalOnly => {
                let (g, b) = self.global_maps(p, ctx.layout);
                t.add(t.mul(g, xhat), b)
            }
            Modulation::Blend => {
                let m = self.modulation(p, ctx);
                let (g, b) = Self::blend(p, &m);
                t.add(t.mul(g, xhat), b)
            }
        };
        (out, observed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::planes::{one_hot, plane_pool};
    use crate::raster::Grid;
    use panofill_autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f64>, PlaneAwareNorm, Vec<LabelMap>, Vec<LabelMap>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pan, _) = PlaneAwareNorm::new(&mut store, &mut rng, "pan", 4, 3, 5);
        let pw: Vec<LabelMap> = (0..2).map(|s| Grid::from_fn(6, 6, |i, j| if i == 0 { 0 } else if i == 5 { 1 } else { 2 + ((j + s) / 3 % 2) as u8 })).collect();
        let l3 = pw.iter().map(|l| l.map(crate::geometry::plane_class)).collect();
        (store, pan, pw, l3)
    }

    #[test]
    fn alpha_one_uses_local_maps_only() {
        let (mut store, pan, pw, l3) = setup();
        store.set(pan.alpha_gamma, Tensor::full(&[1], 60.0));
        store.set(pan.alpha_beta, Tensor::full(&[1], 60.0));
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &store);
        let feats = tape.constant(Tensor::from_fn(&[2, 3, 6, 6], |i| (i % 11) as f64 * 0.1));
        let codes = plane_pool(&tape, feats, &pw, 6);
        let x = tape.constant(Tensor::from_fn(&[2, 4, 6, 6], |i| ((i * 7) % 13) as f64 * 0.2 - 1.0));
        let ctx = PanContext { layout: tape.constant(one_hot(&l3, 3)), style: Some((&codes, &pw)) };
        let (y, _) = pan.forward(&p, x, Modulation::Blend, ctx, StatsMode::Batch, 0);
        let (xhat, _) = PlaneAwareNorm::normalize(&p, x, StatsMode::Batch, 0);
        let (gl, bl) = pan.local_maps(&p, &codes, &pw);
        let expected = tape.value(tape.add(tape.mul(gl, xhat), bl));
        assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn blend_is_convex_combination() {
        let (store, pan, pw, l3) = setup();
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &store);
        let feats = tape.constant(Tensor::from_fn(&[2, 3, 6, 6], |i| (i % 5) as f64));
        let codes = plane_pool(&tape, feats, &pw, 6);
        let ctx = PanContext { layout: tape.constant(one_hot(&l3, 3)), style: Some((&codes, &pw)) };
        let mut m = pan.modulation(&p, ctx);
        for a in [0.0, 0.3, 1.0] {
            m.alpha_gamma = tape.constant(Tensor::full(&[1], a));
            let (g, _) = PlaneAwareNorm::blend(&p, &m);
            let (gl, gg) = (tape.value(m.gamma_local), tape.value(m.gamma_global));
            let expected = gl.zip_map(&gg, |l, g| a * l + (1.0 - a) * g);
            assert!(tape.value(g).max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn identity_modulation_standardizes() {
        let (mut store, pan, pw, _) = setup();
        store.set(pan.affine_gamma, Tensor::ones(&[4]));
        store.set(pan.affine_beta, Tensor::zeros(&[4]));
        let tape = Tape::new();
        let p = Binding::frozen(&tape, &store);
        let x = tape.constant(Tensor::from_fn(&[2, 4, 6, 6], |i| ((i * 31) % 17) as f64 * 0.7 + 3.0));
        let ctx = PanContext { layout: tape.constant(Tensor::zeros(&[2, 3, 6, 6])), style: None };
        let (y, _) = pan.forward(&p, x, Modulation::Affine, ctx, StatsMode::Batch, 0);
        let y = tape.value(y);
        for c in 0..4 {
            let vals: Vec<f64> = (0..2).flat_map(|s| y.data()[(s * 4 + c) * 36..(s * 4 + c + 1) * 36].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 72.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 72.0;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4);
        }
        let _ = pw;
    }
}
