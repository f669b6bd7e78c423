//! Encoder / plane-aware decoder generator and its partial-convolution
//! style encoder.

use panofill_autograd::{Binding, Element, NormStats, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{instance_norm, Conv, ConvSpec};
use super::pan::{Branch, Modulation, PanContext, PlaneAwareNorm, RunningStats, StatsMode};
use super::partial::PartialConv;
use super::planes::{one_hot, plane_count, plane_pool, StyleCodes};
use crate::error::{Error, Result};
use crate::geometry::LayoutMaps;
use crate::raster::{BinaryMask, LabelMap, Panorama};

/// Which guidance the generator uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No layout input; normalization with a per-channel affine.
    Backbone,
    /// Layout map input and layout-driven modulation only.
    LayoutMapOnly,
    /// Layout map, layout modulation and per-plane style modulation.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Backbone, Variant::LayoutMapOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Backbone => "backbone",
            Variant::LayoutMapOnly => "layout_map_only",
            Variant::Full => "full",
        }
    }

    pub fn uses(self, branch: Branch) -> bool {
        match (self, branch) {
            (_, Branch::Core) => true,
            (Variant::Backbone, b) => b == Branch::Affine,
            (Variant::LayoutMapOnly, b) => b == Branch::Global,
            (Variant::Full, b) => b == Branch::Global || b == Branch::Style,
        }
    }

    fn modulation(self) -> Modulation {
        match self {
            Variant::Backbone => Modulation::Affine,
            Variant::LayoutMapOnly => Modulation::GlobalOnly,
            Variant::Full => Modulation::Blend,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected backbone, layout_map_only or full)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Set from the surrounding training configuration, never read from a
    /// `[generator]` table.
    #[serde(skip)]
    pub height: usize,
    #[serde(skip)]
    pub width: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution stage, full resolution first;
    /// one more entry than `n_downsample`.
    pub channel_mults: Vec<usize>,
    pub n_downsample: usize,
    pub n_dilated_blocks: usize,
    pub dilation: usize,
    /// Plane-aware residual blocks at the bottleneck of the decoder.
    pub n_decoder_blocks: usize,
    pub style_dim: usize,
    /// Hidden width of the modulation mappings.
    pub pan_hidden: usize,
    /// Kernel size of the full-resolution stem and output convolutions.
    pub edge_kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// 128x64 desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            height: 64,
            width: 128,
            base_channels: 16,
            channel_mults: vec![1, 2, 4],
            n_downsample: 2,
            n_dilated_blocks: 8,
            dilation: 2,
            n_decoder_blocks: 1,
            style_dim: 64,
            pan_hidden: 32,
            edge_kernel: 3,
        }
    }

    /// 512x256 widths.
    pub fn paper() -> Self {
        Self {
            height: 256,
            width: 512,
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            n_downsample: 2,
            n_dilated_blocks: 8,
            dilation: 2,
            n_decoder_blocks: 2,
            style_dim: 512,
            pan_hidden: 128,
            edge_kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let f = 1 << self.n_downsample;
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) || self.height == 0 || self.width == 0 {
            return bad(format!("{}x{} is not divisible by 2^{}", self.height, self.width, self.n_downsample));
        }
        if self.n_dilated_blocks < 1 {
            return bad("n_dilated_blocks must be at least 1".into());
        }
        if self.channel_mults.len() != self.n_downsample + 1 || self.channel_mults.contains(&0) {
            return bad(format!("channel_mults needs {} positive entries", self.n_downsample + 1));
        }
        if self.edge_kernel.is_multiple_of(2) {
            return bad(format!("edge_kernel must be odd, got {}", self.edge_kernel));
        }
        if self.base_channels == 0 || self.style_dim == 0 || self.pan_hidden == 0 || self.dilation == 0 {
            return bad("channel counts and dilation must be positive".into());
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels * self.channel_mults[stage]
    }
}

/// Batched generator inputs.
#[derive(Clone, Debug)]
pub struct GenInputs<T> {
    /// Masked image `I_in`, `(N, 3, H, W)`.
    pub image: Tensor<T>,
    /// `M`, `(N, 1, H, W)`, 1 = missing.
    pub mask: Tensor<T>,
    /// `L_m`, `(N, 1, H, W)`.
    pub boundary: Tensor<T>,
    pub three_class: Vec<LabelMap>,
    pub plane_wise: Vec<LabelMap>,
}

impl<T: Element> GenInputs<T> {
    pub fn new(images_in: &[Panorama], masks: &[BinaryMask], maps: &[&LayoutMaps]) -> Result<Self> {
        let n = images_in.len();
        if masks.len() != n || maps.len() != n || n == 0 {
            return Err(Error::InvalidArgument(format!("batch of {n} images, {} masks, {} layouts", masks.len(), maps.len())));
        }
        let dims = images_in[0].dims();
        for k in 0..n {
            let all = [images_in[k].dims(), masks[k].dims(), maps[k].boundary.dims(), maps[k].three_class.dims()];
            if all.iter().any(|&d| d != dims) {
                return Err(Error::ShapeMismatch { what: "generator inputs", expected: vec![dims.0, dims.1], got: vec![] });
            }
            if !masks[k].is_binary() {
                return Err(Error::NonBinaryMask(*masks[k].data().iter().max().unwrap_or(&0) as f32));
            }
        }
        let stack = |ts: Vec<Tensor<T>>| Tensor::stack(&ts).expect("uniform shapes");
        Ok(Self {
            image: stack(images_in.iter().map(|i| i.to_tensor()).collect()),
            mask: stack(masks.iter().map(|m| m.to_tensor()).collect()),
            boundary: stack(maps.iter().map(|m| m.boundary.to_tensor()).collect()),
            three_class: maps.iter().map(|m| m.three_class.clone()).collect(),
            plane_wise: maps.iter().map(|m| m.plane_wise.clone()).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image.shape()[2], self.image.shape()[3])
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

#[derive(Clone, Debug)]
struct PanResBlock {
    norm_a: PlaneAwareNorm,
    conv_a: Conv,
    norm_b: PlaneAwareNorm,
    conv_b: Conv,
}

#[derive(Clone, Debug)]
struct UpBlock {
    conv: Conv,
    norm: PlaneAwareNorm,
}

/// Network topology and parameter handles (the values live in a store).
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    pub config: GeneratorConfig,
    stem: Conv,
    down: Vec<Conv>,
    dilated: Vec<ResBlock>,
    style: Vec<PartialConv>,
    decoder: Vec<PanResBlock>,
    up: Vec<UpBlock>,
    head: Conv,
    branches: Vec<Branch>,
}

/// What one forward pass produces.
pub struct GenOutput {
    /// `I_out`, `(N, 3, H, W)` in [0, 1].
    pub image: Var,
    /// Batch statistics per normalization block (empty with running stats).
    pub stats: Vec<NormStats>,
    pub style_codes: Option<StyleCodes>,
}

impl GeneratorNet {
    pub fn new<T: Element>(config: GeneratorConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut branches: Vec<Branch> = Vec::new();
        let tag = |store: &ParamStore<T>, from: usize, b: Branch, branches: &mut Vec<Branch>| {
            branches.extend(std::iter::repeat_n(b, store.len() - from));
        };
        let nd = config.n_downsample;
        let ch = |s: usize| config.channels(s);
        let s0 = store.len();
        let stem = Conv::new(store, &mut rng, "enc.stem", ConvSpec::same(5, ch(0), config.edge_kernel));
        let down = (0..nd).map(|k| Conv::new(store, &mut rng, &format!("enc.down{k}"), ConvSpec::down(ch(k), ch(k + 1)))).collect();
        let bottleneck = ch(nd);
        let dilated = (0..config.n_dilated_blocks)
            .map(|k| ResBlock {
                a: Conv::new(store, &mut rng, &format!("enc.res{k}.a"), ConvSpec::dilated(bottleneck, bottleneck, 3, config.dilation)),
                b: Conv::new(
                    store,
                    &mut rng,
                    &format!("enc.res{k}.b"),
                    ConvSpec::dilated(bottleneck, bottleneck, 3, config.dilation).gain(0.5),
                ),
            })
            .collect();
        tag(store, s0, Branch::Core, &mut branches);

        let s1 = store.len();
        let sd = config.style_dim;
        let style_ch = |k: usize| if k == nd { sd } else { (sd >> (nd - k)).max(8) };
        let mut style = vec![PartialConv(Conv::new(store, &mut rng, "style.pconv0", ConvSpec::same(3, style_ch(0), 3)))];
        for k in 0..nd {
            let spec = ConvSpec::down(style_ch(k), style_ch(k + 1));
            style.push(PartialConv(Conv::new(store, &mut rng, &format!("style.pconv{}", k + 1), spec)));
        }
        tag(store, s1, Branch::Style, &mut branches);

        let pan = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize, branches: &mut Vec<Branch>| {
            let (block, tags) = PlaneAwareNorm::new(store, rng, name, c, sd, config.pan_hidden);
            branches.extend(tags.into_iter().map(|(_, b)| b));
            block
        };
        let mut decoder = Vec::new();
        for k in 0..config.n_decoder_blocks {
            let norm_a = pan(store, &mut rng, &format!("dec.res{k}.norm_a"), bottleneck, &mut branches);
            let s = store.len();
            let conv_a = Conv::new(store, &mut rng, &format!("dec.res{k}.conv_a"), ConvSpec::same(bottleneck, bottleneck, 3));
            tag(store, s, Branch::Core, &mut branches);
            let norm_b = pan(store, &mut rng, &format!("dec.res{k}.norm_b"), bottleneck, &mut branches);
            let s = store.len();
            let conv_b =
                Conv::new(store, &mut rng, &format!("dec.res{k}.conv_b"), ConvSpec::same(bottleneck, bottleneck, 3).gain(0.5));
            tag(store, s, Branch::Core, &mut branches);
            decoder.push(PanResBlock { norm_a, conv_a, norm_b, conv_b });
        }
        let mut up = Vec::new();
        for k in (0..nd).rev() {
            let s = store.len();
            let conv = Conv::new(store, &mut rng, &format!("dec.up{k}.conv"), ConvSpec::same(ch(k + 1), ch(k), 3));
            tag(store, s, Branch::Core, &mut branches);
            let norm = pan(store, &mut rng, &format!("dec.up{k}.norm"), ch(k), &mut branches);
            up.push(UpBlock { conv, norm });
        }
        let s = store.len();
        let head = Conv::new(store, &mut rng, "dec.head", ConvSpec::same(ch(0), 3, config.edge_kernel).gain(1.0));
        tag(store, s, Branch::Core, &mut branches);
        debug_assert_eq!(branches.len(), store.len());
        Ok(Self { config, stem, down, dilated, style, decoder, up, head, branches })
    }

    pub fn branch(&self, id: ParamId) -> Branch {
        self.branches[id.0]
    }

    /// Parameters a variant trains.
    pub fn active_params(&self, variant: Variant) -> Vec<ParamId> {
        (0..self.branches.len()).map(ParamId).filter(|&id| variant.uses(self.branch(id))).collect()
    }

    /// Number of normalization blocks with running statistics.
    pub fn n_norms(&self) -> usize {
        2 * self.decoder.len() + self.up.len()
    }

    pub fn norm_channels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for b in &self.decoder {
            out.push(b.norm_a.channels);
            out.push(b.norm_b.channels);
        }
        out.extend(self.up.iter().map(|u| u.norm.channels));
        out
    }

    /// Style codes of the masked image, pooled per plane at the bottleneck
    /// resolution. Partial convolutions see only the valid pixels `1 − M`.
    pub fn style_codes<T: Element>(&self, p: &Binding<'_, T>, inputs: &GenInputs<T>) -> Result<StyleCodes> {
        let t = p.tape;
        let mut valid = inputs.mask.map(|m| T::one() - m);
        let mut x = t.constant(inputs.image.clone());
        let last = self.style.len() - 1;
        for (k, layer) in self.style.iter().enumerate() {
            let (y, v) = layer.forward(p, x, &valid)?;
            x = if k == last { y } else { t.leaky_relu(y, 0.2) };
            valid = v;
            check(t, x, "style encoder")?;
        }
        let factor = 1 << self.config.n_downsample;
        let labels: Vec<LabelMap> = inputs.plane_wise.iter().map(|l| l.downsample_nearest(factor)).collect();
        Ok(plane_pool(t, x, &labels, plane_count(&inputs.plane_wise)))
    }

    pub fn forward<T: Element>(
        &self,
        p: &Binding<'_, T>,
        inputs: &GenInputs<T>,
        variant: Variant,
        stats: StatsMode<'_>,
    ) -> Result<GenOutput> {
        let t = p.tape;
        let cfg = &self.config;
        if inputs.dims() != (cfg.height, cfg.width) {
            return Err(Error::ShapeMismatch {
                what: "generator input",
                expected: vec![cfg.height, cfg.width],
                got: vec![inputs.dims().0, inputs.dims().1],
            });
        }
        if let StatsMode::Running(r) = stats {
            if r.len() != self.n_norms() {
                return Err(Error::InvalidArgument(format!("{} running statistics for {} blocks", r.len(), self.n_norms())));
            }
        }
        let boundary = match variant {
            Variant::Backbone => Tensor::zeros(inputs.boundary.shape()),
            _ => inputs.boundary.clone(),
        };
        let image = t.constant(inputs.image.clone());
        let mask = t.constant(inputs.mask.clone());
        let lm = t.constant(boundary);
        let mut x = t.concat_channels(&[image, mask, lm]);

        x = t.relu(instance_norm(p, self.stem.forward(p, x)));
        check(t, x, "enc.stem")?;
        for (k, conv) in self.down.iter().enumerate() {
            x = t.relu(instance_norm(p, conv.forward(p, x)));
            check(t, x, &format!("enc.down{k}"))?;
        }
        for (k, block) in self.dilated.iter().enumerate() {
            let h = t.relu(instance_norm(p, block.a.forward(p, x)));
            let h = instance_norm(p, block.b.forward(p, h));
            x = t.add(x, h);
            check(t, x, &format!("enc.res{k}"))?;
        }

        let style_codes = match variant {
            Variant::Full => Some(self.style_codes(p, inputs)?),
            _ => None,
        };
        let mode = variant.modulation();
        let nd = cfg.n_downsample;
        // label pyramid, coarsest first
        let levels: Vec<(Var, Vec<LabelMap>)> = (0..=nd)
            .rev()
            .map(|k| {
                let f = 1 << k;
                let l3: Vec<LabelMap> = inputs.three_class.iter().map(|l| l.downsample_nearest(f)).collect();
                let pw: Vec<LabelMap> = inputs.plane_wise.iter().map(|l| l.downsample_nearest(f)).collect();
                (t.constant(one_hot(&l3, 3)), pw)
            })
            .collect();
        let ctx = |level: usize| PanContext {
            layout: levels[level].0,
            style: style_codes.as_ref().map(|c| (c, levels[level].1.as_slice())),
        };
        let mut observed = Vec::new();
        let mut norm_index = 0;
        let mut norm = |block: &PlaneAwareNorm, x: Var, level: usize, observed: &mut Vec<NormStats>| {
            let (y, s) = block.forward(p, x, mode, ctx(level), stats, norm_index);
            norm_index += 1;
            observed.extend(s);
            y
        };
        for (k, block) in self.decoder.iter().enumerate() {
            let h = t.relu(norm(&block.norm_a, x, 0, &mut observed));
            let h = block.conv_a.forward(p, h);
            let h = t.relu(norm(&block.norm_b, h, 0, &mut observed));
            let h = block.conv_b.forward(p, h);
            x = t.add(x, h);
            check(t, x, &format!("dec.res{k}"))?;
        }
        for (k, block) in self.up.iter().enumerate() {
            let h = block.conv.forward(p, t.upsample2x(x));
            x = t.relu(norm(&block.norm, h, k + 1, &mut observed));
            check(t, x, &format!("dec.up{}", nd - 1 - k))?;
        }
        let out = t.sigmoid(self.head.forward(p, x));
        check(t, out, "dec.head")?;
        Ok(GenOutput { image: out, stats: observed, style_codes })
    }
}

fn check<T: Element>(t: &Tape<T>, x: Var, layer: &str) -> Result<()> {
    if t.value(x).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("generator activations after {layer}")))
    }
}

/// Generator parameters plus normalization buffers.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub net: GeneratorNet,
    pub params: ParamStore<T>,
    pub running: Vec<RunningStats>,
}

impl<T: Element> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = GeneratorNet::new(config, &mut params, seed)?;
        let running = net.norm_channels().into_iter().map(RunningStats::new).collect();
        Ok(Self { net, params, running })
    }

    /// Inference-mode forward pass on a no-grad tape.
    pub fn infer(&self, inputs: &GenInputs<T>, variant: Variant) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let p = Binding::frozen(&tape, &self.params);
        let out = self.net.forward(&p, inputs, variant, StatsMode::Running(&self.running))?;
        Ok((*tape.value(out.image)).clone())
    }

    pub fn update_running(&mut self, observed: &[NormStats], momentum: f64) {
        for (r, s) in self.running.iter_mut().zip(observed) {
            r.update(s, momentum);
        }
    }
}
