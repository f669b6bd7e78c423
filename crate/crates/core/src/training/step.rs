//! One optimization step: a discriminator update on the detached generator
//! output, then a generator update.

use panofill_autograd::{Adam, Binding, ParamId, Tape, Tensor};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::LayoutMaps;
use crate::losses::{
    disc_hinge_loss, gen_adversarial_loss, perceptual_from, reconstruction_loss, style_from, total_loss, FeatureExtractor,
    LossComponents, LossReport,
};
use crate::nn::{Discriminator, GenInputs, Generator, StatsMode};
use crate::raster::BinaryMask;
use crate::synth::Sample;

/// Element type used for training.
pub type Real = f32;

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator<Real>,
    pub discriminator: Discriminator<Real>,
    pub opt_g: Adam<Real>,
    pub opt_d: Adam<Real>,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.generator_config(), cfg.seed)?;
        let discriminator = Discriminator::new(cfg.discriminator.clone(), cfg.seed ^ 0xd15c)?;
        let opt_g = Adam::new(cfg.adam(), generator.params.len());
        let opt_d = Adam::new(cfg.adam(), discriminator.params.len());
        Ok(Self { generator, discriminator, opt_g, opt_d, step: 0 })
    }

    /// Hash of both networks' parameters.
    pub fn param_hash(&self) -> u64 {
        self.generator.params.fingerprint() ^ self.discriminator.params.fingerprint().rotate_left(1)
    }
}

/// Stacked generator inputs and targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: GenInputs<Real>,
    /// Ground truth `(N, 3, H, W)`.
    pub target: Tensor<Real>,
}

impl Batch {
    /// `maps` are the conditioning layouts, one per sample.
    pub fn new(samples: &[&Sample], maps: &[&LayoutMaps]) -> Result<Self> {
        let masked: Vec<_> = samples.iter().map(|s| s.masked_input()).collect();
        let masks: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
        let inputs = GenInputs::new(&masked, &masks, maps)?;
        let target = Tensor::stack(&samples.iter().map(|s| s.image.to_tensor()).collect::<Vec<_>>())?;
        Ok(Self { inputs, target })
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Loss values; `step` counts completed steps including this one.
    pub report: LossReport,
    /// Generator parameters the step updated.
    pub updated_g: Vec<ParamId>,
}

fn finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Run one D update and one G update on `batch`.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    fx: &dyn FeatureExtractor<Real>,
) -> Result<StepOutcome> {
    let w = &cfg.weights;
    let tape = Tape::new();
    let pg = Binding::trainable(&tape, &state.generator.params);
    let out = state.generator.net.forward(&pg, &batch.inputs, cfg.variant, StatsMode::Batch)?;
    let fake_value = tape.value(out.image);

    // discriminator
    let d_loss = {
        let d = &state.discriminator;
        let uv = d.net.vectors(&d.params, &d.u, true);
        let dt = Tape::new();
        let pd = Binding::trainable(&dt, &d.params);
        let fake = dt.constant_shared(&fake_value);
        let real = dt.constant(batch.target.clone());
        let sf = d.net.forward(&pd, fake, &uv)?;
        let sr = d.net.forward(&pd, real, &uv)?;
        let loss = disc_hinge_loss(&dt, sf, sr, w.d);
        let value = dt.value(loss).item() as f64;
        finite(value, "discriminator loss")?;
        let grads = dt.backward(loss);
        drop(pd);
        state.opt_d.step(&mut state.discriminator.params, &grads).map_err(|e| Error::NonFinite(e.to_string()))?;
        state.discriminator.u = uv.into_iter().map(|(u, _)| u).collect();
        value
    };

    // generator
    let d = &state.discriminator;
    let uv = d.net.vectors(&d.params, &d.u, false);
    let pd = Binding::frozen(&tape, &d.params);
    let gt = tape.constant(batch.target.clone());
    let mask = tape.constant(batch.inputs.mask.clone());
    let rec = reconstruction_loss(&tape, out.image, gt, mask);
    let f_out = fx.layers(&tape, out.image);
    let f_gt = fx.layers(&tape, gt);
    let perc = perceptual_from(&tape, &f_out, &f_gt);
    let sty = style_from(&tape, &f_out, &f_gt);
    let scores = d.net.forward(&pd, out.image, &uv)?;
    let g = gen_adversarial_loss(&tape, scores);
    let comps = LossComponents { rec, perc, sty, g };
    let (total, _) = total_loss(&tape, &comps, w);
    let v = |x| tape.value(x).item() as f64;
    let report = LossReport { step: state.step + 1, rec: v(rec), perc: v(perc), sty: v(sty), g: v(g), d: d_loss, total: v(total) };
    finite(report.total, "generator loss")?;
    let grads = tape.backward(total);
    drop(pg);
    let updated_g = state.opt_g.step(&mut state.generator.params, &grads).map_err(|e| Error::NonFinite(e.to_string()))?;
    state.generator.update_running(&out.stats, cfg.running_momentum);
    state.step += 1;
    Ok(StepOutcome { report, updated_g })
}
