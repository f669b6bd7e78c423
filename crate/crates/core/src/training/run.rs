//! The training loop, held-out evaluation and inference.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::TrainConfig;
use super::provider::LayoutProvider;
use super::step::{train_step, Batch, Real, TrainState};
use crate::error::{Error, Result};
use crate::geometry::{CornerLayout, LayoutMaps};
use crate::losses::{FeatureExtractor, LossReport, RandomPyramid};
use crate::metrics::{evaluate_stratified, Bucket, MetricReport};
use crate::nn::{GenInputs, Generator, Variant};
use crate::raster::{BinaryMask, Panorama};
use crate::synth::{apply_mask, make_sample, sample_seeds, Dataset, Sample};

/// A sample with the layout maps the generator is conditioned on.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: Sample,
    pub maps: LayoutMaps,
}

impl Prepared {
    pub fn new(sample: Sample, provider: &dyn LayoutProvider) -> Result<Self> {
        let maps = provider.maps(&sample)?;
        Ok(Self { sample, maps })
    }
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Prepared>,
    pub held_out: Vec<Prepared>,
}

impl TrainData {
    /// Even scene seeds train, odd seeds are held out.
    pub fn split(samples: Vec<Sample>, provider: &dyn LayoutProvider) -> Result<Self> {
        let (train, held_out): (Vec<Sample>, Vec<Sample>) = samples.into_iter().partition(|s| s.seed % 2 == 0);
        let prep = |v: Vec<Sample>| v.into_iter().map(|s| Prepared::new(s, provider)).collect::<Result<Vec<_>>>();
        Ok(Self { train: prep(train)?, held_out: prep(held_out)? })
    }
}

/// The samples a configuration names: a dataset directory, or scenes
/// generated in memory from the master seed.
pub fn load_samples(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let samples = match &cfg.data.dir {
        Some(dir) => Dataset::load(dir)?.samples,
        None => {
            let dc = cfg.data_config();
            let seeds = sample_seeds(cfg.data.master_seed, cfg.data.n_samples);
            seeds.into_iter().map(|s| make_sample(s, &dc)).collect::<Result<Vec<_>>>()?
        }
    };
    if let Some(s) = samples.iter().find(|s| s.image.dims() != (cfg.height, cfg.width)) {
        return Err(Error::Config(format!(
            "dataset images are {}x{}, the configuration expects {}x{}",
            s.image.width(),
            s.image.height(),
            cfg.width,
            cfg.height
        )));
    }
    Ok(samples)
}

/// Indices of the batch for a step; depends only on `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    if batch <= n {
        index::sample(&mut rng, n, batch).into_vec()
    } else {
        let perm = index::sample(&mut rng, n, n).into_vec();
        (0..batch).map(|k| perm[k % n]).collect()
    }
}

pub fn make_batch(items: &[&Prepared]) -> Result<Batch> {
    let samples: Vec<&Sample> = items.iter().map(|p| &p.sample).collect();
    let maps: Vec<&LayoutMaps> = items.iter().map(|p| &p.maps).collect();
    Batch::new(&samples, &maps)
}

/// Generator outputs for `items`, in order, `batch` at a time.
pub fn predict(generator: &Generator<Real>, variant: Variant, items: &[&Prepared], batch: usize) -> Result<Vec<Panorama>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let b = make_batch(chunk)?;
        let y = generator.infer(&b.inputs, variant)?;
        let (n, _, h, w) = y.dims4();
        for k in 0..n {
            let plane = &y.data()[k * 3 * h * w..(k + 1) * 3 * h * w];
            out.push(Panorama::from_planes(h, w, plane.to_vec())?);
        }
    }
    Ok(out)
}

/// `M⊙output + (1−M)⊙known`.
pub fn composite(output: &Panorama, known: &Panorama, mask: &BinaryMask) -> Panorama {
    let (h, w) = known.dims();
    Panorama::from_fn(h, w, |i, j| if mask.get(i, j) != 0 { output.pixel(i, j) } else { known.pixel(i, j) })
}

/// Metric reports of the generator's composites on `items`.
pub fn evaluate_model(
    generator: &Generator<Real>,
    variant: Variant,
    items: &[&Prepared],
    buckets: &[Bucket],
    fx: Option<&dyn FeatureExtractor<f64>>,
    batch: usize,
) -> Result<Vec<MetricReport>> {
    let outputs = predict(generator, variant, items, batch)?;
    let pairs: Vec<(Panorama, Panorama)> = outputs
        .iter()
        .zip(items)
        .map(|(o, p)| (composite(o, &p.sample.image, &p.sample.mask), p.sample.image.clone()))
        .collect();
    let masks: Vec<BinaryMask> = items.iter().map(|p| p.sample.mask.clone()).collect();
    evaluate_stratified(&pairs, &masks, buckets, fx)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub last_report: Option<LossReport>,
}

pub const LOG_FILE: &str = "log.jsonl";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

fn append(log: &Path, row: serde_json::Value) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(log).map_err(Error::io(log))?;
    writeln!(f, "{row}").map_err(Error::io(log))
}

/// Train to `cfg.max_steps`, writing checkpoints and `log.jsonl` under
/// `out_dir`. With `resume`, training continues from that checkpoint, whose
/// configuration must match `cfg` apart from budget and cadence keys.
pub fn train(cfg: &TrainConfig, data: &TrainData, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let log = out_dir.join(LOG_FILE);
    let fx = RandomPyramid::<Real>::new(&cfg.features);
    let eval_fx = RandomPyramid::<f64>::new(&cfg.features);
    let mut state = match resume {
        Some(p) => load_checkpoint(p, Some(cfg))?.0,
        None => TrainState::new(cfg)?,
    };
    let mut last_ckpt = None;
    if resume.is_none() {
        let p = checkpoint_path(out_dir, 0);
        save_checkpoint(&p, &state, cfg, None)?;
        last_ckpt = Some(p);
    } else {
        last_ckpt = resume.map(Path::to_path_buf).or(last_ckpt);
    }
    let mut last_report = None;
    let mut last_metrics = None;
    while state.step < cfg.max_steps {
        let idx = batch_indices(cfg.seed, state.step, data.train.len(), cfg.batch_size);
        let items: Vec<&Prepared> = idx.iter().map(|&i| &data.train[i]).collect();
        let batch = make_batch(&items)?;
        let outcome = train_step(&mut state, &batch, cfg, &fx).map_err(|e| match e {
            Error::NonFinite(detail) => Error::NumericalAbort { step: state.step + 1, detail, last_checkpoint: last_ckpt.clone() },
            other => other,
        })?;
        let report = outcome.report;
        let s = state.step;
        if cfg.log_every > 0 && s % cfg.log_every == 0 {
            let mut row = serde_json::to_value(&report).expect("report serializes");
            row["kind"] = json!("loss");
            append(&log, row)?;
            log::info!("step {s}: total {:.4} (rec {:.4}, d {:.4})", report.total, report.rec, report.d);
        }
        if cfg.eval_every > 0 && s % cfg.eval_every == 0 && !data.held_out.is_empty() {
            let items: Vec<&Prepared> = data.held_out.iter().collect();
            let whole = [Bucket { label: "all".into(), lo: 0.0, hi: None }];
            let fx_opt: Option<&dyn FeatureExtractor<f64>> = if cfg.experiment.fid { Some(&eval_fx) } else { None };
            let reports = evaluate_model(&state.generator, cfg.variant, &items, &whole, fx_opt, cfg.batch_size)?;
            let reports: Vec<_> = reports.into_iter().filter(|r| r.key != "all").collect();
            for r in &reports {
                log::info!("step {s}: held-out {} PSNR {:.2} SSIM {:.4}", r.region, r.psnr, r.ssim);
            }
            let metrics = serde_json::to_value(&reports).expect("reports serialize");
            append(&log, json!({ "kind": "eval", "step": s, "reports": metrics }))?;
            last_metrics = Some(metrics);
        }
        if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) || s == cfg.max_steps {
            let p = checkpoint_path(out_dir, s);
            save_checkpoint(&p, &state, cfg, last_metrics.clone())?;
            last_ckpt = Some(p);
        }
        last_report = Some(report);
    }
    let final_checkpoint = last_ckpt.expect("a checkpoint exists");
    Ok(TrainOutcome { state, final_checkpoint, log, last_report })
}

/// Output of one inference call.
#[derive(Clone, Debug)]
pub struct Inpainted {
    /// Raw generator output.
    pub output: Panorama,
    /// `M⊙I_out + (1−M)⊙I_in`.
    pub composite: Panorama,
}

/// Inpaint the masked pixels of `image` under `layout`.
pub fn inpaint(generator: &Generator<Real>, variant: Variant, image: &Panorama, mask: &BinaryMask, layout: &CornerLayout) -> Result<Inpainted> {
    if (layout.height, layout.width) != image.dims() {
        return Err(Error::ShapeMismatch {
            what: "layout",
            expected: vec![image.height(), image.width()],
            got: vec![layout.height, layout.width],
        });
    }
    let masked = apply_mask(image, mask)?;
    let maps = LayoutMaps::from_layout(layout)?;
    let inputs = GenInputs::<Real>::new(std::slice::from_ref(&masked), std::slice::from_ref(mask), &[&maps])?;
    let y = generator.infer(&inputs, variant)?;
    let output = Panorama::from_tensor(&y)?;
    let composite = composite(&output, image, mask);
    Ok(Inpainted { output, composite })
}
