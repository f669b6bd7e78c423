//! Experiment protocols: variant ablation, mask-size stratification and
//! layout-quality sensitivity.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::provider::{provider_miou, DegradedProvider, LayoutProvider, OracleProvider};
use super::run::{evaluate_model, predict, train, Prepared, TrainData};
use super::step::Real;
use crate::error::{Error, Result};
use crate::geometry::CornerLayout;
use crate::losses::{FeatureExtractor, RandomPyramid};
use crate::metrics::{default_buckets, Bucket, MetricReport, Region, TOTAL_KEY};
use crate::nn::{Generator, Variant};
use crate::raster::{BinaryMask, Panorama};
use crate::synth::random_rect_mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Ablation,
    MaskSize,
    LayoutSensitivity,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Ablation => "ablation",
            Protocol::MaskSize => "mask_size",
            Protocol::LayoutSensitivity => "layout_sensitivity",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Protocol::Ablation),
            "mask_size" => Ok(Protocol::MaskSize),
            "layout_sensitivity" => Ok(Protocol::LayoutSensitivity),
            _ => Err(Error::Config(format!("unknown protocol {s:?} (expected ablation, mask_size or layout_sensitivity)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub values: Vec<f64>,
}

/// A result table; every row has one value per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub protocol: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn value(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.label == row).map(|r| r.values[c])
    }

    pub fn format(&self) -> String {
        let mut cells = vec![std::iter::once(self.protocol.clone()).chain(self.columns.iter().cloned()).collect::<Vec<_>>()];
        for r in &self.rows {
            cells.push(std::iter::once(r.label.clone()).chain(r.values.iter().map(|v| fmt_value(*v))).collect());
        }
        let widths: Vec<usize> = (0..cells[0].len()).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &cells {
            let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.4}")
    }
}

pub const METRIC_COLUMNS: [&str; 4] = ["PSNR", "SSIM", "MAE", "fid_proxy"];

fn metric_values(r: &MetricReport) -> Vec<f64> {
    vec![r.psnr, r.ssim, r.mae, r.fid_proxy.unwrap_or(f64::NAN)]
}

fn total_full(reports: &[MetricReport]) -> Result<&MetricReport> {
    reports
        .iter()
        .find(|r| r.key == TOTAL_KEY && r.region == Region::Full)
        .ok_or_else(|| Error::InvalidArgument("no total report".into()))
}

/// Distances between each ground-truth boundary crossing inside the hole and
/// the strongest horizontal edge of `output` near it.
///
/// For every column and each of the two boundaries whose pixel lies in the
/// hole, edges are searched over the hole run containing that pixel, limited
/// to the half of the column on the boundary's side of the midline between
/// the two boundaries. Edge strength is the summed absolute vertical
/// difference over channels, and an edge between rows `i` and `i+1` sits at
/// `i + 0.5`.
pub fn boundary_alignment_errors(output: &Panorama, layout: &CornerLayout, mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = output.dims();
    let mut errs = Vec::new();
    for u in 0..w {
        let (c, f) = (layout.ceiling_row[u], layout.floor_row[u]);
        let mid = 0.5 * (c + f);
        for (b, upper) in [(c, true), (f, false)] {
            let bi = (b.round() as usize).min(h - 1);
            if mask.get(bi, u) == 0 {
                continue;
            }
            let (mut lo, mut hi) = (bi, bi);
            while lo > 0 && mask.get(lo - 1, u) != 0 {
                lo -= 1;
            }
            while hi + 1 < h && mask.get(hi + 1, u) != 0 {
                hi += 1;
            }
            let mut best: Option<(f64, f64)> = None;
            for i in lo..hi {
                let pos = i as f64 + 0.5;
                if (upper && pos > mid) || (!upper && pos < mid) {
                    continue;
                }
                let strength: f64 = (0..3).map(|ch| (output.get(ch, i + 1, u) - output.get(ch, i, u)).abs() as f64).sum();
                if best.is_none_or(|(s, _)| strength > s) {
                    best = Some((strength, pos));
                }
            }
            if let Some((_, pos)) = best {
                errs.push((pos - b).abs());
            }
        }
    }
    errs
}

/// Mean boundary-alignment error over all boundary crossings of all items,
/// or NaN when no boundary falls inside any hole.
pub fn mean_boundary_alignment(outputs: &[Panorama], items: &[&Prepared]) -> f64 {
    let errs: Vec<f64> =
        outputs.iter().zip(items).flat_map(|(o, p)| boundary_alignment_errors(o, &p.sample.layout, &p.sample.mask)).collect();
    if errs.is_empty() {
        f64::NAN
    } else {
        errs.iter().sum::<f64>() / errs.len() as f64
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// One trained model of the ablation.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub reports: Vec<MetricReport>,
    pub boundary_error: f64,
}

fn train_variant(cfg: &TrainConfig, variant: Variant, seed: u64, data: &TrainData, out_dir: &Path) -> Result<Generator<Real>> {
    let mut c = cfg.clone();
    c.variant = variant;
    c.seed = seed;
    let dir = out_dir.join(format!("{}_seed{seed}", variant.name()));
    Ok(train(&c, data, &dir, None)?.state.generator)
}

fn eval_fx(cfg: &TrainConfig) -> Option<RandomPyramid<f64>> {
    cfg.experiment.fid.then(|| RandomPyramid::new(&cfg.features))
}

/// Train every variant in `variants` for every experiment seed and score it on
/// the held-out scenes.
pub fn ablation_runs(cfg: &TrainConfig, variants: &[Variant], data: &TrainData, out_dir: &Path) -> Result<Vec<VariantRun>> {
    let held: Vec<&Prepared> = data.held_out.iter().collect();
    if held.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let fx = eval_fx(cfg);
    let fx_ref = fx.as_ref().map(|f| f as &dyn FeatureExtractor<f64>);
    let mut runs = Vec::new();
    for &seed in &cfg.experiment.seeds {
        for &variant in variants {
            let g = train_variant(cfg, variant, seed, data, out_dir)?;
            let outputs = predict(&g, variant, &held, cfg.batch_size)?;
            let boundary_error = mean_boundary_alignment(&outputs, &held);
            let reports = evaluate_model(&g, variant, &held, &[], fx_ref, cfg.batch_size)?;
            runs.push(VariantRun { variant, seed, reports, boundary_error });
        }
    }
    Ok(runs)
}

/// Ablation rows: metrics averaged over seeds, boundary error as the median
/// over seeds.
pub fn ablation_table(runs: &[VariantRun]) -> Result<Table> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mine: Vec<&VariantRun> = runs.iter().filter(|r| r.variant == variant).collect();
        if mine.is_empty() {
            continue;
        }
        let mut values = vec![0.0; METRIC_COLUMNS.len()];
        for r in &mine {
            for (acc, v) in values.iter_mut().zip(metric_values(total_full(&r.reports)?)) {
                *acc += v / mine.len() as f64;
            }
        }
        values.push(median(&mine.iter().map(|r| r.boundary_error).collect::<Vec<_>>()));
        rows.push(Row { label: variant.name().into(), values });
    }
    let mut columns: Vec<String> = METRIC_COLUMNS.iter().map(|s| s.to_string()).collect();
    columns.push("boundary_err".into());
    Ok(Table { protocol: Protocol::Ablation.name().into(), columns, rows })
}

/// Target hole ratios for the mask-size protocol, one per default bucket.
pub const MASK_SIZE_TARGETS: [f64; 5] = [0.05, 0.15, 0.25, 0.35, 0.45];

/// Every held-out scene once per target ratio, with a fresh rectangle mask.
pub fn mask_size_items(held: &[Prepared]) -> Result<Vec<Prepared>> {
    let mut out = Vec::new();
    for p in held {
        for (k, &ratio) in MASK_SIZE_TARGETS.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(p.sample.seed ^ (k as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d));
            let (h, w) = p.sample.image.dims();
            let mut q = p.clone();
            q.sample.mask = random_rect_mask(ratio, h, w, &mut rng)?;
            out.push(q);
        }
    }
    Ok(out)
}

fn bucket_table(protocol: Protocol, reports: &[MetricReport], buckets: &[Bucket]) -> Table {
    let rows = buckets
        .iter()
        .map(|b| b.label.clone())
        .chain(std::iter::once(TOTAL_KEY.to_string()))
        .filter_map(|key| {
            let r = reports.iter().find(|r| r.key == key && r.region == Region::Full)?;
            let mut values = metric_values(r);
            values.push(r.n_samples as f64);
            Some(Row { label: key, values })
        })
        .collect();
    let mut columns: Vec<String> = METRIC_COLUMNS.iter().map(|s| s.to_string()).collect();
    columns.push("n".into());
    Table { protocol: protocol.name().into(), columns, rows }
}

fn reprepare(items: &[Prepared], provider: &dyn LayoutProvider) -> Result<Vec<Prepared>> {
    items.iter().map(|p| Prepared::new(p.sample.clone(), provider)).collect()
}

/// Run `protocol` end to end: train on the even-seed scenes with the oracle
/// layout, evaluate on the odd-seed scenes, and tabulate.
pub fn run_experiment(protocol: Protocol, cfg: &TrainConfig, samples: Vec<crate::synth::Sample>, out_dir: &Path) -> Result<Table> {
    cfg.validate()?;
    let data = TrainData::split(samples, &OracleProvider)?;
    if data.held_out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dir = out_dir.join(protocol.name());
    match protocol {
        Protocol::Ablation => ablation_table(&ablation_runs(cfg, &Variant::ALL, &data, &dir)?),
        Protocol::MaskSize => {
            let items = mask_size_items(&data.held_out)?;
            let refs: Vec<&Prepared> = items.iter().collect();
            let fx = eval_fx(cfg);
            let fx_ref = fx.as_ref().map(|f| f as &dyn FeatureExtractor<f64>);
            let buckets = default_buckets();
            let mut pairs = Vec::new();
            for &seed in &cfg.experiment.seeds {
                let g = train_variant(cfg, Variant::Full, seed, &data, &dir)?;
                let outs = predict(&g, Variant::Full, &refs, cfg.batch_size)?;
                pairs.extend(outs.iter().zip(&refs).map(|(o, p)| {
                    (super::run::composite(o, &p.sample.image, &p.sample.mask), p.sample.image.clone())
                }));
            }
            let masks: Vec<BinaryMask> =
                cfg.experiment.seeds.iter().flat_map(|_| refs.iter().map(|p| p.sample.mask.clone())).collect();
            let reports = crate::metrics::evaluate_stratified(&pairs, &masks, &buckets, fx_ref)?;
            Ok(bucket_table(protocol, &reports, &buckets))
        }
        Protocol::LayoutSensitivity => {
            let fx = eval_fx(cfg);
            let fx_ref = fx.as_ref().map(|f| f as &dyn FeatureExtractor<f64>);
            let models: Vec<Generator<Real>> =
                cfg.experiment.seeds.iter().map(|&s| train_variant(cfg, Variant::Full, s, &data, &dir)).collect::<Result<_>>()?;
            let mut rows = Vec::new();
            for &ratio in &cfg.experiment.degrade_ratios {
                let provider = DegradedProvider { ratio, seed: cfg.experiment.degrade_seed };
                let ious = data.held_out.iter().map(|p| provider_miou(&provider, &p.sample)).collect::<Result<Vec<_>>>()?;
                let miou = ious.iter().sum::<f64>() / ious.len() as f64;
                let items = reprepare(&data.held_out, &provider)?;
                let refs: Vec<&Prepared> = items.iter().collect();
                let mut values = vec![0.0; METRIC_COLUMNS.len()];
                for g in &models {
                    let reports = evaluate_model(g, Variant::Full, &refs, &[], fx_ref, cfg.batch_size)?;
                    for (acc, v) in values.iter_mut().zip(metric_values(total_full(&reports)?)) {
                        *acc += v / models.len() as f64;
                    }
                }
                let mut row = vec![miou];
                row.extend(values);
                rows.push(Row { label: format!("{ratio}"), values: row });
            }
            let columns = std::iter::once("mIOU").chain(METRIC_COLUMNS).map(String::from).collect();
            Ok(Table { protocol: protocol.name().into(), columns, rows })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CornerLayout;

    #[test]
    fn edge_at_boundary_has_zero_error() {
        let layout = CornerLayout::constant(12, 4, 3.5, 8.5);
        // rows 0..=3 dark, 4..=8 mid, 9.. bright: edges at 3.5 and 8.5
        let img = Panorama::from_fn(12, 4, |i, _| {
            let v = if i <= 3 { 0.1 } else if i <= 8 { 0.5 } else { 0.9 };
            [v; 3]
        });
        let mask = BinaryMask::filled(12, 4, 1);
        let errs = boundary_alignment_errors(&img, &layout, &mask);
        assert_eq!(errs.len(), 8);
        assert!(errs.iter().all(|&e| e.abs() < 1e-12));
    }

    #[test]
    fn shifted_edge_and_unmasked_columns() {
        let layout = CornerLayout::constant(12, 4, 3.5, 8.5);
        let img = Panorama::from_fn(12, 4, |i, _| [if i <= 1 { 0.0 } else { 1.0 }; 3]);
        let mut mask = BinaryMask::filled(12, 4, 0);
        for i in 0..6 {
            mask.set(i, 2, 1);
        }
        let errs = boundary_alignment_errors(&img, &layout, &mask);
        assert_eq!(errs, vec![2.0]);
    }

    #[test]
    fn median_and_table_lookup() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, f64::NAN, 2.0, 3.0]), 2.5);
        let t = Table { protocol: "x".into(), columns: vec!["a".into()], rows: vec![Row { label: "r".into(), values: vec![1.5] }] };
        assert_eq!(t.value("r", "a"), Some(1.5));
        assert!(t.format().contains("1.5000"));
    }
}
