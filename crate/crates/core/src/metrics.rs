//! Image quality metrics: MAE, PSNR, SSIM and a Fréchet feature distance.
//!
//! Every metric comes in a full-image and a hole-only flavour. Aggregates
//! are pooled over pixels, so a bucket of several images reports the same
//! numbers as one big image built from the same pixels.

use std::fmt::{self, Write as _};

use nalgebra::{DMatrix, DVector};
use panofill_autograd::{par, Tape, Tensor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::raster::{BinaryMask, Panorama};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Diagonal loading added to both covariances.
pub const FID_EPS: f64 = 1e-6;

fn check_dims(a: &Panorama, b: &Panorama) -> Result<()> {
    if a.dims() != b.dims() {
        let (ha, wa) = a.dims();
        let (hb, wb) = b.dims();
        return Err(Error::ShapeMismatch { what: "image pair", expected: vec![3, ha, wa], got: vec![3, hb, wb] });
    }
    Ok(())
}

fn check_mask(a: &Panorama, m: &BinaryMask) -> Result<()> {
    if a.dims() != m.dims() {
        let (h, w) = a.dims();
        return Err(Error::ShapeMismatch { what: "mask", expected: vec![h, w], got: vec![m.height(), m.width()] });
    }
    Ok(())
}

/// Mean absolute difference over pixels and channels.
pub fn mae(a: &Panorama, b: &Panorama) -> Result<f64> {
    check_dims(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(s / a.data().len() as f64)
}

/// `10·log10(peak² / MSE)`; identical images give `+∞`.
pub fn psnr(a: &Panorama, b: &Panorama, peak: f64) -> Result<f64> {
    check_dims(a, b)?;
    let sq: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(psnr_from_mse(sq / a.data().len() as f64, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (k, v) in w.iter_mut().enumerate() {
        *v = (-((k as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..SSIM_WINDOW).map(|k| g[k] * plane[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(i + k) * wo + j]).sum();
        }
    }
    out
}

/// Local SSIM of every valid window, channels averaged, as a
/// `(H−10) × (W−10)` row-major map indexed by window centre.
pub fn ssim_map(a: &Panorama, b: &Panorama, peak: f64) -> Result<(usize, usize, Vec<f64>)> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { window: SSIM_WINDOW, height: h, width: w });
    }
    let g = gaussian_window();
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let hw = h * w;
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut map = vec![0.0; ho * wo];
    for c in 0..3 {
        let x: Vec<f64> = a.data()[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let mxx = filter_valid(&prod(&x, &x), h, w, &g);
        let myy = filter_valid(&prod(&y, &y), h, w, &g);
        let mxy = filter_valid(&prod(&x, &y), h, w, &g);
        for k in 0..map.len() {
            let (ux, uy) = (mx[k], my[k]);
            let vx = mxx[k] - ux * ux;
            let vy = myy[k] - uy * uy;
            let cov = mxy[k] - ux * uy;
            let s = ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            map[k] += s / 3.0;
        }
    }
    Ok((ho, wo, map))
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5).
pub fn ssim(a: &Panorama, b: &Panorama, peak: f64) -> Result<f64> {
    let (_, _, map) = ssim_map(a, b, peak)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Sufficient statistics for pooled MAE, PSNR and SSIM.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accumulator {
    pub abs_sum: f64,
    pub sq_sum: f64,
    /// Pixel-channel values counted in `abs_sum` and `sq_sum`.
    pub n_values: usize,
    pub ssim_sum: f64,
    pub ssim_n: usize,
    pub n_samples: usize,
}

impl Accumulator {
    /// Statistics of one pair, over the whole image or only where `hole` is 1.
    /// Hole SSIM averages the SSIM map at each hole pixel, clamped to the
    /// nearest valid window centre.
    pub fn of_pair(a: &Panorama, b: &Panorama, hole: Option<&BinaryMask>) -> Result<Self> {
        check_dims(a, b)?;
        let (h, w) = a.dims();
        let hw = h * w;
        let (ho, wo, map) = ssim_map(a, b, 1.0)?;
        let mut acc = Accumulator { n_samples: 1, ..Default::default() };
        if let Some(m) = hole {
            check_mask(a, m)?;
        }
        let r = SSIM_WINDOW / 2;
        for i in 0..h {
            for j in 0..w {
                if hole.is_some_and(|m| m.get(i, j) == 0) {
                    continue;
                }
                for c in 0..3 {
                    let d = a.data()[c * hw + i * w + j] as f64 - b.data()[c * hw + i * w + j] as f64;
                    acc.abs_sum += d.abs();
                    acc.sq_sum += d * d;
                }
                acc.n_values += 3;
                if hole.is_some() {
                    let ci = i.clamp(r, h - 1 - r) - r;
                    let cj = j.clamp(r, w - 1 - r) - r;
                    acc.ssim_sum += map[ci * wo + cj];
                    acc.ssim_n += 1;
                }
            }
        }
        if hole.is_none() {
            acc.ssim_sum = map.iter().sum();
            acc.ssim_n = ho * wo;
        }
        Ok(acc)
    }

    pub fn merge(&mut self, o: &Self) {
        self.abs_sum += o.abs_sum;
        self.sq_sum += o.sq_sum;
        self.n_values += o.n_values;
        self.ssim_sum += o.ssim_sum;
        self.ssim_n += o.ssim_n;
        self.n_samples += o.n_samples;
    }

    pub fn mae(&self) -> f64 {
        if self.n_values == 0 { 0.0 } else { self.abs_sum / self.n_values as f64 }
    }

    pub fn psnr(&self) -> f64 {
        if self.n_values == 0 { f64::INFINITY } else { psnr_from_mse(self.sq_sum / self.n_values as f64, 1.0) }
    }

    pub fn ssim(&self) -> f64 {
        if self.ssim_n == 0 { 1.0 } else { self.ssim_sum / self.ssim_n as f64 }
    }
}

fn mean_cov(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = set.first().map_or(0, Vec::len);
    if set.is_empty() || d == 0 {
        return Err(Error::InvalidArgument("feature set is empty".into()));
    }
    if set.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidArgument("feature vectors differ in length".into()));
    }
    if set.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature vectors".into()));
    }
    let n = set.len();
    let x = DMatrix::from_fn(n, d, |i, j| set[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (n.saturating_sub(1).max(1)) as f64;
    for k in 0..d {
        cov[(k, k)] += FID_EPS;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid_proxy(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = mean_cov(set_a)?;
    let (mu_b, cov_b) = mean_cov(set_b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::InvalidArgument("feature sets differ in dimension".into()));
    }
    let ra = sym_sqrt(&cov_a);
    // tr((Σa Σb)^½) = tr((Σa^½ Σb Σa^½)^½)
    let cross = sym_sqrt(&(&ra * &cov_b * &ra)).trace();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Per-image features for [`fid_proxy`]: the spatial mean of every channel
/// of every extractor layer.
pub fn pooled_features(fx: &dyn FeatureExtractor<f64>, image: &Panorama) -> Vec<f64> {
    let tape = Tape::<f64>::no_grad();
    let x = tape.constant(image.to_tensor::<f64>());
    let mut out = Vec::new();
    for layer in fx.layers(&tape, x) {
        let v: std::sync::Arc<Tensor<f64>> = tape.value(layer);
        let (_, c, h, w) = v.dims4();
        out.extend((0..c).map(|k| v.data()[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / (h * w) as f64));
    }
    out
}

/// Half-open mask-ratio interval `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub lo: f64,
    pub hi: Option<f64>,
}

impl Bucket {
    pub fn contains(&self, ratio: f64) -> bool {
        ratio >= self.lo && self.hi.is_none_or(|hi| ratio < hi)
    }
}

/// `0-10`, `10-20`, `20-30`, `30-40`, `40+` (percent of masked pixels).
pub fn default_buckets() -> Vec<Bucket> {
    let mut b: Vec<Bucket> =
        (0..4).map(|k| Bucket { label: format!("{}-{}", k * 10, k * 10 + 10), lo: k as f64 / 10.0, hi: Some((k + 1) as f64 / 10.0) }).collect();
    b.push(Bucket { label: "40+".into(), lo: 0.4, hi: None });
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Full,
    Hole,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Full => "full",
            Region::Hole => "hole",
        })
    }
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("bad psnr value {t:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Bucket label, or `total`.
    pub key: String,
    pub region: Region,
    pub n_samples: usize,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid_proxy: Option<f64>,
}

impl MetricReport {
    fn from_acc(key: &str, region: Region, acc: &Accumulator, fid: Option<f64>) -> Self {
        Self { key: key.into(), region, n_samples: acc.n_samples, psnr: acc.psnr(), ssim: acc.ssim(), mae: acc.mae(), fid_proxy: fid }
    }
}

pub const TOTAL_KEY: &str = "total";

/// Per-bucket and total reports for `(output, ground truth)` pairs, for both
/// regions. Empty buckets are omitted. FID features come from `fx` when given
/// and are compared per bucket between outputs and ground truths.
pub fn evaluate_stratified(
    pairs: &[(Panorama, Panorama)],
    masks: &[BinaryMask],
    buckets: &[Bucket],
    fx: Option<&dyn FeatureExtractor<f64>>,
) -> Result<Vec<MetricReport>> {
    if pairs.len() != masks.len() {
        return Err(Error::InvalidArgument(format!("{} pairs but {} masks", pairs.len(), masks.len())));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    struct PerSample {
        bucket: Option<usize>,
        full: Accumulator,
        hole: Accumulator,
        feats: Option<(Vec<f64>, Vec<f64>)>,
    }
    let per: Vec<Result<PerSample>> = par::map_range(pairs.len(), |k| {
        let (out, gt) = &pairs[k];
        let m = &masks[k];
        check_mask(out, m)?;
        let ratio = m.ratio();
        Ok(PerSample {
            bucket: buckets.iter().position(|b| b.contains(ratio)),
            full: Accumulator::of_pair(out, gt, None)?,
            hole: Accumulator::of_pair(out, gt, Some(m))?,
            feats: fx.map(|f| (pooled_features(f, out), pooled_features(f, gt))),
        })
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;

    let fid_of = |members: &[&PerSample]| -> Result<Option<f64>> {
        if fx.is_none() {
            return Ok(None);
        }
        let a: Vec<Vec<f64>> = members.iter().filter_map(|s| s.feats.as_ref().map(|f| f.0.clone())).collect();
        let b: Vec<Vec<f64>> = members.iter().filter_map(|s| s.feats.as_ref().map(|f| f.1.clone())).collect();
        fid_proxy(&a, &b).map(Some)
    };

    let mut reports = Vec::new();
    let mut groups: Vec<(String, Vec<&PerSample>)> =
        buckets.iter().enumerate().map(|(bi, b)| (b.label.clone(), per.iter().filter(|s| s.bucket == Some(bi)).collect())).collect();
    groups.push((TOTAL_KEY.into(), per.iter().collect()));
    for (key, members) in groups {
        if members.is_empty() {
            continue;
        }
        let fid = fid_of(&members)?;
        for region in [Region::Full, Region::Hole] {
            let mut acc = Accumulator::default();
            for s in &members {
                acc.merge(if region == Region::Full { &s.full } else { &s.hole });
            }
            reports.push(MetricReport::from_acc(&key, region, &acc, fid));
        }
    }
    Ok(reports)
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() { "inf".into() } else { format!("{v:.4}") }
}

/// Plain-text table with one row per report, columns aligned.
pub fn format_table(reports: &[MetricReport]) -> String {
    let header = ["key", "region", "n", "PSNR", "SSIM", "MAE", "fid_proxy"];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.key.clone(),
                r.region.to_string(),
                r.n_samples.to_string(),
                fmt_psnr(r.psnr),
                format!("{:.4}", r.ssim),
                format!("{:.4}", r.mae),
                r.fid_proxy.map_or("-".into(), |v| format!("{v:.4}")),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  "));
    };
    line(&mut out, &header);
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}
