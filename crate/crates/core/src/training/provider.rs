//! Sources of room layouts for training and inference.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{layout_miou, CornerLayout, LayoutMaps};
use crate::synth::{read_layout, Sample};

/// Produces the layout the generator is conditioned on.
pub trait LayoutProvider: Send + Sync {
    fn layout(&self, sample: &Sample) -> Result<CornerLayout>;

    fn name(&self) -> String;

    fn maps(&self, sample: &Sample) -> Result<LayoutMaps> {
        LayoutMaps::from_layout(&self.layout(sample)?)
    }
}

/// The scene's exact layout.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleProvider;

impl LayoutProvider for OracleProvider {
    fn layout(&self, sample: &Sample) -> Result<CornerLayout> {
        Ok(sample.layout.clone())
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

/// The oracle layout with a fraction of its columns occluded and
/// re-interpolated. Draws depend only on `seed` and the sample seed.
#[derive(Clone, Copy, Debug)]
pub struct DegradedProvider {
    pub ratio: f64,
    pub seed: u64,
}

impl LayoutProvider for DegradedProvider {
    fn layout(&self, sample: &Sample) -> Result<CornerLayout> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ sample.seed.rotate_left(17));
        degrade_layout(&sample.layout, self.ratio, &mut rng)
    }

    fn name(&self) -> String {
        format!("degraded({})", self.ratio)
    }
}

/// Reads `<dir>/<seed>.json` for each sample.
#[derive(Clone, Debug)]
pub struct FileProvider {
    pub dir: PathBuf,
}

impl LayoutProvider for FileProvider {
    fn layout(&self, sample: &Sample) -> Result<CornerLayout> {
        read_layout(&self.dir.join(format!("{}.json", sample.seed)))
    }

    fn name(&self) -> String {
        format!("file({})", self.dir.display())
    }
}

/// A fixed layout, used when nothing better is known.
#[derive(Clone, Debug)]
pub struct FixedProvider {
    pub layout: CornerLayout,
}

impl FixedProvider {
    /// Horizon-symmetric cylindrical room with boundaries at 30% and 70% of
    /// the height.
    pub fn fallback(height: usize, width: usize) -> Self {
        let h = height as f64;
        Self { layout: CornerLayout::constant(height, width, 0.3 * h, 0.7 * h) }
    }
}

impl LayoutProvider for FixedProvider {
    fn layout(&self, sample: &Sample) -> Result<CornerLayout> {
        if (self.layout.height, self.layout.width) != sample.image.dims() {
            return Err(Error::ShapeMismatch {
                what: "fixed layout",
                expected: vec![sample.image.height(), sample.image.width()],
                got: vec![self.layout.height, self.layout.width],
            });
        }
        Ok(self.layout.clone())
    }

    fn name(&self) -> String {
        "fixed".into()
    }
}

/// Occlude `round(ratio·W)` columns in `ceil(10·ratio)` disjoint spans,
/// replace both boundaries across each span by linear interpolation between
/// the visible neighbours (wrapping across the seam), and drop corners
/// inside the spans.
pub fn degrade_layout<R: Rng>(layout: &CornerLayout, ratio: f64, rng: &mut R) -> Result<CornerLayout> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("degradation ratio {ratio} outside [0, 1)")));
    }
    let w = layout.width;
    let total = (ratio * w as f64).round() as usize;
    if total == 0 {
        return Ok(layout.clone());
    }
    let spans = ((ratio * 10.0).ceil() as usize).clamp(1, total).min(w - total);
    let lengths = split(total, spans, rng);
    // every gap holds at least one visible column
    let gaps: Vec<usize> = split(w - total - spans, spans, rng).into_iter().map(|g| g + 1).collect();
    let offset = rng.random_range(0..w);
    let mut hidden = vec![false; w];
    let mut pos = offset;
    for (len, gap) in lengths.iter().zip(&gaps) {
        for k in 0..*len {
            hidden[(pos + k) % w] = true;
        }
        pos += len + gap;
    }

    let mut out = layout.clone();
    for u in 0..w {
        if !hidden[u] || hidden[(u + w - 1) % w] {
            continue;
        }
        // u starts a span; find its length and the visible neighbours
        let mut len = 0;
        while hidden[(u + len) % w] {
            len += 1;
        }
        let left = (u + w - 1) % w;
        let right = (u + len) % w;
        for k in 0..len {
            let t = (k + 1) as f64 / (len + 1) as f64;
            let c = (u + k) % w;
            out.ceiling_row[c] = (1.0 - t) * layout.ceiling_row[left] + t * layout.ceiling_row[right];
            out.floor_row[c] = (1.0 - t) * layout.floor_row[left] + t * layout.floor_row[right];
        }
    }
    out.corner_columns.retain(|&c| !hidden[c]);
    out.validate()?;
    Ok(out)
}

/// Random composition of `total` into `parts` nonnegative integers.
fn split<R: Rng>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=total)).collect();
    cuts.sort_unstable();
    let mut prev = 0;
    let mut out = Vec::with_capacity(parts);
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// 3-class mIoU of a provider's layout against the sample's own.
pub fn provider_miou(provider: &dyn LayoutProvider, sample: &Sample) -> Result<f64> {
    let maps = provider.maps(sample)?;
    layout_miou(&maps.three_class, &sample.maps.three_class)
}
