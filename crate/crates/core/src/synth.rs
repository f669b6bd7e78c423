//! Procedural room panoramas, inpainting masks, and on-disk datasets.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use panofill_autograd::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, row_latitude, CornerLayout, LayoutMaps, RoomModel, CEILING_PLANE, FLOOR_PLANE};
use crate::raster::{BinaryMask, Grid, LabelMap, Panorama};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    Stripes,
    Checker,
}

/// Appearance of one structural plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneStyle {
    pub base_color: [f32; 3],
    pub texture: Texture,
    /// Period of the pattern in texels (at least 2).
    pub scale: f64,
    pub secondary: [f32; 3],
}

impl PlaneStyle {
    pub fn flat(color: [f32; 3]) -> Self {
        Self { base_color: color, texture: Texture::Flat, scale: 2.0, secondary: color }
    }

    fn validate(&self) -> Result<()> {
        let ok = |c: &[f32; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !ok(&self.base_color) || !ok(&self.secondary) {
            return Err(Error::InvalidArgument("plane colors must lie in [0, 1]".into()));
        }
        if !(self.scale >= 2.0) {
            return Err(Error::InvalidArgument(format!("texture scale {} is below 2", self.scale)));
        }
        Ok(())
    }

    /// Colour at texture coordinates `(a, b)` (texels), after a phase shift.
    fn shade(&self, a: f64, b: f64, phase: [f64; 2]) -> [f32; 3] {
        let cell = |x: f64| (x / self.scale).floor() as i64;
        let odd = match self.texture {
            Texture::Flat => false,
            Texture::Stripes => cell(a + phase[0]).rem_euclid(2) == 1,
            Texture::Checker => (cell(a + phase[0]) + cell(b + phase[1])).rem_euclid(2) == 1,
        };
        if odd {
            self.secondary
        } else {
            self.base_color
        }
    }
}

/// Random rectilinear room: a rectangle with up to two corner notches.
pub fn random_room<R: Rng>(rng: &mut R) -> RoomModel {
    loop {
        let w = rng.random_range(3.0..7.0);
        let d = rng.random_range(3.0..7.0);
        let mut verts = vec![[0.0, 0.0], [w, 0.0], [w, d], [0.0, d]];
        let notches = rng.random_range(0..3usize);
        // cut notches from distinct corners, highest index first so the
        // earlier indices stay valid
        let mut corners: Vec<usize> = (0..4).collect();
        for k in 0..4 {
            let j = rng.random_range(k..4);
            corners.swap(k, j);
        }
        let mut cut: Vec<usize> = corners[..notches].to_vec();
        cut.sort_unstable_by(|a, b| b.cmp(a));
        for c in cut {
            let nw = rng.random_range(0.2..0.45) * w;
            let nd = rng.random_range(0.2..0.45) * d;
            let [x, y] = verts[c];
            let sx = if x == 0.0 { 1.0 } else { -1.0 };
            let sy = if y == 0.0 { 1.0 } else { -1.0 };
            let p_in = [x + sx * nw, y];
            let p_corner = [x + sx * nw, y + sy * nd];
            let p_out = [x, y + sy * nd];
            // counter-clockwise, even corners are entered along a vertical edge
            let replacement = if c % 2 == 0 {
                [p_out, p_corner, p_in]
            } else {
                [p_in, p_corner, p_out]
            };
            verts.splice(c..=c, replacement);
        }
        let camera_height = rng.random_range(1.2..1.7);
        let ceiling_height = camera_height + rng.random_range(1.1..1.6);
        let mut room = RoomModel { plan_vertices: verts, camera_xy: [0.0, 0.0], camera_height, ceiling_height };
        for _ in 0..200 {
            let p = [rng.random_range(0.0..w), rng.random_range(0.0..d)];
            if room.contains_strictly(p) && room.wall_clearance(p) >= 0.6 {
                room.camera_xy = p;
                if room.validate().is_ok() {
                    return room;
                }
            }
        }
    }
}

/// A distinct random style for every plane id in `0..n_planes`.
pub fn random_styles<R: Rng>(n_planes: usize, rng: &mut R) -> BTreeMap<u8, PlaneStyle> {
    let mut styles = BTreeMap::new();
    let mut used: Vec<[f32; 3]> = Vec::new();
    for id in 0..n_planes {
        let mut base = [0.0; 3];
        for _ in 0..50 {
            base = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            let far = used.iter().all(|u| u.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f32>() > 0.3);
            if far {
                break;
            }
        }
        used.push(base);
        let texture = match rng.random_range(0..3) {
            0 => Texture::Flat,
            1 => Texture::Stripes,
            _ => Texture::Checker,
        };
        let shift: f32 = rng.random_range(0.08..0.2);
        let secondary = base.map(|c| if c > 0.5 { c - shift } else { c + shift });
        let scale = rng.random_range(3.0..12.0);
        styles.insert(id as u8, PlaneStyle { base_color: base, texture, scale, secondary });
    }
    styles
}

/// Colour every pixel by the style of the plane it sees.
pub fn render_panorama(
    room: &RoomModel,
    styles: &BTreeMap<u8, PlaneStyle>,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Panorama> {
    let layout = geometry::boundary_rows(room, height, width)?;
    let maps = LayoutMaps::from_layout(&layout)?;
    render_with_maps(room, &maps.plane_wise, styles, seed)
}

fn render_with_maps(room: &RoomModel, pwise: &LabelMap, styles: &BTreeMap<u8, PlaneStyle>, seed: u64) -> Result<Panorama> {
    let (height, width) = pwise.dims();
    let mut ids: Vec<u8> = pwise.data().to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phases = BTreeMap::new();
    for &id in &ids {
        let style = styles.get(&id).ok_or(Error::MissingStyle(id))?;
        style.validate()?;
        let span = 2.0 * style.scale;
        phases.insert(id, [rng.random_range(0.0..span), rng.random_range(0.0..span)]);
    }
    let hits = room.cast_columns(width)?;
    let texels = width as f64 / (2.0 * std::f64::consts::PI);
    let [cx, cy] = room.camera_xy;
    let up = room.ceiling_height - room.camera_height;
    Ok(Panorama::from_fn(height, width, |i, u| {
        let id = pwise.get(i, u);
        let phi = row_latitude(i, height);
        let theta = geometry::longitude(u, width);
        let hit = hits[u];
        let (a, b) = match id {
            CEILING_PLANE | FLOOR_PLANE => {
                let t = phi.tan().abs().max(1e-6);
                let r = if id == CEILING_PLANE { up / t } else { room.camera_height / t };
                (cx + r * theta.cos(), cy + r * theta.sin())
            }
            _ => {
                let (start, _) = room.edge(hit.edge);
                let along = (hit.point[0] - start[0]).abs() + (hit.point[1] - start[1]).abs();
                (along, room.camera_height + hit.distance * phi.tan())
            }
        };
        styles[&id].shade(a * texels, b * texels, phases[&id])
    }))
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    Ok(())
}

/// One uniformly placed axis-aligned rectangle whose area is within 0.5%
/// of the image area of `ratio * H * W` (at least one pixel).
pub fn random_rect_mask<R: Rng>(ratio: f64, height: usize, width: usize, rng: &mut R) -> Result<BinaryMask> {
    check_ratio(ratio)?;
    let (h, w) = rect_dims(ratio, height, width, rng)?;
    let top = rng.random_range(0..=height - h);
    let left = rng.random_range(0..=width - w);
    Ok(Grid::from_fn(height, width, |i, j| u8::from((top..top + h).contains(&i) && (left..left + w).contains(&j))))
}

fn rect_dims<R: Rng>(ratio: f64, height: usize, width: usize, rng: &mut R) -> Result<(usize, usize)> {
    let total = (height * width) as f64;
    let target = ratio * total;
    let tol = 0.005 * total;
    if target < 1.0 {
        return Ok((1, 1));
    }
    let fits = |h: usize, w: usize| (h * w) as f64 >= 1.0 && ((h * w) as f64 - target).abs() <= tol;
    let round_dims = |h: f64| {
        let h = (h.round() as usize).clamp(1, height);
        let w = ((target / h as f64).round() as usize).clamp(1, width);
        (h, w)
    };
    for _ in 0..64 {
        // aspect w/h between 1/2 and 4 suits wide panoramas
        let aspect = rng.random_range(0.5f64.ln()..4f64.ln()).exp();
        let (h, w) = round_dims((target / aspect).sqrt());
        if fits(h, w) {
            return Ok((h, w));
        }
    }
    let candidates: Vec<(usize, usize)> = (1..=height).map(|h| round_dims(h as f64)).filter(|&(h, w)| fits(h, w)).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(format!("a {ratio} rectangle does not fit a {height}x{width} image")));
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// Fill a polygon (pixel coordinates `[x, y]`) by testing pixel centres.
pub fn rasterize_polygon(vertices: &[[f64; 2]], height: usize, width: usize) -> BinaryMask {
    let n = vertices.len();
    Grid::from_fn(height, width, |i, j| {
        let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
        let mut inside = false;
        for k in 0..n {
            let (a, b) = (vertices[k], vertices[(k + 1) % n]);
            if (a[1] > py) != (b[1] > py) {
                let x = a[0] + (py - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if px < x {
                    inside = !inside;
                }
            }
        }
        u8::from(inside)
    })
}

/// Number of 4-connected components of non-zero cells (no wrap).
pub fn count_components(mask: &BinaryMask) -> usize {
    let (h, w) = mask.dims();
    let mut seen = Grid::filled(h, w, false);
    let mut count = 0;
    for si in 0..h {
        for sj in 0..w {
            if mask.get(si, sj) == 0 || seen.get(si, sj) {
                continue;
            }
            count += 1;
            seen.set(si, sj, true);
            let mut queue = VecDeque::from([(si, sj)]);
            while let Some((i, j)) = queue.pop_front() {
                let mut push = |a: usize, b: usize| {
                    if mask.get(a, b) != 0 && !seen.get(a, b) {
                        seen.set(a, b, true);
                        queue.push_back((a, b));
                    }
                };
                if i > 0 {
                    push(i - 1, j);
                }
                if i + 1 < h {
                    push(i + 1, j);
                }
                if j > 0 {
                    push(i, j - 1);
                }
                if j + 1 < w {
                    push(i, j + 1);
                }
            }
        }
    }
    count
}

pub const POLYGON_RETRIES: usize = 200;

/// Random star-convex polygon mask with area within 20% of `area_ratio`.
/// Returns the mask and its realized area ratio.
pub fn polygon_mask<R: Rng>(
    n_vertices: usize,
    area_ratio: f64,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<(BinaryMask, f64)> {
    if n_vertices < 3 {
        return Err(Error::InvalidArgument(format!("a polygon needs at least 3 vertices, got {n_vertices}")));
    }
    check_ratio(area_ratio)?;
    let target = area_ratio * (height * width) as f64;
    for _ in 0..POLYGON_RETRIES {
        let mut angles: Vec<f64> = (0..n_vertices).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let radii: Vec<f64> = (0..n_vertices).map(|_| rng.random_range(0.55..1.0)).collect();
        let stretch = rng.random_range(1.0..2.5);
        let unit: Vec<[f64; 2]> = angles.iter().zip(&radii).map(|(a, r)| [r * a.cos() * stretch, r * a.sin()]).collect();
        let unit_area = shoelace(&unit);
        if unit_area < 1e-6 {
            continue;
        }
        let s = (target / unit_area).sqrt();
        let (min_x, max_x) = extent(unit.iter().map(|p| p[0] * s));
        let (min_y, max_y) = extent(unit.iter().map(|p| p[1] * s));
        if max_x - min_x >= width as f64 || max_y - min_y >= height as f64 {
            continue;
        }
        let cx = rng.random_range(-min_x..width as f64 - max_x);
        let cy = rng.random_range(-min_y..height as f64 - max_y);
        let verts: Vec<[f64; 2]> = unit.iter().map(|p| [cx + p[0] * s, cy + p[1] * s]).collect();
        let mask = rasterize_polygon(&verts, height, width);
        let area = mask.count_nonzero() as f64;
        if area > 0.0 && (area - target).abs() <= 0.2 * target && count_components(&mask) == 1 {
            return Ok((mask, area / (height * width) as f64));
        }
    }
    Err(Error::DegeneratePolygon(POLYGON_RETRIES))
}

fn shoelace(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    0.5 * (0..n).map(|k| p[k][0] * p[(k + 1) % n][1] - p[(k + 1) % n][0] * p[k][1]).sum::<f64>().abs()
}

fn extent(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// `I_in = I_gt ⊙ (1 − M)`, over every channel.
pub fn apply_mask(image: &Panorama, mask: &BinaryMask) -> Result<Panorama> {
    if image.dims() != mask.dims() {
        return Err(Error::ShapeMismatch {
            what: "apply_mask",
            expected: vec![image.height(), image.width()],
            got: vec![mask.height(), mask.width()],
        });
    }
    if let Some(&v) = mask.data().iter().find(|&&v| v > 1) {
        return Err(Error::NonBinaryMask(v as f32));
    }
    let mut out = image.clone();
    let (h, w) = image.dims();
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                if mask.get(i, j) == 1 {
                    out.set(c, i, j, 0.0);
                }
            }
        }
    }
    Ok(out)
}

/// One training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Panorama,
    pub mask: BinaryMask,
    pub layout: CornerLayout,
    pub maps: LayoutMaps,
    pub seed: u64,
}

impl Sample {
    pub fn masked_input(&self) -> Panorama {
        apply_mask(&self.image, &self.mask).expect("sample invariants hold")
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.image.dims();
        let shapes = [self.mask.dims(), self.maps.boundary.dims(), self.maps.three_class.dims(), self.maps.plane_wise.dims()];
        if shapes.iter().any(|&d| d != dims) || (self.layout.height, self.layout.width) != dims {
            return Err(Error::ShapeMismatch { what: "sample", expected: vec![dims.0, dims.1], got: vec![] });
        }
        if !self.mask.is_binary() {
            return Err(Error::NonBinaryMask(*self.mask.data().iter().max().unwrap_or(&0) as f32));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("image values outside [0, 1]".into()));
        }
        self.layout.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MaskConfig {
    /// Rectangle with ratio uniform in `[min_ratio, max_ratio]`.
    Rect { min_ratio: f64, max_ratio: f64 },
    /// Star-convex polygon with `vertices` corners.
    Polygon { min_ratio: f64, max_ratio: f64, vertices: usize },
}

impl MaskConfig {
    pub fn draw<R: Rng>(&self, height: usize, width: usize, rng: &mut R) -> Result<BinaryMask> {
        let pick = |lo: f64, hi: f64, rng: &mut R| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        match *self {
            MaskConfig::Rect { min_ratio, max_ratio } => {
                let r = pick(min_ratio, max_ratio, rng);
                random_rect_mask(r, height, width, rng)
            }
            MaskConfig::Polygon { min_ratio, max_ratio, vertices } => {
                let r = pick(min_ratio, max_ratio, rng);
                polygon_mask(vertices, r, height, width, rng).map(|(m, _)| m)
            }
        }
    }
}

/// Scene and mask settings for dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub mask: MaskConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { height: 64, width: 128, mask: MaskConfig::Rect { min_ratio: 0.05, max_ratio: 0.3 } }
    }
}

/// Build the sample for one scene seed. The image goes through an 8-bit
/// round trip so the in-memory and on-disk versions agree exactly.
pub fn make_sample(seed: u64, config: &DataConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = random_room(&mut rng);
    let layout = geometry::boundary_rows(&room, config.height, config.width)?;
    let maps = LayoutMaps::from_layout(&layout)?;
    let styles = random_styles(layout.n_walls() + 2, &mut rng);
    let image = render_with_maps(&room, &maps.plane_wise, &styles, rng.random())?.quantized();
    let mask = config.mask.draw(config.height, config.width, &mut rng)?;
    Ok(Sample { image, mask, layout, maps, seed })
}

/// Per-sample seeds drawn from a master seed; a prefix of a longer run is
/// the same as a shorter run.
pub fn sample_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.random()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub layout: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub config: DataConfig,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write_sample(sample: &Sample, index: usize, out_dir: &Path) -> Result<ManifestEntry> {
    let stem = format!("{index:05}");
    let image = format!("images/{stem}.png");
    let mask = format!("masks/{stem}.png");
    let layout = format!("layouts/{stem}.json");
    sample.image.save_png(&out_dir.join(&image))?;
    sample.mask.save_mask_png(&out_dir.join(&mask))?;
    let layout_path = out_dir.join(&layout);
    let text = serde_json::to_string(&sample.layout).map_err(Error::json(&layout_path))?;
    fs::write(&layout_path, text).map_err(Error::io(&layout_path))?;
    sample.maps.three_class.save_png(&out_dir.join(format!("layouts/{stem}.l3.png")))?;
    sample.maps.plane_wise.save_png(&out_dir.join(format!("layouts/{stem}.pwise.png")))?;
    Ok(ManifestEntry { image, mask, layout, seed: sample.seed })
}

/// Generate `n` samples under `out_dir` and write the manifest.
pub fn generate_dataset(n: usize, master_seed: u64, config: &DataConfig, out_dir: &Path) -> Result<Manifest> {
    for sub in ["images", "masks", "layouts"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(Error::io(&p))?;
    }
    let seeds = sample_seeds(master_seed, n);
    let entries: Vec<Result<ManifestEntry>> =
        par::map_range(n, |i| make_sample(seeds[i], config).and_then(|s| write_sample(&s, i, out_dir)));
    let samples = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { master_seed, config: config.clone(), samples };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
    fs::write(&path, text + "\n").map_err(Error::io(&path))?;
    Ok(manifest)
}

pub fn read_layout(path: &Path) -> Result<CornerLayout> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let layout: CornerLayout = serde_json::from_str(&text).map_err(Error::json(path))?;
    layout.validate()?;
    Ok(layout)
}

pub fn write_layout(layout: &CornerLayout, path: &Path) -> Result<()> {
    let text = serde_json::to_string(layout).map_err(Error::json(path))?;
    fs::write(path, text).map_err(Error::io(path))
}

/// A loaded dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Load and validate every sample listed in `dir/manifest.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
        let samples = manifest
            .samples
            .iter()
            .map(|e| {
                let image = Panorama::load_png(&dir.join(&e.image))?;
                let mask = Grid::load_mask_png(&dir.join(&e.mask))?;
                let layout = read_layout(&dir.join(&e.layout))?;
                let maps = LayoutMaps::from_layout(&layout)?;
                let sample = Sample { image, mask, layout, maps, seed: e.seed };
                sample.validate()?;
                Ok(sample)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { root: dir.to_path_buf(), samples })
    }

    /// Even scene seeds train, odd seeds are held out.
    pub fn split(&self) -> (Vec<&Sample>, Vec<&Sample>) {
        self.samples.iter().partition(|s| s.seed % 2 == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::derive_plane_wise;

    #[test]
    fn random_rooms_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sizes = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let room = random_room(&mut rng);
            room.validate().unwrap();
            sizes.insert(room.plan_vertices.len());
            let layout = geometry::boundary_rows(&room, 64, 128).unwrap();
            layout.validate().unwrap();
        }
        assert_eq!(sizes.into_iter().collect::<Vec<_>>(), vec![4, 6, 8]);
    }

    #[test]
    fn flat_gray_scene_is_constant() {
        let room = RoomModel::rectangle(4.0, 5.0, [1.5, 2.0], 1.5, 2.8);
        let styles = (0..6).map(|id| (id, PlaneStyle::flat([0.5; 3]))).collect();
        let img = render_panorama(&room, &styles, 32, 64, 1).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn flat_colors_recover_plane_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let room = random_room(&mut rng);
            let layout = geometry::boundary_rows(&room, 48, 96).unwrap();
            let maps = LayoutMaps::from_layout(&layout).unwrap();
            let n = layout.n_walls() + 2;
            let palette: Vec<[f32; 3]> = (0..n).map(|k| [k as f32 / n as f32, 0.5, 1.0 - k as f32 / n as f32]).collect();
            let styles = palette.iter().enumerate().map(|(k, &c)| (k as u8, PlaneStyle::flat(c))).collect();
            let img = render_panorama(&room, &styles, 48, 96, 0).unwrap();
            let ids = Grid::from_fn(48, 96, |i, j| palette.iter().position(|c| *c == img.pixel(i, j)).unwrap() as u8);
            assert_eq!(ids, derive_plane_wise(&maps.three_class, &layout).unwrap());
        }
    }

    #[test]
    fn missing_style_is_an_error() {
        let room = RoomModel::rectangle(4.0, 4.0, [2.0, 2.0], 1.5, 2.8);
        let styles = (0..5).map(|id| (id, PlaneStyle::flat([0.5; 3]))).collect();
        assert!(matches!(render_panorama(&room, &styles, 32, 64, 1), Err(Error::MissingStyle(5))));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let room = random_room(&mut rng);
        let styles = random_styles(8, &mut rng);
        let a = render_panorama(&room, &styles, 32, 64, 9).unwrap();
        let b = render_panorama(&room, &styles, 32, 64, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rect_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = random_rect_mask(0.05, 256, 512, &mut rng).unwrap();
            let area = m.count_nonzero();
            assert!((5898..=7209).contains(&area), "{area}");
            assert_eq!(count_components(&m), 1);
        }
        let tiny = random_rect_mask(1e-6, 64, 128, &mut rng).unwrap();
        assert_eq!(tiny.count_nonzero(), 1);
        assert!(random_rect_mask(1.0, 64, 128, &mut rng).is_err());
        assert!(random_rect_mask(0.0, 64, 128, &mut rng).is_err());
    }

    #[test]
    fn rectangle_polygon_rasterizes_to_rectangle() {
        let verts = [[10.0, 5.0], [40.0, 5.0], [40.0, 20.0], [10.0, 20.0]];
        let m = rasterize_polygon(&verts, 32, 64);
        let expected = Grid::from_fn(32, 64, |i, j| u8::from((5..20).contains(&i) && (10..40).contains(&j)));
        assert_eq!(m, expected);
    }

    #[test]
    fn polygon_masks_hit_their_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..100 {
            let ratio = [0.05, 0.1, 0.2, 0.3][k % 4];
            let (m, realized) = polygon_mask(3 + k % 8, ratio, 64, 128, &mut rng).unwrap();
            assert!((realized - ratio).abs() <= 0.2 * ratio);
            assert_eq!(realized, m.ratio());
            assert_eq!(count_components(&m), 1);
        }
        assert!(polygon_mask(2, 0.1, 64, 128, &mut rng).is_err());
    }

    #[test]
    fn apply_mask_examples() {
        let img = Panorama::filled(4, 6, [0.8; 3]);
        let zero = Grid::filled(4, 6, 0u8);
        assert_eq!(apply_mask(&img, &zero).unwrap(), img);
        let ones = Grid::filled(4, 6, 1u8);
        assert!(apply_mask(&img, &ones).unwrap().data().iter().all(|&v| v == 0.0));
        let checker = Grid::from_fn(4, 6, |i, j| ((i + j) % 2) as u8);
        let out = apply_mask(&img, &checker).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..6 {
                    assert_eq!(out.get(c, i, j), if (i + j) % 2 == 1 { 0.0 } else { 0.8 });
                }
            }
        }
        assert!(matches!(apply_mask(&img, &Grid::filled(4, 6, 2u8)), Err(Error::NonBinaryMask(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = DataConfig { height: 32, width: 64, ..DataConfig::default() };
        let manifest = generate_dataset(4, 7, &config, dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 4);
        let data = Dataset::load(dir.path()).unwrap();
        for (loaded, entry) in data.samples.iter().zip(&manifest.samples) {
            assert_eq!(*loaded, make_sample(entry.seed, &config).unwrap());
        }
        let empty = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(0, 7, &config, empty.path()).unwrap();
        assert!(manifest.samples.is_empty());
        assert_eq!(fs::read_dir(empty.path().join("images")).unwrap().count(), 0);
    }
}
