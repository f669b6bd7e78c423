//! Manhattan rooms seen from an equirectangular camera, and the layout
//! guidance maps derived from them.
//!
//! Column `u` of a `W`-wide panorama looks along longitude
//! `θ(u) = 2π(u + 0.5)/W − π`, i.e. plan direction `(cos θ, sin θ)`.
//! Row `i` of an `H`-high panorama sits at latitude `φ = (0.5 − i/H)·π`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Grid, LabelMap};

pub const CEILING: u8 = 0;
pub const WALL: u8 = 1;
pub const FLOOR: u8 = 2;

/// Plane ids in the plane-wise map; walls start at [`FIRST_WALL`].
pub const CEILING_PLANE: u8 = 0;
pub const FLOOR_PLANE: u8 = 1;
pub const FIRST_WALL: u8 = 2;

/// A single rectilinear room with a camera inside it. Lengths in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomModel {
    /// Counter-clockwise, axis-aligned, simple polygon (not repeated at the end).
    pub plan_vertices: Vec<[f64; 2]>,
    pub camera_xy: [f64; 2],
    pub camera_height: f64,
    pub ceiling_height: f64,
}

/// What the horizontal ray of one panorama column hits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColumnHit {
    /// Index of the polygon edge `vertices[edge] -> vertices[edge + 1]`.
    pub edge: usize,
    /// Horizontal distance from the camera to the wall.
    pub distance: f64,
    /// Plan coordinates of the hit point.
    pub point: [f64; 2],
}

impl RoomModel {
    /// Axis-aligned box room `[0, w] x [0, d]`.
    pub fn rectangle(w: f64, d: f64, camera_xy: [f64; 2], camera_height: f64, ceiling_height: f64) -> Self {
        Self {
            plan_vertices: vec![[0.0, 0.0], [w, 0.0], [w, d], [0.0, d]],
            camera_xy,
            camera_height,
            ceiling_height,
        }
    }

    pub fn edge(&self, k: usize) -> ([f64; 2], [f64; 2]) {
        let n = self.plan_vertices.len();
        (self.plan_vertices[k], self.plan_vertices[(k + 1) % n])
    }

    /// Twice the signed polygon area (positive for counter-clockwise).
    fn signed_area2(&self) -> f64 {
        let n = self.plan_vertices.len();
        (0..n)
            .map(|k| {
                let (a, b) = self.edge(k);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum()
    }

    /// Check every invariant of the type.
    pub fn validate(&self) -> Result<()> {
        let v = &self.plan_vertices;
        let n = v.len();
        let bad = |msg: String| Err(Error::InvalidRoom(msg));
        if n < 4 || !n.is_multiple_of(2) {
            return bad(format!("a rectilinear polygon needs an even number >= 4 of vertices, got {n}"));
        }
        if !(self.camera_height > 0.0 && self.ceiling_height > self.camera_height) {
            return bad(format!(
                "need 0 < camera_height < ceiling_height, got {} and {}",
                self.camera_height, self.ceiling_height
            ));
        }
        if v.iter().flatten().chain(&self.camera_xy).any(|c| !c.is_finite()) {
            return bad("non-finite coordinate".into());
        }
        for k in 0..n {
            let (a, b) = self.edge(k);
            let horizontal = a[1] == b[1] && a[0] != b[0];
            let vertical = a[0] == b[0] && a[1] != b[1];
            if !(horizontal || vertical) {
                return bad(format!("edge {k} is not axis-aligned or has zero length"));
            }
            let (_, c) = self.edge((k + 1) % n);
            if (c[1] == b[1]) == horizontal {
                return bad(format!("edges {k} and {} are collinear", (k + 1) % n));
            }
        }
        for i in 0..n {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = self.edge(i);
                let (c, d) = self.edge(j);
                if segments_touch(a, b, c, d) {
                    return bad(format!("edges {i} and {j} intersect"));
                }
            }
        }
        if self.signed_area2() <= 0.0 {
            return bad("polygon is not counter-clockwise".into());
        }
        if !self.contains_strictly(self.camera_xy) {
            return bad(format!("camera {:?} is not strictly inside the plan", self.camera_xy));
        }
        Ok(())
    }

    /// Even-odd point-in-polygon test that also rejects points on an edge.
    pub fn contains_strictly(&self, p: [f64; 2]) -> bool {
        let n = self.plan_vertices.len();
        let mut inside = false;
        for k in 0..n {
            let (a, b) = self.edge(k);
            if point_segment_distance(p, a, b) < 1e-9 {
                return false;
            }
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Minimum distance from `p` to any wall.
    pub fn wall_clearance(&self, p: [f64; 2]) -> f64 {
        (0..self.plan_vertices.len())
            .map(|k| {
                let (a, b) = self.edge(k);
                point_segment_distance(p, a, b)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Nearest wall hit along plan direction `theta`. Ties (a ray through a
    /// vertex) go to the lower edge index.
    pub fn cast(&self, theta: f64) -> Option<ColumnHit> {
        let (dx, dy) = (theta.cos(), theta.sin());
        let [px, py] = self.camera_xy;
        let mut best: Option<ColumnHit> = None;
        for k in 0..self.plan_vertices.len() {
            let (a, b) = self.edge(k);
            let t = if a[1] == b[1] {
                if dy.abs() < 1e-15 {
                    continue;
                }
                let t = (a[1] - py) / dy;
                let x = px + t * dx;
                if x < a[0].min(b[0]) - 1e-12 || x > a[0].max(b[0]) + 1e-12 {
                    continue;
                }
                t
            } else {
                if dx.abs() < 1e-15 {
                    continue;
                }
                let t = (a[0] - px) / dx;
                let y = py + t * dy;
                if y < a[1].min(b[1]) - 1e-12 || y > a[1].max(b[1]) + 1e-12 {
                    continue;
                }
                t
            };
            if t > 1e-12 && best.is_none_or(|h| t < h.distance - 1e-12) {
                best = Some(ColumnHit { edge: k, distance: t, point: [px + t * dx, py + t * dy] });
            }
        }
        best
    }

    /// Ray-cast every column of a `width`-wide panorama.
    pub fn cast_columns(&self, width: usize) -> Result<Vec<ColumnHit>> {
        (0..width)
            .map(|u| {
                self.cast(longitude(u, width)).ok_or_else(|| {
                    Error::InvalidRoom(format!("ray for column {u} leaves the room (camera outside the plan?)"))
                })
            })
            .collect()
    }

    /// Uniformly scale every metric quantity.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            plan_vertices: self.plan_vertices.iter().map(|p| [p[0] * s, p[1] * s]).collect(),
            camera_xy: [self.camera_xy[0] * s, self.camera_xy[1] * s],
            camera_height: self.camera_height * s,
            ceiling_height: self.ceiling_height * s,
        }
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
    let len2 = ex * ex + ey * ey;
    let t = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a[0] + t * ex - p[0], a[1] + t * ey - p[1]);
    (qx * qx + qy * qy).sqrt()
}

/// Closed axis-aligned segments share at least one point.
fn segments_touch(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let overlap = |p0: f64, p1: f64, q0: f64, q1: f64| p0.min(p1).max(q0.min(q1)) <= p0.max(p1).min(q0.max(q1));
    overlap(a[0], b[0], c[0], d[0]) && overlap(a[1], b[1], c[1], d[1])
}

/// Longitude of the centre of column `u`.
pub fn longitude(u: usize, width: usize) -> f64 {
    2.0 * std::f64::consts::PI * (u as f64 + 0.5) / width as f64 - std::f64::consts::PI
}

/// Fractional row of latitude `phi`.
pub fn latitude_row(phi: f64, height: usize) -> f64 {
    (0.5 - phi / std::f64::consts::PI) * height as f64
}

/// Latitude at the centre of row `i`.
pub fn row_latitude(i: usize, height: usize) -> f64 {
    (0.5 - (i as f64 + 0.5) / height as f64) * std::f64::consts::PI
}

/// Per-column ceiling/floor boundary rows and wall-corner columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerLayout {
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "H")]
    pub height: usize,
    pub ceiling_row: Vec<f64>,
    pub floor_row: Vec<f64>,
    pub corner_columns: Vec<usize>,
}

impl CornerLayout {
    /// Constant boundary rows and no corners (a cylindrical room).
    pub fn constant(height: usize, width: usize, ceiling: f64, floor: f64) -> Self {
        Self {
            width,
            height,
            ceiling_row: vec![ceiling; width],
            floor_row: vec![floor; width],
            corner_columns: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InconsistentLayout(msg));
        if self.width == 0 || self.height < 3 {
            return bad(format!("degenerate size {}x{}", self.height, self.width));
        }
        if self.ceiling_row.len() != self.width || self.floor_row.len() != self.width {
            return bad(format!(
                "expected {} rows per boundary, got {} ceiling and {} floor",
                self.width,
                self.ceiling_row.len(),
                self.floor_row.len()
            ));
        }
        let h = self.height as f64;
        for u in 0..self.width {
            let (c, f) = (self.ceiling_row[u], self.floor_row[u]);
            if !(c.is_finite() && f.is_finite() && c >= 0.0 && c < f && f < h && f.round() < h) {
                return bad(format!("column {u}: need 0 <= ceiling < floor < {h}, got {c} and {f}"));
            }
            if c.round() >= f.round() {
                return bad(format!("column {u}: ceiling and floor rows collapse ({c}, {f})"));
            }
        }
        if self.corner_columns.windows(2).any(|w| w[0] >= w[1]) {
            return bad("corner columns must be strictly increasing".into());
        }
        if self.corner_columns.last().is_some_and(|&c| c >= self.width) {
            return bad(format!("corner column beyond width {}", self.width));
        }
        Ok(())
    }

    /// Pixel rows of the two boundaries, `(round(ceiling), round(floor))`.
    pub fn pixel_rows(&self) -> (Vec<usize>, Vec<usize>) {
        (
            self.ceiling_row.iter().map(|r| r.round() as usize).collect(),
            self.floor_row.iter().map(|r| r.round() as usize).collect(),
        )
    }

    /// Wall arc index for every column: arc `k` spans
    /// `[corner_k, corner_{k+1})`, and the columns before the first corner
    /// belong to the arc that wraps across the seam.
    pub fn column_arcs(&self) -> Vec<usize> {
        let c = &self.corner_columns;
        (0..self.width)
            .map(|u| match c.partition_point(|&x| x <= u) {
                0 => c.len().saturating_sub(1),
                k => k - 1,
            })
            .collect()
    }

    pub fn n_walls(&self) -> usize {
        self.corner_columns.len().max(1)
    }
}

/// Oracle layout of `room` for an `height x width` panorama.
pub fn boundary_rows(room: &RoomModel, height: usize, width: usize) -> Result<CornerLayout> {
    room.validate()?;
    let hits = room.cast_columns(width)?;
    let up = room.ceiling_height - room.camera_height;
    let ceiling_row = hits.iter().map(|h| latitude_row((up / h.distance).atan(), height)).collect();
    let floor_row = hits.iter().map(|h| latitude_row(-(room.camera_height / h.distance).atan(), height)).collect();
    let corner_columns = (0..width).filter(|&u| hits[u].edge != hits[(u + width - 1) % width].edge).collect();
    Ok(CornerLayout { width, height, ceiling_row, floor_row, corner_columns })
}

/// 1-pixel boundary lines plus vertical corner segments.
pub fn render_boundary_map(layout: &CornerLayout, height: usize) -> Result<BinaryMask> {
    check_height(layout, height)?;
    let (rc, rf) = layout.pixel_rows();
    let mut map = Grid::filled(height, layout.width, 0u8);
    for u in 0..layout.width {
        map.set(rc[u], u, 1);
        map.set(rf[u], u, 1);
    }
    for &u in &layout.corner_columns {
        for i in rc[u]..=rf[u] {
            map.set(i, u, 1);
        }
    }
    Ok(map)
}

fn check_height(layout: &CornerLayout, height: usize) -> Result<()> {
    if layout.height != height {
        return Err(Error::InconsistentLayout(format!("layout is for height {}, asked for {height}", layout.height)));
    }
    layout.validate()
}

/// Flood-fill barrier: the boundary map thickened on the wall side so that
/// a 4-connected fill cannot slip between columns whose boundary rows jump.
fn fill_barrier(layout: &CornerLayout, boundary: &BinaryMask) -> BinaryMask {
    let w = layout.width;
    let (rc, rf) = layout.pixel_rows();
    let mut barrier = boundary.clone();
    for u in 0..w {
        let (l, r) = ((u + w - 1) % w, (u + 1) % w);
        let c_end = rc[u].max(rc[l].saturating_sub(1)).max(rc[r].saturating_sub(1));
        for i in rc[u]..=c_end {
            barrier.set(i, u, 1);
        }
        let f_start = rf[u].min(rf[l] + 1).min(rf[r] + 1);
        for i in f_start..=rf[u] {
            barrier.set(i, u, 1);
        }
    }
    barrier
}

/// BFS over non-barrier pixels from `seeds`, wrapping horizontally.
fn flood(barrier: &BinaryMask, seeds: impl Iterator<Item = (usize, usize)>, label: u8, out: &mut Grid<u8>) -> Result<()> {
    const UNSET: u8 = u8::MAX;
    let (h, w) = barrier.dims();
    let mut queue = VecDeque::new();
    let visit = |i: usize, j: usize, queue: &mut VecDeque<(usize, usize)>, out: &mut Grid<u8>| -> Result<()> {
        if barrier.get(i, j) != 0 {
            return Ok(());
        }
        match out.get(i, j) {
            UNSET => {
                out.set(i, j, label);
                queue.push_back((i, j));
                Ok(())
            }
            v if v == label => Ok(()),
            _ => Err(Error::FloodLeak { row: i, col: j }),
        }
    };
    for (i, j) in seeds {
        visit(i, j, &mut queue, out)?;
    }
    while let Some((i, j)) = queue.pop_front() {
        if i > 0 {
            visit(i - 1, j, &mut queue, out)?;
        }
        if i + 1 < h {
            visit(i + 1, j, &mut queue, out)?;
        }
        visit(i, (j + w - 1) % w, &mut queue, out)?;
        visit(i, (j + 1) % w, &mut queue, out)?;
    }
    Ok(())
}

/// Ceiling / wall / floor labels by flood fill from the top and bottom rows
/// over the rendered boundary; unreached pixels (boundaries included) are wall.
pub fn derive_three_class(layout: &CornerLayout, height: usize) -> Result<LabelMap> {
    let boundary = render_boundary_map(layout, height)?;
    let barrier = fill_barrier(layout, &boundary);
    let w = layout.width;
    let mut out = Grid::filled(height, w, u8::MAX);
    flood(&barrier, (0..w).map(|j| (0, j)), CEILING, &mut out)?;
    flood(&barrier, (0..w).map(|j| (height - 1, j)), FLOOR, &mut out)?;
    Ok(out.map(|v| if v == u8::MAX { WALL } else { v }))
}

/// Closed-form per-pixel labeling: ceiling above the rounded ceiling row,
/// floor below the rounded floor row, wall otherwise.
pub fn three_class_analytic(layout: &CornerLayout, height: usize) -> Result<LabelMap> {
    check_height(layout, height)?;
    let (rc, rf) = layout.pixel_rows();
    Ok(Grid::from_fn(height, layout.width, |i, u| {
        if i < rc[u] {
            CEILING
        } else if i > rf[u] {
            FLOOR
        } else {
            WALL
        }
    }))
}

/// Split the wall class into one id per corner-delimited arc.
pub fn derive_plane_wise(l3: &LabelMap, layout: &CornerLayout) -> Result<LabelMap> {
    if l3.width() != layout.width {
        return Err(Error::ShapeMismatch { what: "plane-wise labels", expected: vec![layout.width], got: vec![l3.width()] });
    }
    if layout.n_walls() + FIRST_WALL as usize > u8::MAX as usize {
        return Err(Error::InconsistentLayout(format!("{} walls do not fit 8-bit plane ids", layout.n_walls())));
    }
    let arcs = layout.column_arcs();
    let mut out = Grid::filled(l3.height(), l3.width(), 0u8);
    for i in 0..l3.height() {
        for u in 0..l3.width() {
            let id = match l3.get(i, u) {
                CEILING => CEILING_PLANE,
                FLOOR => FLOOR_PLANE,
                WALL => FIRST_WALL + arcs[u] as u8,
                other => return Err(Error::InvalidArgument(format!("label {other} is not a 3-class label"))),
            };
            out.set(i, u, id);
        }
    }
    Ok(out)
}

/// Plane id to 3-class label.
pub fn plane_class(id: u8) -> u8 {
    match id {
        CEILING_PLANE => CEILING,
        FLOOR_PLANE => FLOOR,
        _ => WALL,
    }
}

/// All three guidance maps for one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutMaps {
    pub boundary: BinaryMask,
    pub three_class: LabelMap,
    pub plane_wise: LabelMap,
}

impl LayoutMaps {
    pub fn from_layout(layout: &CornerLayout) -> Result<Self> {
        let boundary = render_boundary_map(layout, layout.height)?;
        let three_class = derive_three_class(layout, layout.height)?;
        let plane_wise = derive_plane_wise(&three_class, layout)?;
        Ok(Self { boundary, three_class, plane_wise })
    }
}

/// Mean IoU over the three classes, skipping classes absent from both maps.
pub fn layout_miou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            what: "layout_miou",
            expected: vec![gt.height(), gt.width()],
            got: vec![pred.height(), pred.width()],
        });
    }
    let mut inter = [0usize; 3];
    let mut union = [0usize; 3];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        for c in 0..3u8 {
            let (ip, ig) = (p == c, g == c);
            inter[c as usize] += usize::from(ip && ig);
            union[c as usize] += usize::from(ip || ig);
        }
    }
    let ious: Vec<f64> = (0..3).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok(if ious.is_empty() { 1.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 })
}
