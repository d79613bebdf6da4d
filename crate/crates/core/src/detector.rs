//! Keypoint detection on feature maps.
//!
//! GC-DAD splits the channels into `G` equal groups, detects on the L2 norm of
//! each group, and merges the per-group keypoints. The DAD baseline detects on
//! the per-cell channel maximum. Both share the same chain: relative threshold,
//! strict local-maximum suppression, Hessian edge test, and a quadratic
//! subpixel fit.

use std::ops::Range;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Uniform channel groups; the trailing `K mod G` channels are left out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    ranges: Vec<(usize, usize)>,
    channels: usize,
}

impl GroupPartition {
    /// 1-based inclusive `(first, last)` channel of every group.
    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn groups(&self) -> usize {
        self.ranges.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// 0-based channel slice of group `g` (0-based).
    pub fn channel_range(&self, g: usize) -> Range<usize> {
        let (first, last) = self.ranges[g];
        first - 1..last
    }

    pub fn unassigned(&self) -> Range<usize> {
        self.ranges.last().map_or(0, |r| r.1)..self.channels
    }
}

pub fn partition_channels(channels: usize, groups: usize) -> Result<GroupPartition> {
    if groups == 0 || groups > channels {
        return Err(Error::arg(format!(
            "cannot split {channels} channels into {groups} groups"
        )));
    }
    let width = channels / groups;
    let ranges = (1..=groups)
        .map(|g| ((g - 1) * width + 1, width * g))
        .collect();
    Ok(GroupPartition { ranges, channels })
}

/// Per-cell detection response of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub values: Array2<f64>,
    pub group_id: usize,
}

impl ResponseMap {
    fn at(&self, x: isize, y: isize) -> f64 {
        self.values[[y as usize, x as usize]]
    }

    fn is_interior(&self, x: usize, y: usize) -> bool {
        let (h, w) = self.values.dim();
        x >= 1 && y >= 1 && x + 1 < w && y + 1 < h
    }
}

/// L2 norm of each group's channel slice at every cell. Group ids start at 1.
pub fn group_l2_response(map: &FeatureMap, part: &GroupPartition) -> Result<Vec<ResponseMap>> {
    if part.channels() != map.channels() {
        return Err(Error::dim(format!(
            "partition covers {} channels, map has {}",
            part.channels(),
            map.channels()
        )));
    }
    let (_, h, w) = map.values.dim();
    Ok((0..part.groups())
        .map(|g| {
            let mut acc = Array2::<f64>::zeros((h, w));
            for c in part.channel_range(g) {
                let plane = map.values.index_axis(Axis(0), c);
                acc.zip_mut_with(&plane, |a, &v| *a += f64::from(v) * f64::from(v));
            }
            acc.mapv_inplace(f64::sqrt);
            ResponseMap {
                values: acc,
                group_id: g + 1,
            }
        })
        .collect())
}

/// Per-cell maximum over channels, reported as group 0.
pub fn channel_max_response(map: &FeatureMap) -> ResponseMap {
    let (_, h, w) = map.values.dim();
    let mut acc = Array2::<f64>::from_elem((h, w), f64::NEG_INFINITY);
    for plane in map.values.axis_iter(Axis(0)) {
        acc.zip_mut_with(&plane, |a, &v| *a = a.max(f64::from(v)));
    }
    ResponseMap {
        values: acc,
        group_id: 0,
    }
}

/// Detection hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub groups: usize,
    /// Fraction of the per-group maximum a candidate must reach.
    pub rel_threshold: f64,
    /// Half-width of the strict local-maximum window, in cells.
    pub nms_radius: usize,
    /// Principal-curvature ratio bound of the edge test.
    pub edge_ratio: f64,
    pub max_keypoints: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            groups: 6,
            rel_threshold: 0.2,
            nms_radius: 1,
            edge_ratio: 10.0,
            max_keypoints: 5000,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups < 1 {
            return Err(Error::Config("detector.groups must be >= 1".into()));
        }
        if !(self.rel_threshold > 0.0 && self.rel_threshold < 1.0) {
            return Err(Error::Config(
                "detector.rel_threshold must be in (0, 1)".into(),
            ));
        }
        if self.nms_radius < 1 {
            return Err(Error::Config("detector.nms_radius must be >= 1".into()));
        }
        if !(self.edge_ratio > 1.0) || !self.edge_ratio.is_finite() {
            return Err(Error::Config("detector.edge_ratio must be > 1".into()));
        }
        if self.max_keypoints < 1 {
            return Err(Error::Config("detector.max_keypoints must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Image-space position in pixels.
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub group_id: usize,
    /// Grid cell the detection came from.
    pub cell: (usize, usize),
    /// Subpixel offset applied to `cell`, in cells.
    pub offset: (f64, f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeypointSet {
    pub keypoints: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Keypoint> {
        self.keypoints.iter()
    }
}

/// Hessian of the response at `cell` by central differences: `(dxx, dyy, dxy)`.
fn hessian(r: &ResponseMap, x: usize, y: usize) -> (f64, f64, f64) {
    let (x, y) = (x as isize, y as isize);
    let c = r.at(x, y);
    let dxx = r.at(x + 1, y) - 2.0 * c + r.at(x - 1, y);
    let dyy = r.at(x, y + 1) - 2.0 * c + r.at(x, y - 1);
    let dxy =
        (r.at(x + 1, y + 1) - r.at(x + 1, y - 1) - r.at(x - 1, y + 1) + r.at(x - 1, y - 1)) / 4.0;
    (dxx, dyy, dxy)
}

/// Accepts `cell` when its Hessian has positive determinant and curvature ratio below `ratio`.
///
/// Border cells are rejected since the 3×3 neighbourhood is incomplete.
pub fn harris_edge_filter(r: &ResponseMap, cell: (usize, usize), ratio: f64) -> bool {
    let (x, y) = cell;
    if !r.is_interior(x, y) {
        return false;
    }
    let (dxx, dyy, dxy) = hessian(r, x, y);
    let det = dxx * dyy - dxy * dxy;
    if det <= 0.0 {
        return false;
    }
    let trace = dxx + dyy;
    trace * trace / det < (ratio + 1.0) * (ratio + 1.0) / ratio
}

/// Result of the quadratic subpixel fit, offsets in cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub dx: f64,
    pub dy: f64,
    pub valid: bool,
}

impl Refinement {
    const INVALID: Refinement = Refinement {
        dx: 0.0,
        dy: 0.0,
        valid: false,
    };
}

/// Solves `H·δ = −g` with central-difference gradient and Hessian at `cell`.
pub fn refine_subpixel(r: &ResponseMap, cell: (usize, usize)) -> Refinement {
    let (x, y) = cell;
    if !r.is_interior(x, y) {
        return Refinement::INVALID;
    }
    let (xi, yi) = (x as isize, y as isize);
    let gx = (r.at(xi + 1, yi) - r.at(xi - 1, yi)) / 2.0;
    let gy = (r.at(xi, yi + 1) - r.at(xi, yi - 1)) / 2.0;
    let (dxx, dyy, dxy) = hessian(r, x, y);
    let det = dxx * dyy - dxy * dxy;
    if det == 0.0 || !det.is_finite() {
        return Refinement::INVALID;
    }
    let dx = -(dyy * gx - dxy * gy) / det;
    let dy = -(dxx * gy - dxy * gx) / det;
    if !(dx.abs() <= 0.5 && dy.abs() <= 0.5) {
        return Refinement::INVALID;
    }
    Refinement {
        dx,
        dy,
        valid: true,
    }
}

fn is_strict_local_max(r: &ResponseMap, x: usize, y: usize, radius: usize) -> bool {
    let (h, w) = r.values.dim();
    let v = r.values[[y, x]];
    let y0 = y.saturating_sub(radius);
    let x0 = x.saturating_sub(radius);
    for ny in y0..=(y + radius).min(h - 1) {
        for nx in x0..=(x + radius).min(w - 1) {
            if (nx, ny) != (x, y) && r.values[[ny, nx]] >= v {
                return false;
            }
        }
    }
    true
}

/// Threshold, suppression, edge test and refinement on a single response map.
///
/// Keypoints come back in row-major cell order, positioned on `map`'s image grid.
pub fn detect_in_response(
    r: &ResponseMap,
    cfg: &DetectorConfig,
    map: &FeatureMap,
) -> Vec<Keypoint> {
    let peak = r.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Vec::new();
    }
    let threshold = cfg.rel_threshold * peak;
    let (h, w) = r.values.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = r.values[[y, x]];
            if !(v > 0.0 && v >= threshold) {
                continue;
            }
            if !is_strict_local_max(r, x, y, cfg.nms_radius)
                || !harris_edge_filter(r, (x, y), cfg.edge_ratio)
            {
                continue;
            }
            let refined = refine_subpixel(r, (x, y));
            let (fx, fy) = (x as f64 + refined.dx, y as f64 + refined.dy);
            let (ix, iy) = map.to_image(fx, fy);
            out.push(Keypoint {
                x: ix,
                y: iy,
                score: v,
                group_id: r.group_id,
                cell: (x, y),
                offset: (refined.dx, refined.dy),
            });
        }
    }
    out
}

/// Orders keypoints by descending score (ties: group, row, column) and drops any
/// keypoint within `radius` pixels of a stronger one already kept.
pub fn merge_keypoints(mut all: Vec<Keypoint>, radius: f64) -> Vec<Keypoint> {
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.group_id.cmp(&b.group_id))
            .then(a.cell.1.cmp(&b.cell.1))
            .then(a.cell.0.cmp(&b.cell.0))
    });
    let r2 = radius * radius;
    let mut kept: Vec<Keypoint> = Vec::with_capacity(all.len());
    for kp in all {
        let dup = kept.iter().any(|k| {
            let (dx, dy) = (k.x - kp.x, k.y - kp.y);
            dx * dx + dy * dy <= r2
        });
        if !dup {
            kept.push(kp);
        }
    }
    kept
}

fn finish(all: Vec<Keypoint>, map: &FeatureMap, cfg: &DetectorConfig) -> KeypointSet {
    let mut keypoints = merge_keypoints(all, 0.5 * map.stride);
    keypoints.truncate(cfg.max_keypoints);
    KeypointSet { keypoints }
}

/// Group-concept detection: union of per-group detections on L2 group responses.
pub fn detect_gcdad(map: &FeatureMap, cfg: &DetectorConfig) -> Result<KeypointSet> {
    cfg.validate()?;
    if !map.is_finite() {
        return Err(Error::arg("feature map contains non-finite values"));
    }
    let part = partition_channels(map.channels(), cfg.groups)?;
    let all = group_l2_response(map, &part)?
        .iter()
        .flat_map(|r| detect_in_response(r, cfg, map))
        .collect();
    Ok(finish(all, map, cfg))
}

/// Channel-maximum baseline detection (single response, group id 0).
pub fn detect_dad_baseline(map: &FeatureMap, cfg: &DetectorConfig) -> Result<KeypointSet> {
    cfg.validate()?;
    if !map.is_finite() {
        return Err(Error::arg("feature map contains non-finite values"));
    }
    if map.channels() == 0 {
        return Ok(KeypointSet::default());
    }
    let all = detect_in_response(&channel_max_response(map), cfg, map);
    Ok(finish(all, map, cfg))
}
