//! Nested-loop reference detector used to check the library detector.

use ndarray::Array3;
use rand::Rng;
use unifeat::detector::{detect_dad_baseline, detect_gcdad, DetectorConfig, KeypointSet};
use unifeat::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleKeypoint {
    pub group: usize,
    pub cell: (usize, usize),
    pub offset: (f64, f64),
    pub score: f64,
    pub pos: (f64, f64),
}

pub struct OracleParams {
    pub rel_threshold: f64,
    pub nms_radius: usize,
    pub edge_ratio: f64,
    pub stride: f64,
}

type Grid = Vec<Vec<f64>>;

/// Group `g` (1-based) covers channels `[(g−1)·⌊K/G⌋, g·⌊K/G⌋)`.
pub fn group_responses(values: &Array3<f32>, groups: usize) -> Vec<Grid> {
    let (k, h, w) = values.dim();
    let width = k / groups;
    let mut out = Vec::new();
    for g in 0..groups {
        let mut grid = vec![vec![0.0; w]; h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0f64;
                for c in g * width..(g + 1) * width {
                    let v = values[[c, y, x]] as f64;
                    s += v * v;
                }
                grid[y][x] = s.sqrt();
            }
        }
        out.push(grid);
    }
    out
}

pub fn max_response(values: &Array3<f32>) -> Grid {
    let (k, h, w) = values.dim();
    let mut grid = vec![vec![f64::NEG_INFINITY; w]; h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..k {
                grid[y][x] = grid[y][x].max(values[[c, y, x]] as f64);
            }
        }
    }
    grid
}

fn detect(r: &Grid, group: usize, p: &OracleParams) -> Vec<OracleKeypoint> {
    let h = r.len();
    let w = r[0].len();
    let mut peak = f64::NEG_INFINITY;
    for row in r {
        for &v in row {
            if v > peak {
                peak = v;
            }
        }
    }
    let mut out = Vec::new();
    if !(peak > 0.0) {
        return out;
    }
    let rad = p.nms_radius as isize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let v = r[y][x];
            if !(v > 0.0) || v < p.rel_threshold * peak {
                continue;
            }
            let mut is_max = true;
            for dy in -rad..=rad {
                for dx in -rad..=rad {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if (dx, dy) == (0, 0)
                        || ny < 0
                        || nx < 0
                        || ny >= h as isize
                        || nx >= w as isize
                    {
                        continue;
                    }
                    if r[ny as usize][nx as usize] >= v {
                        is_max = false;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let dxx = r[y][x + 1] - 2.0 * v + r[y][x - 1];
            let dyy = r[y + 1][x] - 2.0 * v + r[y - 1][x];
            let dxy = (r[y + 1][x + 1] - r[y - 1][x + 1] - r[y + 1][x - 1] + r[y - 1][x - 1]) / 4.0;
            let det = dxx * dyy - dxy * dxy;
            let tr = dxx + dyy;
            let bound = (p.edge_ratio + 1.0).powi(2) / p.edge_ratio;
            if !(det > 0.0 && tr * tr / det < bound) {
                continue;
            }
            let gx = (r[y][x + 1] - r[y][x - 1]) / 2.0;
            let gy = (r[y + 1][x] - r[y - 1][x]) / 2.0;
            // inverse of [[dxx, dxy], [dxy, dyy]]
            let (i00, i01, i11) = (dyy / det, -dxy / det, dxx / det);
            let mut off = (-(i00 * gx + i01 * gy), -(i01 * gx + i11 * gy));
            if off.0.abs() > 0.5 || off.1.abs() > 0.5 {
                off = (0.0, 0.0);
            }
            let pos = (
                (x as f64 + off.0) * p.stride + p.stride / 2.0,
                (y as f64 + off.1) * p.stride + p.stride / 2.0,
            );
            out.push(OracleKeypoint {
                group,
                cell: (x, y),
                offset: off,
                score: v,
                pos,
            });
        }
    }
    out
}

fn merge(mut all: Vec<OracleKeypoint>, stride: f64) -> Vec<OracleKeypoint> {
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.group.cmp(&b.group))
            .then(a.cell.1.cmp(&b.cell.1))
            .then(a.cell.0.cmp(&b.cell.0))
    });
    let radius = stride / 2.0;
    let mut kept: Vec<OracleKeypoint> = Vec::new();
    for kp in all {
        let near = kept
            .iter()
            .any(|k| (k.pos.0 - kp.pos.0).hypot(k.pos.1 - kp.pos.1) <= radius);
        if !near {
            kept.push(kp);
        }
    }
    kept
}

/// Group detection: per-group L2 responses, ids from 1.
pub fn gcdad(values: &Array3<f32>, groups: usize, p: &OracleParams) -> Vec<OracleKeypoint> {
    let mut all = Vec::new();
    for (g, r) in group_responses(values, groups).iter().enumerate() {
        all.extend(detect(r, g + 1, p));
    }
    merge(all, p.stride)
}

/// Channel-max baseline, group id 0.
pub fn dad(values: &Array3<f32>, p: &OracleParams) -> Vec<OracleKeypoint> {
    merge(detect(&max_response(values), 0, p), p.stride)
}

fn compare(name: &str, got: &KeypointSet, want: &[OracleKeypoint]) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!(
            "{name}: {} keypoints, oracle {}",
            got.len(),
            want.len()
        ));
    }
    for (i, (k, o)) in got.iter().zip(want).enumerate() {
        if k.group_id != o.group || k.cell != o.cell {
            return Err(format!(
                "{name} #{i}: group {} cell {:?}, oracle group {} cell {:?}",
                k.group_id, k.cell, o.group, o.cell
            ));
        }
        let err = (k.offset.0 - o.offset.0)
            .abs()
            .max((k.offset.1 - o.offset.1).abs());
        if err > 1e-9 {
            return Err(format!("{name} #{i}: offset error {err:e}"));
        }
    }
    Ok(())
}

/// One random map (≤16×16×16) checked against both oracles; returns the keypoint counts.
pub fn check_case(seed: u64) -> Result<(usize, usize), String> {
    let mut r = super::rng(seed);
    let groups = r.random_range(1..=4usize);
    let k = r.random_range(groups..=16);
    let h = r.random_range(3..=16);
    let w = r.random_range(3..=16);
    let stride = [4.0, 8.0][r.random_range(0..2)];
    let values = Array3::from_shape_fn((k, h, w), |_| r.random_range(-1.0f32..1.0));
    let cfg = DetectorConfig {
        groups,
        rel_threshold: r.random_range(0.05..0.6),
        nms_radius: r.random_range(1..=2),
        edge_ratio: r.random_range(2.0..12.0),
        max_keypoints: 100_000,
    };
    let p = OracleParams {
        rel_threshold: cfg.rel_threshold,
        nms_radius: cfg.nms_radius,
        edge_ratio: cfg.edge_ratio,
        stride,
    };
    let map = FeatureMap::new(values.clone(), stride);
    let g = detect_gcdad(&map, &cfg).map_err(|e| e.to_string())?;
    compare("gcdad", &g, &gcdad(&values, groups, &p))?;
    let d = detect_dad_baseline(&map, &cfg).map_err(|e| e.to_string())?;
    compare("dad", &d, &dad(&values, &p))?;
    Ok((g.len(), d.len()))
}
