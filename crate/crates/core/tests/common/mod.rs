//! Independent oracles and helpers shared by the integration tests and the
//! acceptance harness. Everything here is written with plain loops so it does
//! not share code paths with the library.

#![allow(dead_code)]

pub mod cli_contract;
pub mod detector_oracle;
pub mod gradcheck;

use std::collections::HashSet;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform3(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize),
    lo: f64,
    hi: f64,
) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

pub fn uniform2(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

pub fn uniform1(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.random_range(lo..hi))
}

// ---------------------------------------------------------------------------
// finite differences

pub const FD_STEP: f64 = 1e-6;

/// Central-difference gradient of `f` at `x` (flattened).
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------------------
// loop oracles

pub fn oracle_affinity(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((a.nrows(), b.nrows()));
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[j, k]];
            }
            m[[i, j]] = s;
        }
    }
    m
}

pub fn oracle_score(m: &Array2<f64>) -> f64 {
    let (n1, n2) = m.dim();
    let mut rows = 0.0;
    for i in 0..n1 {
        let mut best = f64::NEG_INFINITY;
        for j in 0..n2 {
            best = best.max(m[[i, j]]);
        }
        rows += best;
    }
    let mut cols = 0.0;
    for j in 0..n2 {
        let mut best = f64::NEG_INFINITY;
        for i in 0..n1 {
            best = best.max(m[[i, j]]);
        }
        cols += best;
    }
    rows / (2.0 * n1 as f64) + cols / (2.0 * n2 as f64)
}

/// Mutual nearest neighbours by quadratic scan; ties resolve to the first index.
pub fn oracle_mutual_nn(m: &Array2<f64>) -> Vec<(usize, usize)> {
    let (n1, n2) = m.dim();
    let mut out = vec![];
    for i in 0..n1 {
        let mut bj = 0;
        for j in 1..n2 {
            if m[[i, j]] > m[[i, bj]] {
                bj = j;
            }
        }
        let mut bi = 0;
        for k in 1..n1 {
            if m[[k, bj]] > m[[bi, bj]] {
                bi = k;
            }
        }
        if bi == i {
            out.push((i, bj));
        }
    }
    out
}

pub fn oracle_gem(x: &Array3<f64>, p: f64) -> Vec<f64> {
    let (c, h, w) = x.dim();
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x[[ch, y, xx]].powf(p);
                }
            }
            (s / (h * w) as f64).powf(1.0 / p)
        })
        .collect()
}

/// Soft detection written directly from its definition with an edge-replicated window.
pub fn oracle_soft_detection(f: &Array3<f64>, window: usize) -> Vec<f64> {
    let (c, h, w) = f.dim();
    let r = (window / 2) as isize;
    let mut raw = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::NEG_INFINITY;
            for ch in 0..c {
                let mut mx = f64::NEG_INFINITY;
                for yy in 0..h {
                    for xx in 0..w {
                        mx = mx.max(f[[ch, yy, xx]]);
                    }
                }
                let mut z = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        z += (f[[ch, yy, xx]] - mx).exp();
                    }
                }
                let alpha = (f[[ch, y, x]] - mx).exp() / z;
                let beta = if mx > 0.0 { f[[ch, y, x]] / mx } else { 0.0 };
                best = best.max(alpha * beta);
            }
            raw[y * w + x] = best;
        }
    }
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / (h * w) as f64; h * w]
    }
}

/// Average precision by enumerating every cut-off rank.
pub fn oracle_ap(ranking: &[String], relevant: &HashSet<String>) -> f64 {
    let mut total = 0.0;
    for k in 0..ranking.len() {
        if !relevant.contains(&ranking[k]) {
            continue;
        }
        let hits = ranking[..=k]
            .iter()
            .filter(|id| relevant.contains(*id))
            .count();
        total += hits as f64 / (k + 1) as f64;
    }
    total / relevant.len() as f64
}

/// Bilinear sample of a `C×H×W` map at feature coordinates `(u, v)`, clamped to the map.
pub fn oracle_bilinear(map: &Array3<f64>, u: f64, v: f64) -> Vec<f64> {
    let (c, h, w) = map.dim();
    let u = u.max(0.0).min((w - 1) as f64);
    let v = v.max(0.0).min((h - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = if x0 + 1 < w { x0 + 1 } else { x0 };
    let y1 = if y0 + 1 < h { y0 + 1 } else { y0 };
    let ax = u - x0 as f64;
    let ay = v - y0 as f64;
    (0..c)
        .map(|ch| {
            map[[ch, y0, x0]] * (1.0 - ax) * (1.0 - ay)
                + map[[ch, y0, x1]] * ax * (1.0 - ay)
                + map[[ch, y1, x0]] * (1.0 - ax) * ay
                + map[[ch, y1, x1]] * ax * ay
        })
        .collect()
}
