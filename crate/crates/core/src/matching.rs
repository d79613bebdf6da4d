//! Affinity matrices, the image-pair affinity score, mutual nearest-neighbour
//! matching and homography-based matching accuracy.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis, NdFloat};

use crate::descriptor::DescriptorSet;
use crate::detector::KeypointSet;
use crate::error::{Error, Result};
use crate::linalg::mat_mul;

/// Default pixel thresholds of the accuracy curve.
pub const MMA_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

/// All-pairs inner products `M[i][j] = <a_i, p_j>`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub values: Array2<f64>,
}

impl AffinityMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn score(&self) -> Result<f64> {
        affinity_score(self.values.view())
    }

    pub fn transposed(&self) -> AffinityMatrix {
        AffinityMatrix {
            values: self.values.t().to_owned(),
        }
    }
}

/// `A · Pᵀ` for row-descriptor matrices of equal width.
pub fn affinity<T: NdFloat>(a: ArrayView2<T>, p: ArrayView2<T>) -> Result<Array2<T>> {
    if a.ncols() != p.ncols() {
        return Err(Error::dim(format!(
            "descriptor dims differ: {} vs {}",
            a.ncols(),
            p.ncols()
        )));
    }
    let mut m = Array2::<T>::zeros((a.nrows(), p.nrows()));
    mat_mul(T::one(), &a, &p.t(), T::zero(), &mut m);
    Ok(m)
}

pub fn affinity_matrix(da: &DescriptorSet, dp: &DescriptorSet) -> Result<AffinityMatrix> {
    let a = da.vectors.mapv(f64::from);
    let p = dp.vectors.mapv(f64::from);
    Ok(AffinityMatrix {
        values: affinity(a.view(), p.view())?,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax<'a, T: PartialOrd + Copy + 'a>(
    values: impl IntoIterator<Item = &'a T>,
) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(*v > b) => {}
            _ => best = Some((i, *v)),
        }
    }
    best
}

/// Per-row and per-column argmax of `m`.
pub(crate) fn row_col_argmax<T: NdFloat>(m: ArrayView2<T>) -> (Vec<usize>, Vec<usize>) {
    let rows = m
        .axis_iter(Axis(0))
        .map(|r| argmax(r.iter()).map_or(0, |(j, _)| j))
        .collect();
    // one row-major sweep; strict `>` keeps the lowest row on ties
    let mut cols = vec![0usize; m.ncols()];
    if let Some(first) = m.outer_iter().next() {
        let mut best = first.to_vec();
        for (i, row) in m.outer_iter().enumerate().skip(1) {
            for ((b, c), &v) in best.iter_mut().zip(cols.iter_mut()).zip(row.iter()) {
                if v > *b {
                    *b = v;
                    *c = i;
                }
            }
        }
    }
    (rows, cols)
}

/// `s = 1/(2N1)·Σ_i max_j M_ij + 1/(2N2)·Σ_j max_i M_ij`.
pub fn affinity_score<T: NdFloat>(m: ArrayView2<T>) -> Result<T> {
    let (n1, n2) = m.dim();
    if n1 == 0 || n2 == 0 {
        return Err(Error::arg("affinity score of an empty matrix"));
    }
    let (row_arg, col_arg) = row_col_argmax(m);
    let row_sum = row_arg
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (i, &j)| acc + m[[i, j]]);
    let col_sum = col_arg
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (j, &i)| acc + m[[i, j]]);
    let two = T::one() + T::one();
    Ok(row_sum / (two * T::from(n1).expect("count"))
        + col_sum / (two * T::from(n2).expect("count")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

/// Mutual nearest-neighbour pairs, ordered by `a`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn mutual_nn_from_affinity(m: ArrayView2<f64>) -> MatchSet {
    if m.nrows() == 0 || m.ncols() == 0 {
        return MatchSet::default();
    }
    let (row_arg, col_arg) = row_col_argmax(m);
    let pairs = row_arg
        .iter()
        .enumerate()
        .filter(|&(i, &j)| col_arg[j] == i)
        .map(|(i, &j)| Match {
            a: i,
            b: j,
            similarity: m[[i, j]],
        })
        .collect();
    MatchSet { pairs }
}

pub fn mutual_nn_matches(da: &DescriptorSet, db: &DescriptorSet) -> Result<MatchSet> {
    if da.is_empty() || db.is_empty() {
        return Ok(MatchSet::default());
    }
    Ok(mutual_nn_from_affinity(
        affinity_matrix(da, db)?.values.view(),
    ))
}

/// A planar projective transform acting on `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography =
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn determinant(&self) -> f64 {
        let h = &self.0;
        h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1])
            - h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0])
            + h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0])
    }

    /// Rejects matrices whose determinant vanishes relative to their scale.
    pub fn check_invertible(&self) -> Result<()> {
        let scale = self.0.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let det = self.determinant();
        if !det.is_finite() || scale == 0.0 || det.abs() <= 1e-12 * scale.powi(3) {
            return Err(Error::arg("homography is singular"));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Result<Homography> {
        self.check_invertible()?;
        let h = &self.0;
        let det = self.determinant();
        let mut inv = [[0.0; 3]; 3];
        for (r, row) in inv.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                // adjugate: transpose of the cofactor matrix
                let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
                let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
                *v = (h[r1][c1] * h[r2][c2] - h[r1][c2] * h[r2][c1]) / det;
            }
        }
        Ok(Homography(inv))
    }

    pub fn compose(&self, other: &Homography) -> Homography {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[r][k] * other.0[k][c]).sum();
            }
        }
        Homography(out)
    }

    /// Projects a point; `None` when it maps to infinity.
    pub fn project(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let h = &self.0;
        let w = h[2][0] * x + h[2][1] * y + h[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some((
            (h[0][0] * x + h[0][1] * y + h[0][2]) / w,
            (h[1][0] * x + h[1][1] * y + h[1][2]) / w,
        ))
    }

    /// Nine whitespace-separated numbers, row-major.
    pub fn parse(text: &str) -> Result<Homography> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Format(format!("homography entry {t:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != 9 {
            return Err(Error::Format(format!(
                "homography needs 9 entries, found {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("homography has non-finite entries".into()));
        }
        let mut h = [[0.0; 3]; 3];
        for (i, v) in values.into_iter().enumerate() {
            h[i / 3][i % 3] = v;
        }
        Ok(Homography(h))
    }

    pub fn to_text(&self) -> String {
        self.0
            .iter()
            .map(|r| format!("{:e} {:e} {:e}", r[0], r[1], r[2]))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

/// Fraction of matches whose reprojection error is within each threshold.
///
/// Matches whose anchor point projects to infinity count as incorrect.
pub fn mma_curve(
    matches: &MatchSet,
    kps_a: &KeypointSet,
    kps_b: &KeypointSet,
    h: &Homography,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    h.check_invertible()?;
    if matches.is_empty() {
        return Ok(vec![0.0; thresholds.len()]);
    }
    let errors = matches
        .pairs
        .iter()
        .map(|m| {
            let pa = kps_a.keypoints.get(m.a).ok_or_else(|| {
                Error::arg(format!(
                    "match references keypoint {} of {}",
                    m.a,
                    kps_a.len()
                ))
            })?;
            let pb = kps_b.keypoints.get(m.b).ok_or_else(|| {
                Error::arg(format!(
                    "match references keypoint {} of {}",
                    m.b,
                    kps_b.len()
                ))
            })?;
            Ok(h.project(pa.x, pa.y)
                .map(|(x, y)| ((x - pb.x).powi(2) + (y - pb.y).powi(2)).sqrt()))
        })
        .collect::<Result<Vec<Option<f64>>>>()?;
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|t| {
            errors
                .iter()
                .filter(|e| matches!(e, Some(d) if d <= t))
                .count() as f64
                / n
        })
        .collect())
}

/// Writes one `xa ya xb yb sim` line per match.
pub fn write_matches<W: Write>(
    out: &mut W,
    matches: &MatchSet,
    kps_a: &KeypointSet,
    kps_b: &KeypointSet,
) -> std::io::Result<()> {
    for m in &matches.pairs {
        let (a, b) = (&kps_a.keypoints[m.a], &kps_b.keypoints[m.b]);
        writeln!(out, "{} {} {} {} {}", a.x, a.y, b.x, b.y, m.similarity)?;
    }
    Ok(())
}
