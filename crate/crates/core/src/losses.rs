//! Training objectives with hand-derived gradients.
//!
//! Matrix-valued functions are generic over the float type: training runs
//! them in `f32`, gradient checks in `f64`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{affinity, affinity_score, row_col_argmax};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Margin of the local matching loss.
    pub margin: f64,
    /// Margin of the global contrastive loss.
    pub tau: f64,
    /// Distillation weight.
    pub lambda: f64,
    /// Negatives per tuple.
    pub negatives: usize,
    /// Side of the soft-detection window, in cells.
    pub window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.5,
            tau: 0.85,
            lambda: 0.1,
            negatives: 5,
            window: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("loss.margin must be > 0");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("loss.tau must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("loss.lambda must be >= 0");
        }
        if self.negatives < 1 {
            return bad("loss.negatives must be >= 1");
        }
        if self.window < 1 || self.window.is_multiple_of(2) {
            return bad("loss.window must be a positive odd number");
        }
        Ok(())
    }
}

fn cast<T: NdFloat>(v: f64) -> T {
    T::from(v).expect("representable")
}

fn to_f64<T: NdFloat>(v: T) -> f64 {
    v.to_f64().expect("finite float")
}

/// `(1/K)·Σ_k max(s_an[k] − s_ap + m, 0)`.
pub fn matching_margin_loss(s_ap: f64, s_an: &[f64], m: f64) -> Result<f64> {
    if s_an.is_empty() {
        return Err(Error::arg("matching loss needs at least one negative"));
    }
    Ok(s_an.iter().map(|s| (s - s_ap + m).max(0.0)).sum::<f64>() / s_an.len() as f64)
}

/// Derivatives of [`matching_margin_loss`] w.r.t. `s_ap` and each `s_an[k]`.
pub fn matching_margin_grad(s_ap: f64, s_an: &[f64], m: f64) -> Result<(f64, Vec<f64>)> {
    if s_an.is_empty() {
        return Err(Error::arg("matching loss needs at least one negative"));
    }
    let k = s_an.len() as f64;
    let d_an: Vec<f64> = s_an
        .iter()
        .map(|s| if s - s_ap + m > 0.0 { 1.0 / k } else { 0.0 })
        .collect();
    Ok((-d_an.iter().sum::<f64>(), d_an))
}

/// Derivative of the affinity score w.r.t. every matrix entry (row/column argmax routing).
pub fn affinity_score_backward<T: NdFloat>(m: ArrayView2<T>) -> Array2<T> {
    let (n1, n2) = m.dim();
    let (row_arg, col_arg) = row_col_argmax(m);
    let mut g = Array2::<T>::zeros((n1, n2));
    let wr = cast::<T>(0.5 / n1 as f64);
    let wc = cast::<T>(0.5 / n2 as f64);
    for (i, &j) in row_arg.iter().enumerate() {
        g[[i, j]] += wr;
    }
    for (j, &i) in col_arg.iter().enumerate() {
        g[[i, j]] += wc;
    }
    g
}

/// Row-wise L2 normalization; returns the unit rows and the original norms. Zero rows stay zero.
pub fn normalize_rows<T: NdFloat>(x: ArrayView2<T>) -> (Array2<T>, Vec<T>) {
    let mut out = x.to_owned();
    let norms = out
        .axis_iter_mut(Axis(0))
        .map(|mut row| {
            let n = row.iter().fold(T::zero(), |a, v| a + *v * *v).sqrt();
            if n > T::zero() {
                row.mapv_inplace(|v| v / n);
            }
            n
        })
        .collect();
    (out, norms)
}

/// Backward of [`normalize_rows`]: `dx = (g − u·⟨u, g⟩) / ‖x‖`.
pub fn normalize_rows_backward<T: NdFloat>(
    unit: ArrayView2<T>,
    norms: &[T],
    grad: ArrayView2<T>,
) -> Array2<T> {
    let mut dx = grad.to_owned();
    for ((mut d, u), n) in dx
        .axis_iter_mut(Axis(0))
        .zip(unit.axis_iter(Axis(0)))
        .zip(norms.iter())
    {
        if *n > T::zero() {
            let dot = u.dot(&d);
            d.zip_mut_with(&u, |g, uv| *g = (*g - *uv * dot) / *n);
        } else {
            d.fill(T::zero());
        }
    }
    dx
}

/// Unit-vector normalization of a single vector with the same zero convention.
pub fn normalize_vector<T: NdFloat>(x: ArrayView1<T>) -> (Array1<T>, T) {
    let n = x.dot(&x).sqrt();
    if n > T::zero() {
        (x.mapv(|v| v / n), n)
    } else {
        (x.to_owned(), n)
    }
}

pub fn normalize_vector_backward<T: NdFloat>(
    unit: ArrayView1<T>,
    norm: T,
    grad: ArrayView1<T>,
) -> Array1<T> {
    if norm > T::zero() {
        let dot = unit.dot(&grad);
        grad.iter()
            .zip(unit.iter())
            .map(|(g, u)| (*g - *u * dot) / norm)
            .collect()
    } else {
        Array1::zeros(grad.len())
    }
}

/// Matching loss of one tuple on unit-norm location rows, with optional row gradients.
#[derive(Debug, Clone)]
pub struct RowsLoss<T> {
    pub loss: f64,
    pub s_ap: f64,
    pub s_an: Vec<f64>,
    /// Gradients for the anchor, the positive and each negative, in that order.
    pub grads: Option<Vec<Array2<T>>>,
}

pub fn matching_loss_rows<T: NdFloat>(
    anchor: ArrayView2<T>,
    positive: ArrayView2<T>,
    negatives: &[ArrayView2<T>],
    margin: f64,
    need_grad: bool,
) -> Result<RowsLoss<T>> {
    let others: Vec<ArrayView2<T>> = std::iter::once(positive)
        .chain(negatives.iter().cloned())
        .collect();
    let mats = others
        .iter()
        .map(|o| affinity(anchor, o.view()))
        .collect::<Result<Vec<_>>>()?;
    let scores = mats
        .iter()
        .map(|m| affinity_score(m.view()).map(to_f64))
        .collect::<Result<Vec<f64>>>()?;
    let (s_ap, s_an) = (scores[0], scores[1..].to_vec());
    let loss = matching_margin_loss(s_ap, &s_an, margin)?;
    let grads = if need_grad {
        let (d_ap, d_an) = matching_margin_grad(s_ap, &s_an, margin)?;
        let weights: Vec<f64> = std::iter::once(d_ap).chain(d_an).collect();
        let mut g_anchor = Array2::<T>::zeros(anchor.raw_dim());
        let mut out = vec![];
        for ((m, o), w) in mats.iter().zip(others.iter()).zip(weights) {
            if w == 0.0 {
                out.push(Array2::zeros(o.raw_dim()));
                continue;
            }
            // the score gradient is non-zero only at the row and column maxima
            let (row_arg, col_arg) = row_col_argmax(m.view());
            let wr = cast::<T>(0.5 * w / row_arg.len() as f64);
            let wc = cast::<T>(0.5 * w / col_arg.len() as f64);
            let mut go = Array2::<T>::zeros(o.raw_dim());
            for (i, &j) in row_arg.iter().enumerate() {
                g_anchor.row_mut(i).scaled_add(wr, &o.row(j));
                go.row_mut(j).scaled_add(wr, &anchor.row(i));
            }
            for (j, &i) in col_arg.iter().enumerate() {
                g_anchor.row_mut(i).scaled_add(wc, &o.row(j));
                go.row_mut(j).scaled_add(wc, &anchor.row(i));
            }
            out.push(go);
        }
        out.insert(0, g_anchor);
        Some(out)
    } else {
        None
    };
    Ok(RowsLoss {
        loss,
        s_ap,
        s_an,
        grads,
    })
}

/// Per-location keypoint weights summing to one over the map.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftDetectionMap {
    /// `H×W`
    pub scores: Array2<f64>,
}

impl SoftDetectionMap {
    /// Scores flattened in row-major location order.
    pub fn flattened(&self) -> Array1<f64> {
        self.scores.iter().copied().collect()
    }
}

struct SoftDetectionParts<T> {
    alpha: Array3<T>,
    exp: Array3<T>,
    zsum: Array3<T>,
    chan_max: Vec<(usize, T)>,
    best: Vec<usize>,
    raw: Vec<T>,
    total: T,
}

/// Cells of the window around `(y, x)`; out-of-map taps repeat the nearest border cell.
fn window_cells(
    y: usize,
    x: usize,
    r: usize,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let r = r as isize;
    (-r..=r).flat_map(move |dy| {
        (-r..=r).map(move |dx| (clamp(y as isize + dy, h), clamp(x as isize + dx, w)))
    })
}

fn soft_detection_parts<T: NdFloat>(f: ArrayView3<T>, window: usize) -> SoftDetectionParts<T> {
    let (c, h, w) = f.dim();
    let r = window / 2;
    let mut chan_max = Vec::with_capacity(c);
    let mut exp = Array3::<T>::zeros((c, h, w));
    let mut zsum = Array3::<T>::zeros((c, h, w));
    let mut alpha = Array3::<T>::zeros((c, h, w));
    let mut alpha_beta = Array3::<T>::zeros((c, h, w));
    for ch in 0..c {
        let plane = f.index_axis(Axis(0), ch);
        let (arg, mx) = crate::matching::argmax(plane.iter()).expect("non-empty map");
        chan_max.push((arg, mx));
        // shifting by the channel max leaves every ratio unchanged
        for y in 0..h {
            for x in 0..w {
                exp[[ch, y, x]] = (plane[[y, x]] - mx).exp();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let z = window_cells(y, x, r, h, w)
                    .fold(T::zero(), |z, (yy, xx)| z + exp[[ch, yy, xx]]);
                zsum[[ch, y, x]] = z;
                let a = exp[[ch, y, x]] / z;
                alpha[[ch, y, x]] = a;
                let b = if mx > T::zero() {
                    plane[[y, x]] / mx
                } else {
                    T::zero()
                };
                alpha_beta[[ch, y, x]] = a * b;
            }
        }
    }
    let mut best = vec![0; h * w];
    let mut raw = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let (arg, v) = crate::matching::argmax(alpha_beta.slice(ndarray::s![.., y, x]).iter())
                .expect("channels");
            best[y * w + x] = arg;
            raw[y * w + x] = v;
        }
    }
    let total = raw.iter().fold(T::zero(), |a, v| a + *v);
    SoftDetectionParts {
        alpha,
        exp,
        zsum,
        chan_max,
        best,
        raw,
        total,
    }
}

/// Flattened soft-detection scores of a `C×H×W` map.
pub fn soft_detection_values<T: NdFloat>(f: ArrayView3<T>, window: usize) -> Array1<T> {
    let (_, h, w) = f.dim();
    let parts = soft_detection_parts(f, window);
    if parts.total > T::zero() {
        parts.raw.iter().map(|v| *v / parts.total).collect()
    } else {
        Array1::from_elem(h * w, T::one() / cast::<T>((h * w) as f64))
    }
}

/// Gradient of the flattened scores w.r.t. the input map.
pub fn soft_detection_backward<T: NdFloat>(
    f: ArrayView3<T>,
    window: usize,
    grad: ArrayView1<T>,
) -> Array3<T> {
    let (_, h, w) = f.dim();
    let mut df = Array3::<T>::zeros(f.raw_dim());
    let p = soft_detection_parts(f, window);
    if !(p.total > T::zero()) {
        return df;
    }
    let scores: Vec<T> = p.raw.iter().map(|v| *v / p.total).collect();
    let mean_g = grad
        .iter()
        .zip(scores.iter())
        .fold(T::zero(), |a, (g, s)| a + *g * *s);
    let r = window / 2;
    for y in 0..h {
        for x in 0..w {
            let l = y * w + x;
            let g_raw = (grad[l] - mean_g) / p.total;
            if g_raw == T::zero() {
                continue;
            }
            let ch = p.best[l];
            let (m_arg, mx) = p.chan_max[ch];
            let a = p.alpha[[ch, y, x]];
            let b = if mx > T::zero() {
                f[[ch, y, x]] / mx
            } else {
                T::zero()
            };
            // through alpha
            let ga = g_raw * b;
            if ga != T::zero() {
                let z = p.zsum[[ch, y, x]];
                for (yy, xx) in window_cells(y, x, r, h, w) {
                    df[[ch, yy, xx]] -= ga * a * p.exp[[ch, yy, xx]] / z;
                }
                df[[ch, y, x]] += ga * a;
            }
            // through beta
            if mx > T::zero() {
                let gb = g_raw * a;
                df[[ch, y, x]] += gb / mx;
                let (my, mxx) = (m_arg / w, m_arg % w);
                df[[ch, my, mxx]] -= gb * f[[ch, y, x]] / (mx * mx);
            }
        }
    }
    df
}

pub fn soft_detection(map: &FeatureMap, window: usize) -> SoftDetectionMap {
    let (_, h, w) = map.values.dim();
    let v = map.values.mapv(f64::from);
    let flat = soft_detection_values(v.view(), window);
    SoftDetectionMap {
        scores: flat.into_shape_with_order((h, w)).expect("h*w scores"),
    }
}

fn check_distill_shapes<T>(
    m_high: &ArrayView2<T>,
    det_a: &ArrayView1<T>,
    det_p: &ArrayView1<T>,
    m_low: &ArrayView2<T>,
) -> Result<()> {
    if m_high.dim() != m_low.dim() || det_a.len() != m_high.nrows() || det_p.len() != m_high.ncols()
    {
        return Err(Error::dim(format!(
            "distillation shapes disagree: high {:?}, low {:?}, det {} and {}",
            m_high.dim(),
            m_low.dim(),
            det_a.len(),
            det_p.len()
        )));
    }
    if m_high.is_empty() {
        return Err(Error::dim("distillation on an empty matrix"));
    }
    Ok(())
}

/// Distillation target `M_high ⊙ W` with `W[i][j] = det_a[i]·det_p[j]·N1·N2`.
pub fn distillation_target<T: NdFloat>(
    m_high: ArrayView2<T>,
    det_a: ArrayView1<T>,
    det_p: ArrayView1<T>,
) -> Array2<T> {
    let (n1, n2) = m_high.dim();
    let scale = cast::<T>((n1 * n2) as f64);
    let mut t = m_high.to_owned();
    for ((i, j), v) in t.indexed_iter_mut() {
        *v = *v * det_a[i] * det_p[j] * scale;
    }
    t
}

/// Mean over entries of `(M_high ⊙ W − M_low)²`.
pub fn distillation_loss<T: NdFloat>(
    m_high: ArrayView2<T>,
    det_a: ArrayView1<T>,
    det_p: ArrayView1<T>,
    m_low: ArrayView2<T>,
) -> Result<f64> {
    check_distill_shapes(&m_high, &det_a, &det_p, &m_low)?;
    let target = distillation_target(m_high, det_a, det_p);
    Ok(distillation_loss_from_target(target.view(), m_low))
}

pub fn distillation_loss_from_target<T: NdFloat>(
    target: ArrayView2<T>,
    m_low: ArrayView2<T>,
) -> f64 {
    let sum: f64 = target
        .iter()
        .zip(m_low.iter())
        .map(|(t, l)| {
            let d = to_f64(*t) - to_f64(*l);
            d * d
        })
        .sum();
    sum / target.len() as f64
}

/// Gradient of the distillation loss w.r.t. `M_low` only.
pub fn distillation_grad_low<T: NdFloat>(target: ArrayView2<T>, m_low: ArrayView2<T>) -> Array2<T> {
    let c = cast::<T>(2.0 / target.len() as f64);
    let mut g = m_low.to_owned();
    g.zip_mut_with(&target, |l, t| *l = c * (*l - *t));
    g
}

#[derive(Debug, Clone)]
pub struct DistillGrads<T> {
    pub m_high: Array2<T>,
    pub det_a: Array1<T>,
    pub det_p: Array1<T>,
    pub m_low: Array2<T>,
}

pub fn distillation_backward<T: NdFloat>(
    m_high: ArrayView2<T>,
    det_a: ArrayView1<T>,
    det_p: ArrayView1<T>,
    m_low: ArrayView2<T>,
) -> Result<DistillGrads<T>> {
    check_distill_shapes(&m_high, &det_a, &det_p, &m_low)?;
    let (n1, n2) = m_high.dim();
    let nn = cast::<T>((n1 * n2) as f64);
    let c = cast::<T>(2.0 / (n1 * n2) as f64);
    let mut g_high = Array2::<T>::zeros((n1, n2));
    let mut g_low = Array2::<T>::zeros((n1, n2));
    let mut g_a = Array1::<T>::zeros(n1);
    let mut g_p = Array1::<T>::zeros(n2);
    for i in 0..n1 {
        for j in 0..n2 {
            let wij = det_a[i] * det_p[j] * nn;
            let r = m_high[[i, j]] * wij - m_low[[i, j]];
            g_low[[i, j]] = -c * r;
            g_high[[i, j]] = c * r * wij;
            let gw = c * r * m_high[[i, j]] * nn;
            g_a[i] += gw * det_p[j];
            g_p[j] += gw * det_a[i];
        }
    }
    Ok(DistillGrads {
        m_high: g_high,
        det_a: g_a,
        det_p: g_p,
        m_low: g_low,
    })
}

/// `y = 1`: `½‖a − b‖²`; `y = 0`: `½·max(0, τ − ‖a − b‖)²`.
pub fn contrastive_loss<T: NdFloat>(
    a: ArrayView1<T>,
    b: ArrayView1<T>,
    positive: bool,
    tau: f64,
) -> f64 {
    let d2: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| to_f64(*x - *y).powi(2))
        .sum();
    if positive {
        0.5 * d2
    } else {
        0.5 * (tau - d2.sqrt()).max(0.0).powi(2)
    }
}

/// Gradients of [`contrastive_loss`] w.r.t. `a` and `b`.
pub fn contrastive_backward<T: NdFloat>(
    a: ArrayView1<T>,
    b: ArrayView1<T>,
    positive: bool,
    tau: f64,
) -> (Array1<T>, Array1<T>) {
    let diff = &a - &b;
    let ga = if positive {
        diff
    } else {
        let d = to_f64(diff.dot(&diff)).sqrt();
        if d > 0.0 && d < tau {
            diff.mapv(|v| v * cast::<T>(-(tau - d) / d))
        } else {
            Array1::zeros(a.len())
        }
    };
    let gb = ga.mapv(|v| -v);
    (ga, gb)
}

/// Contrastive loss of a tuple: the positive term plus every negative term.
pub fn tuple_contrastive_loss<T: NdFloat>(globals: &[Array1<T>], tau: f64) -> Result<f64> {
    if globals.len() < 3 {
        return Err(Error::arg(
            "tuple needs an anchor, a positive and at least one negative",
        ));
    }
    let a = globals[0].view();
    Ok(globals[1..]
        .iter()
        .enumerate()
        .map(|(k, g)| contrastive_loss(a, g.view(), k == 0, tau))
        .sum())
}

pub fn tuple_contrastive_backward<T: NdFloat>(globals: &[Array1<T>], tau: f64) -> Vec<Array1<T>> {
    let a = globals[0].view();
    let mut grads = vec![Array1::<T>::zeros(a.len())];
    for (k, g) in globals[1..].iter().enumerate() {
        let (ga, gb) = contrastive_backward(a, g.view(), k == 0, tau);
        grads[0] += &ga;
        grads.push(gb);
    }
    grads
}

/// The five named terms of the joint objective and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm_b2: f64,
    pub lm_b3: f64,
    pub lm_student: f64,
    pub lc: f64,
    pub ldis: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(
        lm_b2: f64,
        lm_b3: f64,
        lm_student: f64,
        lc: f64,
        ldis: f64,
        lambda: f64,
    ) -> Self {
        LossBreakdown {
            lm_b2,
            lm_b3,
            lm_student,
            lc,
            ldis,
            total: lm_b2 + lm_b3 + lm_student + lc + lambda * ldis,
        }
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.lm_b2 += other.lm_b2;
        self.lm_b3 += other.lm_b3;
        self.lm_student += other.lm_student;
        self.lc += other.lc;
        self.ldis += other.ldis;
        self.total += other.total;
    }

    pub fn scaled(&self, f: f64) -> Self {
        LossBreakdown {
            lm_b2: self.lm_b2 * f,
            lm_b3: self.lm_b3 * f,
            lm_student: self.lm_student * f,
            lc: self.lc * f,
            ldis: self.ldis * f,
            total: self.total * f,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.lm_b2,
            self.lm_b3,
            self.lm_student,
            self.lc,
            self.ldis,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Raw (unnormalized) per-location rows of every map of one tuple, images in
/// tuple order `(a, p, n_1..n_K)`.
#[derive(Debug, Clone)]
pub struct TupleInputs<T> {
    pub b2: Vec<Array2<T>>,
    pub b3: Vec<Array2<T>>,
    pub student: Vec<Array2<T>>,
    /// Teacher rows (B2‖B3 on the student grid) of the anchor and the positive.
    pub teacher: [Array2<T>; 2],
    /// Flattened soft-detection scores of the anchor and positive teacher maps.
    pub det: [Array1<T>; 2],
    /// Unit-norm global descriptors.
    pub globals: Vec<Array1<T>>,
}

fn unit_rows<T: NdFloat>(rows: &[Array2<T>]) -> Vec<Array2<T>> {
    rows.iter().map(|r| normalize_rows(r.view()).0).collect()
}

fn lm_of<T: NdFloat>(rows: &[Array2<T>], margin: f64) -> Result<f64> {
    if rows.len() < 3 {
        return Err(Error::arg(
            "tuple needs an anchor, a positive and at least one negative",
        ));
    }
    let unit = unit_rows(rows);
    let negs: Vec<ArrayView2<T>> = unit[2..].iter().map(|r| r.view()).collect();
    Ok(matching_loss_rows(unit[0].view(), unit[1].view(), &negs, margin, false)?.loss)
}

/// Joint objective of one tuple; descriptor rows are normalized before any affinity.
pub fn total_loss<T: NdFloat>(inputs: &TupleInputs<T>, cfg: &LossConfig) -> Result<LossBreakdown> {
    let lm_b2 = lm_of(&inputs.b2, cfg.margin)?;
    let lm_b3 = lm_of(&inputs.b3, cfg.margin)?;
    let lm_student = lm_of(&inputs.student, cfg.margin)?;
    let lc = tuple_contrastive_loss(&inputs.globals, cfg.tau)?;
    let teacher = unit_rows(&inputs.teacher);
    let student = unit_rows(&inputs.student[..2]);
    let m_high = affinity(teacher[0].view(), teacher[1].view())?;
    let m_low = affinity(student[0].view(), student[1].view())?;
    let ldis = distillation_loss(
        m_high.view(),
        inputs.det[0].view(),
        inputs.det[1].view(),
        m_low.view(),
    )?;
    Ok(LossBreakdown::combine(
        lm_b2, lm_b3, lm_student, lc, ldis, cfg.lambda,
    ))
}
