//! Generalized-mean pooling, the pyramid global descriptor and ranked retrieval.

use std::collections::{HashMap, HashSet};

use ndarray::{Array1, Array3, ArrayView1, ArrayView3, Axis, NdFloat};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::losses::{normalize_vector, normalize_vector_backward};
use crate::tensor::FeatureMap;

pub const GEM_P: f64 = 3.0;
pub const DEFAULT_TOP_K: usize = 20;

fn cast<T: NdFloat>(v: f64) -> T {
    T::from(v).expect("representable")
}

fn check_gem_input<T: NdFloat>(x: &ArrayView3<T>, p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::arg(format!("GeM exponent {p} must be >= 1")));
    }
    let (_, h, w) = x.dim();
    if h * w == 0 {
        return Err(Error::dim("GeM of an empty map"));
    }
    if x.iter().any(|v| !(*v >= T::zero())) {
        return Err(Error::arg("GeM input must be non-negative"));
    }
    Ok(())
}

/// `v ↦ v^e`, through repeated multiplication for integral `e`.
fn power<T: NdFloat>(e: f64) -> impl Fn(T) -> T {
    let et = cast::<T>(e);
    let int = (e.fract() == 0.0 && e.abs() <= 64.0).then_some(e as i32);
    move |v| match int {
        Some(k) => v.powi(k),
        None => v.powf(et),
    }
}

/// Per channel `((1/hw)·Σ x^p)^(1/p)`, evaluated relative to the channel max to avoid overflow.
pub fn gem_values<T: NdFloat>(x: ArrayView3<T>, p: f64) -> Result<Array1<T>> {
    check_gem_input(&x, p)?;
    let pt = cast::<T>(p);
    let pow = power::<T>(p);
    let n = cast::<T>((x.dim().1 * x.dim().2) as f64);
    Ok(x.axis_iter(Axis(0))
        .map(|plane| {
            let mx = plane.iter().fold(T::zero(), |m, v| m.max(*v));
            if mx == T::zero() {
                return T::zero();
            }
            let mean = plane.iter().fold(T::zero(), |a, v| a + pow(*v / mx)) / n;
            mx * mean.powf(T::one() / pt)
        })
        .collect())
}

/// `∂g_c/∂x_{c,s} = (1/hw)·(x_{c,s}/g_c)^(p−1)`, scaled by the incoming gradient.
pub fn gem_backward<T: NdFloat>(
    x: ArrayView3<T>,
    p: f64,
    pooled: ArrayView1<T>,
    grad: ArrayView1<T>,
) -> Array3<T> {
    let (_, h, w) = x.dim();
    let n = cast::<T>((h * w) as f64);
    let pow = power::<T>(p - 1.0);
    let mut dx = Array3::<T>::zeros(x.raw_dim());
    for (c, (mut d, plane)) in dx
        .axis_iter_mut(Axis(0))
        .zip(x.axis_iter(Axis(0)))
        .enumerate()
    {
        let g = pooled[c];
        if g == T::zero() || grad[c] == T::zero() {
            continue;
        }
        let k = grad[c] / n;
        d.zip_mut_with(&plane, |o, v| *o = k * pow(*v / g));
    }
    dx
}

pub fn gem_pool(map: &FeatureMap, p: f64) -> Result<Array1<f64>> {
    let x = map.values.mapv(f64::from);
    gem_values(x.view(), p)
}

/// Unit-norm concatenation of per-level GeM vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub vector: Array1<f32>,
    pub level_dims: Vec<usize>,
    /// Set when the pyramid pooled to all zeros; the vector is then zero.
    pub zero: bool,
}

impl GlobalDescriptor {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn from_vector(vector: Array1<f32>) -> Self {
        let zero = vector.iter().all(|v| *v == 0.0);
        GlobalDescriptor {
            level_dims: vec![vector.len()],
            vector,
            zero,
        }
    }
}

/// Intermediates of the global branch kept for backpropagation.
#[derive(Debug, Clone)]
pub struct GlobalCache<T> {
    pub pooled: Vec<Array1<T>>,
    level_units: Vec<Array1<T>>,
    level_norms: Vec<T>,
    concat_unit: Array1<T>,
    concat_norm: T,
    p: f64,
}

impl<T: NdFloat> GlobalCache<T> {
    pub fn descriptor(&self) -> &Array1<T> {
        &self.concat_unit
    }
}

/// GeM each level, normalize each level, concatenate, normalize the whole.
pub fn global_forward<T: NdFloat>(levels: &[ArrayView3<T>], p: f64) -> Result<GlobalCache<T>> {
    let mut pooled = vec![];
    let mut level_units = vec![];
    let mut level_norms = vec![];
    for l in levels {
        let g = gem_values(l.view(), p)?;
        let (u, n) = normalize_vector(g.view());
        pooled.push(g);
        level_units.push(u);
        level_norms.push(n);
    }
    let views: Vec<ArrayView1<T>> = level_units.iter().map(|u| u.view()).collect();
    let concat = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::dim(e.to_string()))?;
    let (concat_unit, concat_norm) = normalize_vector(concat.view());
    Ok(GlobalCache {
        pooled,
        level_units,
        level_norms,
        concat_unit,
        concat_norm,
        p,
    })
}

/// Gradients w.r.t. each level map given the gradient of the final descriptor.
pub fn global_backward<T: NdFloat>(
    levels: &[ArrayView3<T>],
    cache: &GlobalCache<T>,
    grad: ArrayView1<T>,
) -> Vec<Array3<T>> {
    let g_concat = normalize_vector_backward(cache.concat_unit.view(), cache.concat_norm, grad);
    let mut start = 0;
    levels
        .iter()
        .enumerate()
        .map(|(r, l)| {
            let d = cache.level_units[r].len();
            let g_unit = g_concat.slice(ndarray::s![start..start + d]);
            start += d;
            let g_pool = normalize_vector_backward(
                cache.level_units[r].view(),
                cache.level_norms[r],
                g_unit,
            );
            gem_backward(l.view(), cache.p, cache.pooled[r].view(), g_pool.view())
        })
        .collect()
}

pub fn global_descriptor(pyr: &FeaturePyramid, p: f64) -> Result<GlobalDescriptor> {
    let levels: Vec<Array3<f64>> = pyr
        .levels
        .iter()
        .map(|l| l.values.mapv(f64::from))
        .collect();
    let views: Vec<ArrayView3<f64>> = levels.iter().map(|l| l.view()).collect();
    let cache = global_forward(&views, p)?;
    let zero = cache.concat_norm == 0.0;
    Ok(GlobalDescriptor {
        vector: cache.concat_unit.mapv(|v| v as f32),
        level_dims: pyr.level_dims(),
        zero,
    })
}

/// Image ids with their global descriptors; ids are unique and dims uniform.
#[derive(Debug, Clone, Default)]
pub struct RetrievalIndex {
    entries: Vec<(String, GlobalDescriptor)>,
    ids: HashMap<String, usize>,
}

impl RetrievalIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|(_, d)| d.dim())
    }

    pub fn entries(&self) -> &[(String, GlobalDescriptor)] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&GlobalDescriptor> {
        self.ids.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn insert(&mut self, id: impl Into<String>, desc: GlobalDescriptor) -> Result<()> {
        let id = id.into();
        if self.ids.contains_key(&id) {
            return Err(Error::arg(format!("duplicate index id {id:?}")));
        }
        if let Some(d) = self.dim() {
            if d != desc.dim() {
                return Err(Error::dim(format!(
                    "descriptor {id:?} has dim {}, index has {d}",
                    desc.dim()
                )));
            }
        }
        self.ids.insert(id.clone(), self.entries.len());
        self.entries.push((id, desc));
        Ok(())
    }

    /// All entries by descending inner product; equal similarities order by id.
    pub fn rank(&self, query: &GlobalDescriptor) -> Result<Vec<(String, f64)>> {
        if let Some(d) = self.dim() {
            if d != query.dim() {
                return Err(Error::dim(format!(
                    "query dim {} differs from index dim {d}",
                    query.dim()
                )));
            }
        }
        let mut scored: Vec<(String, f64)> = self
            .entries
            .iter()
            .map(|(id, d)| {
                let sim = d
                    .vector
                    .iter()
                    .zip(query.vector.iter())
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                (id.clone(), sim)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(scored)
    }

    pub fn top_k(&self, query: &GlobalDescriptor, k: usize) -> Result<Vec<(String, f64)>> {
        let mut ranked = self.rank(query)?;
        ranked.truncate(k);
        Ok(ranked)
    }
}

/// Mean over relevant items of precision at that item's rank; relevant items
/// missing from the ranking contribute zero.
pub fn average_precision(ranking: &[String], relevant: &HashSet<String>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, id) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// `None` for queries excluded for having no relevant items.
    pub per_query: Vec<Option<f64>>,
    pub excluded: usize,
}

pub fn mean_average_precision(
    rankings: &[Vec<String>],
    relevant: &[HashSet<String>],
) -> Result<MapReport> {
    if rankings.len() != relevant.len() {
        return Err(Error::arg(format!(
            "{} rankings but {} relevance sets",
            rankings.len(),
            relevant.len()
        )));
    }
    let per_query: Vec<Option<f64>> = rankings
        .iter()
        .zip(relevant.iter())
        .map(|(r, rel)| average_precision(r, rel))
        .collect();
    let excluded = per_query.iter().filter(|a| a.is_none()).count();
    if excluded > 0 {
        log::warn!("{excluded} queries have no relevant items and are excluded from mAP");
    }
    let valid: Vec<f64> = per_query.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::arg("no query has a relevant item"));
    }
    Ok(MapReport {
        map: valid.iter().sum::<f64>() / valid.len() as f64,
        per_query,
        excluded,
    })
}
