//! Local descriptors: channel-dropout reduction head, keypoint sampling and
//! the teacher/student extraction modes.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{concat_local_features, BlockFeatures, LocalFeatureMap};
use crate::detector::KeypointSet;
use crate::error::{Error, Result};
use crate::linalg::mat_mul;
use crate::nn::Parameters;
use crate::tensor::FeatureMap;

/// Which map detects and which map describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMode {
    /// Teacher detects and describes; needs no trained head.
    Teacher,
    /// Teacher detects, student describes.
    Ts,
    /// Student detects and describes.
    Ss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Teacher,
    Student,
}

impl ExtractionMode {
    pub fn detector_source(self) -> Source {
        match self {
            ExtractionMode::Teacher | ExtractionMode::Ts => Source::Teacher,
            ExtractionMode::Ss => Source::Student,
        }
    }

    pub fn descriptor_source(self) -> Source {
        match self {
            ExtractionMode::Teacher => Source::Teacher,
            ExtractionMode::Ts | ExtractionMode::Ss => Source::Student,
        }
    }

    pub fn needs_head(self) -> bool {
        self != ExtractionMode::Teacher
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExtractionMode::Teacher => "teacher",
            ExtractionMode::Ts => "ts",
            ExtractionMode::Ss => "ss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "teacher" => Some(ExtractionMode::Teacher),
            "ts" => Some(ExtractionMode::Ts),
            "ss" => Some(ExtractionMode::Ss),
            _ => None,
        }
    }
}

/// Per-channel dropout multipliers: `0` for dropped channels, `1/(1-p)` for survivors.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    pub scale: Vec<f32>,
}

impl ChannelMask {
    pub fn keep_all(channels: usize) -> Self {
        ChannelMask {
            scale: vec![1.0; channels],
        }
    }

    pub fn sample<R: Rng + ?Sized>(channels: usize, drop_prob: f64, rng: &mut R) -> Self {
        let keep = (1.0 / (1.0 - drop_prob)) as f32;
        ChannelMask {
            scale: (0..channels)
                .map(|_| {
                    if rng.random::<f64>() < drop_prob {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect(),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> ChannelMask {
        ChannelMask {
            scale: self.scale[start..end].to_vec(),
        }
    }
}

/// Applies a channel mask to a `C×H×W` map (2D dropout with inverted scaling).
pub fn drop_channels(values: &Array3<f32>, mask: &ChannelMask) -> Array3<f32> {
    let mut out = values.clone();
    for (mut plane, s) in out.axis_iter_mut(Axis(0)).zip(mask.scale.iter()) {
        plane.mapv_inplace(|v| v * s);
    }
    out
}

/// `W · diag(mask) · X` for a `D×K` weight and a `K×P` input.
pub fn masked_projection<T: NdFloat>(
    weight: ArrayView2<T>,
    mask: &[T],
    input: ArrayView2<T>,
) -> Array2<T> {
    let mut w = weight.to_owned();
    for (mut col, m) in w.axis_iter_mut(Axis(1)).zip(mask.iter()) {
        col.mapv_inplace(|v| v * *m);
    }
    let mut out = Array2::<T>::zeros((weight.nrows(), input.ncols()));
    mat_mul(T::one(), &w, &input, T::zero(), &mut out);
    out
}

/// Gradients of [`masked_projection`] w.r.t. the weight and the input.
pub fn masked_projection_backward<T: NdFloat>(
    weight: ArrayView2<T>,
    mask: &[T],
    input: ArrayView2<T>,
    grad_out: ArrayView2<T>,
    need_input: bool,
) -> (Array2<T>, Option<Array2<T>>) {
    let mut masked_in = input.to_owned();
    for (mut row, m) in masked_in.axis_iter_mut(Axis(0)).zip(mask.iter()) {
        row.mapv_inplace(|v| v * *m);
    }
    let mut dw = Array2::<T>::zeros(weight.raw_dim());
    mat_mul(T::one(), &grad_out, &masked_in.t(), T::zero(), &mut dw);
    let dx = need_input.then(|| {
        let mut dx = Array2::<T>::zeros(input.raw_dim());
        mat_mul(T::one(), &weight.t(), &grad_out, T::zero(), &mut dx);
        for (mut row, m) in dx.axis_iter_mut(Axis(0)).zip(mask.iter()) {
            row.mapv_inplace(|v| v * *m);
        }
        dx
    });
    (dw, dx)
}

/// Bias-free 1×1 projections from the teacher blocks to the student descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionHead {
    /// `D2×K2`
    pub b2: Array2<f32>,
    /// `D3×K3`
    pub b3: Array2<f32>,
    pub drop_prob: f64,
}

impl ReductionHead {
    pub fn new(b2: Array2<f32>, b3: Array2<f32>, drop_prob: f64) -> Result<Self> {
        if b2.nrows() > b2.ncols() || b3.nrows() > b3.ncols() {
            return Err(Error::arg(
                "reduction head cannot increase the channel count",
            ));
        }
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::arg(format!(
                "drop probability {drop_prob} outside [0, 1)"
            )));
        }
        Ok(ReductionHead { b2, b3, drop_prob })
    }

    /// Random Gaussian projections with unit expected gain.
    pub fn seeded<R: Rng + ?Sized>(
        k2: usize,
        d2: usize,
        k3: usize,
        d3: usize,
        drop_prob: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n2 = Normal::new(0.0f32, (1.0 / k2 as f32).sqrt()).expect("finite");
        let n3 = Normal::new(0.0f32, (1.0 / k3 as f32).sqrt()).expect("finite");
        let b2 = Array2::from_shape_simple_fn((d2, k2), || n2.sample(rng));
        let b3 = Array2::from_shape_simple_fn((d3, k3), || n3.sample(rng));
        Self::new(b2, b3, drop_prob)
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.b2.ncols(), self.b3.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.b2.nrows() + self.b3.nrows()
    }

    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelMask {
        let (k2, k3) = self.input_dims();
        ChannelMask::sample(k2 + k3, self.drop_prob, rng)
    }

    /// Projects one block's `K×H×W` slice with the matching weight.
    pub fn project_block(
        weight: &Array2<f32>,
        values: &Array3<f32>,
        mask: &ChannelMask,
    ) -> Result<Array3<f32>> {
        let (k, h, w) = values.dim();
        if k != weight.ncols() || mask.scale.len() != k {
            return Err(Error::dim(format!(
                "head expects {} channels, block has {k}",
                weight.ncols()
            )));
        }
        let flat = values.as_standard_layout();
        let flat = flat
            .view()
            .into_shape_with_order((k, h * w))
            .expect("contiguous");
        let out = masked_projection(weight.view(), &mask.scale, flat);
        Ok(out
            .into_shape_with_order((weight.nrows(), h, w))
            .expect("sized"))
    }
}

impl Parameters for ReductionHead {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<f32>)) {
        f("head.b2.weight", self.b2.view().into_dyn());
        f("head.b3.weight", self.b3.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f32>)) {
        f("head.b2.weight", self.b2.view_mut().into_dyn());
        f("head.b3.weight", self.b3.view_mut().into_dyn());
    }
}

/// Student map `Conv(Drop2D(F))`. With `dropout = None` no channel is dropped or rescaled.
///
/// Returns the student map and the mask that was applied.
pub fn reduce_dim<R: Rng + ?Sized>(
    teacher: &LocalFeatureMap,
    head: &ReductionHead,
    dropout: Option<&mut R>,
) -> Result<(FeatureMap, ChannelMask)> {
    let (k2, k3) = head.input_dims();
    if teacher.b2_channels != k2 || teacher.b3_channels != k3 {
        return Err(Error::dim(format!(
            "head expects {k2}+{k3} channels, map has {}+{}",
            teacher.b2_channels, teacher.b3_channels
        )));
    }
    let mask = match dropout {
        Some(rng) => head.sample_mask(rng),
        None => ChannelMask::keep_all(k2 + k3),
    };
    let values = &teacher.map.values;
    let part2 = values.slice(s![0..k2, .., ..]).to_owned();
    let part3 = values.slice(s![k2.., .., ..]).to_owned();
    let out2 = ReductionHead::project_block(&head.b2, &part2, &mask.slice(0, k2))?;
    let out3 = ReductionHead::project_block(&head.b3, &part3, &mask.slice(k2, k2 + k3))?;
    let out = ndarray::concatenate(Axis(0), &[out2.view(), out3.view()]).expect("same grid");
    Ok((
        FeatureMap {
            values: out,
            stride: teacher.map.stride,
            offset: teacher.map.offset,
        },
        mask,
    ))
}

/// Teacher descriptor map: the concatenated B2‖B3 blocks.
pub fn teacher_descriptor_map(blocks: &BlockFeatures) -> Result<LocalFeatureMap> {
    concat_local_features(blocks.b2(), blocks.b3())
}

/// Unit-norm descriptors aligned with a keypoint set (or with grid cells).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    /// `N×D`
    pub vectors: Array2<f32>,
    pub keypoint_ids: Vec<usize>,
    /// Rows whose interpolated vector was zero (left unnormalized).
    pub zero: Vec<bool>,
    /// Rows whose keypoint fell outside the map and was clamped to the border.
    pub clamped: Vec<bool>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Wraps raw rows, normalizing each one.
    pub fn from_rows(mut vectors: Array2<f32>) -> Self {
        let n = vectors.nrows();
        let zero = normalize_rows(&mut vectors);
        DescriptorSet {
            vectors,
            keypoint_ids: (0..n).collect(),
            zero,
            clamped: vec![false; n],
        }
    }

    /// Every grid cell of `map` in row-major order.
    pub fn dense(map: &FeatureMap) -> Self {
        let (c, h, w) = map.values.dim();
        let mut rows = Array2::<f32>::zeros((h * w, c));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    rows[[y * w + x, ch]] = map.values[[ch, y, x]];
                }
            }
        }
        Self::from_rows(rows)
    }
}

/// Normalizes rows in place; returns which rows were zero.
fn normalize_rows(vectors: &mut Array2<f32>) -> Vec<bool> {
    vectors
        .axis_iter_mut(Axis(0))
        .map(|mut row| {
            let norm = row
                .iter()
                .map(|v| f64::from(*v) * f64::from(*v))
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                let inv = 1.0 / norm;
                row.mapv_inplace(|v| (f64::from(v) * inv) as f32);
                false
            } else {
                true
            }
        })
        .collect()
}

/// Bilinearly samples `map` at every keypoint and L2-normalizes the result.
pub fn sample_descriptors(map: &FeatureMap, kps: &KeypointSet) -> DescriptorSet {
    let (c, h, w) = map.values.dim();
    let n = kps.len();
    let mut vectors = Array2::<f32>::zeros((n, c));
    let mut clamped = vec![false; n];
    for (i, kp) in kps.iter().enumerate() {
        let (u, v) = map.to_feature(kp.x, kp.y);
        let max_u = (w - 1) as f64;
        let max_v = (h - 1) as f64;
        let cu = u.clamp(0.0, max_u);
        let cv = v.clamp(0.0, max_v);
        clamped[i] = cu != u || cv != v;
        let x0 = cu.floor() as usize;
        let y0 = cv.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = (cu - x0 as f64) as f32;
        let fy = (cv - y0 as f64) as f32;
        for ch in 0..c {
            let top = map.values[[ch, y0, x0]] * (1.0 - fx) + map.values[[ch, y0, x1]] * fx;
            let bottom = map.values[[ch, y1, x0]] * (1.0 - fx) + map.values[[ch, y1, x1]] * fx;
            vectors[[i, ch]] = top * (1.0 - fy) + bottom * fy;
        }
    }
    let zero = normalize_rows(&mut vectors);
    DescriptorSet {
        vectors,
        keypoint_ids: (0..n).collect(),
        zero,
        clamped,
    }
}
