//! Forward and backward passes of one optimization step.
//!
//! Every image of a step is forwarded once; per-tuple losses then accumulate
//! gradients on per-image intermediates (unit descriptor rows, soft-detection
//! scores, global descriptors), and each image is backpropagated once.

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::backbone::{
    concat_local_features, BlockCache, BlockFeatures, FpnCache, ImageTensor, Mode, ResNet,
};
use crate::descriptor::{masked_projection_backward, ChannelMask, ReductionHead};
use crate::error::Result;
use crate::global_desc::{global_backward, global_forward, GlobalCache, GEM_P};
use crate::linalg::mat_mul;
use crate::losses::{
    normalize_rows, normalize_rows_backward, soft_detection_backward, soft_detection_values,
};
use crate::matching::{affinity, affinity_score};
use crate::model::Model;
use crate::nn::ParamGrads;
use crate::tensor::{resize_bilinear, resize_bilinear_backward, FeatureMap};

/// Unit-norm location rows of a `C×H×W` map, optionally restricted to a subset of locations.
pub(crate) struct Rows {
    pub unit: Array2<f32>,
    norms: Vec<f32>,
    idx: Option<Vec<usize>>,
    dim: (usize, usize, usize),
}

impl Rows {
    pub fn new(map: &Array3<f32>, idx: Option<&[usize]>) -> Rows {
        let (c, h, w) = map.dim();
        let std = map.as_standard_layout();
        let flat = std
            .view()
            .into_shape_with_order((c, h * w))
            .expect("contiguous");
        let rows = flat.t();
        let raw = match idx {
            Some(i) => rows.select(Axis(0), i),
            None => rows.as_standard_layout().into_owned(),
        };
        let (unit, norms) = normalize_rows(raw.view());
        Rows {
            unit,
            norms,
            idx: idx.map(<[usize]>::to_vec),
            dim: (c, h, w),
        }
    }

    /// Gradient w.r.t. the source map given the gradient of the unit rows.
    pub fn backward(&self, grad_unit: ArrayView2<f32>) -> Array3<f32> {
        let (c, h, w) = self.dim;
        let g_raw = normalize_rows_backward(self.unit.view(), &self.norms, grad_unit);
        let full = match &self.idx {
            Some(idx) => {
                let mut full = Array2::<f32>::zeros((h * w, c));
                for (r, &loc) in idx.iter().enumerate() {
                    full.row_mut(loc).assign(&g_raw.row(r));
                }
                full
            }
            None => g_raw,
        };
        full.t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h, w))
            .expect("sized")
    }
}

/// The `k` locations with the largest L2 norm, in ascending location order.
pub(crate) fn top_locations(map: &Array3<f32>, k: usize) -> Option<Vec<usize>> {
    let (_, h, w) = map.dim();
    if k >= h * w {
        return None;
    }
    let mut norms = vec![0f64; h * w];
    for plane in map.outer_iter() {
        for (n, v) in norms.iter_mut().zip(plane.iter()) {
            *n += f64::from(*v).powi(2);
        }
    }
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|a, b| norms[*b].total_cmp(&norms[*a]).then(a.cmp(b)));
    order.truncate(k);
    order.sort_unstable();
    Some(order)
}

/// Soft-detection scores on the kept locations, renormalized to sum to one.
pub(crate) struct Detection {
    pub values: Array1<f32>,
    idx: Option<Vec<usize>>,
    kept_sum: f32,
    total: usize,
}

impl Detection {
    fn new(full: Array1<f32>, idx: Option<&[usize]>) -> Detection {
        let total = full.len();
        match idx {
            None => Detection {
                values: full,
                idx: None,
                kept_sum: 1.0,
                total,
            },
            Some(idx) => {
                let kept: Array1<f32> = idx.iter().map(|&i| full[i]).collect();
                let sum = kept.sum();
                let values = if sum > 0.0 {
                    kept / sum
                } else {
                    Array1::from_elem(idx.len(), 1.0 / idx.len() as f32)
                };
                Detection {
                    values,
                    idx: Some(idx.to_vec()),
                    kept_sum: sum,
                    total,
                }
            }
        }
    }

    fn backward(&self, grad: &Array1<f32>) -> Array1<f32> {
        match &self.idx {
            None => grad.clone(),
            Some(idx) => {
                let mut full = Array1::<f32>::zeros(self.total);
                if self.kept_sum > 0.0 {
                    let dot = grad.dot(&self.values);
                    for (r, &loc) in idx.iter().enumerate() {
                        full[loc] = (grad[r] - dot) / self.kept_sum;
                    }
                }
                full
            }
        }
    }
}

/// Everything that depends only on the trunk through the third stage.
pub(crate) struct TeacherSide {
    /// Stage outputs `C1..C3`.
    pub c: [Array3<f32>; 3],
    pub b2: Rows,
    pub b3: Rows,
    pub teacher: Rows,
    pub det: Detection,
    /// Kept only when gradients must flow through the soft detection.
    teacher_map: Option<Array3<f32>>,
    idx2: Option<Vec<usize>>,
}

pub(crate) fn teacher_side(
    net: &ResNet,
    image: &ImageTensor,
    cap: Option<usize>,
    window: usize,
    keep_map: bool,
) -> Result<TeacherSide> {
    let strides = ResNet::stage_strides(Mode::Train);
    let x = net.stem_forward(image.pixels().view())?;
    let c1 = net.stage_forward(0, x, Mode::Train)?;
    let c2 = net.stage_forward(1, c1.clone(), Mode::Train)?;
    let c3 = net.stage_forward(2, c2.clone(), Mode::Train)?;
    let local = concat_local_features(
        &FeatureMap::new(c2.clone(), strides[1]),
        &FeatureMap::new(c3.clone(), strides[2]),
    )?;
    let tmap = local.map.values;
    let idx2 = cap.and_then(|k| top_locations(&tmap, k));
    let idx3 = cap.and_then(|k| top_locations(&c3, k));
    let det = Detection::new(soft_detection_values(tmap.view(), window), idx2.as_deref());
    Ok(TeacherSide {
        b2: Rows::new(&c2, idx2.as_deref()),
        b3: Rows::new(&c3, idx3.as_deref()),
        teacher: Rows::new(&tmap, idx2.as_deref()),
        det,
        teacher_map: keep_map.then_some(tmap),
        idx2,
        c: [c1, c2, c3],
    })
}

/// Student rows of a teacher side under a channel mask.
pub(crate) fn student_rows(
    head: &ReductionHead,
    ts: &TeacherSide,
    mask: &ChannelMask,
) -> Result<Rows> {
    let (k2, k3) = head.input_dims();
    let (_, h2, w2) = ts.c[1].dim();
    let r2 = ReductionHead::project_block(&head.b2, &ts.c[1], &mask.slice(0, k2))?;
    let r3 = ReductionHead::project_block(&head.b3, &ts.c[2], &mask.slice(k2, k2 + k3))?;
    let up3 = resize_bilinear(r3.view(), h2, w2)?;
    let map = concatenate(Axis(0), &[r2.view(), up3.view()]).expect("same grid");
    Ok(Rows::new(&map, ts.idx2.as_deref()))
}

/// Intermediates that depend on trainable parameters.
pub(crate) struct LiveSide {
    l4_caches: Vec<BlockCache>,
    fpn_cache: FpnCache,
    levels: Vec<Array3<f32>>,
    pub global: GlobalCache<f32>,
    mask: ChannelMask,
    pub student: Rows,
}

pub(crate) fn live_side<R: Rng + ?Sized>(
    model: &Model,
    ts: &TeacherSide,
    rng: &mut R,
) -> Result<LiveSide> {
    let net = model.backbone.net()?;
    let strides = ResNet::stage_strides(Mode::Train);
    let (c4, l4_caches) = net.stage_forward_cached(3, ts.c[2].clone(), Mode::Train)?;
    let mut levels: Vec<FeatureMap> =
        ts.c.iter()
            .zip(strides)
            .map(|(c, s)| FeatureMap::new(c.clone(), s))
            .collect();
    levels.push(FeatureMap::new(c4, strides[3]));
    let (pyramid, fpn_cache) = model.fpn.forward_cached(&BlockFeatures {
        levels,
        mode: Mode::Train,
    })?;
    let levels: Vec<Array3<f32>> = pyramid.levels.into_iter().map(|l| l.values).collect();
    let views: Vec<ArrayView3<f32>> = levels.iter().map(|l| l.view()).collect();
    let global = global_forward(&views, GEM_P)?;
    let mask = model.head.sample_mask(rng);
    let student = student_rows(&model.head, ts, &mask)?;
    Ok(LiveSide {
        l4_caches,
        fpn_cache,
        levels,
        global,
        mask,
        student,
    })
}

/// Loss gradients w.r.t. the per-image intermediates.
#[derive(Default)]
pub(crate) struct ImageGrads {
    pub b2: Option<Array2<f32>>,
    pub b3: Option<Array2<f32>>,
    pub student: Option<Array2<f32>>,
    pub teacher: Option<Array2<f32>>,
    pub det: Option<Array1<f32>>,
    pub global: Option<Array1<f32>>,
}

pub(crate) fn add_into<D: ndarray::Dimension>(
    slot: &mut Option<ndarray::Array<f32, D>>,
    g: ndarray::Array<f32, D>,
) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// `G·B` and `Gᵀ·A`: gradients of `A·Bᵀ` w.r.t. `A` and `B`.
pub(crate) fn affinity_backward(
    g: ArrayView2<f32>,
    a: ArrayView2<f32>,
    b: ArrayView2<f32>,
) -> (Array2<f32>, Array2<f32>) {
    let mut ga = Array2::<f32>::zeros(a.raw_dim());
    mat_mul(1.0, &g, &b, 0.0, &mut ga);
    let mut gb = Array2::<f32>::zeros(b.raw_dim());
    mat_mul(1.0, &g.t(), &a, 0.0, &mut gb);
    (ga, gb)
}

pub(crate) fn pair_score(a: &Rows, b: &Rows) -> Result<f64> {
    let m = affinity(a.unit.view(), b.unit.view())?;
    Ok(f64::from(affinity_score(m.view())?))
}

fn add3(slot: &mut Option<Array3<f32>>, g: Array3<f32>) {
    add_into(slot, g);
}

fn project_grads(
    weight: &Array2<f32>,
    name: &str,
    mask: &[f32],
    input: &Array3<f32>,
    grad_out: ArrayView3<f32>,
    need_input: bool,
    grads: &mut ParamGrads,
) -> Option<Array3<f32>> {
    let (k, h, w) = input.dim();
    let x = input.as_standard_layout();
    let x = x
        .view()
        .into_shape_with_order((k, h * w))
        .expect("contiguous");
    let g = grad_out.as_standard_layout();
    let g = g
        .view()
        .into_shape_with_order((weight.nrows(), h * w))
        .expect("contiguous");
    let (dw, dx) = masked_projection_backward(weight.view(), mask, x, g, need_input);
    grads.accumulate(name, dw.view().into_dyn());
    dx.map(|d| d.into_shape_with_order((k, h, w)).expect("sized"))
}

/// Backpropagates one image's intermediate gradients into `grads`.
///
/// With `teacher_trainable` the trunk below the last stage is recomputed with
/// caches and updated as well.
pub(crate) fn backward_image(
    model: &Model,
    image: Option<&ImageTensor>,
    ts: &TeacherSide,
    live: &LiveSide,
    g: ImageGrads,
    window: usize,
    teacher_trainable: bool,
    grads: &mut ParamGrads,
) -> Result<()> {
    let net = model.backbone.net()?;
    let head = &model.head;
    let (k2, k3) = head.input_dims();
    let d2 = head.b2.nrows();
    let (_, h3, w3) = ts.c[2].dim();
    let mut dc: [Option<Array3<f32>>; 4] = [None, None, None, None];

    if let Some(gs) = g.student {
        let gmap = live.student.backward(gs.view());
        let g_up = gmap.slice(s![d2.., .., ..]);
        let g3 = resize_bilinear_backward(g_up, h3, w3);
        let m2 = live.mask.slice(0, k2);
        let m3 = live.mask.slice(k2, k2 + k3);
        let dx2 = project_grads(
            &head.b2,
            "head.b2.weight",
            &m2.scale,
            &ts.c[1],
            gmap.slice(s![..d2, .., ..]),
            teacher_trainable,
            grads,
        );
        let dx3 = project_grads(
            &head.b3,
            "head.b3.weight",
            &m3.scale,
            &ts.c[2],
            g3.view(),
            teacher_trainable,
            grads,
        );
        if let Some(d) = dx2 {
            add3(&mut dc[1], d);
        }
        if let Some(d) = dx3 {
            add3(&mut dc[2], d);
        }
    }

    if teacher_trainable {
        if let Some(gb) = g.b2 {
            add3(&mut dc[1], ts.b2.backward(gb.view()));
        }
        if let Some(gb) = g.b3 {
            add3(&mut dc[2], ts.b3.backward(gb.view()));
        }
        let mut tgrad = g.teacher.map(|gt| ts.teacher.backward(gt.view()));
        if let (Some(gd), Some(tmap)) = (g.det, ts.teacher_map.as_ref()) {
            let full = ts.det.backward(&gd);
            add3(
                &mut tgrad,
                soft_detection_backward(tmap.view(), window, full.view()),
            );
        }
        if let Some(tg) = tgrad {
            add3(&mut dc[1], tg.slice(s![..k2, .., ..]).to_owned());
            add3(
                &mut dc[2],
                resize_bilinear_backward(tg.slice(s![k2.., .., ..]), h3, w3),
            );
        }
    }

    if let Some(gg) = g.global {
        let views: Vec<ArrayView3<f32>> = live.levels.iter().map(|l| l.view()).collect();
        let level_grads = global_backward(&views, &live.global, gg.view());
        let t = teacher_trainable;
        let inputs = model
            .fpn
            .backward(&live.fpn_cache, level_grads, [t, t, t, true], grads)?;
        for (r, gi) in inputs.into_iter().enumerate() {
            if let Some(gi) = gi {
                add3(&mut dc[r], gi);
            }
        }
    }

    if let Some(g4) = dc[3].take() {
        if let Some(g3) = net.stage_backward(3, &live.l4_caches, g4, grads, teacher_trainable)? {
            add3(&mut dc[2], g3);
        }
    }

    if teacher_trainable && dc[..3].iter().any(Option::is_some) {
        let image = image.ok_or_else(|| {
            crate::error::Error::State("trainable teacher needs the input image".into())
        })?;
        let (x, stem_cache) = net.stem_forward_cached(image.pixels().clone())?;
        let (c1, cache1) = net.stage_forward_cached(0, x, Mode::Train)?;
        let (c2, cache2) = net.stage_forward_cached(1, c1, Mode::Train)?;
        let (c3, cache3) = net.stage_forward_cached(2, c2, Mode::Train)?;
        let caches = [cache1, cache2, cache3];
        let mut carry = dc[2].take().unwrap_or_else(|| Array3::zeros(c3.raw_dim()));
        for s in (0..3).rev() {
            let below = net
                .stage_backward(s, &caches[s], carry, grads, true)?
                .expect("input gradient requested");
            carry = below;
            if s > 0 {
                if let Some(extra) = dc[s - 1].take() {
                    carry += &extra;
                }
            }
        }
        net.stem_backward(&stem_cache, carry.view(), grads)?;
    }
    Ok(())
}
