//! Central-difference checks of every hand-written gradient, in f64.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;

use unifeat::descriptor::{masked_projection, masked_projection_backward};
use unifeat::global_desc::{gem_backward, gem_values, global_backward, global_forward};
use unifeat::losses::{
    distillation_backward, distillation_loss, matching_loss_rows, normalize_rows,
    normalize_rows_backward, normalize_vector, normalize_vector_backward, soft_detection_backward,
    soft_detection_values, tuple_contrastive_backward, tuple_contrastive_loss,
};
use unifeat::matching::affinity;

use super::{numeric_grad, relative_error, rng, uniform1, uniform2, uniform3};

fn split_rows(flat: &[f64], shapes: &[(usize, usize)]) -> Vec<Array2<f64>> {
    let mut start = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let a = Array2::from_shape_vec((r, c), flat[start..start + r * c].to_vec()).unwrap();
            start += r * c;
            a
        })
        .collect()
}

fn flatten(arrays: &[Array2<f64>]) -> Vec<f64> {
    arrays.iter().flat_map(|a| a.iter().copied()).collect()
}

/// Matching margin loss through row normalization, w.r.t. raw location rows.
pub fn matching_loss(seed: u64) -> f64 {
    let mut r = rng(seed);
    // 3×3 grid locations, 4 channels; anchor, positive and two negatives
    let shapes = [(9, 4), (9, 4), (6, 4), (9, 4)];
    let raw: Vec<Array2<f64>> = shapes
        .iter()
        .map(|&s| uniform2(&mut r, s, -1.0, 1.0))
        .collect();
    let margin = 2.0;
    let loss = |flat: &[f64]| {
        let rows = split_rows(flat, &shapes);
        let unit: Vec<Array2<f64>> = rows.iter().map(|a| normalize_rows(a.view()).0).collect();
        let negs: Vec<_> = unit[2..].iter().map(|u| u.view()).collect();
        matching_loss_rows(unit[0].view(), unit[1].view(), &negs, margin, false)
            .unwrap()
            .loss
    };
    let normed: Vec<(Array2<f64>, Vec<f64>)> =
        raw.iter().map(|a| normalize_rows(a.view())).collect();
    let negs: Vec<_> = normed[2..].iter().map(|u| u.0.view()).collect();
    let out =
        matching_loss_rows(normed[0].0.view(), normed[1].0.view(), &negs, margin, true).unwrap();
    let analytic: Vec<Array2<f64>> = out
        .grads
        .unwrap()
        .iter()
        .zip(normed.iter())
        .map(|(g, (u, n))| normalize_rows_backward(u.view(), n, g.view()))
        .collect();
    let flat = flatten(&raw);
    relative_error(&flatten(&analytic), &numeric_grad(&flat, loss))
}

/// Tuple contrastive loss through vector normalization.
pub fn contrastive_loss(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dim = 8;
    let anchor = uniform1(&mut r, dim, 0.1, 1.0);
    let mut raw = vec![anchor.clone(), &anchor + &uniform1(&mut r, dim, -0.2, 0.2)];
    for _ in 0..3 {
        // negatives close enough to keep the hinge active
        raw.push(&anchor + &uniform1(&mut r, dim, -0.3, 0.3));
    }
    raw.push(uniform1(&mut r, dim, -1.0, 1.0));
    let tau = 0.85;
    let n = raw.len();
    let loss = |flat: &[f64]| {
        let globals: Vec<Array1<f64>> = (0..n)
            .map(|i| normalize_vector(Array1::from(flat[i * dim..(i + 1) * dim].to_vec()).view()).0)
            .collect();
        tuple_contrastive_loss(&globals, tau).unwrap()
    };
    let normed: Vec<(Array1<f64>, f64)> = raw.iter().map(|v| normalize_vector(v.view())).collect();
    let units: Vec<Array1<f64>> = normed.iter().map(|(u, _)| u.clone()).collect();
    let grads = tuple_contrastive_backward(&units, tau);
    let analytic: Vec<f64> = grads
        .iter()
        .zip(normed.iter())
        .flat_map(|(g, (u, nrm))| normalize_vector_backward(u.view(), *nrm, g.view()).to_vec())
        .collect();
    let flat: Vec<f64> = raw.iter().flat_map(|v| v.to_vec()).collect();
    relative_error(&analytic, &numeric_grad(&flat, loss))
}

/// Distillation loss w.r.t. the high matrix, both detection vectors, the low matrix,
/// and the raw student rows behind the low matrix.
pub fn distillation(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n1, n2) = (6, 5);
    let m_high = uniform2(&mut r, (n1, n2), -1.0, 1.0);
    let det_a = {
        let v = uniform1(&mut r, n1, 0.1, 1.0);
        &v / v.sum()
    };
    let det_p = {
        let v = uniform1(&mut r, n2, 0.1, 1.0);
        &v / v.sum()
    };
    let m_low = uniform2(&mut r, (n1, n2), -1.0, 1.0);
    let sizes = [n1 * n2, n1, n2, n1 * n2];
    let unpack = |flat: &[f64]| {
        let mut start = 0;
        let mut take = |n: usize| {
            let s = flat[start..start + n].to_vec();
            start += n;
            s
        };
        let h = Array2::from_shape_vec((n1, n2), take(sizes[0])).unwrap();
        let a = Array1::from(take(sizes[1]));
        let p = Array1::from(take(sizes[2]));
        let l = Array2::from_shape_vec((n1, n2), take(sizes[3])).unwrap();
        (h, a, p, l)
    };
    let loss = |flat: &[f64]| {
        let (h, a, p, l) = unpack(flat);
        distillation_loss(h.view(), a.view(), p.view(), l.view()).unwrap()
    };
    let g = distillation_backward(m_high.view(), det_a.view(), det_p.view(), m_low.view()).unwrap();
    let analytic: Vec<f64> = g
        .m_high
        .iter()
        .chain(g.det_a.iter())
        .chain(g.det_p.iter())
        .chain(g.m_low.iter())
        .copied()
        .collect();
    let flat: Vec<f64> = m_high
        .iter()
        .chain(det_a.iter())
        .chain(det_p.iter())
        .chain(m_low.iter())
        .copied()
        .collect();
    let direct = relative_error(&analytic, &numeric_grad(&flat, loss));

    // through the student rows
    let sa = uniform2(&mut r, (n1, 4), -1.0, 1.0);
    let sp = uniform2(&mut r, (n2, 4), -1.0, 1.0);
    let student_loss = |flat: &[f64]| {
        let rows = split_rows(flat, &[(n1, 4), (n2, 4)]);
        let ua = normalize_rows(rows[0].view()).0;
        let up = normalize_rows(rows[1].view()).0;
        let low = affinity(ua.view(), up.view()).unwrap();
        distillation_loss(m_high.view(), det_a.view(), det_p.view(), low.view()).unwrap()
    };
    let (ua, na) = normalize_rows(sa.view());
    let (up, np) = normalize_rows(sp.view());
    let low = affinity(ua.view(), up.view()).unwrap();
    let gl = distillation_backward(m_high.view(), det_a.view(), det_p.view(), low.view())
        .unwrap()
        .m_low;
    let gua = gl.dot(&up);
    let gup = gl.t().dot(&ua);
    let analytic = flatten(&[
        normalize_rows_backward(ua.view(), &na, gua.view()),
        normalize_rows_backward(up.view(), &np, gup.view()),
    ]);
    let through = relative_error(&analytic, &numeric_grad(&flatten(&[sa, sp]), student_loss));
    direct.max(through)
}

/// Soft detection scores probed with a random linear functional.
pub fn soft_detection(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = (4, 6, 6);
    let f = uniform3(&mut r, shape, 0.1, 3.0);
    let probe = uniform1(&mut r, 36, -1.0, 1.0);
    let loss = |flat: &[f64]| {
        let x = Array3::from_shape_vec(shape, flat.to_vec()).unwrap();
        soft_detection_values(x.view(), 3).dot(&probe)
    };
    let analytic = soft_detection_backward(f.view(), 3, probe.view());
    relative_error(
        &analytic.iter().copied().collect::<Vec<_>>(),
        &numeric_grad(&f.iter().copied().collect::<Vec<_>>(), loss),
    )
}

/// GeM pooling alone and the full normalized pyramid descriptor.
pub fn gem(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = (4, 6, 6);
    let x = uniform3(&mut r, shape, 0.05, 2.0);
    let probe = uniform1(&mut r, 4, -1.0, 1.0);
    let p = 3.0;
    let loss = |flat: &[f64]| {
        let v = Array3::from_shape_vec(shape, flat.to_vec()).unwrap();
        gem_values(v.view(), p).unwrap().dot(&probe)
    };
    let pooled = gem_values(x.view(), p).unwrap();
    let analytic = gem_backward(x.view(), p, pooled.view(), probe.view());
    let single = relative_error(
        &analytic.iter().copied().collect::<Vec<_>>(),
        &numeric_grad(&x.iter().copied().collect::<Vec<_>>(), loss),
    );

    let shapes = [(4, 6, 6), (4, 3, 3), (4, 2, 2), (4, 1, 1)];
    let levels: Vec<Array3<f64>> = shapes
        .iter()
        .map(|&s| uniform3(&mut r, s, 0.05, 2.0))
        .collect();
    let probe = uniform1(&mut r, 16, -1.0, 1.0);
    let unpack = |flat: &[f64]| {
        let mut start = 0;
        shapes
            .iter()
            .map(|&s| {
                let n = s.0 * s.1 * s.2;
                let a = Array3::from_shape_vec(s, flat[start..start + n].to_vec()).unwrap();
                start += n;
                a
            })
            .collect::<Vec<_>>()
    };
    let loss = |flat: &[f64]| {
        let lv = unpack(flat);
        let views: Vec<ArrayView3<f64>> = lv.iter().map(|l| l.view()).collect();
        global_forward(&views, p).unwrap().descriptor().dot(&probe)
    };
    let views: Vec<ArrayView3<f64>> = levels.iter().map(|l| l.view()).collect();
    let cache = global_forward(&views, p).unwrap();
    let grads = global_backward(&views, &cache, probe.view());
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
    let flat: Vec<f64> = levels.iter().flat_map(|l| l.iter().copied()).collect();
    single.max(relative_error(&analytic, &numeric_grad(&flat, loss)))
}

/// Dropout-masked 1×1 projection w.r.t. the weight and the input map.
pub fn reduce_dim(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, d, hw) = (4, 3, 36);
    let w = uniform2(&mut r, (d, k), -1.0, 1.0);
    let x = uniform2(&mut r, (k, hw), 0.0, 2.0);
    let keep = 1.0 / (1.0 - 0.3);
    let mask: Vec<f64> = (0..k).map(|i| if i == 1 { 0.0 } else { keep }).collect();
    let probe = uniform2(&mut r, (d, hw), -1.0, 1.0);
    let loss = |flat: &[f64]| {
        let w = Array2::from_shape_vec((d, k), flat[..d * k].to_vec()).unwrap();
        let x = Array2::from_shape_vec((k, hw), flat[d * k..].to_vec()).unwrap();
        (masked_projection(w.view(), &mask, x.view()) * &probe).sum()
    };
    let (dw, dx) = masked_projection_backward(w.view(), &mask, x.view(), probe.view(), true);
    let analytic: Vec<f64> = dw.iter().chain(dx.unwrap().iter()).copied().collect();
    let flat: Vec<f64> = w.iter().chain(x.iter()).copied().collect();
    relative_error(&analytic, &numeric_grad(&flat, loss))
}

/// Every check with its name, for one seed.
pub fn all(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("L_M", matching_loss(seed)),
        ("L_C", contrastive_loss(seed)),
        ("L_Dis", distillation(seed)),
        ("soft_detection", soft_detection(seed)),
        ("gem_pool", gem(seed)),
        ("reduce_dim", reduce_dim(seed)),
    ]
}

pub fn random_seed_list(n: usize) -> Vec<u64> {
    let mut r = rng(0x9e37);
    (0..n).map(|_| r.random()).collect()
}
