//! Feature-map container and the spatial resampling helpers shared by the
//! backbone, the descriptor head and the training loop.

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

/// A `C×H×W` activation grid together with its placement in image space.
///
/// Cell `(fx, fy)` maps to image pixel `(fx·stride + offset, fy·stride + offset)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f32>,
    pub stride: f64,
    pub offset: f64,
}

impl FeatureMap {
    /// Wraps `values` using the center-of-cell convention (`offset = stride / 2`).
    pub fn new(values: Array3<f32>, stride: f64) -> Self {
        FeatureMap {
            values,
            stride,
            offset: stride / 2.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn to_image(&self, fx: f64, fy: f64) -> (f64, f64) {
        (
            fx * self.stride + self.offset,
            fy * self.stride + self.offset,
        )
    }

    pub fn to_feature(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.offset) / self.stride,
            (y - self.offset) / self.stride,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Copy with every spatial location scaled to unit L2 norm over channels.
    pub fn l2_normalized(&self) -> FeatureMap {
        let mut out = self.clone();
        l2_normalize_locations(&mut out.values);
        out
    }
}

/// Normalizes every `(y, x)` column of a `C×H×W` array in place; zero columns stay zero.
pub fn l2_normalize_locations(values: &mut Array3<f32>) {
    let (c, h, w) = values.dim();
    let mut norms = vec![0f64; h * w];
    for ch in 0..c {
        for (n, v) in norms.iter_mut().zip(values.index_axis(Axis(0), ch).iter()) {
            *n += f64::from(*v) * f64::from(*v);
        }
    }
    let inv: Vec<f32> = norms
        .iter()
        .map(|n| {
            if *n > 0.0 {
                (1.0 / n.sqrt()) as f32
            } else {
                0.0
            }
        })
        .collect();
    for mut plane in values.axis_iter_mut(Axis(0)) {
        for (v, s) in plane.iter_mut().zip(inv.iter()) {
            *v *= s;
        }
    }
}

/// Flattens a `C×H×W` map into an `(H·W)×C` matrix in row-major location order.
pub fn locations_as_rows(values: ArrayView3<f32>) -> Array2<f64> {
    let (c, h, w) = values.dim();
    let mut out = Array2::<f64>::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[y * w + x, ch]] = f64::from(values[[ch, y, x]]);
            }
        }
    }
    out
}

/// Per-axis interpolation taps for half-pixel bilinear resizing from `src` to `dst` cells.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let pos = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = (pos - i0 as f64) as f32;
            (i0, i1, if i0 == i1 { 0.0 } else { frac })
        })
        .collect()
}

/// Bilinear resize of every channel to `(out_h, out_w)` (half-pixel centers, edge clamp).
pub fn resize_bilinear(input: ArrayView3<f32>, out_h: usize, out_w: usize) -> Result<Array3<f32>> {
    let (c, h, w) = input.dim();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::dim("cannot resize an empty map"));
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        let src = input.index_axis(Axis(0), ch);
        let mut dst = out.index_axis_mut(Axis(0), ch);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                dst[[oy, ox]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`]: scatters an output gradient back onto the `(h, w)` source grid.
pub fn resize_bilinear_backward(grad_out: ArrayView3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, out_h, out_w) = grad_out.dim();
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut grad_in = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        let g = grad_out.index_axis(Axis(0), ch);
        let mut dst = grad_in.index_axis_mut(Axis(0), ch);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[[oy, ox]];
                dst[[y0, x0]] += v * (1.0 - fy) * (1.0 - fx);
                dst[[y0, x1]] += v * (1.0 - fy) * fx;
                dst[[y1, x0]] += v * fy * (1.0 - fx);
                dst[[y1, x1]] += v * fy * fx;
            }
        }
    }
    grad_in
}
