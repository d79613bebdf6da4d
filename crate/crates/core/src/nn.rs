//! Minimal convolution layers with hand-written backward passes.
//!
//! Everything operates on a single `C×H×W` image. Convolutions lower to
//! sgemm: stride-1 kernels as one product per tap over the padded input, strided
//! kernels through im2col. Backward passes recompute these buffers instead of
//! caching them.

use std::collections::BTreeMap;

use ndarray::{
    Array1, Array2, Array3, Array4, ArrayD, ArrayView3, ArrayViewD, ArrayViewMutD, Axis, Zip,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::mat_mul;

/// Stride, zero-padding and dilation of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Anything holding named trainable tensors.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<f32>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f32>));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }
}

/// Gradient accumulator keyed by parameter name.
#[derive(Debug, Default, Clone)]
pub struct ParamGrads {
    grads: BTreeMap<String, ArrayD<f32>>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, grad: ArrayViewD<f32>) {
        match self.grads.get_mut(name) {
            Some(existing) => *existing += &grad,
            None => {
                self.grads.insert(name.to_string(), grad.to_owned());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f32>)> {
        self.grads.iter()
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Square 2D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    /// `[out, in, k, k]`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub geometry: ConvGeometry,
}

/// Weight and bias gradients of one convolution.
pub struct ConvGrads {
    pub input: Option<Array3<f32>>,
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
}

impl Conv2d {
    pub fn zeros(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        geometry: ConvGeometry,
    ) -> Self {
        Conv2d {
            name: name.into(),
            weight: Array4::zeros((cout, cin, kernel, kernel)),
            bias: Array1::zeros(cout),
            geometry,
        }
    }

    /// He-normal weights (fan-in), scaled by `gain`; zero bias.
    pub fn he_normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        geometry: ConvGeometry,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let mut conv = Conv2d::zeros(name, cin, cout, kernel, geometry);
        let std = gain * (2.0 / (cin * kernel * kernel) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        conv.weight.mapv_inplace(|_| normal.sample(rng));
        conv
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("weights are contiguous")
    }

    fn output_size(&self, h: usize, w: usize, g: ConvGeometry) -> Result<(usize, usize)> {
        let k = self.kernel();
        match (g.output_len(h, k), g.output_len(w, k)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok((ho, wo)),
            _ => Err(Error::dim(format!(
                "{}: input {h}x{w} too small for kernel {k} with {g:?}",
                self.name
            ))),
        }
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Result<Array3<f32>> {
        self.forward_with(x, self.geometry)
    }

    pub fn forward_with(&self, x: ArrayView3<f32>, g: ConvGeometry) -> Result<Array3<f32>> {
        let (c, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(Error::dim(format!(
                "{}: expected {} input channels, got {c}",
                self.name,
                self.in_channels()
            )));
        }
        let (ho, wo) = self.output_size(h, w, g)?;
        let mut out = Array2::<f32>::zeros((self.out_channels(), ho * wo));
        let direct = self.kernel() == 1 && g.stride == 1 && g.padding == 0;
        if Shifted::applies(g, direct, ho * wo) {
            let sh = Shifted::new(self.kernel(), g, h, w, ho, wo);
            let padded = sh.pad(x);
            let mut wide = Array2::<f32>::zeros((self.out_channels(), sh.len));
            for (ki, kj) in sh.taps() {
                mat_mul(
                    1.0,
                    &self.tap(ki, kj),
                    &sh.window(&padded, ki, kj),
                    1.0,
                    &mut wide,
                );
            }
            let mut out = Array3::<f32>::zeros((self.out_channels(), ho, wo));
            for ((mut plane, row), b) in out
                .outer_iter_mut()
                .zip(wide.outer_iter())
                .zip(self.bias.iter())
            {
                for (oy, mut line) in plane.outer_iter_mut().enumerate() {
                    let src = row.slice(ndarray::s![oy * sh.wp..oy * sh.wp + wo]);
                    line.zip_mut_with(&src, |o, v| *o = v + b);
                }
            }
            return Ok(out);
        }
        if direct {
            let xs = x.as_standard_layout();
            let cols = xs
                .view()
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
            mat_mul(1.0, &self.weight_matrix(), &cols, 0.0, &mut out);
        } else {
            let cols = im2col(x, self.kernel(), g, ho, wo);
            mat_mul(1.0, &self.weight_matrix(), &cols, 0.0, &mut out);
        }
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        Ok(out
            .into_shape_with_order((self.out_channels(), ho, wo))
            .expect("sized above"))
    }

    /// Gradients w.r.t. weight, bias and (optionally) the input `x` used in the forward pass.
    pub fn backward_with(
        &self,
        x: ArrayView3<f32>,
        grad_out: ArrayView3<f32>,
        g: ConvGeometry,
        need_input: bool,
    ) -> Result<ConvGrads> {
        let (c, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w, g)?;
        if grad_out.dim() != (self.out_channels(), ho, wo) {
            return Err(Error::dim(format!(
                "{}: gradient shape mismatch",
                self.name
            )));
        }
        let k = self.kernel();
        let go = grad_out.as_standard_layout();
        let go = go
            .view()
            .into_shape_with_order((self.out_channels(), ho * wo))
            .expect("contiguous");
        let bias = go.sum_axis(Axis(1));

        let direct = k == 1 && g.stride == 1 && g.padding == 0;
        if Shifted::applies(g, direct, ho * wo) {
            let sh = Shifted::new(k, g, h, w, ho, wo);
            let padded = sh.pad(x);
            let mut wide = Array2::<f32>::zeros((self.out_channels(), sh.len));
            for (o, mut row) in wide.outer_iter_mut().enumerate() {
                for oy in 0..ho {
                    row.slice_mut(ndarray::s![oy * sh.wp..oy * sh.wp + wo])
                        .assign(&grad_out.slice(ndarray::s![o, oy, ..]));
                }
            }
            let mut weight = Array4::<f32>::zeros(self.weight.raw_dim());
            for (ki, kj) in sh.taps() {
                let mut dst = weight.slice_mut(ndarray::s![.., .., ki, kj]);
                mat_mul(1.0, &wide, &sh.window(&padded, ki, kj).t(), 0.0, &mut dst);
            }
            let input = need_input.then(|| {
                let mut dpad = Array2::<f32>::zeros(padded.raw_dim());
                for (ki, kj) in sh.taps() {
                    let off = sh.offset(ki, kj);
                    let mut dst = dpad.slice_mut(ndarray::s![.., off..off + sh.len]);
                    mat_mul(1.0, &self.tap(ki, kj).t(), &wide, 1.0, &mut dst);
                }
                sh.unpad(&dpad, c)
            });
            return Ok(ConvGrads {
                input,
                weight,
                bias,
            });
        }
        let xs;
        let cols_owned;
        let cols = if direct {
            xs = x.as_standard_layout();
            xs.view()
                .into_shape_with_order((c, h * w))
                .expect("contiguous")
        } else {
            cols_owned = im2col(x, k, g, ho, wo);
            cols_owned.view()
        };
        let mut dw = Array2::<f32>::zeros((self.out_channels(), c * k * k));
        mat_mul(1.0, &go, &cols.t(), 0.0, &mut dw);
        let weight = dw
            .into_shape_with_order((self.out_channels(), c, k, k))
            .expect("sized");

        let input = if need_input {
            let mut dcols = Array2::<f32>::zeros((c * k * k, ho * wo));
            mat_mul(1.0, &self.weight_matrix().t(), &go, 0.0, &mut dcols);
            if direct {
                Some(dcols.into_shape_with_order((c, h, w)).expect("sized"))
            } else {
                Some(col2im(&dcols, (c, h, w), k, g, ho, wo))
            }
        } else {
            None
        };
        Ok(ConvGrads {
            input,
            weight,
            bias,
        })
    }

    /// `[out, in]` weights of one kernel tap.
    fn tap(&self, ki: usize, kj: usize) -> ndarray::ArrayView2<'_, f32> {
        self.weight.slice(ndarray::s![.., .., ki, kj])
    }

    pub fn accumulate_grads(&self, grads: &ConvGrads, into: &mut ParamGrads) {
        into.accumulate(
            &format!("{}.weight", self.name),
            grads.weight.view().into_dyn(),
        );
        into.accumulate(&format!("{}.bias", self.name), grads.bias.view().into_dyn());
    }
}

impl Parameters for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<f32>)) {
        f(
            &format!("{}.weight", self.name),
            self.weight.view().into_dyn(),
        );
        f(&format!("{}.bias", self.name), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f32>)) {
        let name = self.name.clone();
        f(&format!("{name}.weight"), self.weight.view_mut().into_dyn());
        f(&format!("{name}.bias"), self.bias.view_mut().into_dyn());
    }
}

/// Stride-1 convolution as one product per kernel tap over a zero-padded,
/// flattened input. Outputs are computed on rows of the padded width `wp`; the
/// `wp − wo` extra columns per row wrap around and are discarded.
struct Shifted {
    k: usize,
    dilation: usize,
    padding: usize,
    h: usize,
    w: usize,
    wp: usize,
    /// Flattened plane length including trailing slack for the last tap.
    plane: usize,
    len: usize,
}

impl Shifted {
    /// Below about a thousand outputs per channel the per-tap products are too
    /// thin and im2col is faster.
    fn applies(g: ConvGeometry, direct: bool, outputs: usize) -> bool {
        g.stride == 1 && !direct && outputs >= 1024
    }

    fn new(k: usize, g: ConvGeometry, h: usize, w: usize, ho: usize, wo: usize) -> Self {
        let wp = w + 2 * g.padding;
        let hp = h + 2 * g.padding;
        debug_assert!(wo <= wp && ho <= hp);
        let reach = g.dilation * (k - 1);
        Shifted {
            k,
            dilation: g.dilation,
            padding: g.padding,
            h,
            w,
            wp,
            plane: hp * wp + reach,
            len: ho * wp,
        }
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize)> {
        let k = self.k;
        (0..k).flat_map(move |ki| (0..k).map(move |kj| (ki, kj)))
    }

    fn offset(&self, ki: usize, kj: usize) -> usize {
        (ki * self.wp + kj) * self.dilation
    }

    fn pad(&self, x: ArrayView3<f32>) -> Array2<f32> {
        let c = x.dim().0;
        let mut out = Array2::<f32>::zeros((c, self.plane));
        for (mut row, src) in out.outer_iter_mut().zip(x.outer_iter()) {
            for (y, line) in src.outer_iter().enumerate() {
                let start = (y + self.padding) * self.wp + self.padding;
                row.slice_mut(ndarray::s![start..start + self.w])
                    .assign(&line);
            }
        }
        out
    }

    fn unpad(&self, padded: &Array2<f32>, c: usize) -> Array3<f32> {
        let mut out = Array3::<f32>::zeros((c, self.h, self.w));
        for (mut plane, row) in out.outer_iter_mut().zip(padded.outer_iter()) {
            for (y, mut line) in plane.outer_iter_mut().enumerate() {
                let start = (y + self.padding) * self.wp + self.padding;
                line.assign(&row.slice(ndarray::s![start..start + self.w]));
            }
        }
        out
    }

    fn window<'a>(
        &self,
        padded: &'a Array2<f32>,
        ki: usize,
        kj: usize,
    ) -> ndarray::ArrayView2<'a, f32> {
        let off = self.offset(ki, kj);
        padded.slice(ndarray::s![.., off..off + self.len])
    }
}

fn im2col(x: ArrayView3<f32>, k: usize, g: ConvGeometry, ho: usize, wo: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let mut cols = Array2::<f32>::zeros((c * k * k, ho * wo));
    let pad = g.padding as isize;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let mut dst_row = cols.row_mut(row);
                let dst = dst_row.as_slice_mut().expect("row-major");
                let xoff = (kj * g.dilation) as isize - pad;
                // valid output columns: 0 <= ox*stride + xoff < w
                let ox_lo = if xoff >= 0 {
                    0
                } else {
                    ((-xoff) as usize).div_ceil(g.stride)
                };
                let ox_hi = if (w as isize) - xoff <= 0 {
                    0
                } else {
                    (((w as isize - xoff - 1) as usize) / g.stride + 1).min(wo)
                };
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let start = (ox_lo as isize + xoff) as usize;
                        out_row[ox_lo..ox_hi]
                            .copy_from_slice(&src_row[start..start + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            out_row[ox] =
                                src_row[(ox as isize * g.stride as isize + xoff) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f32>,
    (c, h, w): (usize, usize, usize),
    k: usize,
    g: ConvGeometry,
    ho: usize,
    wo: usize,
) -> Array3<f32> {
    let mut out = vec![0f32; c * h * w];
    let pad = g.padding as isize;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src_row = cols.row(row);
                let src = src_row.as_slice().expect("row-major");
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("sized")
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output `activated` is not positive.
pub fn relu_backward_inplace(grad: &mut Array3<f32>, activated: ArrayView3<f32>) {
    Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// 3×3 / stride 2 / pad 1 max pooling; returns the pooled map and flat argmax indices.
pub fn max_pool_3x3_s2(x: ArrayView3<f32>) -> (Array3<f32>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let ho = (h + 2 - 3) / 2 + 1;
    let wo = (w + 2 - 3) / 2 + 1;
    let mut out = Array3::<f32>::zeros((c, ho, wo));
    let mut argmax = vec![0usize; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..3 {
                    let iy = (oy * 2 + dy) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let ix = (ox * 2 + dx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = x[[ch, iy as usize, ix as usize]];
                        if v > best {
                            best = v;
                            best_idx = (ch * h + iy as usize) * w + ix as usize;
                        }
                    }
                }
                out[[ch, oy, ox]] = best;
                argmax[(ch * ho + oy) * wo + ox] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward(
    grad_out: ArrayView3<f32>,
    argmax: &[usize],
    input_dim: (usize, usize, usize),
) -> Array3<f32> {
    let mut grad = Array3::<f32>::zeros(input_dim);
    let flat = grad.as_slice_mut().expect("fresh array");
    for (g, &idx) in grad_out.iter().zip(argmax.iter()) {
        flat[idx] += g;
    }
    grad
}
