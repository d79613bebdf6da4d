//! Top-down feature pyramid over the four residual stages.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::BlockFeatures;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvGeometry, ParamGrads, Parameters};
use crate::tensor::{resize_bilinear, resize_bilinear_backward, FeatureMap};

pub const FPN_WIDTH: usize = 256;

/// Pyramid levels `F1..F4`, each `width×H_r×W_r` and non-negative.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn level_dims(&self) -> Vec<usize> {
        self.levels.iter().map(FeatureMap::channels).collect()
    }
}

/// One 3×3 lateral convolution per stage; `F_r = ReLU(lateral_r(C_r) + up(F_{r+1}))`.
#[derive(Debug, Clone)]
pub struct Fpn {
    pub lateral: Vec<Conv2d>,
}

/// Inputs and outputs of a pyramid forward pass needed for backpropagation.
pub struct FpnCache {
    inputs: Vec<Array3<f32>>,
    outputs: Vec<Array3<f32>>,
}

impl Fpn {
    pub fn seeded(in_channels: [usize; 4], width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lateral = in_channels
            .iter()
            .enumerate()
            .map(|(r, &cin)| {
                Conv2d::he_normal(
                    format!("fpn.lateral{}", r + 1),
                    cin,
                    width,
                    3,
                    ConvGeometry::new(1, 1, 1),
                    1.0,
                    &mut rng,
                )
            })
            .collect();
        Fpn { lateral }
    }

    pub fn width(&self) -> usize {
        self.lateral[0].out_channels()
    }

    pub fn forward(&self, blocks: &BlockFeatures) -> Result<FeaturePyramid> {
        Ok(self.forward_cached(blocks)?.0)
    }

    pub fn forward_cached(&self, blocks: &BlockFeatures) -> Result<(FeaturePyramid, FpnCache)> {
        if blocks.levels.len() != 4 {
            return Err(Error::dim("pyramid needs four block maps"));
        }
        let mut outputs: Vec<Option<Array3<f32>>> = vec![None, None, None, None];
        for r in (0..4).rev() {
            let c = &blocks.levels[r].values;
            let mut pre = self.lateral[r].forward(c.view())?;
            if r < 3 {
                let above = outputs[r + 1].as_ref().expect("computed top-down");
                let (_, h, w) = pre.dim();
                let (_, ah, aw) = above.dim();
                if ah > h || aw > w {
                    return Err(Error::dim(format!(
                        "level {} ({ah}x{aw}) is larger than level {} ({h}x{w})",
                        r + 2,
                        r + 1
                    )));
                }
                let up = resize_bilinear(above.view(), h, w)?;
                if up.dim() != pre.dim() {
                    return Err(Error::dim("upsampled level does not match lateral size"));
                }
                pre += &up;
            }
            nn::relu_inplace(&mut pre);
            outputs[r] = Some(pre);
        }
        let outputs: Vec<Array3<f32>> = outputs.into_iter().map(|o| o.expect("filled")).collect();
        let levels = outputs
            .iter()
            .zip(blocks.levels.iter())
            .map(|(o, b)| FeatureMap {
                values: o.clone(),
                stride: b.stride,
                offset: b.offset,
            })
            .collect();
        let cache = FpnCache {
            inputs: blocks.levels.iter().map(|b| b.values.clone()).collect(),
            outputs,
        };
        Ok((FeaturePyramid { levels }, cache))
    }

    /// Backpropagates level gradients; returns input gradients for the stages in `need_input`.
    pub fn backward(
        &self,
        cache: &FpnCache,
        level_grads: Vec<Array3<f32>>,
        need_input: [bool; 4],
        grads: &mut ParamGrads,
    ) -> Result<Vec<Option<Array3<f32>>>> {
        let mut pending: Vec<Option<Array3<f32>>> = level_grads.into_iter().map(Some).collect();
        let mut input_grads = vec![None, None, None, None];
        for r in 0..4 {
            let mut g = pending[r].take().expect("each level visited once");
            nn::relu_backward_inplace(&mut g, cache.outputs[r].view());
            let cg = self.lateral[r].backward_with(
                cache.inputs[r].view(),
                g.view(),
                self.lateral[r].geometry,
                need_input[r],
            )?;
            self.lateral[r].accumulate_grads(&cg, grads);
            input_grads[r] = cg.input;
            if r < 3 {
                let (_, ah, aw) = cache.outputs[r + 1].dim();
                let down = resize_bilinear_backward(g.view(), ah, aw);
                if let Some(next) = pending[r + 1].as_mut() {
                    *next += &down;
                }
            }
        }
        Ok(input_grads)
    }
}

impl Parameters for Fpn {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<f32>)) {
        for l in &self.lateral {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<f32>)) {
        for l in &mut self.lateral {
            l.visit_mut(f);
        }
    }
}
