//! Bottleneck ResNet with inference-mode batch norm folded into the convolutions.

use ndarray::{Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvGeometry, ParamGrads, Parameters};

/// Depth and width of a bottleneck ResNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNetSpec {
    pub layers: [usize; 4],
    /// Bottleneck width of the first stage (64 for the ImageNet models).
    pub base_width: usize,
}

impl ResNetSpec {
    pub const RESNET101: ResNetSpec = ResNetSpec {
        layers: [3, 4, 23, 3],
        base_width: 64,
    };

    pub const EXPANSION: usize = 4;

    /// Output channels of stage `s` (0-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        (self.base_width * Self::EXPANSION) << s
    }

    pub fn stem_channels(&self) -> usize {
        self.base_width
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub downsample: Option<Conv2d>,
}

/// Convolution geometry of one bottleneck under a given mode.
#[derive(Debug, Clone, Copy)]
pub struct BlockGeometry {
    pub conv2: ConvGeometry,
    pub downsample: ConvGeometry,
}

/// Activations kept from a forward pass for the backward pass.
pub struct BlockCache {
    input: Array3<f32>,
    h1: Array3<f32>,
    h2: Array3<f32>,
    out: Array3<f32>,
    geometry: BlockGeometry,
}

impl Bottleneck {
    fn forward_parts(
        &self,
        x: ArrayView3<f32>,
        g: BlockGeometry,
    ) -> Result<(Array3<f32>, Array3<f32>, Array3<f32>)> {
        let mut h1 = self.conv1.forward(x)?;
        nn::relu_inplace(&mut h1);
        let mut h2 = self.conv2.forward_with(h1.view(), g.conv2)?;
        nn::relu_inplace(&mut h2);
        let mut out = self.conv3.forward(h2.view())?;
        match &self.downsample {
            Some(ds) => out += &ds.forward_with(x, g.downsample)?,
            None => {
                if out.dim() != x.dim() {
                    return Err(Error::dim("identity shortcut shape mismatch"));
                }
                out += &x;
            }
        }
        nn::relu_inplace(&mut out);
        Ok((h1, h2, out))
    }

    pub fn forward(&self, x: ArrayView3<f32>, g: BlockGeometry) -> Result<Array3<f32>> {
        Ok(self.forward_parts(x, g)?.2)
    }

    pub fn forward_cached(
        &self,
        x: Array3<f32>,
        g: BlockGeometry,
    ) -> Result<(Array3<f32>, BlockCache)> {
        let (h1, h2, out) = self.forward_parts(x.view(), g)?;
        let cache = BlockCache {
            input: x,
            h1,
            h2,
            out: out.clone(),
            geometry: g,
        };
        Ok((out, cache))
    }

    /// Backpropagates `grad_out` through the block, accumulating parameter gradients.
    pub fn backward(
        &self,
        cache: &BlockCache,
        mut grad_out: Array3<f32>,
        grads: &mut ParamGrads,
        need_input: bool,
    ) -> Result<Option<Array3<f32>>> {
        nn::relu_backward_inplace(&mut grad_out, cache.out.view());
        let g3 = self.conv3.backward_with(
            cache.h2.view(),
            grad_out.view(),
            self.conv3.geometry,
            true,
        )?;
        self.conv3.accumulate_grads(&g3, grads);
        let mut dh2 = g3.input.expect("requested");
        nn::relu_backward_inplace(&mut dh2, cache.h2.view());
        let g2 =
            self.conv2
                .backward_with(cache.h1.view(), dh2.view(), cache.geometry.conv2, true)?;
        self.conv2.accumulate_grads(&g2, grads);
        let mut dh1 = g2.input.expect("requested");
        nn::relu_backward_inplace(&mut dh1, cache.h1.view());
        let g1 = self.conv1.backward_with(
            cache.input.view(),
            dh1.view(),
            self.conv1.geometry,
            need_input,
        )?;
        self.conv1.accumulate_grads(&g1, grads);
        let shortcut = match &self.downsample {
            Some(ds) => {
                let gd = ds.backward_with(
                    cache.input.view(),
                    grad_out.view(),
                    cache.geometry.downsample,
                    need_input,
                )?;
                ds.accumulate_grads(&gd, grads);
                gd.input
            }
            None => need_input.then(|| grad_out.clone()),
        };
        Ok(match (g1.input, shortcut) {
            (Some(mut a), Some(b)) => {
                a += &b;
                Some(a)
            }
            _ => None,
        })
    }
}

impl Parameters for Bottleneck {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<f32>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.conv3.visit(f);
        if let Some(ds) = &self.downsample {
            ds.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<f32>)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.conv3.visit_mut(f);
        if let Some(ds) = &mut self.downsample {
            ds.visit_mut(f);
        }
    }
}

/// Bottleneck ResNet trunk: 7×7 stem, max-pool, four residual stages.
#[derive(Debug, Clone)]
pub struct ResNet {
    pub spec: ResNetSpec,
    pub stem: Conv2d,
    pub stages: Vec<Vec<Bottleneck>>,
}

/// Stem activations kept for the backward pass.
pub struct StemCache {
    input: Array3<f32>,
    pre_pool: Array3<f32>,
    argmax: Vec<usize>,
}

impl ResNet {
    /// Randomly initialized network (He-normal convolutions, identity batch norm).
    ///
    /// Residual branches end with a damped projection so activations stay bounded
    /// through deep stages.
    pub fn seeded(spec: ResNetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::he_normal(
            "conv1",
            3,
            spec.stem_channels(),
            7,
            ConvGeometry::new(2, 3, 1),
            1.0,
            &mut rng,
        );
        let mut stages = Vec::with_capacity(4);
        let mut inplanes = spec.stem_channels();
        for (s, &blocks) in spec.layers.iter().enumerate() {
            let planes = spec.base_width << s;
            let out = planes * ResNetSpec::EXPANSION;
            let stride = if s == 0 { 1 } else { 2 };
            let residual_gain = 1.0 / (blocks as f32).sqrt();
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let prefix = format!("layer{}.{}", s + 1, b);
                let cin = if b == 0 { inplanes } else { out };
                let conv1 = Conv2d::he_normal(
                    format!("{prefix}.conv1"),
                    cin,
                    planes,
                    1,
                    ConvGeometry::new(1, 0, 1),
                    1.0,
                    &mut rng,
                );
                let conv2 = Conv2d::he_normal(
                    format!("{prefix}.conv2"),
                    planes,
                    planes,
                    3,
                    ConvGeometry::new(if b == 0 { stride } else { 1 }, 1, 1),
                    1.0,
                    &mut rng,
                );
                let conv3 = Conv2d::he_normal(
                    format!("{prefix}.conv3"),
                    planes,
                    out,
                    1,
                    ConvGeometry::new(1, 0, 1),
                    residual_gain,
                    &mut rng,
                );
                let downsample = (b == 0).then(|| {
                    Conv2d::he_normal(
                        format!("{prefix}.downsample"),
                        cin,
                        out,
                        1,
                        ConvGeometry::new(stride, 0, 1),
                        1.0,
                        &mut rng,
                    )
                });
                stage.push(Bottleneck {
                    conv1,
                    conv2,
                    conv3,
                    downsample,
                });
            }
            inplanes = out;
            stages.push(stage);
        }
        ResNet { spec, stem, stages }
    }

    /// Geometry of block `b` of stage `s` (0-based) and the stage's output stride.
    ///
    /// Test mode removes the stride of stages 2 and 3 and dilates their kernels so
    /// both keep the stride-4 grid of stage 1; stage 4 keeps its stride with the
    /// accumulated dilation.
    pub fn block_geometry(s: usize, b: usize, mode: Mode) -> BlockGeometry {
        let base_stride = if s == 0 { 1 } else { 2 };
        let (stride, prev_dil, dil) = match (mode, s) {
            (Mode::Train, _) | (Mode::Test, 0) => (base_stride, 1, 1),
            (Mode::Test, 1) => (1, 1, 2),
            (Mode::Test, 2) => (1, 2, 4),
            (Mode::Test, _) => (2, 4, 4),
        };
        if b == 0 {
            BlockGeometry {
                conv2: ConvGeometry::new(stride, prev_dil, prev_dil),
                downsample: ConvGeometry::new(stride, 0, 1),
            }
        } else {
            BlockGeometry {
                conv2: ConvGeometry::new(1, dil, dil),
                downsample: ConvGeometry::new(1, 0, 1),
            }
        }
    }

    /// Image-space stride of each stage output.
    pub fn stage_strides(mode: Mode) -> [f64; 4] {
        match mode {
            Mode::Train => [4.0, 8.0, 16.0, 32.0],
            Mode::Test => [4.0, 4.0, 4.0, 8.0],
        }
    }

    pub fn stem_forward(&self, image: ArrayView3<f32>) -> Result<Array3<f32>> {
        let mut x = self.stem.forward(image)?;
        nn::relu_inplace(&mut x);
        Ok(nn::max_pool_3x3_s2(x.view()).0)
    }

    pub fn stem_forward_cached(&self, image: Array3<f32>) -> Result<(Array3<f32>, StemCache)> {
        let mut x = self.stem.forward(image.view())?;
        nn::relu_inplace(&mut x);
        let (pooled, argmax) = nn::max_pool_3x3_s2(x.view());
        Ok((
            pooled,
            StemCache {
                input: image,
                pre_pool: x,
                argmax,
            },
        ))
    }

    pub fn stem_backward(
        &self,
        cache: &StemCache,
        grad_out: ArrayView3<f32>,
        grads: &mut ParamGrads,
    ) -> Result<()> {
        let mut g = nn::max_pool_backward(grad_out, &cache.argmax, cache.pre_pool.dim());
        nn::relu_backward_inplace(&mut g, cache.pre_pool.view());
        let cg =
            self.stem
                .backward_with(cache.input.view(), g.view(), self.stem.geometry, false)?;
        self.stem.accumulate_grads(&cg, grads);
        Ok(())
    }

    pub fn stage_forward(&self, s: usize, mut x: Array3<f32>, mode: Mode) -> Result<Array3<f32>> {
        for (b, block) in self.stages[s].iter().enumerate() {
            x = block.forward(x.view(), Self::block_geometry(s, b, mode))?;
        }
        Ok(x)
    }

    pub fn stage_forward_cached(
        &self,
        s: usize,
        mut x: Array3<f32>,
        mode: Mode,
    ) -> Result<(Array3<f32>, Vec<BlockCache>)> {
        let mut caches = Vec::with_capacity(self.stages[s].len());
        for (b, block) in self.stages[s].iter().enumerate() {
            let (out, cache) = block.forward_cached(x, Self::block_geometry(s, b, mode))?;
            caches.push(cache);
            x = out;
        }
        Ok((x, caches))
    }

    pub fn stage_backward(
        &self,
        s: usize,
        caches: &[BlockCache],
        grad_out: Array3<f32>,
        grads: &mut ParamGrads,
        need_input: bool,
    ) -> Result<Option<Array3<f32>>> {
        let mut g = grad_out;
        let n = self.stages[s].len();
        for b in (0..n).rev() {
            let want = need_input || b > 0;
            match self.stages[s][b].backward(&caches[b], g, grads, want)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    /// True when `name` belongs to the stem or stages 1..=`stage`.
    pub fn is_param_through_stage(name: &str, stage: usize) -> bool {
        if name.starts_with("conv1.") {
            return true;
        }
        (1..=stage).any(|s| name.starts_with(&format!("layer{s}.")))
    }
}

impl Parameters for ResNet {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<f32>)) {
        self.stem.visit(f);
        for stage in &self.stages {
            for block in stage {
                block.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<f32>)) {
        self.stem.visit_mut(f);
        for stage in &mut self.stages {
            for block in stage {
                block.visit_mut(f);
            }
        }
    }
}
