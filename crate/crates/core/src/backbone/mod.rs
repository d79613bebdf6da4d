//! Residual backbone, feature pyramid and the concatenated B2‖B3 local map.

mod fpn;
mod resnet;

pub use fpn::{FeaturePyramid, Fpn, FpnCache, FPN_WIDTH};
pub use resnet::{BlockCache, BlockGeometry, Bottleneck, ResNet, ResNetSpec, StemCache};

use std::path::Path;

use image::RgbImage;
use ndarray::{concatenate, Array3, Axis};

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, FeatureMap};

/// Smallest accepted image side; four stride-2 reductions must leave at least one cell.
pub const MIN_IMAGE_SIDE: usize = 64;

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Extraction mode. `Test` applies the dilation trick to stages 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Test,
}

/// A normalized `3×H×W` network input.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f32>,
}

impl ImageTensor {
    /// Wraps already-normalized pixels, checking size and finiteness.
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::dim(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::dim(format!(
                "image {w}x{h} is smaller than the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("image contains non-finite values"));
        }
        Ok(ImageTensor { pixels })
    }

    /// Scales 8-bit RGB to `[0, 1]` and applies ImageNet per-channel normalization.
    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let mut pixels = Array3::<f32>::zeros((3, h as usize, w as usize));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                let v = f32::from(p[c]) / 255.0;
                pixels[[c, y as usize, x as usize]] = (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        Self::new(pixels)
    }

    /// Row-major interleaved RGB bytes, `3·width·height` long.
    pub fn from_rgb8_raw(width: u32, height: u32, data: &[u8]) -> Result<Self> {
        let expected = 3 * width as usize * height as usize;
        if data.len() != expected {
            return Err(Error::dim(format!(
                "{width}x{height} RGB needs {expected} bytes, got {}",
                data.len()
            )));
        }
        let img = RgbImage::from_raw(width, height, data.to_vec()).expect("length checked");
        Self::from_rgb8(&img)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// True when every pixel has the same colour.
    pub fn is_uniform(&self) -> bool {
        self.pixels.outer_iter().all(|plane| {
            let first = plane[[0, 0]];
            plane.iter().all(|v| *v == first)
        })
    }
}

/// Stage outputs `C1..C4` taken after the final ReLU of each residual stage.
#[derive(Debug, Clone)]
pub struct BlockFeatures {
    pub levels: Vec<FeatureMap>,
    pub mode: Mode,
}

impl BlockFeatures {
    pub fn b2(&self) -> &FeatureMap {
        &self.levels[1]
    }

    pub fn b3(&self) -> &FeatureMap {
        &self.levels[2]
    }

    pub fn concat_local(&self) -> Result<LocalFeatureMap> {
        concat_local_features(self.b2(), self.b3())
    }
}

/// Channel concatenation of the B2 and B3 maps on B2's grid; channels `0..b2_channels` come from B2.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureMap {
    pub map: FeatureMap,
    pub b2_channels: usize,
    pub b3_channels: usize,
}

impl LocalFeatureMap {
    pub fn channels(&self) -> usize {
        self.b2_channels + self.b3_channels
    }
}

/// Concatenates B2 and B3, bilinearly upsampling B3 onto B2's grid when they differ.
pub fn concat_local_features(b2: &FeatureMap, b3: &FeatureMap) -> Result<LocalFeatureMap> {
    let (k2, h2, w2) = b2.values.dim();
    let (k3, h3, w3) = b3.values.dim();
    let aligned = if (h2, w2) == (h3, w3) {
        b3.values.clone()
    } else {
        let ratio = b3.stride / b2.stride;
        let fits = |small: usize, big: usize| {
            let expect = small as f64 * ratio;
            small <= big && (big as f64 - expect).abs() < ratio
        };
        if ratio <= 1.0 || !fits(h3, h2) || !fits(w3, w2) {
            return Err(Error::dim(format!(
                "cannot align B3 {h3}x{w3} (stride {}) with B2 {h2}x{w2} (stride {})",
                b3.stride, b2.stride
            )));
        }
        resize_bilinear(b3.values.view(), h2, w2)?
    };
    let values =
        concatenate(Axis(0), &[b2.values.view(), aligned.view()]).expect("same spatial size");
    Ok(LocalFeatureMap {
        map: FeatureMap {
            values,
            stride: b2.stride,
            offset: b2.offset,
        },
        b2_channels: k2,
        b3_channels: k3,
    })
}

/// The residual trunk plus its weight state.
#[derive(Debug, Clone)]
pub struct Backbone {
    net: Option<ResNet>,
}

impl Backbone {
    pub fn uninitialized() -> Self {
        Backbone { net: None }
    }

    pub fn from_resnet(net: ResNet) -> Self {
        Backbone { net: Some(net) }
    }

    pub fn seeded(spec: ResNetSpec, seed: u64) -> Self {
        Self::from_resnet(ResNet::seeded(spec, seed))
    }

    /// Loads a ResNet-101 checkpoint (torchvision names or folded names).
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_resnet(crate::checkpoint::load_resnet(
            path,
            ResNetSpec::RESNET101,
        )?))
    }

    pub fn net(&self) -> Result<&ResNet> {
        self.net
            .as_ref()
            .ok_or_else(|| Error::State("backbone weights are not loaded".into()))
    }

    pub fn net_mut(&mut self) -> Result<&mut ResNet> {
        self.net
            .as_mut()
            .ok_or_else(|| Error::State("backbone weights are not loaded".into()))
    }

    pub fn stage_channels(&self) -> Result<[usize; 4]> {
        let spec = self.net()?.spec;
        Ok([0, 1, 2, 3].map(|s| spec.stage_channels(s)))
    }

    pub fn extract_block_features(&self, image: &ImageTensor, mode: Mode) -> Result<BlockFeatures> {
        self.extract_stages(image, mode, 4)
    }

    /// Runs the trunk through the first `stages` stages only.
    pub fn extract_stages(
        &self,
        image: &ImageTensor,
        mode: Mode,
        stages: usize,
    ) -> Result<BlockFeatures> {
        let net = self.net()?;
        let strides = ResNet::stage_strides(mode);
        let mut x = net.stem_forward(image.pixels().view())?;
        let mut levels = Vec::with_capacity(stages);
        for s in 0..stages.min(4) {
            x = net.stage_forward(s, x, mode)?;
            levels.push(FeatureMap::new(x.clone(), strides[s]));
        }
        Ok(BlockFeatures { levels, mode })
    }

    /// Local teacher map of an image: B2‖B3 under `mode`.
    pub fn local_features(&self, image: &ImageTensor, mode: Mode) -> Result<LocalFeatureMap> {
        self.extract_stages(image, mode, 3)?.concat_local()
    }
}

/// Builds the pyramid for a set of blocks.
pub fn build_fpn(fpn: &Fpn, blocks: &BlockFeatures) -> Result<FeaturePyramid> {
    fpn.forward(blocks)
}
