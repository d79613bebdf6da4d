//! Test-time extraction: keypoints and local descriptors from the dilated B2‖B3
//! map, and a global descriptor from the undilated trunk.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::backbone::{build_fpn, Backbone, FeaturePyramid, ImageTensor, Mode, ResNet, ResNetSpec};
use crate::config::RunConfig;
use crate::descriptor::{reduce_dim, sample_descriptors, DescriptorSet, ExtractionMode, Source};
use crate::detector::{detect_gcdad, DetectorConfig, KeypointSet};
use crate::error::{Error, Result};
use crate::global_desc::{global_descriptor, GlobalDescriptor};
use crate::model::Model;

/// Environment variable naming the directory that holds backbone weights.
pub const CACHE_DIR_ENV: &str = "UNIFEAT_CACHE_DIR";

/// File name of the ImageNet backbone inside the cache directory.
pub const BACKBONE_FILE: &str = "resnet101.safetensors";

/// Seed of the fallback backbone used when no weights are available.
pub const FALLBACK_SEED: u64 = 0;

/// `$UNIFEAT_CACHE_DIR`, else `$XDG_CACHE_HOME/unifeat`, else `~/.cache/unifeat`.
pub fn cache_dir() -> Option<PathBuf> {
    if let Some(dir) = std::env::var_os(CACHE_DIR_ENV).filter(|v| !v.is_empty()) {
        return Some(PathBuf::from(dir));
    }
    if let Some(dir) = std::env::var_os("XDG_CACHE_HOME").filter(|v| !v.is_empty()) {
        return Some(PathBuf::from(dir).join("unifeat"));
    }
    std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache").join("unifeat"))
}

/// Loads `path`, or the cached ImageNet backbone, or falls back to a seeded one.
pub fn load_backbone(path: Option<&Path>) -> Result<Backbone> {
    if let Some(p) = path {
        return Backbone::load(p);
    }
    if let Some(p) = cache_dir().map(|d| d.join(BACKBONE_FILE)) {
        if p.is_file() {
            log::info!("backbone weights from {}", p.display());
            return Backbone::load(&p);
        }
    }
    log::warn!(
        "no backbone weights found (set {CACHE_DIR_ENV} or pass --backbone); \
         using a seeded random ResNet-101"
    );
    Ok(Backbone::from_resnet(ResNet::seeded(
        ResNetSpec::RESNET101,
        FALLBACK_SEED,
    )))
}

/// Local features of one image.
#[derive(Debug, Clone)]
pub struct LocalFeatures {
    pub keypoints: KeypointSet,
    pub descriptors: DescriptorSet,
    /// Stride of the map the keypoints were detected on.
    pub stride: f64,
    pub image_size: (usize, usize),
}

/// Turns images into keypoints, local descriptors and global descriptors.
#[derive(Debug, Clone)]
pub struct Extractor {
    backbone: Backbone,
    /// Pyramid and head; absent in pure teacher mode.
    model: Option<Model>,
    mode: ExtractionMode,
    detector: DetectorConfig,
    gem_p: f64,
}

impl Extractor {
    /// Teacher mode on a bare backbone: no trained parameters needed.
    pub fn teacher(backbone: Backbone, detector: DetectorConfig, gem_p: f64) -> Result<Self> {
        detector.validate()?;
        backbone.net()?;
        Ok(Extractor {
            backbone,
            model: None,
            mode: ExtractionMode::Teacher,
            detector,
            gem_p,
        })
    }

    pub fn from_model(
        model: Model,
        mode: ExtractionMode,
        detector: DetectorConfig,
        gem_p: f64,
    ) -> Result<Self> {
        detector.validate()?;
        let Model {
            backbone,
            fpn,
            head,
        } = model;
        backbone.net()?;
        Ok(Extractor {
            model: Some(Model {
                backbone: Backbone::uninitialized(),
                fpn,
                head,
            }),
            backbone,
            mode,
            detector,
            gem_p,
        })
    }

    /// Teacher mode needs no checkpoint; student modes load their head from `checkpoint`.
    pub fn from_config(
        cfg: &RunConfig,
        checkpoint: Option<&Path>,
        backbone: Option<&Path>,
    ) -> Result<Self> {
        let mode = cfg.extract.mode;
        match checkpoint {
            Some(ckpt) => Self::from_model(
                Model::load(ckpt)?,
                mode,
                cfg.detector.clone(),
                cfg.extract.gem_p,
            ),
            None if mode.needs_head() => Err(Error::arg(format!(
                "mode {} needs a trained model: pass --checkpoint (or use --mode teacher)",
                mode.as_str()
            ))),
            None => Self::teacher(
                load_backbone(backbone)?,
                cfg.detector.clone(),
                cfg.extract.gem_p,
            ),
        }
    }

    pub fn mode(&self) -> ExtractionMode {
        self.mode
    }

    pub fn detector(&self) -> &DetectorConfig {
        &self.detector
    }

    /// Descriptor length produced in the current mode.
    pub fn descriptor_dim(&self) -> Result<usize> {
        match (self.mode.descriptor_source(), &self.model) {
            (Source::Teacher, _) => {
                let c = self.backbone.stage_channels()?;
                Ok(c[1] + c[2])
            }
            (Source::Student, Some(m)) => Ok(m.head.output_dim()),
            (Source::Student, None) => Err(missing_head(self.mode)),
        }
    }

    /// A uniform image yields no keypoints: any response structure there comes
    /// from zero padding, not from the image.
    pub fn local(&self, image: &ImageTensor) -> Result<LocalFeatures> {
        let blocks = self.backbone.extract_stages(image, Mode::Test, 3)?;
        let teacher = blocks.concat_local()?;
        let student = if self.mode.needs_head() {
            let model = self.model.as_ref().ok_or_else(|| missing_head(self.mode))?;
            Some(reduce_dim::<rand_chacha::ChaCha8Rng>(&teacher, &model.head, None)?.0)
        } else {
            None
        };
        let pick = |s: Source| match s {
            Source::Teacher => &teacher.map,
            Source::Student => student.as_ref().expect("head present"),
        };
        let det_map = pick(self.mode.detector_source());
        let keypoints = if image.is_uniform() {
            KeypointSet::default()
        } else {
            detect_gcdad(det_map, &self.detector)?
        };
        let descriptors = sample_descriptors(pick(self.mode.descriptor_source()), &keypoints);
        Ok(LocalFeatures {
            keypoints,
            descriptors,
            stride: det_map.stride,
            image_size: (image.width(), image.height()),
        })
    }

    /// GeM over the trained pyramid, or over the raw trunk stages when there is none.
    pub fn global(&self, image: &ImageTensor) -> Result<GlobalDescriptor> {
        let blocks = self.backbone.extract_block_features(image, Mode::Train)?;
        let pyramid = match &self.model {
            Some(m) => build_fpn(&m.fpn, &blocks)?,
            None => FeaturePyramid {
                levels: blocks.levels,
            },
        };
        global_descriptor(&pyramid, self.gem_p)
    }
}

fn missing_head(mode: ExtractionMode) -> Error {
    Error::State(format!(
        "mode {} needs a trained reduction head (checkpoint)",
        mode.as_str()
    ))
}

/// Keypoints as `N×4` rows `(x, y, score, group_id)`.
pub fn keypoint_rows(kps: &KeypointSet) -> Array2<f32> {
    let mut rows = Array2::zeros((kps.len(), 4));
    for (i, k) in kps.iter().enumerate() {
        rows[[i, 0]] = k.x as f32;
        rows[[i, 1]] = k.y as f32;
        rows[[i, 2]] = k.score as f32;
        rows[[i, 3]] = k.group_id as f32;
    }
    rows
}
