//! The full network: residual trunk, feature pyramid and reduction head, plus
//! single-file checkpoints of all three.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Fpn, ResNet, ResNetSpec};
use crate::checkpoint::ParamArchive;
use crate::descriptor::ReductionHead;
use crate::error::{Error, Result};
use crate::nn::Parameters;

/// Architecture hyperparameters stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub resnet: ResNetSpec,
    pub fpn_width: usize,
    pub d2: usize,
    pub d3: usize,
}

impl ModelShape {
    pub const DEFAULT: ModelShape = ModelShape {
        resnet: ResNetSpec::RESNET101,
        fpn_width: crate::backbone::FPN_WIDTH,
        d2: 256,
        d3: 256,
    };

    fn to_metadata(self, meta: &mut BTreeMap<String, String>) {
        let l = self.resnet.layers;
        meta.insert(
            "resnet_layers".into(),
            format!("{},{},{},{}", l[0], l[1], l[2], l[3]),
        );
        meta.insert(
            "resnet_base_width".into(),
            self.resnet.base_width.to_string(),
        );
        meta.insert("fpn_width".into(), self.fpn_width.to_string());
        meta.insert("head_d2".into(), self.d2.to_string());
        meta.insert("head_d3".into(), self.d3.to_string());
    }

    fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            let raw = meta
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {key}")))?;
            raw.parse()
                .map_err(|_| Error::Checkpoint(format!("metadata {key}={raw:?} is not a count")))
        };
        let layers_raw = meta
            .get("resnet_layers")
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata lacks resnet_layers".into()))?;
        let layers: Vec<usize> = layers_raw
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad resnet_layers {layers_raw:?}")))?;
        let layers: [usize; 4] = layers.try_into().map_err(|_| {
            Error::Checkpoint(format!(
                "resnet_layers needs four entries, got {layers_raw:?}"
            ))
        })?;
        Ok(ModelShape {
            resnet: ResNetSpec {
                layers,
                base_width: get("resnet_base_width")?,
            },
            fpn_width: get("fpn_width")?,
            d2: get("head_d2")?,
            d3: get("head_d3")?,
        })
    }
}

/// Trunk, pyramid and head trained jointly.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub head: ReductionHead,
}

impl Model {
    /// Random pyramid and head on top of an existing trunk.
    pub fn with_backbone(
        backbone: Backbone,
        fpn_width: usize,
        d2: usize,
        d3: usize,
        drop_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        let channels = backbone.stage_channels()?;
        let fpn = Fpn::seeded(channels, fpn_width, seed.wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let head = ReductionHead::seeded(channels[1], d2, channels[2], d3, drop_prob, &mut rng)?;
        Ok(Model {
            backbone,
            fpn,
            head,
        })
    }

    pub fn seeded(shape: ModelShape, drop_prob: f64, seed: u64) -> Result<Self> {
        Self::with_backbone(
            Backbone::seeded(shape.resnet, seed),
            shape.fpn_width,
            shape.d2,
            shape.d3,
            drop_prob,
            seed,
        )
    }

    pub fn shape(&self) -> Result<ModelShape> {
        Ok(ModelShape {
            resnet: self.backbone.net()?.spec,
            fpn_width: self.fpn.width(),
            d2: self.head.b2.nrows(),
            d3: self.head.b3.nrows(),
        })
    }

    pub fn archive(&self) -> Result<ParamArchive> {
        let mut archive = ParamArchive::from_modules(&[self]);
        self.shape()?.to_metadata(&mut archive.metadata);
        archive
            .metadata
            .insert("drop_prob".into(), self.head.drop_prob.to_string());
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.archive()?.save(path)
    }

    pub fn from_archive(archive: &ParamArchive) -> Result<Self> {
        let shape = ModelShape::from_metadata(&archive.metadata)?;
        let drop_prob = match archive.metadata.get("drop_prob") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad drop_prob {v:?}")))?,
            None => 0.0,
        };
        let mut model = Model::with_backbone(
            Backbone::from_resnet(ResNet::seeded(shape.resnet, 0)),
            shape.fpn_width,
            shape.d2,
            shape.d3,
            drop_prob,
            0,
        )?;
        archive.apply_to(&mut model, true)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&ParamArchive::load(path)?)
    }
}

impl Parameters for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<f32>)) {
        if let Ok(net) = self.backbone.net() {
            net.visit(f);
        }
        self.fpn.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f32>)) {
        if let Ok(net) = self.backbone.net_mut() {
            net.visit_mut(f);
        }
        self.fpn.visit_mut(f);
        self.head.visit_mut(f);
    }
}
