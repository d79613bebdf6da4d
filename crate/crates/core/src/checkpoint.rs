//! Parameter archives (safetensors files with a `format_version` metadata field).
//!
//! Backbone weights may come either in torchvision layout (separate `bnN.*`
//! tensors, folded here) or in the folded layout this crate writes itself.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::backbone::{ResNet, ResNetSpec};
use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const FORMAT_VERSION: &str = "1";
const BN_EPS: f32 = 1e-5;

/// Named tensors plus string metadata read from an archive.
#[derive(Debug, Default, Clone)]
pub struct ParamArchive {
    pub tensors: HashMap<String, ArrayD<f32>>,
    pub metadata: BTreeMap<String, String>,
}

impl ParamArchive {
    pub fn from_modules(modules: &[&dyn Parameters]) -> Self {
        let mut tensors = HashMap::new();
        for m in modules {
            m.visit(&mut |name, v| {
                tensors.insert(name.to_string(), v.to_owned());
            });
        }
        ParamArchive {
            tensors,
            metadata: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = names
            .into_iter()
            .map(|n| {
                let t = &self.tensors[n];
                let bytes = t.iter().flat_map(|v| v.to_le_bytes()).collect();
                (n.clone(), t.shape().to_vec(), bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        meta.insert("format_version".into(), FORMAT_VERSION.into());
        let data = safetensors::serialize(views, &Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!(
                    "{name}: only f32 tensors are supported, got {:?}",
                    view.dtype()
                )));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.insert(name, arr);
        }
        Ok(ParamArchive { tensors, metadata })
    }

    pub fn version(&self) -> Option<&str> {
        self.metadata.get("format_version").map(String::as_str)
    }

    /// Copies every tensor whose name `target` knows; returns how many were applied.
    ///
    /// With `strict`, every parameter of `target` must be present.
    pub fn apply_to(&self, target: &mut dyn Parameters, strict: bool) -> Result<usize> {
        let mut applied = 0;
        let mut failure = None;
        target.visit_mut(&mut |name, mut dst| {
            if failure.is_some() {
                return;
            }
            match self.tensors.get(name) {
                Some(src) if src.shape() == dst.shape() => {
                    dst.assign(src);
                    applied += 1;
                }
                Some(src) => {
                    failure = Some(format!(
                        "{name}: shape {:?} does not match {:?}",
                        src.shape(),
                        dst.shape()
                    ));
                }
                None if strict => failure = Some(format!("missing tensor {name}")),
                None => {}
            }
        });
        match failure {
            Some(msg) => Err(Error::Checkpoint(msg)),
            None => Ok(applied),
        }
    }
}

/// Folds torchvision-style batch-norm tensors into the preceding convolutions.
fn fold_torchvision(archive: &ParamArchive) -> Result<ParamArchive> {
    let t = &archive.tensors;
    let get = |name: &str| {
        t.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let mut folded = HashMap::new();
    let mut fold = |conv: &str, bn: &str, out: &str| -> Result<()> {
        let w = get(&format!("{conv}.weight"))?;
        let gamma = get(&format!("{bn}.weight"))?;
        let beta = get(&format!("{bn}.bias"))?;
        let mean = get(&format!("{bn}.running_mean"))?;
        let var = get(&format!("{bn}.running_var"))?;
        let scale: Vec<f32> = gamma
            .iter()
            .zip(var.iter())
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let mut wf = w.clone();
        for (o, mut slice) in wf.outer_iter_mut().enumerate() {
            slice.mapv_inplace(|v| v * scale[o]);
        }
        let bias: Vec<f32> = (0..scale.len())
            .map(|o| beta[[o]] - mean[[o]] * scale[o])
            .collect();
        folded.insert(format!("{out}.weight"), wf);
        folded.insert(
            format!("{out}.bias"),
            ArrayD::from_shape_vec(IxDyn(&[bias.len()]), bias).expect("1-d"),
        );
        Ok(())
    };
    fold("conv1", "bn1", "conv1")?;
    let mut s = 1;
    while t.contains_key(&format!("layer{s}.0.conv1.weight")) {
        let mut b = 0;
        while t.contains_key(&format!("layer{s}.{b}.conv1.weight")) {
            let p = format!("layer{s}.{b}");
            for n in 1..=3 {
                fold(
                    &format!("{p}.conv{n}"),
                    &format!("{p}.bn{n}"),
                    &format!("{p}.conv{n}"),
                )?;
            }
            if t.contains_key(&format!("{p}.downsample.0.weight")) {
                fold(
                    &format!("{p}.downsample.0"),
                    &format!("{p}.downsample.1"),
                    &format!("{p}.downsample"),
                )?;
            }
            b += 1;
        }
        s += 1;
    }
    Ok(ParamArchive {
        tensors: folded,
        metadata: archive.metadata.clone(),
    })
}

/// Loads a ResNet of the given layout from a checkpoint file.
pub fn load_resnet(path: &Path, spec: ResNetSpec) -> Result<ResNet> {
    let archive = ParamArchive::load(path)?;
    let archive = if archive.tensors.contains_key("bn1.running_mean") {
        fold_torchvision(&archive)?
    } else {
        archive
    };
    let mut net = ResNet::seeded(spec, 0);
    archive.apply_to(&mut net, true)?;
    Ok(net)
}
