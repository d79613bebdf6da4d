//! Run configuration: one TOML file holding every tunable of detection,
//! extraction and training.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptor::ExtractionMode;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::global_desc::GEM_P;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub mode: ExtractionMode,
    /// GeM exponent of the global descriptor.
    pub gem_p: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            mode: ExtractionMode::Ts,
            gem_p: GEM_P,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gem_p >= 1.0 && self.gem_p.is_finite()) {
            return Err(Error::Config(format!(
                "extract.gem_p must be a finite value >= 1, got {}",
                self.gem_p
            )));
        }
        Ok(())
    }
}

/// Sections `[detector]`, `[extract]`, `[train]` and `[train.loss]`; missing
/// keys take their defaults, unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub extract: ExtractConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// `path` if given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.extract.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::FreezePolicy;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_written_as_named_keys() {
        let text = RunConfig::default().to_toml();
        for key in [
            "groups = 6",
            "rel_threshold = 0.2",
            "nms_radius = 1",
            "edge_ratio = 10.0",
            "max_keypoints = 5000",
            "mode = \"ts\"",
            "gem_p = 3.0",
            "drop_prob = 0.3",
            "d2 = 256",
            "d3 = 256",
            "margin = 0.5",
            "tau = 0.85",
            "lambda = 0.1",
            "base_lr = 0.001",
            "epochs = 100",
            "batch_tuples = 5",
            "freeze_policy = \"freeze_b2b3\"",
            "seed = 0",
        ] {
            assert!(text.contains(key), "{key} missing from\n{text}");
        }
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let cfg = RunConfig::parse("[detector]\ngroups = 3\n[train.loss]\nlambda = 0.0\n").unwrap();
        assert_eq!(cfg.detector.groups, 3);
        assert_eq!(cfg.detector.max_keypoints, 5000);
        assert_eq!(cfg.train.loss.lambda, 0.0);
        assert_eq!(cfg.train.loss.tau, 0.85);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "colour = 1\n",
            "[detector]\ngroup = 6\n",
            "[train.loss]\nmu = 1.0\n",
            "[extract]\nmode = \"st\"\n",
        ] {
            assert!(
                matches!(RunConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for text in [
            "[detector]\nrel_threshold = 1.5\n",
            "[detector]\ngroups = 0\n",
            "[detector]\nedge_ratio = 1.0\n",
            "[extract]\ngem_p = 0.5\n",
            "[train]\ndrop_prob = 1.0\n",
            "[train]\nbase_lr = -1.0\n",
            "[train.loss]\ntau = 0.0\n",
            "[train.loss]\nwindow = 4\n",
            "[train]\nmax_steps = 0\n",
        ] {
            assert!(
                matches!(RunConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            (
                1usize..12,
                0.01f64..0.99,
                1usize..4,
                1.01f64..50.0,
                1usize..10_000,
            ),
            (0u8..3, 1.0f64..64.0),
            (
                1e-6f64..1.0,
                1usize..200,
                0.0f64..0.95,
                0u8..3,
                0..=i64::MAX as u64,
            ),
            (
                proptest::option::of(1usize..1000),
                1usize..1024,
                1usize..1024,
            ),
            (0.01f64..2.0, 0.01f64..2.0, 0.0f64..1.0),
        )
            .prop_map(|(d, e, t, o, l)| {
                let mut cfg = RunConfig::default();
                cfg.detector = DetectorConfig {
                    groups: d.0,
                    rel_threshold: d.1,
                    nms_radius: d.2,
                    edge_ratio: d.3,
                    max_keypoints: d.4,
                };
                cfg.extract.mode = [
                    ExtractionMode::Teacher,
                    ExtractionMode::Ts,
                    ExtractionMode::Ss,
                ][e.0 as usize];
                cfg.extract.gem_p = e.1;
                cfg.train.base_lr = t.0;
                cfg.train.epochs = t.1;
                cfg.train.drop_prob = t.2;
                cfg.train.freeze_policy = [
                    FreezePolicy::FreezeB2B3,
                    FreezePolicy::GradientCut,
                    FreezePolicy::None,
                ][t.3 as usize];
                cfg.train.seed = t.4;
                cfg.train.max_steps = o.0;
                cfg.train.d2 = o.1;
                cfg.train.d3 = o.2;
                cfg.train.loss.margin = l.0;
                cfg.train.loss.tau = l.1;
                cfg.train.loss.lambda = l.2;
                cfg
            })
    }

    proptest! {
        #[test]
        fn serialization_is_a_fixed_point(cfg in arb_config()) {
            let once = cfg.to_toml();
            let parsed = RunConfig::parse(&once).unwrap();
            prop_assert_eq!(&parsed, &cfg);
            prop_assert_eq!(parsed.to_toml(), once);
        }
    }
}
