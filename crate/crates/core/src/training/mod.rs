//! Tuple sampling, the optimizer and the training loop for the joint objective.
//!
//! Supervision is image pairs only: a manifest names an anchor and a positive of
//! the same scene; negatives are drawn from other scenes at run time.

mod step;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use ndarray::{Array2, ArrayD, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ImageTensor, ResNet};
use crate::checkpoint::ParamArchive;
use crate::descriptor::ChannelMask;
use crate::error::{Error, Result};
use crate::losses::{
    distillation_backward, distillation_grad_low, distillation_loss, distillation_loss_from_target,
    distillation_target, matching_loss_rows, matching_margin_loss, tuple_contrastive_backward,
    tuple_contrastive_loss, LossBreakdown, LossConfig,
};
use crate::matching::affinity;
use crate::model::Model;
use crate::nn::{ParamGrads, Parameters};

use step::{
    add_into, affinity_backward, backward_image, live_side, pair_score, student_rows, teacher_side,
    ImageGrads, LiveSide, Rows, TeacherSide,
};

// ---------------------------------------------------------------------------
// manifest and tuples

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    scene: String,
    anchor: String,
    positive: String,
}

/// One labelled same-scene image pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub scene: String,
    pub anchor: PathBuf,
    pub positive: PathBuf,
}

/// Line-delimited JSON records `{scene, anchor, positive}`; paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairManifest {
    pub records: Vec<PairRecord>,
}

impl PairManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, path)
    }

    pub fn parse(text: &str, base: &Path, source: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Manifest {
            path: source.to_path_buf(),
            line,
            message,
        };
        let mut records = vec![];
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord =
                serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
            if raw.scene.is_empty() || raw.anchor.is_empty() || raw.positive.is_empty() {
                return Err(bad(
                    i + 1,
                    "scene, anchor and positive must be non-empty".into(),
                ));
            }
            if raw.anchor == raw.positive {
                return Err(bad(i + 1, "anchor and positive are the same image".into()));
            }
            records.push(PairRecord {
                scene: raw.scene,
                anchor: base.join(raw.anchor),
                positive: base.join(raw.positive),
            });
        }
        if records.is_empty() {
            return Err(bad(0, "manifest has no records".into()));
        }
        Ok(PairManifest { records })
    }

    pub fn scenes(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.scene.as_str()).collect()
    }

    /// Distinct images with their scene, in first-appearance order.
    fn images(&self) -> Vec<(&str, &PathBuf)> {
        let mut seen = BTreeSet::new();
        let mut out = vec![];
        for r in &self.records {
            for p in [&r.anchor, &r.positive] {
                if seen.insert(p) {
                    out.push((r.scene.as_str(), p));
                }
            }
        }
        out
    }
}

/// Anchor, positive and cross-scene negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrainingTuple {
    pub scene: String,
    pub anchor: PathBuf,
    pub positive: PathBuf,
    pub negatives: Vec<PathBuf>,
}

impl TrainingTuple {
    /// Images in tuple order `(a, p, n_1..n_K)`.
    pub fn images(&self) -> impl Iterator<Item = &PathBuf> {
        [&self.anchor, &self.positive]
            .into_iter()
            .chain(self.negatives.iter())
    }
}

/// `epoch_size` tuples cycling through the pairs in shuffled order; negatives are
/// drawn uniformly from the images of other scenes (without replacement when
/// enough exist).
pub fn sample_tuples(
    manifest: &PairManifest,
    epoch_size: usize,
    negatives: usize,
    seed: u64,
) -> Result<Vec<TrainingTuple>> {
    if manifest.scenes().len() < 2 {
        return Err(Error::arg("tuple sampling needs at least two scenes"));
    }
    if negatives == 0 {
        return Err(Error::arg("tuples need at least one negative"));
    }
    let images = manifest.images();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    let mut cursor = order.len();
    let mut out = Vec::with_capacity(epoch_size);
    while out.len() < epoch_size {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let r = &manifest.records[order[cursor]];
        cursor += 1;
        let pool: Vec<&PathBuf> = images
            .iter()
            .filter(|(s, _)| *s != r.scene)
            .map(|(_, p)| *p)
            .collect();
        let picks: Vec<usize> = if pool.len() >= negatives {
            rand::seq::index::sample(&mut rng, pool.len(), negatives).into_vec()
        } else {
            (0..negatives)
                .map(|_| rng.random_range(0..pool.len()))
                .collect()
        };
        out.push(TrainingTuple {
            scene: r.scene.clone(),
            anchor: r.anchor.clone(),
            positive: r.positive.clone(),
            negatives: picks.into_iter().map(|i| pool[i].clone()).collect(),
        });
    }
    Ok(out)
}

/// `α·exp(−0.1·i)`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize) -> f64 {
    base_lr * (-0.1 * epoch as f64).exp()
}

/// Loads an image and resizes it to `resolution×resolution`.
pub fn load_training_image(path: &Path, resolution: u32) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?
        .to_rgb8();
    let img = if img.dimensions() == (resolution, resolution) {
        img
    } else {
        image::imageops::resize(&img, resolution, resolution, FilterType::Triangle)
    };
    ImageTensor::from_rgb8(&img)
}

// ---------------------------------------------------------------------------
// configuration

/// Which parameters the optimizer may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// The trunk through the third stage is frozen.
    #[default]
    #[serde(rename = "freeze_b2b3")]
    FreezeB2B3,
    /// Everything trains, but the distillation loss sends no gradient into the teacher maps.
    GradientCut,
    None,
}

impl FreezePolicy {
    pub fn is_trainable(self, name: &str) -> bool {
        match self {
            FreezePolicy::FreezeB2B3 => !ResNet::is_param_through_stage(name, 3),
            _ => true,
        }
    }

    pub fn teacher_trainable(self) -> bool {
        self != FreezePolicy::FreezeB2B3
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FreezePolicy::FreezeB2B3 => "freeze_b2b3",
            FreezePolicy::GradientCut => "gradient_cut",
            FreezePolicy::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    /// Tuples per epoch.
    pub epoch_size: usize,
    pub batch_tuples: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    pub drop_prob: f64,
    pub freeze_policy: FreezePolicy,
    pub seed: u64,
    /// Side of the square training images.
    pub resolution: u32,
    pub d2: usize,
    pub d3: usize,
    /// Keep only this many locations (largest L2 norm) per map.
    pub location_cap: Option<usize>,
    /// Images whose frozen intermediates are kept between steps.
    pub cache_images: usize,
    /// Epoch checkpoints kept on disk (0 keeps all).
    pub keep_checkpoints: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            epochs: 100,
            epoch_size: 6000,
            batch_tuples: 5,
            max_steps: None,
            drop_prob: 0.3,
            freeze_policy: FreezePolicy::FreezeB2B3,
            seed: 0,
            resolution: 256,
            d2: 256,
            d3: 256,
            location_cap: None,
            cache_images: 64,
            keep_checkpoints: 3,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("epoch_size", self.epoch_size),
            ("batch_tuples", self.batch_tuples),
            ("d2", self.d2),
            ("d3", self.d3),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return bad(format!(
                "drop_prob must lie in [0, 1), got {}",
                self.drop_prob
            ));
        }
        if self.resolution < crate::backbone::MIN_IMAGE_SIDE as u32 {
            return bad(format!(
                "resolution must be at least {}",
                crate::backbone::MIN_IMAGE_SIDE
            ));
        }
        if self.location_cap == Some(0) {
            return bad("location_cap must be at least 1".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1".into());
        }
        // config files store integers as signed 64-bit
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be at most {}", i64::MAX));
        }
        self.loss.validate()
    }
}

// ---------------------------------------------------------------------------
// optimizer

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, ArrayD<f32>>,
    v: BTreeMap<String, ArrayD<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update of every parameter accepted by `trainable`; a missing gradient counts as zero.
    pub fn update(
        &mut self,
        params: &mut dyn Parameters,
        grads: &ParamGrads,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |name, mut p| {
            if !trainable(name) {
                return;
            }
            let m = ms
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.shape()));
            let v = vs
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.shape()));
            match grads.get(name) {
                Some(g) => {
                    Zip::from(&mut p)
                        .and(&mut *m)
                        .and(&mut *v)
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            *p -= step * *m / (v.sqrt() + eps);
                        })
                }
                None => Zip::from(&mut p)
                    .and(&mut *m)
                    .and(&mut *v)
                    .for_each(|p, m, v| {
                        *m *= b1;
                        *v *= b2;
                        *p -= step * *m / (v.sqrt() + eps);
                    }),
            }
        });
    }

    fn store(&self, archive: &mut ParamArchive) {
        for (n, m) in &self.m {
            archive.tensors.insert(format!("adam.m.{n}"), m.clone());
        }
        for (n, v) in &self.v {
            archive.tensors.insert(format!("adam.v.{n}"), v.clone());
        }
        archive.metadata.insert("adam_t".into(), self.t.to_string());
    }

    fn restore(archive: &ParamArchive) -> Result<Self> {
        let mut adam = Adam::default();
        if let Some(t) = archive.metadata.get("adam_t") {
            adam.t = t
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad adam_t {t:?}")))?;
        }
        for (name, t) in &archive.tensors {
            if let Some(n) = name.strip_prefix("adam.m.") {
                adam.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                adam.v.insert(n.to_string(), t.clone());
            }
        }
        Ok(adam)
    }
}

// ---------------------------------------------------------------------------
// training loop

/// One line of `loss_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_M_B2")]
    pub lm_b2: f64,
    #[serde(rename = "L_M_B3")]
    pub lm_b3: f64,
    #[serde(rename = "L_M_student")]
    pub lm_student: f64,
    #[serde(rename = "L_C")]
    pub lc: f64,
    #[serde(rename = "L_Dis")]
    pub ldis: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(step: usize, epoch: usize, lr: f64, b: &LossBreakdown) -> Self {
        LossRecord {
            step,
            epoch,
            lr,
            lm_b2: b.lm_b2,
            lm_b3: b.lm_b3,
            lm_student: b.lm_student,
            lc: b.lc,
            ldis: b.ldis,
            total: b.total,
        }
    }
}

/// Position in the schedule, stored in checkpoints so a run can resume.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Progress {
    /// Optimizer steps taken.
    pub step: usize,
    /// Epochs completed.
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

struct ImageState {
    image: Option<ImageTensor>,
    ts: Arc<TeacherSide>,
    live: LiveSide,
}

/// Owns the model and optimizer state of a run.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: Adam,
    progress: Progress,
    paths: Vec<PathBuf>,
    ids: HashMap<PathBuf, usize>,
    teacher_cache: HashMap<usize, Arc<TeacherSide>>,
    cache_order: VecDeque<usize>,
    score_cache: HashMap<(u8, usize, usize), f64>,
    target_cache: HashMap<(usize, usize), Arc<Array2<f32>>>,
}

impl Trainer {
    pub fn new(mut model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.backbone.net()?;
        if (model.head.b2.nrows(), model.head.b3.nrows()) != (cfg.d2, cfg.d3) {
            return Err(Error::Config(format!(
                "model head produces {}+{} dims, config asks for {}+{}",
                model.head.b2.nrows(),
                model.head.b3.nrows(),
                cfg.d2,
                cfg.d3
            )));
        }
        model.head.drop_prob = cfg.drop_prob;
        Ok(Trainer {
            model,
            cfg,
            adam: Adam::default(),
            progress: Progress::default(),
            paths: vec![],
            ids: HashMap::new(),
            teacher_cache: HashMap::new(),
            cache_order: VecDeque::new(),
            score_cache: HashMap::new(),
            target_cache: HashMap::new(),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(checkpoint: &Path, cfg: TrainConfig) -> Result<Self> {
        let archive = ParamArchive::load(checkpoint)?;
        let model = Model::from_archive(&archive)?;
        let mut trainer = Trainer::new(model, cfg)?;
        trainer.adam = Adam::restore(&archive)?;
        let get = |key: &str| -> Result<usize> {
            archive
                .metadata
                .get(key)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("checkpoint lacks {key}; not a training checkpoint"))
                })?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad {key} in checkpoint")))
        };
        trainer.progress = Progress {
            step: get("step")?,
            epoch: get("epoch")?,
            batch_in_epoch: get("batch_in_epoch")?,
        };
        Ok(trainer)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut archive = self.model.archive()?;
        self.adam.store(&mut archive);
        let p = self.progress;
        archive.metadata.insert("step".into(), p.step.to_string());
        archive.metadata.insert("epoch".into(), p.epoch.to_string());
        archive
            .metadata
            .insert("batch_in_epoch".into(), p.batch_in_epoch.to_string());
        archive.metadata.insert(
            "freeze_policy".into(),
            self.cfg.freeze_policy.as_str().into(),
        );
        archive.save(path)
    }

    fn intern(&mut self, path: &Path) -> usize {
        if let Some(&id) = self.ids.get(path) {
            return id;
        }
        let id = self.paths.len();
        self.paths.push(path.to_path_buf());
        self.ids.insert(path.to_path_buf(), id);
        id
    }

    fn frozen(&self) -> bool {
        !self.cfg.freeze_policy.teacher_trainable()
    }

    fn teacher_for(&mut self, id: usize, image: &ImageTensor) -> Result<Arc<TeacherSide>> {
        let keep_map = self.cfg.freeze_policy == FreezePolicy::None;
        let ts = Arc::new(teacher_side(
            self.model.backbone.net()?,
            image,
            self.cfg.location_cap,
            self.cfg.loss.window,
            keep_map,
        )?);
        if self.frozen() && self.cfg.cache_images > 0 {
            if self.cache_order.len() >= self.cfg.cache_images {
                if let Some(old) = self.cache_order.pop_front() {
                    self.teacher_cache.remove(&old);
                    self.score_cache.retain(|k, _| k.1 != old && k.2 != old);
                    self.target_cache.retain(|k, _| k.0 != old && k.1 != old);
                }
            }
            self.teacher_cache.insert(id, ts.clone());
            self.cache_order.push_back(id);
        }
        Ok(ts)
    }

    fn forward_image(&mut self, id: usize, rng: &mut ChaCha8Rng) -> Result<ImageState> {
        let cached = self.teacher_cache.get(&id).cloned();
        let (image, ts) = match cached {
            Some(ts) => (None, ts),
            None => {
                let image = load_training_image(&self.paths[id], self.cfg.resolution)?;
                let ts = self.teacher_for(id, &image)?;
                (Some(image), ts)
            }
        };
        let live = live_side(&self.model, &ts, rng)?;
        let image = if self.frozen() { None } else { image };
        Ok(ImageState { image, ts, live })
    }

    fn cached_score(&mut self, kind: u8, ids: (usize, usize), a: &Rows, b: &Rows) -> Result<f64> {
        let key = (kind, ids.0.min(ids.1), ids.0.max(ids.1));
        if let Some(&s) = self.score_cache.get(&key) {
            return Ok(s);
        }
        let s = pair_score(a, b)?;
        if self.frozen()
            && self.teacher_cache.contains_key(&ids.0)
            && self.teacher_cache.contains_key(&ids.1)
        {
            self.score_cache.insert(key, s);
        }
        Ok(s)
    }

    /// Margin loss on a teacher block; gradients only when the teacher trains.
    fn teacher_margin(
        &mut self,
        kind: u8,
        ids: &[usize],
        pos: &[usize],
        states: &[ImageState],
        grads: &mut [ImageGrads],
        scale: f32,
    ) -> Result<f64> {
        let rows = |k: usize| {
            if kind == 0 {
                &states[k].ts.b2
            } else {
                &states[k].ts.b3
            }
        };
        let margin = self.cfg.loss.margin;
        if self.frozen() {
            let s_ap = self.cached_score(kind, (ids[0], ids[1]), rows(pos[0]), rows(pos[1]))?;
            let s_an = (2..ids.len())
                .map(|j| self.cached_score(kind, (ids[0], ids[j]), rows(pos[0]), rows(pos[j])))
                .collect::<Result<Vec<f64>>>()?;
            return matching_margin_loss(s_ap, &s_an, margin);
        }
        let units: Vec<ArrayView2<f32>> = pos.iter().map(|&k| rows(k).unit.view()).collect();
        let r = matching_loss_rows(units[0], units[1], &units[2..], margin, true)?;
        for (&k, g) in pos.iter().zip(r.grads.expect("requested")) {
            let slot = if kind == 0 {
                &mut grads[k].b2
            } else {
                &mut grads[k].b3
            };
            add_into(slot, g * scale);
        }
        Ok(r.loss)
    }

    fn distill_target(
        &mut self,
        ids: (usize, usize),
        a: &TeacherSide,
        p: &TeacherSide,
    ) -> Result<Arc<Array2<f32>>> {
        if let Some(t) = self.target_cache.get(&ids) {
            return Ok(t.clone());
        }
        let m_high = affinity(a.teacher.unit.view(), p.teacher.unit.view())?;
        let t = Arc::new(distillation_target(
            m_high.view(),
            a.det.values.view(),
            p.det.values.view(),
        ));
        if self.frozen()
            && self.teacher_cache.contains_key(&ids.0)
            && self.teacher_cache.contains_key(&ids.1)
        {
            self.target_cache.insert(ids, t.clone());
        }
        Ok(t)
    }

    fn tuple_loss(
        &mut self,
        ids: &[usize],
        pos: &[usize],
        states: &[ImageState],
        grads: &mut [ImageGrads],
        scale: f32,
    ) -> Result<LossBreakdown> {
        let cfg = self.cfg.loss;
        let lm_b2 = self.teacher_margin(0, ids, pos, states, grads, scale)?;
        let lm_b3 = self.teacher_margin(1, ids, pos, states, grads, scale)?;

        let units: Vec<ArrayView2<f32>> = pos
            .iter()
            .map(|&k| states[k].live.student.unit.view())
            .collect();
        let r = matching_loss_rows(units[0], units[1], &units[2..], cfg.margin, true)?;
        for (&k, g) in pos.iter().zip(r.grads.expect("requested")) {
            add_into(&mut grads[k].student, g * scale);
        }

        let globals: Vec<_> = pos
            .iter()
            .map(|&k| states[k].live.global.descriptor().clone())
            .collect();
        let lc = tuple_contrastive_loss(&globals, cfg.tau)?;
        for (&k, g) in pos
            .iter()
            .zip(tuple_contrastive_backward(&globals, cfg.tau))
        {
            add_into(&mut grads[k].global, g * scale);
        }

        let (a, p) = (pos[0], pos[1]);
        let (sa, sp) = (&states[a].live.student.unit, &states[p].live.student.unit);
        let m_low = affinity(sa.view(), sp.view())?;
        let lam = cfg.lambda as f32 * scale;
        let (ldis, g_low) = if self.cfg.freeze_policy == FreezePolicy::None {
            let (ta, tp) = (&states[a].ts.teacher.unit, &states[p].ts.teacher.unit);
            let (da, dp) = (&states[a].ts.det.values, &states[p].ts.det.values);
            let m_high = affinity(ta.view(), tp.view())?;
            let ldis = distillation_loss(m_high.view(), da.view(), dp.view(), m_low.view())?;
            let dg = distillation_backward(m_high.view(), da.view(), dp.view(), m_low.view())?;
            let (gta, gtp) = affinity_backward((dg.m_high * lam).view(), ta.view(), tp.view());
            add_into(&mut grads[a].teacher, gta);
            add_into(&mut grads[p].teacher, gtp);
            add_into(&mut grads[a].det, dg.det_a * lam);
            add_into(&mut grads[p].det, dg.det_p * lam);
            (ldis, dg.m_low * lam)
        } else {
            let target = self.distill_target((ids[0], ids[1]), &states[a].ts, &states[p].ts)?;
            if target.dim() != m_low.dim() {
                return Err(Error::dim("teacher and student grids differ"));
            }
            let ldis = distillation_loss_from_target(target.view(), m_low.view());
            (
                ldis,
                distillation_grad_low(target.view(), m_low.view()) * lam,
            )
        };
        let (gsa, gsp) = affinity_backward(g_low.view(), sa.view(), sp.view());
        add_into(&mut grads[a].student, gsa);
        add_into(&mut grads[p].student, gsp);

        Ok(LossBreakdown::combine(
            lm_b2, lm_b3, r.loss, lc, ldis, cfg.lambda,
        ))
    }

    /// Mean loss of a batch and its parameter gradients.
    pub(crate) fn loss_and_grads(
        &mut self,
        tuples: &[TrainingTuple],
    ) -> Result<(LossBreakdown, ParamGrads)> {
        if tuples.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let tuple_ids: Vec<Vec<usize>> = tuples
            .iter()
            .map(|t| t.images().map(|p| self.intern(p)).collect())
            .collect();
        let mut order = vec![];
        let mut slot = HashMap::new();
        for &id in tuple_ids.iter().flatten() {
            slot.entry(id).or_insert_with(|| {
                order.push(id);
                order.len() - 1
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_d409);
        rng.set_stream(self.progress.step as u64);
        let states = order
            .iter()
            .map(|&id| self.forward_image(id, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let scale = 1.0 / tuples.len() as f32;
        let mut grads: Vec<ImageGrads> = order.iter().map(|_| ImageGrads::default()).collect();
        let mut total = LossBreakdown::default();
        for ids in &tuple_ids {
            let pos: Vec<usize> = ids.iter().map(|id| slot[id]).collect();
            total.add(&self.tuple_loss(ids, &pos, &states, &mut grads, scale)?);
        }
        let mean = total.scaled(1.0 / tuples.len() as f64);

        let tt = self.cfg.freeze_policy.teacher_trainable();
        let mut pg = ParamGrads::new();
        if mean.is_finite() {
            for (st, g) in states.iter().zip(grads) {
                backward_image(
                    &self.model,
                    st.image.as_ref(),
                    &st.ts,
                    &st.live,
                    g,
                    self.cfg.loss.window,
                    tt,
                    &mut pg,
                )?;
            }
        }
        Ok((mean, pg))
    }

    /// Forward, backward and one optimizer update on a batch of tuples.
    ///
    /// A non-finite loss or gradient aborts before any parameter changes.
    pub fn step_on(&mut self, tuples: &[TrainingTuple], lr: f64) -> Result<LossBreakdown> {
        let (mean, pg) = self.loss_and_grads(tuples)?;
        if !mean.is_finite() || !pg.norm().is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.progress.step,
                detail: format!("{mean:?}"),
            });
        }
        let policy = self.cfg.freeze_policy;
        self.adam
            .update(&mut self.model, &pg, lr, &|n| policy.is_trainable(n));
        self.progress.step += 1;
        Ok(mean)
    }

    fn dump_nonfinite(
        &self,
        out_dir: &Path,
        tuples: &[TrainingTuple],
        err: &Error,
    ) -> Result<PathBuf> {
        let path = out_dir.join(format!("nonfinite-step{:06}.json", self.progress.step));
        let body = serde_json::json!({
            "step": self.progress.step,
            "epoch": self.progress.epoch,
            "error": err.to_string(),
            "tuples": tuples,
        });
        fs::write(
            &path,
            serde_json::to_string_pretty(&body).expect("serializable"),
        )
        .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Runs the schedule from the current progress, appending to `out_dir/loss_log.jsonl`
    /// and writing a checkpoint after every epoch (and when `max_steps` stops a run mid-epoch).
    pub fn run(&mut self, manifest: &PairManifest, out_dir: &Path) -> Result<TrainSummary> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("loss_log.jsonl");
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut records = vec![];
        let mut checkpoints: Vec<PathBuf> = vec![];
        let cfg = self.cfg.clone();
        let limit_hit = |p: &Progress| cfg.max_steps.is_some_and(|m| p.step >= m);
        'epochs: for epoch in self.progress.epoch..cfg.epochs {
            let tuples = sample_tuples(
                manifest,
                cfg.epoch_size,
                cfg.loss.negatives,
                epoch_seed(cfg.seed, epoch),
            )?;
            let lr = lr_at_epoch(cfg.base_lr, epoch);
            for (b, batch) in tuples
                .chunks(cfg.batch_tuples)
                .enumerate()
                .skip(self.progress.batch_in_epoch)
            {
                if limit_hit(&self.progress) {
                    break 'epochs;
                }
                let breakdown = match self.step_on(batch, lr) {
                    Err(e @ Error::NonFiniteLoss { .. }) => {
                        let dump = self.dump_nonfinite(out_dir, batch, &e)?;
                        log::error!("{e}; offending tuples written to {}", dump.display());
                        return Err(e);
                    }
                    other => other?,
                };
                self.progress.batch_in_epoch = b + 1;
                let rec = LossRecord::new(self.progress.step, epoch, lr, &breakdown);
                let line = serde_json::to_string(&rec).expect("serializable");
                writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                log::info!(
                    "step {} epoch {epoch} lr {lr:.3e} total {:.5}",
                    rec.step,
                    rec.total
                );
                records.push(rec);
            }
            self.progress.epoch = epoch + 1;
            self.progress.batch_in_epoch = 0;
            let path = out_dir.join(format!("epoch-{:03}.safetensors", epoch + 1));
            self.save_checkpoint(&path)?;
            checkpoints.push(path);
            if cfg.keep_checkpoints > 0 && checkpoints.len() > cfg.keep_checkpoints {
                let old = checkpoints.remove(0);
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        if self.progress.batch_in_epoch > 0 {
            let path = out_dir.join(format!("step-{:06}.safetensors", self.progress.step));
            self.save_checkpoint(&path)?;
            checkpoints.push(path);
        }
        Ok(TrainSummary {
            records,
            checkpoints,
        })
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Pair scores of a tuple: anchor–positive and anchor–each-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleScores {
    pub s_ap: f64,
    pub s_an: Vec<f64>,
}

/// Student-descriptor pair scores (no dropout) at the training resolution.
pub fn evaluate_tuples(
    model: &Model,
    tuples: &[TrainingTuple],
    resolution: u32,
) -> Result<Vec<TupleScores>> {
    let net = model.backbone.net()?;
    let (k2, k3) = model.head.input_dims();
    let mask = ChannelMask::keep_all(k2 + k3);
    let mut rows: HashMap<&PathBuf, Rows> = HashMap::new();
    for p in tuples.iter().flat_map(TrainingTuple::images) {
        if rows.contains_key(p) {
            continue;
        }
        let image = load_training_image(p, resolution)?;
        let ts = teacher_side(net, &image, None, 3, false)?;
        rows.insert(p, student_rows(&model.head, &ts, &mask)?);
    }
    tuples
        .iter()
        .map(|t| {
            let a = &rows[&t.anchor];
            Ok(TupleScores {
                s_ap: pair_score(a, &rows[&t.positive])?,
                s_an: t
                    .negatives
                    .iter()
                    .map(|n| pair_score(a, &rows[n]))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}
