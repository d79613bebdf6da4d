//! The `unifeat` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error, 3 I/O error.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::{ImageTensor, FPN_WIDTH};
use crate::config::RunConfig;
use crate::descriptor::{DescriptorSet, ExtractionMode};
use crate::detector::{Keypoint, KeypointSet};
use crate::error::{Error, Result};
use crate::formats::{index_file_name, load_index, FeatureFile, GlobalDescFile};
use crate::global_desc::mean_average_precision;
use crate::matching::{mma_curve, mutual_nn_matches, write_matches, Homography, MMA_THRESHOLDS};
use crate::model::Model;
use crate::pipeline::{load_backbone, Extractor};
use crate::synth::{write_pair_fixture, write_sequence_fixture};
use crate::training::{PairManifest, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        e if e.is_io() => EXIT_IO,
        Error::NonFiniteLoss { .. } => EXIT_RUNTIME,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "unifeat",
    version,
    about = "Keypoints, local descriptors and global descriptors from one CNN backbone",
    after_help = "Backbone weights are looked up in $UNIFEAT_CACHE_DIR/resnet101.safetensors \
                  unless --backbone is given."
)]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a feature file and a global-descriptor file per image.
    Extract(ExtractArgs),
    /// Mutual nearest-neighbour matching of two feature files.
    Match(MatchArgs),
    /// Train the pyramid and reduction head from an image-pair manifest.
    Train(TrainArgs),
    /// Matching accuracy over a directory of homography sequences.
    EvalHpatches(EvalHpatchesArgs),
    /// Mean average precision over an index of global descriptors.
    EvalRetrieval(EvalRetrievalArgs),
    /// Write synthetic training pairs or homography sequences.
    SynthFixture(SynthArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `extract.mode` of the configuration.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ExtractionMode>,
    /// Trained model checkpoint; required for the ts and ss modes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// ResNet-101 weights (torchvision names or folded) used when no checkpoint is given.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    /// Skip the global descriptor.
    #[arg(long)]
    no_global: bool,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct MatchArgs {
    features_a: PathBuf,
    features_b: PathBuf,
    /// Match list output (`xa ya xb yb similarity` per line).
    #[arg(long, short)]
    out: PathBuf,
    /// Ground-truth homography from A to B; appends the accuracy table.
    #[arg(long)]
    homography: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Line-delimited JSON records `{scene, anchor, positive}`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for checkpoints and `loss_log.jsonl`.
    #[arg(long, short)]
    out: PathBuf,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Overrides `train.max_steps`.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalHpatchesArgs {
    /// Directory of `i_*` / `v_*` sequences.
    root: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Write the tab-separated table here as well as to stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalRetrievalArgs {
    /// Directory of `.gdesc` files.
    #[arg(long)]
    index: PathBuf,
    /// One query id per line.
    #[arg(long)]
    queries: PathBuf,
    /// Lines of `query_id relevant_id...`.
    #[arg(long)]
    relevance: PathBuf,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(subcommand)]
    kind: SynthKind,
}

#[derive(Debug, Subcommand)]
enum SynthKind {
    /// Same-scene image pairs plus `manifest.jsonl`.
    Pairs {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 256)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Illumination and viewpoint sequences with homography files.
    Sequences {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        per_kind: usize,
        #[arg(long, default_value_t = 2)]
        targets: usize,
        #[arg(long, default_value_t = 256)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> std::result::Result<ExtractionMode, String> {
    ExtractionMode::parse(s).ok_or_else(|| format!("unknown mode {s:?} (teacher, ts, ss)"))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let result = match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Match(a) => cmd_match(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalHpatches(a) => cmd_eval_hpatches(a),
        Command::EvalRetrieval(a) => cmd_eval_retrieval(a),
        Command::SynthFixture(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn image_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn build_extractor(args: &ModelArgs) -> Result<(Extractor, RunConfig)> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(m) = args.mode {
        cfg.extract.mode = m;
    }
    let extractor =
        Extractor::from_config(&cfg, args.checkpoint.as_deref(), args.backbone.as_deref())?;
    Ok((extractor, cfg))
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let (extractor, cfg) = build_extractor(&args.model)?;
    create_dir(&args.out)?;
    for path in &args.images {
        let image = ImageTensor::open(path)?;
        let local = extractor.local(&image)?;
        let id = image_id(path);
        let feat = FeatureFile::from_local(&local, cfg.extract.mode, cfg.detector.groups);
        feat.write(&args.out.join(format!("{id}.feat")))?;
        let mut line = format!(
            "{}: {} keypoints, dim {}",
            path.display(),
            feat.len(),
            feat.dim()
        );
        if !args.no_global {
            let g = extractor.global(&image)?;
            if g.zero {
                log::warn!("{}: global descriptor is zero; not written", path.display());
            } else {
                GlobalDescFile::new(id.clone(), &g).write(&args.out.join(index_file_name(&id)))?;
                let _ = write!(line, ", global dim {}", g.dim());
            }
        }
        println!("{line}");
    }
    Ok(())
}

/// Keypoints and descriptors of a feature file.
pub fn feature_sets(f: &FeatureFile) -> (KeypointSet, DescriptorSet) {
    let keypoints = f
        .keypoints
        .rows()
        .into_iter()
        .map(|r| Keypoint {
            x: f64::from(r[0]),
            y: f64::from(r[1]),
            score: f64::from(r[2]),
            group_id: r[3] as usize,
            cell: (0, 0),
            offset: (0.0, 0.0),
        })
        .collect();
    (
        KeypointSet { keypoints },
        DescriptorSet::from_rows(f.descriptors.clone()),
    )
}

fn cmd_match(args: MatchArgs) -> Result<()> {
    let fa = FeatureFile::read(&args.features_a)?;
    let fb = FeatureFile::read(&args.features_b)?;
    if fa.dim() != fb.dim() {
        return Err(Error::dim(format!(
            "{} has dim {}, {} has dim {}",
            args.features_a.display(),
            fa.dim(),
            args.features_b.display(),
            fb.dim()
        )));
    }
    let h = args
        .homography
        .as_deref()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Homography::parse(&text)
        })
        .transpose()?;
    let (ka, da) = feature_sets(&fa);
    let (kb, db) = feature_sets(&fb);
    let matches = mutual_nn_matches(&da, &db)?;
    let mut out = Vec::new();
    write_matches(&mut out, &matches, &ka, &kb).expect("in-memory write");
    println!(
        "{} matches between {} and {} keypoints",
        matches.len(),
        ka.len(),
        kb.len()
    );
    if let Some(h) = h {
        let curve = mma_curve(&matches, &ka, &kb, &h, &MMA_THRESHOLDS)?;
        println!("threshold\tmma");
        for (t, v) in MMA_THRESHOLDS.iter().zip(&curve) {
            writeln!(out, "# mma {t} {v}").expect("in-memory write");
            println!("{t}\t{v}");
        }
    }
    fs::write(&args.out, out).map_err(|e| Error::io(&args.out, e))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(m) = args.max_steps {
        cfg.train.max_steps = Some(m);
        cfg.validate()?;
    }
    let manifest = PairManifest::load(&args.manifest)?;
    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg.train.clone())?,
        None => {
            let t = &cfg.train;
            let model = Model::with_backbone(
                load_backbone(args.backbone.as_deref())?,
                FPN_WIDTH,
                t.d2,
                t.d3,
                t.drop_prob,
                t.seed,
            )?;
            Trainer::new(model, t.clone())?
        }
    };
    create_dir(&args.out)?;
    write_file(&args.out.join("config.toml"), &cfg.to_toml())?;
    let start = trainer.progress();
    let summary = trainer.run(&manifest, &args.out)?;
    let end = trainer.progress();
    println!(
        "trained steps {}..{} (epoch {}..{})",
        start.step, end.step, start.epoch, end.epoch
    );
    if let (Some(first), Some(last)) = (summary.records.first(), summary.records.last()) {
        println!("total loss {:.6} -> {:.6}", first.total, last.total);
    }
    for c in &summary.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

/// Mean accuracy curves of a homography-sequence evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct HpatchesSummary {
    /// Per group name: pair count and mean curve.
    pub groups: BTreeMap<&'static str, (usize, Vec<f64>)>,
    pub skipped: usize,
}

const GROUPS: [&str; 3] = ["overall", "illumination", "viewpoint"];

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "ppm", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Runs every sequence under `root` through `extractor`.
pub fn evaluate_sequences(extractor: &Extractor, root: &Path) -> Result<HpatchesSummary> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut sums: BTreeMap<&'static str, (usize, Vec<f64>)> = GROUPS
        .iter()
        .map(|g| (*g, (0, vec![0.0; MMA_THRESHOLDS.len()])))
        .collect();
    let mut skipped = 0;
    for dir in dirs {
        let name = image_id(&dir);
        let group = if name.starts_with("i_") {
            Some("illumination")
        } else if name.starts_with("v_") {
            Some("viewpoint")
        } else {
            None
        };
        let Some(reference) = find_image(&dir, "1") else {
            log::warn!(
                "{}: no reference image 1.*; sequence skipped",
                dir.display()
            );
            continue;
        };
        let ref_feat = extractor.local(&ImageTensor::open(&reference)?)?;
        for k in 2.. {
            let Some(target) = find_image(&dir, &k.to_string()) else {
                break;
            };
            let hp = dir.join(format!("H_1_{k}"));
            let h = match fs::read_to_string(&hp)
                .map_err(|e| Error::io(&hp, e))
                .and_then(|t| Homography::parse(&t))
                .and_then(|h| h.check_invertible().map(|_| h))
            {
                Ok(h) => h,
                Err(e) => {
                    log::warn!("{}: pair skipped: {e}", target.display());
                    skipped += 1;
                    continue;
                }
            };
            let tgt = extractor.local(&ImageTensor::open(&target)?)?;
            let matches = mutual_nn_matches(&ref_feat.descriptors, &tgt.descriptors)?;
            let curve = mma_curve(
                &matches,
                &ref_feat.keypoints,
                &tgt.keypoints,
                &h,
                &MMA_THRESHOLDS,
            )?;
            for g in std::iter::once("overall").chain(group) {
                let entry = sums.get_mut(g).expect("known group");
                entry.0 += 1;
                for (s, v) in entry.1.iter_mut().zip(&curve) {
                    *s += v;
                }
            }
        }
    }
    for (n, curve) in sums.values_mut() {
        for v in curve.iter_mut() {
            *v = if *n > 0 { *v / *n as f64 } else { f64::NAN };
        }
    }
    Ok(HpatchesSummary {
        groups: sums,
        skipped,
    })
}

impl HpatchesSummary {
    /// Tab-separated `threshold overall illumination viewpoint` rows.
    pub fn table(&self) -> String {
        let mut out = String::from("threshold");
        for g in GROUPS {
            out.push('\t');
            out.push_str(g);
        }
        out.push('\n');
        for (i, t) in MMA_THRESHOLDS.iter().enumerate() {
            out.push_str(&t.to_string());
            for g in GROUPS {
                let _ = write!(out, "\t{}", self.groups[g].1[i]);
            }
            out.push('\n');
        }
        out
    }
}

fn cmd_eval_hpatches(args: EvalHpatchesArgs) -> Result<()> {
    let (extractor, _) = build_extractor(&args.model)?;
    let summary = evaluate_sequences(&extractor, &args.root)?;
    let table = summary.table();
    print!("{table}");
    let counts: Vec<String> = GROUPS
        .iter()
        .map(|g| format!("{g} {}", summary.groups[g].0))
        .collect();
    eprintln!("pairs: {}; skipped {}", counts.join(", "), summary.skipped);
    if summary.skipped > 0 {
        log::warn!("{} pairs skipped", summary.skipped);
    }
    if let Some(out) = &args.out {
        write_file(out, &table)?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn cmd_eval_retrieval(args: EvalRetrievalArgs) -> Result<()> {
    let index = load_index(&args.index)?;
    if index.is_empty() {
        return Err(Error::arg(format!(
            "{} holds no .gdesc files",
            args.index.display()
        )));
    }
    let queries = read_lines(&args.queries)?;
    let mut relevance: BTreeMap<String, HashSet<String>> = BTreeMap::new();
    for line in read_lines(&args.relevance)? {
        let mut ids = line.split_whitespace();
        let q = ids.next().expect("non-empty line").to_string();
        relevance
            .entry(q)
            .or_default()
            .extend(ids.map(String::from));
    }
    let mut rankings = vec![];
    let mut relevant = vec![];
    for q in &queries {
        let desc = index
            .get(q)
            .ok_or_else(|| Error::arg(format!("query {q:?} is not in the index")))?;
        rankings.push(index.rank(desc)?.into_iter().map(|(id, _)| id).collect());
        let rel = relevance.get(q).cloned().unwrap_or_default();
        if rel.is_empty() {
            log::warn!("query {q:?} has no relevant items; excluded");
        }
        relevant.push(rel);
    }
    let report = mean_average_precision(&rankings, &relevant)?;
    let mut out = String::from("query\tap\n");
    for (q, ap) in queries.iter().zip(&report.per_query) {
        match ap {
            Some(v) => writeln!(out, "{q}\t{v}"),
            None => writeln!(out, "{q}\texcluded"),
        }
        .expect("string write");
    }
    writeln!(out, "mAP\t{}", report.map).expect("string write");
    print!("{out}");
    if report.excluded > 0 {
        eprintln!("{} queries excluded (no relevant items)", report.excluded);
    }
    if let Some(path) = &args.out {
        write_file(path, &out)?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    match args.kind {
        SynthKind::Pairs {
            out,
            scenes,
            size,
            seed,
        } => {
            check_fixture_size(size)?;
            if scenes < 2 {
                return Err(Error::arg("need at least 2 scenes for negatives"));
            }
            let manifest = write_pair_fixture(&out, scenes, size, seed)?;
            println!("wrote {}", manifest.display());
        }
        SynthKind::Sequences {
            out,
            per_kind,
            targets,
            size,
            seed,
        } => {
            check_fixture_size(size)?;
            write_sequence_fixture(&out, per_kind, targets, size, seed)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn check_fixture_size(size: u32) -> Result<()> {
    let min = crate::backbone::MIN_IMAGE_SIDE as u32;
    if size < min {
        return Err(Error::arg(format!("size must be at least {min}")));
    }
    Ok(())
}
