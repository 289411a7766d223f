//! Command-line front end.
//!
//! Every subcommand reads an optional TOML run config, lets flags override
//! it, and writes a `<command>.manifest.json` next to its reports. Reports
//! never embed paths or timestamps, so identical inputs and seeds give
//! byte-identical reports.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bag_net::{predict_window, BagInput};
use crate::checkpoint::{load_bag_net, load_patch_net, save_bag_net, save_patch_net, sha256_hex};
use crate::error::{Error, Result};
use crate::evalsuite::{classification_report, deploy_eval, deploy_records, export_feature_distributions, records_csv, DeployWindow};
use crate::imaging::{downscale, load_png, Geometry, PatchImage};
use crate::ingest::{assemble_bags, format_tons, load_data_dir, split_bags, write_bags_jsonl, AssembleConfig, Bag, ClassId, ProductionLog};
use crate::optimizer::TrainConfig;
use crate::patch_net::{mix_seed, Aggregation, EncoderConfig, PatchClassifier};
use crate::synthgen::{gen_dataset, GroundTruth, SynthScenario};
use crate::weak_relabel::{
    bag_samples, patch_map_cache, stage_one, stage_two, BagModelSpec, InstanceSet, PatchModelSpec, RelabelConfig,
    StageOneReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

/// Windows trained by `stage2 --sweep`, in minutes.
pub const SWEEP_WINDOWS: [i64; 5] = [15, 20, 25, 30, 35];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub n_latency: i64,
    pub window_w: i64,
    pub q_m: f64,
    /// Share of bags used to pick the best epoch.
    pub val_fraction: f64,
    /// Share of bags held out from all training and selection.
    pub test_fraction: f64,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            n_latency: 90,
            window_w: 20,
            q_m: 66.0,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl IngestSection {
    pub fn assemble(&self, window_w: i64) -> AssembleConfig {
        AssembleConfig {
            n_latency: self.n_latency,
            window_w,
            q_m: self.q_m,
            window_shift: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryPreset {
    Plant,
    Desk,
}

impl GeometryPreset {
    pub fn geometry(self) -> Geometry {
        match self {
            GeometryPreset::Plant => Geometry::PLANT,
            GeometryPreset::Desk => Geometry::DESK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchNetSection {
    pub geometry: GeometryPreset,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub stem_channels: usize,
    pub per_class_channels: usize,
    pub aggregation: Aggregation,
    pub augment: bool,
}

impl Default for PatchNetSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        PatchNetSection {
            geometry: GeometryPreset::Plant,
            blocks: e.blocks,
            layers_per_block: e.layers_per_block,
            growth: e.growth,
            stem_channels: e.stem_channels,
            per_class_channels: 60,
            aggregation: Aggregation::Mean,
            augment: true,
        }
    }
}

impl PatchNetSection {
    pub fn spec(&self) -> PatchModelSpec {
        PatchModelSpec {
            geometry: self.geometry.geometry(),
            encoder: EncoderConfig {
                blocks: self.blocks,
                layers_per_block: self.layers_per_block,
                growth: self.growth,
                stem_channels: self.stem_channels,
            },
            per_class_channels: self.per_class_channels,
            aggregation: self.aggregation,
            augment: self.augment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BagNetSection {
    pub reduced_dim: usize,
    pub hidden_dim: usize,
    pub patch_dropout: f64,
}

impl Default for BagNetSection {
    fn default() -> Self {
        let d = BagModelSpec::default();
        BagNetSection {
            reduced_dim: d.reduced_dim,
            hidden_dim: d.hidden_dim,
            patch_dropout: d.patch_dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeploySection {
    /// Minutes between the end of the scored window and its lab result.
    pub offset: i64,
}

impl Default for DeploySection {
    fn default() -> Self {
        DeploySection {
            offset: DeployWindow::default().offset,
        }
    }
}

/// Full run configuration. `train` drives the patch network, `bag_train`
/// the bag network. The `seed` fields inside both are replaced by values
/// derived from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub ingest: IngestSection,
    pub patch_net: PatchNetSection,
    pub bag_net: BagNetSection,
    pub train: TrainConfig,
    pub bag_train: TrainConfig,
    pub relabel: RelabelConfig,
    pub deploy: DeploySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: PathsConfig::default(),
            ingest: IngestSection::default(),
            patch_net: PatchNetSection::default(),
            bag_net: BagNetSection::default(),
            train: TrainConfig::default(),
            bag_train: TrainConfig::default(),
            relabel: RelabelConfig::default(),
            deploy: DeploySection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let i = &self.ingest;
        if i.n_latency < 0 || i.window_w <= 0 {
            return Err(Error::Config("ingest: n_latency must be >= 0 and window_w > 0".into()));
        }
        if !i.q_m.is_finite() {
            return Err(Error::Config("ingest: q_m must be finite".into()));
        }
        let (v, t) = (i.val_fraction, i.test_fraction);
        if !(v > 0.0 && t > 0.0 && v + t < 1.0) {
            return Err(Error::Config(format!(
                "ingest: val_fraction and test_fraction must be positive and sum below 1, got {v} and {t}"
            )));
        }
        let p = &self.patch_net;
        if [p.blocks, p.layers_per_block, p.growth, p.stem_channels, p.per_class_channels].contains(&0) {
            return Err(Error::Config("patch_net: sizes must be positive".into()));
        }
        if self.bag_net.reduced_dim == 0 || self.bag_net.hidden_dim == 0 {
            return Err(Error::Config("bag_net: sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bag_net.patch_dropout) {
            return Err(Error::Config("bag_net: patch_dropout must be in [0, 1)".into()));
        }
        if self.deploy.offset < 0 {
            return Err(Error::Config("deploy: offset must be >= 0".into()));
        }
        for (name, t) in [("train", &self.train), ("bag_train", &self.bag_train)] {
            t.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.relabel.validate().map_err(|e| Error::Config(format!("relabel: {e}")))?;
        Ok(())
    }

    fn patch_train(&self) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.seed, 1),
            ..self.train
        }
    }

    fn bag_train(&self) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.seed, 2),
            ..self.bag_train
        }
    }

    fn geometry(&self) -> Geometry {
        self.patch_net.geometry.geometry()
    }
}

/// Parses a TOML run config. Missing keys take their defaults; unknown
/// keys and mistyped values are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Parser, Debug)]
#[command(name = "orefeed", version, about = "Feed-load estimation from conveyor images")]
struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Data directory with labs.csv, feed.csv and images.jsonl.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,
    #[arg(long, global = true)]
    reports: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Scenario TOML, or `desk` for the built-in scenario.
        #[arg(long, default_value = "desk")]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble bags and write them as JSON lines.
    Ingest {
        #[arg(long)]
        out: PathBuf,
        /// Window width in minutes.
        #[arg(long)]
        window: Option<i64>,
    },
    /// Train the patch network and relabel instances.
    Stage1 {
        /// Ground truth from `synth`, for purity and ARI in the report.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train bag networks on the frozen patch network.
    Stage2 {
        /// Window width in minutes; repeatable.
        #[arg(long = "window")]
        windows: Vec<i64>,
        /// Train every window in 15, 20, 25, 30, 35.
        #[arg(long)]
        sweep: bool,
    },
    /// Score trained models.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        window: Option<i64>,
        /// Deploy mode only: predict the optimal setpoint from ground truth.
        #[arg(long)]
        oracle: bool,
        /// Ground truth file; defaults to `<data>/truth.jsonl`.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Print the recommended setpoint for a directory of frames.
    Predict {
        #[arg(long)]
        window_dir: PathBuf,
        #[arg(long)]
        window: Option<i64>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EvalMode {
    Table2,
    Deploy,
    Features,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::TrainingAborted(_) | Error::NonFinite(_) => EXIT_TRAINING,
        _ => EXIT_DATA,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.data {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &cli.checkpoints {
        cfg.paths.checkpoint_dir = d.clone();
    }
    if let Some(d) = &cli.reports {
        cfg.paths.report_dir = d.clone();
    }
    let mut inputs: Vec<PathBuf> = cli.config.iter().cloned().collect();
    match cli.command {
        Command::Synth { scenario, out } => {
            let mut sc = if scenario == "desk" {
                SynthScenario::desk()
            } else {
                let p = PathBuf::from(&scenario);
                inputs.push(p.clone());
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{scenario}: {e}")))?
            };
            if let Some(s) = cli.seed {
                sc.seed = s;
            }
            gen_dataset(&sc, &out)?;
            eprintln!("wrote {} regimes to {}", sc.bags, out.display());
            write_manifest(&out.join("manifest.json"), "synth", &cfg, &inputs)
        }
        Command::Ingest { out, window } => {
            let log = load_data_dir(&cfg.paths.data_dir)?;
            let asm = assemble_bags(&log, &cfg.ingest.assemble(window.unwrap_or(cfg.ingest.window_w)))?;
            let f = fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
            let mut w = BufWriter::new(f);
            write_bags_jsonl(&asm.bags, &mut w).map_err(|e| Error::io(&out, e))?;
            w.flush().map_err(|e| Error::io(&out, e))?;
            eprintln!("{} bags, dropped {:?}", asm.bags.len(), asm.report);
            inputs.push(cfg.paths.data_dir.clone());
            write_manifest(&manifest_path(&cfg, "ingest")?, "ingest", &cfg, &inputs)
        }
        Command::Stage1 { truth } => {
            inputs.push(cfg.paths.data_dir.clone());
            inputs.extend(truth.iter().cloned());
            cmd_stage1(&cfg, truth.as_deref())?;
            write_manifest(&manifest_path(&cfg, "stage1")?, "stage1", &cfg, &inputs)
        }
        Command::Stage2 { windows, sweep } => {
            let mut ws = windows;
            if sweep {
                ws.extend(SWEEP_WINDOWS);
            }
            if ws.is_empty() {
                ws.push(cfg.ingest.window_w);
            }
            ws.sort_unstable();
            ws.dedup();
            inputs.push(cfg.paths.data_dir.clone());
            inputs.push(patch_checkpoint(&cfg));
            cmd_stage2(&cfg, &ws)?;
            write_manifest(&manifest_path(&cfg, "stage2")?, "stage2", &cfg, &inputs)
        }
        Command::Eval { mode, window, oracle, truth } => {
            let w = window.unwrap_or(cfg.ingest.window_w);
            inputs.push(cfg.paths.data_dir.clone());
            let name = match mode {
                EvalMode::Table2 => {
                    inputs.extend([patch_checkpoint(&cfg), bag_checkpoint(&cfg, w)]);
                    cmd_table2(&cfg, w)?;
                    "eval-table2"
                }
                EvalMode::Deploy => {
                    let truth = truth.unwrap_or_else(|| cfg.paths.data_dir.join("truth.jsonl"));
                    if oracle {
                        inputs.push(truth.clone());
                    } else {
                        inputs.extend([patch_checkpoint(&cfg), bag_checkpoint(&cfg, w)]);
                    }
                    cmd_deploy(&cfg, w, oracle.then_some(truth.as_path()))?;
                    "eval-deploy"
                }
                EvalMode::Features => {
                    inputs.push(patch_checkpoint(&cfg));
                    cmd_features(&cfg)?;
                    "eval-features"
                }
            };
            write_manifest(&manifest_path(&cfg, name)?, name, &cfg, &inputs)
        }
        Command::Predict { window_dir, window } => {
            let w = window.unwrap_or(cfg.ingest.window_w);
            inputs.extend([window_dir.clone(), patch_checkpoint(&cfg), bag_checkpoint(&cfg, w)]);
            let s = cmd_predict(&cfg, &window_dir, w)?;
            println!("{}", format_tons(s));
            write_manifest(&manifest_path(&cfg, "predict")?, "predict", &cfg, &inputs)
        }
    }
}

fn patch_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("patch_net.ofck")
}

fn bag_checkpoint(cfg: &RunConfig, window: i64) -> PathBuf {
    cfg.paths.checkpoint_dir.join(format!("bag_net_{window}min.ofck"))
}

fn report_dir(cfg: &RunConfig) -> Result<&Path> {
    let d = cfg.paths.report_dir.as_path();
    fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    Ok(d)
}

fn manifest_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    Ok(report_dir(cfg)?.join(format!("{name}.manifest.json")))
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

/// Git-style blob digest: sha256 over `blob <len>\0` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut buf = format!("blob {}\0", bytes.len()).into_bytes();
    buf.extend_from_slice(bytes);
    sha256_hex(&buf)
}

/// Digest of a file, or of a directory as the sorted list of its files'
/// blob digests and relative paths. Manifests are skipped.
pub fn content_hash(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(blob_hash(&fs::read(path).map_err(|e| Error::io(path, e))?));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for rel in files {
        let full = path.join(&rel);
        let h = blob_hash(&fs::read(&full).map_err(|e| Error::io(&full, e))?);
        listing.push_str(&format!("{h} {rel}\n"));
    }
    Ok(sha256_hex(listing.as_bytes()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if !p.to_string_lossy().ends_with("manifest.json") {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    inputs_hash: String,
}

fn write_manifest(path: &Path, command: &str, cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    let mut map = BTreeMap::new();
    for p in inputs {
        map.insert(p.display().to_string(), content_hash(p)?);
    }
    let listing: String = map.values().map(|h| format!("{h}\n")).collect();
    let m = Manifest {
        command,
        seed: cfg.seed,
        config_hash: sha256_hex(serde_json::to_string(cfg)?.as_bytes()),
        config: cfg,
        inputs_hash: sha256_hex(listing.as_bytes()),
        inputs: map,
    };
    write_json(path, &m)
}

/// Train, validation and test bags, split at bag level.
pub struct Split {
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
}

pub fn split_three(bags: &[Bag], val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Split> {
    let (rest, test) = split_bags(bags, 1.0 - test_fraction, mix_seed(seed, 11))?;
    let (train, val) = split_bags(&rest, 1.0 - val_fraction / (1.0 - test_fraction), mix_seed(seed, 12))?;
    Ok(Split { train, val, test })
}

fn load_split(cfg: &RunConfig, log: &ProductionLog, window: i64) -> Result<(Split, crate::ingest::ClassVocab)> {
    let asm = assemble_bags(log, &cfg.ingest.assemble(window))?;
    let split = split_three(&asm.bags, cfg.ingest.val_fraction, cfg.ingest.test_fraction, cfg.seed)?;
    Ok((split, asm.vocab))
}

/// Loads and downscales the frames behind `ids`.
pub fn load_patches(log: &ProductionLog, ids: &[u64], geom: &Geometry) -> Result<HashMap<u64, PatchImage>> {
    let by_id: HashMap<u64, &Path> = log.images.iter().map(|r| (r.id, r.path.as_path())).collect();
    let mut unique = ids.to_vec();
    unique.sort_unstable();
    unique.dedup();
    unique
        .par_iter()
        .map(|id| {
            let path = by_id
                .get(id)
                .ok_or_else(|| Error::precondition(format!("image {id} is not in the image index")))?;
            Ok((*id, downscale(&load_png(path)?, geom)?))
        })
        .collect()
}

fn all_ids<'a>(bags: impl IntoIterator<Item = &'a Bag>) -> Vec<u64> {
    bags.into_iter().flat_map(|b| b.instance_ids.iter().copied()).collect()
}

#[derive(Serialize)]
struct InstanceLabel {
    instance_id: u64,
    label: ClassId,
}

#[derive(Serialize)]
struct StageOneFile<'a> {
    checkpoint: String,
    train_bags: usize,
    val_bags: usize,
    instances: usize,
    output_classes: Vec<String>,
    report: &'a StageOneReport,
}

fn cmd_stage1(cfg: &RunConfig, truth_path: Option<&Path>) -> Result<()> {
    let log = load_data_dir(&cfg.paths.data_dir)?;
    let (split, vocab) = load_split(cfg, &log, cfg.ingest.window_w)?;
    let geom = cfg.geometry();
    let patches = load_patches(&log, &all_ids(split.train.iter().chain(&split.val)), &geom)?;
    let set = InstanceSet::from_bags(&split.train, &split.val, |id| Ok(patches[&id].clone()))?;
    let truth = match truth_path {
        Some(p) => {
            let gt = GroundTruth::load(p)?;
            let t = set
                .ids
                .iter()
                .map(|id| gt.latent_of(*id).ok_or_else(|| Error::precondition(format!("image {id} missing from ground truth"))))
                .collect::<Result<Vec<_>>>()?;
            Some(t)
        }
        None => None,
    };
    let dir = report_dir(cfg)?;
    let audit_path = dir.join("relabel_audit.jsonl");
    let mut audit = BufWriter::new(fs::File::create(&audit_path).map_err(|e| Error::io(&audit_path, e))?);
    let out = stage_one(
        &set,
        &vocab,
        &cfg.patch_net.spec(),
        &cfg.patch_train(),
        &cfg.relabel,
        cfg.seed,
        truth.as_deref(),
        Some(&mut audit),
    )?;
    audit.flush().map_err(|e| Error::io(&audit_path, e))?;
    fs::create_dir_all(&cfg.paths.checkpoint_dir).map_err(|e| Error::io(&cfg.paths.checkpoint_dir, e))?;
    let hash = save_patch_net(&patch_checkpoint(cfg), &out.net, &out.vocab, &out.classes, &geom, cfg.seed)?;
    for it in &out.report.iterations {
        eprintln!(
            "iteration {}: {} classes, val accuracy {:.4}, change {:?}",
            it.iteration, it.num_classes, it.val_accuracy, it.label_change_fraction
        );
    }
    let file = StageOneFile {
        checkpoint: hash,
        train_bags: split.train.len(),
        val_bags: split.val.len(),
        instances: set.len(),
        output_classes: out.classes.iter().map(|c| out.vocab.name(*c)).collect(),
        report: &out.report,
    };
    write_json(&dir.join("stage1_report.json"), &file)?;
    let mut labels = String::new();
    for (id, label) in set.ids.iter().zip(&out.labels) {
        labels.push_str(&serde_json::to_string(&InstanceLabel { instance_id: *id, label: *label })?);
        labels.push('\n');
    }
    write_file(&dir.join("stage1_labels.jsonl"), labels.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window_minutes: i64,
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub checkpoint: String,
}

fn cmd_stage2(cfg: &RunConfig, windows: &[i64]) -> Result<()> {
    let tau = load_patch_net(&patch_checkpoint(cfg))?;
    let log = load_data_dir(&cfg.paths.data_dir)?;
    let spec = BagModelSpec {
        reduced_dim: cfg.bag_net.reduced_dim,
        hidden_dim: cfg.bag_net.hidden_dim,
        patch_dropout: cfg.bag_net.patch_dropout,
    };
    let mut reports = BTreeMap::new();
    for &w in windows {
        if w <= 0 {
            return Err(Error::Config(format!("window must be positive, got {w}")));
        }
        let (split, vocab) = load_split(cfg, &log, w)?;
        let ids = all_ids(split.train.iter().chain(&split.val).chain(&split.test));
        let patches = load_patches(&log, &ids, &tau.geometry)?;
        let maps = patch_map_cache(&tau.net, &tau.geometry, &ids, |id| Ok(patches[&id].clone()))?;
        let tr = bag_samples(&split.train, &maps, &vocab)?;
        let va = bag_samples(&split.val, &maps, &vocab)?;
        let te = bag_samples(&split.test, &maps, &vocab)?;
        let g = tau.net.config().fused_channels();
        let (omega, hist) = stage_two(&tr, &va, g, &vocab, &spec, &cfg.bag_train(), mix_seed(cfg.seed, w as u64))?;
        let te_ref: Vec<(&BagInput, usize)> = te.iter().map(|(x, y)| (x, *y)).collect();
        let test_accuracy = crate::optimizer::accuracy(&omega, &te_ref)?;
        let hash = save_bag_net(&bag_checkpoint(cfg, w), &omega, &vocab, cfg.seed, &tau.hash)?;
        eprintln!("window {w} min: val {:.4}, test {:.4}", hist.best_val_accuracy, test_accuracy);
        reports.insert(
            format!("{w}min"),
            WindowReport {
                window_minutes: w,
                train_bags: split.train.len(),
                val_bags: split.val.len(),
                test_bags: split.test.len(),
                best_epoch: hist.best_epoch,
                epochs_run: hist.epochs.len(),
                val_accuracy: hist.best_val_accuracy,
                test_accuracy,
                checkpoint: hash,
            },
        );
    }
    write_json(&report_dir(cfg)?.join("stage2_report.json"), &reports)
}

/// Loads both networks and refuses a bag network trained on another patch
/// network.
fn load_models(cfg: &RunConfig, window: i64) -> Result<(crate::checkpoint::LoadedPatchNet, crate::checkpoint::LoadedBagNet)> {
    let tau = load_patch_net(&patch_checkpoint(cfg))?;
    let omega = load_bag_net(&bag_checkpoint(cfg, window))?;
    if omega.parent != tau.hash {
        return Err(Error::Integrity(format!(
            "bag network for {window} min was trained on patch network {}, current is {}; rerun stage2",
            omega.parent, tau.hash
        )));
    }
    Ok((tau, omega))
}

fn cmd_table2(cfg: &RunConfig, window: i64) -> Result<()> {
    let (tau, omega) = load_models(cfg, window)?;
    let log = load_data_dir(&cfg.paths.data_dir)?;
    let (split, _) = load_split(cfg, &log, window)?;
    let patches = load_patches(&log, &all_ids(&split.test), &tau.geometry)?;
    let vocab = &omega.vocab;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for b in &split.test {
        let ps: Vec<PatchImage> = b.instance_ids.iter().map(|id| patches[id].clone()).collect();
        let s = predict_window(&tau.net, &omega.net, &tau.geometry, &ps)?;
        let label = vocab
            .class_of(b.setpoint)
            .ok_or_else(|| Error::precondition(format!("setpoint {} unknown to the bag network", format_tons(b.setpoint))))?;
        preds.push(vocab.class_of(s).expect("bag network predicts its own setpoints"));
        labels.push(label);
    }
    let report = classification_report(&preds, &labels, vocab)?;
    let text = report.render(vocab);
    print!("{text}");
    let dir = report_dir(cfg)?;
    write_file(&dir.join("table2.txt"), text.as_bytes())?;
    write_json(&dir.join("table2.json"), &report)
}

fn cmd_deploy(cfg: &RunConfig, window: i64, oracle: Option<&Path>) -> Result<()> {
    let log = load_data_dir(&cfg.paths.data_dir)?;
    let win = DeployWindow {
        offset: cfg.deploy.offset,
        window_w: window,
    };
    let (records, skipped) = match oracle {
        Some(p) => {
            let gt = GroundTruth::load(p)?;
            deploy_records(&log, &win, |end, _| {
                gt.optimal_setpoint_at(end.minus(1))
                    .ok_or_else(|| Error::precondition(format!("no ground-truth regime before {end}")))
            })?
        }
        None => {
            let (tau, omega) = load_models(cfg, window)?;
            deploy_records(&log, &win, |_, images| {
                let ps = images
                    .iter()
                    .map(|r| downscale(&load_png(&r.path)?, &tau.geometry))
                    .collect::<Result<Vec<_>>>()?;
                predict_window(&tau.net, &omega.net, &tau.geometry, &ps)
            })?
        }
    };
    if skipped > 0 {
        eprintln!("skipped {skipped} labs without a usable window");
    }
    let preds: Vec<f64> = records.iter().map(|r| r.s_pred).collect();
    let actual: Vec<f64> = records.iter().map(|r| r.s_actual).collect();
    let report = deploy_eval(&records, &preds, &actual, cfg.ingest.q_m)?;
    let text = report.render();
    print!("{text}");
    let dir = report_dir(cfg)?;
    write_file(&dir.join("deploy.txt"), text.as_bytes())?;
    write_json(&dir.join("deploy.json"), &report)?;
    write_file(&dir.join("deploy_records.csv"), records_csv(&records, cfg.ingest.q_m).as_bytes())
}

#[derive(Deserialize)]
struct InstanceLabelIn {
    instance_id: u64,
    label: ClassId,
}

/// Histograms of the class-specific feature groups for validation patches,
/// using the final stage-one labels as classes.
fn cmd_features(cfg: &RunConfig) -> Result<()> {
    let tau = load_patch_net(&patch_checkpoint(cfg))?;
    let log = load_data_dir(&cfg.paths.data_dir)?;
    let (split, _) = load_split(cfg, &log, cfg.ingest.window_w)?;
    let dir = report_dir(cfg)?;
    let labels_path = dir.join("stage1_labels.jsonl");
    let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut label_of = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let l: InstanceLabelIn = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: labels_path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        label_of.insert(l.instance_id, l.label);
    }
    let out_index: HashMap<ClassId, usize> = tau.classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let ids = all_ids(&split.val);
    let patches = load_patches(&log, &ids, &tau.geometry)?;
    let pc = PatchClassifier {
        net: tau.net.clone(),
        geometry: tau.geometry,
        augment: false,
    };
    let mut samples = Vec::new();
    for id in ids {
        if let Some(k) = label_of.get(&id).and_then(|c| out_index.get(c)) {
            samples.push((pc.segments(&patches[&id], None)?, *k));
        }
    }
    let names: Vec<String> = tau.classes.iter().map(|c| tau.vocab.name(*c)).collect();
    let export = export_feature_distributions(&tau.net, &samples, &names, 20, &dir.join("features.csv"))?;
    eprintln!("{} histogram rows, {} classes without a true positive", export.rows, export.omitted.len());
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, window_dir: &Path, window: i64) -> Result<f64> {
    let (tau, omega) = load_models(cfg, window)?;
    let mut frames: Vec<PathBuf> = fs::read_dir(window_dir)
        .map_err(|e| Error::io(window_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(Error::precondition(format!("no PNG frames in {}", window_dir.display())));
    }
    let patches = frames
        .iter()
        .map(|p| downscale(&load_png(p)?, &tau.geometry))
        .collect::<Result<Vec<_>>>()?;
    predict_window(&tau.net, &omega.net, &tau.geometry, &patches)
}
