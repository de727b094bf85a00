//! The `afan` command line: data generation, the three training modes,
//! evaluation, the energy-reduction check and the analysis emitters. Every
//! command leaves a [`manifest::RunManifest`] next to its outputs, from
//! which `afan replay` can run it again.

pub mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use afan_core::checkpoint;
use afan_core::evalviz::{self, Detection, EvalReport, FeatureKind};
use afan_core::idig::{flatten_images, gaussian_samples, verify_reduction};
use afan_core::rng::stream;
use afan_core::synthdata::{self, load_dataset, AnnotatedSample, CorruptionMode, Dataset, SceneConfig};
use afan_core::trainloop::{self, FitOptions, TrainConfig};
use afan_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use manifest::{digest_path, manifest_path, PathDigest, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "afan", version, about = "Desk-scale augmented feature alignment for cross-domain detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
pub enum Command {
    /// Render paired source (clean) and target (corrupted) datasets.
    GenData(GenDataArgs),
    /// Train a detector: AFAN, source-only baseline, or target oracle.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an annotated split (mAP at IoU 0.5).
    Eval(EvalArgs),
    /// Monte-Carlo check of the energy-distance reduction under mixing.
    VerifyEnergy(VerifyEnergyArgs),
    /// Domain-evidence heatmaps of the feature discriminator.
    Evidence(EvidenceArgs),
    /// Pooled pyramid and region features as a TSV table.
    ExportFeatures(ExportFeaturesArgs),
    /// Re-run a command from its run manifest and compare the outputs.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::VerifyEnergy(_) => "verify-energy",
            Command::Evidence(_) => "evidence",
            Command::ExportFeatures(_) => "export-features",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Fog,
    Night,
}

impl From<ModeArg> for CorruptionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fog => CorruptionMode::Fog,
            ModeArg::Night => CorruptionMode::Night,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// Output root; receives `{source,target}/{train,val}`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 100)]
    pub n_val: usize,
    #[arg(long, default_value_t = 0.6)]
    pub severity: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Fog)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Afan,
    Baseline,
    Oracle,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = TrainMode::Afan)]
    pub mode: TrainMode,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Annotated source split (afan, baseline).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Target split: used unannotated by afan, annotated by oracle.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Run directory; an existing checkpoint there is resumed.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Stop after this many completed steps, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// The effective config, filled in when the run is recorded.
    #[arg(skip)]
    #[serde(default)]
    pub resolved_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Annotated split to evaluate on.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate detections from a JSON file (one list per image) instead of
    /// running a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct VerifyEnergyArgs {
    #[arg(long, default_value_t = 0.5)]
    pub lambda_max: f64,
    /// Number of mixed pairs.
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    /// `gaussian:MEAN` or a dataset directory.
    #[arg(long)]
    pub source: String,
    /// `gaussian:MEAN` or a dataset directory.
    #[arg(long)]
    pub target: String,
    /// Dimension of Gaussian sample sets.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Size of Gaussian sample sets.
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    /// Images are resized to this side before flattening.
    #[arg(long, default_value_t = 8)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvidenceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory for one PNG per image.
    #[arg(long)]
    pub out: PathBuf,
    /// Only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ExportFeaturesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Splits to export; repeat for several.
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    /// TSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write 2-D PCA projections (per feature kind) to this TSV.
    #[arg(long)]
    pub pca: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write to this location instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for an error: 2 for bad input, 1 for runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Degenerate(_) => 2,
        _ => 1,
    }
}

/// Report written by `eval`: the evaluation plus proposal-filter counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub report: EvalReport,
    pub proposal_filter: Option<ProposalStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalStats {
    pub images: usize,
    pub max_per_image: usize,
    pub total: usize,
    pub min_score: Option<f64>,
    pub cap: usize,
    pub score_threshold: f64,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn load_split(p: &Path) -> Result<Dataset> {
    let d = load_dataset(p)?;
    if d.is_empty() {
        return Err(Error::validation(format!("dataset {} is empty", p.display())));
    }
    Ok(d)
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Result<()> {
    ensure_parent(p)?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    checkpoint::write_atomic(p, text.as_bytes())
}

/// What a finished command read and wrote, for its manifest.
struct Record {
    args: serde_json::Value,
    config_hash: Option<String>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    output: PathBuf,
    output_is_dir: bool,
    /// Further file outputs beside `output`.
    extra_outputs: Vec<PathBuf>,
}

/// Runs one parsed command.
pub fn run(command: Command) -> Result<()> {
    let started = manifest::now_ms();
    let name = command.name();
    let record = match command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::VerifyEnergy(a) => verify_energy(a)?,
        Command::Evidence(a) => evidence(a)?,
        Command::ExportFeatures(a) => export_features(a)?,
        Command::Replay(a) => return replay(a),
    };
    let inputs = record.inputs.iter().map(|p| digest_path(p)).collect::<Result<Vec<PathDigest>>>()?;
    let outputs = std::iter::once(&record.output)
        .chain(&record.extra_outputs)
        .map(|p| digest_path(p))
        .collect::<Result<Vec<PathDigest>>>()?;
    let config_hash = record.config_hash.unwrap_or_else(|| {
        // where the outputs go does not change what is computed
        let mut what = record.args.clone();
        if let Some(m) = what.as_object_mut() {
            m.remove("out");
            m.remove("pca");
        }
        manifest::sha256_hex(what.to_string().as_bytes())
    });
    let m = RunManifest {
        manifest_version: manifest::MANIFEST_VERSION,
        command: name.to_string(),
        args: record.args,
        config_hash,
        seed: record.seed,
        inputs,
        outputs,
        started_unix_ms: started,
        finished_unix_ms: manifest::now_ms(),
        versions: manifest::versions(),
    };
    manifest::write(&manifest_path(&record.output, record.output_is_dir), &m)
}

fn args_value(c: Command) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(c)?["args"].clone())
}

fn gen_data(a: GenDataArgs) -> Result<Record> {
    let base = SceneConfig::default();
    // object sizes scale with the shorter side
    let k = a.height.min(a.width) as f32 / base.height.min(base.width) as f32;
    let cfg = SceneConfig { height: a.height, width: a.width, min_side: base.min_side * k, max_side: base.max_side * k, ..base };
    let out = absolute(&a.out)?;
    let pair = synthdata::generate_domain_pair(&cfg, a.n_train, a.n_val, a.severity, a.mode.into(), a.seed, &out)?;
    println!(
        "wrote {} + {} source and {} + {} target images under {}",
        pair.source_train.samples.len(),
        pair.source_val.samples.len(),
        pair.target_train.samples.len(),
        pair.target_val.samples.len(),
        out.display()
    );
    let seed = a.seed;
    Ok(Record {
        args: args_value(Command::GenData(GenDataArgs { out: out.clone(), ..a }))?,
        config_hash: None,
        seed: Some(seed),
        inputs: vec![],
        output: out,
        output_is_dir: true,
        extra_outputs: Vec::new(),
    })
}

/// Config file (or the recorded config) with the flag overrides applied.
fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&a.resolved_config, &a.config) {
        (Some(c), _) => c.clone(),
        (None, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_json(&text)?
        }
        (None, None) => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size_per_domain = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.lambda_max {
        cfg.lambda_max = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::validation(format!("--{flag} is required in {mode} mode")))
}

fn train(a: TrainArgs) -> Result<Record> {
    let cfg = resolve_config(&a)?;
    let out = absolute(&a.out)?;
    let options = FitOptions { out_dir: Some(out.clone()), stop_after: a.stop_after, record_digests: false, log_every: 50 };
    let mut inputs = Vec::new();
    let outcome = match a.mode {
        TrainMode::Afan => {
            let s = absolute(required(&a.source, "source", "afan")?)?;
            let t = absolute(required(&a.target, "target", "afan")?)?;
            let source = load_split(&s)?;
            let target: Vec<AnnotatedSample> = load_split(&t)?.samples.iter().map(AnnotatedSample::unlabeled).collect();
            check_classes(&source, cfg.model.detector.num_classes)?;
            inputs.extend([s, t]);
            trainloop::fit(&source.samples, Some(&target), &cfg, &options)?
        }
        TrainMode::Baseline => {
            let s = absolute(required(&a.source, "source", "baseline")?)?;
            let source = load_split(&s)?;
            check_classes(&source, cfg.model.detector.num_classes)?;
            inputs.push(s);
            trainloop::build_baseline(&source.samples, &cfg, &options)?
        }
        TrainMode::Oracle => {
            let t = absolute(required(&a.target, "target", "oracle")?)?;
            let target = load_split(&t)?;
            check_classes(&target, cfg.model.detector.num_classes)?;
            inputs.push(t);
            trainloop::build_oracle(&target.samples, &cfg, &options)?
        }
    };
    let effective = outcome.trainer.config.clone();
    write_json(&out.join("config.json"), &effective)?;
    let state = if outcome.completed { "finished" } else { "stopped" };
    println!("{state} at step {} of {}; checkpoint {}", outcome.trainer.step, outcome.trainer.total_steps, out.join(trainloop::CHECKPOINT_FILE).display());
    let recorded = TrainArgs {
        out: out.clone(),
        source: a.source.as_deref().map(absolute).transpose()?,
        target: a.target.as_deref().map(absolute).transpose()?,
        config: a.config.as_deref().map(absolute).transpose()?,
        resolved_config: Some(cfg.clone()),
        ..a
    };
    Ok(Record {
        args: args_value(Command::Train(recorded))?,
        config_hash: Some(effective.hash()),
        seed: Some(effective.seed),
        inputs,
        output: out,
        output_is_dir: true,
        extra_outputs: Vec::new(),
    })
}

fn check_classes(d: &Dataset, expected: usize) -> Result<()> {
    if d.num_classes() != expected {
        return Err(Error::validation(format!("dataset has {} classes, the model {expected}", d.num_classes())));
    }
    Ok(())
}

/// Human-readable AP table.
pub fn format_report(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>8} {:>6} {:>6}", "class", "AP@0.5", "gt", "dets");
    for c in &r.classes {
        let _ = writeln!(s, "{:<12} {:>8.4} {:>6} {:>6}", c.name, c.ap, c.num_ground_truth, c.num_detections);
    }
    let _ = writeln!(s, "{:<12} {:>8.4}   ({} images)", "mAP", r.map, r.num_images);
    s
}

fn eval(a: EvalArgs) -> Result<Record> {
    let ds_path = absolute(&a.dataset)?;
    let ds = load_split(&ds_path)?;
    let names = ds.manifest.class_names.clone();
    let gts: Vec<_> = ds.samples.iter().map(|s| s.annotation.as_ref().expect("loaded splits are annotated")).collect();
    let mut inputs = vec![ds_path.clone()];
    let (report, stats) = match (&a.checkpoint, &a.predictions) {
        (_, Some(p)) => {
            let p = absolute(p)?;
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let dets: Vec<Vec<Detection>> = serde_json::from_str(&text).map_err(|e| Error::format(None, format!("bad predictions file: {e}")))?;
            inputs.push(p);
            (evalviz::evaluate(&dets, &gts, &names)?, None)
        }
        (Some(c), None) => {
            let c = absolute(c)?;
            let ckpt = checkpoint::load(&c)?;
            if ckpt.num_classes() != ds.num_classes() {
                return Err(Error::Version(format!(
                    "checkpoint predicts {} classes, dataset has {}",
                    ckpt.num_classes(),
                    ds.num_classes()
                )));
            }
            let model = ckpt.instantiate()?;
            let (report, result) = evalviz::evaluate_samples(&model, &ckpt.store, &ds.samples, &names)?;
            let params = &model.detector.cfg.proposals;
            let stats = ProposalStats {
                images: result.proposals_per_image.len(),
                max_per_image: result.proposals_per_image.iter().copied().max().unwrap_or(0),
                total: result.proposals_per_image.iter().sum(),
                min_score: result.min_proposal_score,
                cap: params.max_per_image,
                score_threshold: params.score_threshold,
            };
            inputs.push(c);
            (report, Some(stats))
        }
        (None, None) => return Err(Error::validation("eval needs --checkpoint or --predictions")),
    };
    print!("{}", format_report(&report));
    let out = absolute(&a.out)?;
    write_json(&out, &EvalOutput { report, proposal_filter: stats })?;
    let recorded = EvalArgs {
        checkpoint: a.checkpoint.as_deref().map(absolute).transpose()?,
        predictions: a.predictions.as_deref().map(absolute).transpose()?,
        dataset: ds_path,
        out: out.clone(),
    };
    Ok(Record { args: args_value(Command::Eval(recorded))?, config_hash: None, seed: None, inputs, output: out, output_is_dir: false, extra_outputs: Vec::new() })
}

enum SampleSpec {
    Gaussian(f64),
    Images(PathBuf),
}

fn parse_spec(s: &str) -> Result<SampleSpec> {
    match s.strip_prefix("gaussian:") {
        Some(m) => m
            .parse()
            .map(SampleSpec::Gaussian)
            .map_err(|_| Error::validation(format!("bad Gaussian mean in {s:?}"))),
        None => Ok(SampleSpec::Images(absolute(Path::new(s))?)),
    }
}

fn verify_energy(a: VerifyEnergyArgs) -> Result<Record> {
    if a.dim == 0 || a.count == 0 || a.side == 0 {
        return Err(Error::validation("--dim, --count and --side must be positive"));
    }
    let mut inputs = Vec::new();
    let mut sets = Vec::new();
    for (label, spec) in [("source", &a.source), ("target", &a.target)] {
        let set = match parse_spec(spec)? {
            SampleSpec::Gaussian(mean) => gaussian_samples(a.count, a.dim, mean, &mut stream(a.seed, &format!("energy/{label}"))),
            SampleSpec::Images(p) => {
                let d = load_split(&p)?;
                inputs.push(p);
                flatten_images(d.samples.iter().map(|s| &s.image), a.side)
            }
        };
        sets.push(set);
    }
    let report = verify_reduction(&sets[0], &sets[1], a.lambda_max, a.n, &mut stream(a.seed, "energy/mix"))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let out = absolute(&a.out)?;
    write_json(&out, &report)?;
    let seed = a.seed;
    let recorded = VerifyEnergyArgs { out: out.clone(), ..a };
    Ok(Record {
        args: args_value(Command::VerifyEnergy(recorded))?,
        config_hash: None,
        seed: Some(seed),
        inputs,
        output: out,
        output_is_dir: false,
        extra_outputs: Vec::new(),
    })
}

/// File-system-safe stem for an image id.
fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn evidence(a: EvidenceArgs) -> Result<Record> {
    let c = absolute(&a.checkpoint)?;
    let d = absolute(&a.dataset)?;
    let ckpt = checkpoint::load(&c)?;
    let model = ckpt.instantiate()?;
    let ds = load_split(&d)?;
    let out = absolute(&a.out)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let n = a.limit.unwrap_or(ds.len()).min(ds.len());
    for s in &ds.samples[..n] {
        let map = evalviz::domain_evidence_map(&model, &ckpt.store, &s.image, s.domain)?;
        map.save_png(&out.join(format!("{}.png", safe_name(&s.image_id))))?;
    }
    println!("wrote {n} heatmaps to {}", out.display());
    let recorded = EvidenceArgs { checkpoint: c.clone(), dataset: d.clone(), out: out.clone(), ..a };
    Ok(Record {
        args: args_value(Command::Evidence(recorded))?,
        config_hash: None,
        seed: None,
        inputs: vec![c, d],
        output: out,
        output_is_dir: true,
        extra_outputs: Vec::new(),
    })
}

fn export_features(a: ExportFeaturesArgs) -> Result<Record> {
    let c = absolute(&a.checkpoint)?;
    let ckpt = checkpoint::load(&c)?;
    let model = ckpt.instantiate()?;
    let mut inputs = vec![c.clone()];
    let mut table = evalviz::FeatureTable::default();
    let mut datasets = Vec::new();
    for p in &a.dataset {
        let p = absolute(p)?;
        let ds = load_split(&p)?;
        let t = evalviz::export_features(&model, &ckpt.store, &ds.samples)?;
        table.rows.extend(t.rows);
        table.missing_region_rows += t.missing_region_rows;
        inputs.push(p.clone());
        datasets.push(p);
    }
    let out = absolute(&a.out)?;
    ensure_parent(&out)?;
    table.write_tsv(&out)?;
    println!(
        "wrote {} rows to {} ({} images without proposals have no region row)",
        table.rows.len(),
        out.display(),
        table.missing_region_rows
    );
    let pca = a.pca.as_deref().map(absolute).transpose()?;
    if let Some(p) = &pca {
        let mut text = String::from("image_id\tdomain\tkind\tpc1\tpc2\n");
        for kind in [FeatureKind::Pyramid, FeatureKind::Region] {
            let rows: Vec<_> = table.of_kind(kind).collect();
            if rows.len() < 2 {
                continue;
            }
            let points: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
            let proj = evalviz::pca_2d(&points)?;
            for (r, xy) in rows.iter().zip(&proj.projected) {
                let _ = writeln!(text, "{}\t{}\t{}\t{}\t{}", r.image_id, r.domain.as_str(), kind.as_str(), xy[0] as f32, xy[1] as f32);
            }
        }
        ensure_parent(p)?;
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    let extra_outputs = pca.iter().cloned().collect();
    let recorded = ExportFeaturesArgs { checkpoint: c, dataset: datasets, out: out.clone(), pca };
    Ok(Record { args: args_value(Command::ExportFeatures(recorded))?, config_hash: None, seed: None, inputs, output: out, output_is_dir: false, extra_outputs })
}

fn replay(a: ReplayArgs) -> Result<()> {
    let recorded = manifest::read(&a.manifest)?;
    if recorded.command == "replay" {
        return Err(Error::validation("a replay manifest cannot be replayed"));
    }
    let mut args = recorded.args.clone();
    if recorded.outputs.is_empty() {
        return Err(Error::format(None, "manifest lists no outputs"));
    }
    if let Some(o) = &a.out {
        let o = absolute(o)?;
        // side files such as the PCA table follow the main output
        if args.get("pca").is_some_and(|v| v.is_string()) {
            let pca: PathBuf = serde_json::from_value(args["pca"].clone())?;
            let name = pca.file_name().ok_or_else(|| Error::format(None, "recorded pca path has no file name"))?;
            args["pca"] = serde_json::to_value(o.parent().unwrap_or(Path::new("/")).join(name))?;
        }
        args["out"] = serde_json::to_value(o)?;
    }
    let tagged = serde_json::json!({ "command": recorded.command, "args": args });
    let command: Command = serde_json::from_value(tagged).map_err(|e| Error::format(None, format!("manifest arguments do not parse: {e}")))?;
    let mut now_paths: Vec<PathBuf> = vec![serde_json::from_value(args["out"].clone())?];
    if let Some(p) = args.get("pca").filter(|v| v.is_string()) {
        now_paths.push(serde_json::from_value(p.clone())?);
    }
    run(command)?;
    let mut mismatches = Vec::new();
    let mut reproduced = 0;
    for (i, original) in recorded.outputs.iter().enumerate() {
        let Some(path) = now_paths.get(i) else {
            mismatches.push(format!("{}: not produced", original.path.display()));
            continue;
        };
        let now = digest_path(path)?;
        for (file, digest) in &original.files {
            match now.files.get(file) {
                Some(d) if d == digest => reproduced += 1,
                Some(_) => mismatches.push(format!("{file}: content differs")),
                None => mismatches.push(format!("{file}: not produced")),
            }
        }
        for file in now.files.keys().filter(|f| !original.files.contains_key(*f)) {
            mismatches.push(format!("{file}: not in the recorded run"));
        }
    }
    if mismatches.is_empty() {
        println!("reproduced {reproduced} output files byte for byte");
        Ok(())
    } else {
        Err(Error::format(None, format!("replay differs from the recorded run: {}", mismatches.join("; "))))
    }
}
