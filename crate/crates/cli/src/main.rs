//! Command-line front end: dataset generation, prior building, training,
//! inference, evaluation, and mesh export. All computation lives in the
//! library; this binary parses arguments, wires files to module calls, and
//! writes a resolved-config snapshot next to every output for provenance.
//!
//! Exit codes: 0 success, 1 runtime failure (single-line message on stderr),
//! 2 usage error. `PARTFORGE_THREADS` caps the worker pool (0 = auto).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use partforge::metrics::{
    aggregate, chamfer, instance_union, map_at_25, mask_to_visible, part_iou,
    DetectionPrediction, DetectionTarget, PartScore,
};
use partforge::model::{InferredTree, Model, ModelConfig, ParamStore};
use partforge::priorbank::{build_prior_bank, PriorBank};
use partforge::synthdata::{
    generate_dataset, load_dataset, save_dataset, seed_string, CorruptionParams, ObjectSample,
    SampleRecord, Split,
};
use partforge::taxonomy::Taxonomy;
use partforge::trainer::{train, Stage, TrainConfig, TrainError, TrainState};
use partforge::voxelgrid::{write_obj, OccupancyGrid};

#[derive(Parser)]
#[command(
    name = "partforge",
    version,
    about = "Semantic part completion for voxelized object scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of voxelized furniture objects
    GenData(GenDataArgs),
    /// Cluster train-split part masks into a geometric prior bank
    BuildPriors(BuildPriorsArgs),
    /// Train the part completion model on a generated dataset
    Train(TrainArgs),
    /// Complete partial scans into per-part masks and a tree report
    Infer(InferArgs),
    /// Score predicted part decompositions against ground truth
    Eval(EvalArgs),
    /// Convert an occupancy grid to a Wavefront OBJ mesh
    ExportMesh(ExportMeshArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Number of objects to generate
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid resolution per side (16, 32, or 64)
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Comma-separated class names; default is every class
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Corrupt scans into partial inputs (crop, part drop, dropout)
    #[arg(long)]
    corrupt: bool,
    /// Probability of removing everything behind a random crop plane
    #[arg(long, default_value_t = CorruptionParams::default().crop_probability)]
    crop_probability: f64,
    /// Maximum cropped fraction of the object's extent
    #[arg(long, default_value_t = CorruptionParams::default().crop_depth)]
    crop_depth: f64,
    /// Per-part probability of removal from the scan
    #[arg(long, default_value_t = CorruptionParams::default().part_drop_probability)]
    part_drop_probability: f64,
    /// Per-voxel dropout rate
    #[arg(long, default_value_t = CorruptionParams::default().dropout_rate)]
    dropout_rate: f64,
}

#[derive(Args)]
struct BuildPriorsArgs {
    /// Dataset directory containing manifest.toml
    #[arg(long)]
    data: PathBuf,
    /// Output bank file (.pfpb)
    #[arg(long)]
    out: PathBuf,
    /// Clusters per part type
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing manifest.toml
    #[arg(long)]
    data: PathBuf,
    /// Prior bank file (.pfpb)
    #[arg(long)]
    priors: PathBuf,
    /// Output directory for checkpoints and the metric log
    #[arg(long)]
    out: PathBuf,
    /// TOML training config; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    jitter_fraction: Option<f64>,
    /// Replace prior composition with a direct mask decoder
    #[arg(long)]
    no_priors: bool,
    /// Disable message passing between part nodes
    #[arg(long)]
    no_message_passing: bool,
    /// Skip the refiner; the final mask is the coarse mask
    #[arg(long)]
    no_refine: bool,
    /// The refiner output replaces the coarse mask instead of refining it
    #[arg(long)]
    refine_absolute: bool,
    /// Continue from state.pfts and latest.pfck in --out
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Train output directory holding model.toml and checkpoints
    #[arg(long)]
    model: PathBuf,
    /// Prior bank file (.pfpb)
    #[arg(long)]
    priors: PathBuf,
    /// Single scan grid (.pfvg); requires --class
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    scan: Option<PathBuf>,
    /// Object class of the scan (e.g. chair)
    #[arg(long, requires = "scan")]
    class: Option<String>,
    /// Dataset directory: infer every sample into per-id subdirectories
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Load latest.pfck instead of best.pfck
    #[arg(long)]
    latest: bool,
    /// Also export OBJ meshes of each part and the completed object
    #[arg(long)]
    obj: bool,
    /// Occupancy threshold for voxel counts and meshes
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of per-sample prediction subdirectories (from infer --data)
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth dataset directory containing manifest.toml
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Completion)]
    mode: EvalMode,
    /// Also write the report as TOML to this path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Occupancy threshold for binarizing predicted masks
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    /// Full predicted masks against complete ground-truth parts
    Completion,
    /// Both sides restricted to geometry visible in the input scan
    Segmentation,
    /// Whole-object union masks scored as detections (mAP@25)
    Instance,
}

#[derive(Args)]
struct ExportMeshArgs {
    /// Occupancy grid to mesh (.pfvg)
    #[arg(long)]
    grid: PathBuf,
    /// Output OBJ path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

fn main() {
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", render_error(&e));
        std::process::exit(1);
    }
}

/// One line, machine-parseable: join the context chain, skipping causes whose
/// text the outer message already embeds, and strip newlines.
fn render_error(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
    }
    msg.replace('\n', "; ")
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("PARTFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("PARTFORGE_THREADS must be a non-negative integer, got '{raw}'"))?;
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::BuildPriors(args) => build_priors(args),
        Command::Train(args) => train_cmd(args),
        Command::Infer(args) => infer_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::ExportMesh(args) => export_mesh(args),
    }
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Serialize)]
struct GenSnapshot {
    count: usize,
    #[serde(with = "seed_string")]
    seed: u64,
    resolution: usize,
    classes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    corruption: Option<CorruptionParams>,
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let taxonomy = Taxonomy::builtin();
    if !matches!(args.resolution, 16 | 32 | 64) {
        bail!("resolution {} is not one of 16/32/64", args.resolution);
    }
    if args.count == 0 {
        bail!("count must be at least 1");
    }
    let classes: Vec<usize> = if args.classes.is_empty() {
        (0..taxonomy.class_count()).collect()
    } else {
        args.classes
            .iter()
            .map(|name| class_by_name(&taxonomy, name))
            .collect::<Result<_>>()?
    };
    let corruption = args.corrupt.then(|| CorruptionParams {
        crop_probability: args.crop_probability,
        crop_depth: args.crop_depth,
        part_drop_probability: args.part_drop_probability,
        dropout_rate: args.dropout_rate,
        seed: args.seed,
    });
    if let Some(c) = &corruption {
        c.validate().map_err(|e| anyhow!("corruption: {e}"))?;
    }
    let samples = generate_dataset(
        &classes,
        args.count,
        args.resolution,
        args.seed,
        corruption.as_ref(),
        &taxonomy,
    );
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = save_dataset(&args.out, &samples, &taxonomy, args.seed)?;
    write_snapshot(
        &args.out.join("gen-config.toml"),
        &GenSnapshot {
            count: args.count,
            seed: args.seed,
            resolution: args.resolution,
            classes: classes
                .iter()
                .map(|&c| taxonomy.class_name(c).to_string())
                .collect(),
            corruption,
        },
    )?;
    let (mut tr, mut va, mut te) = (0usize, 0usize, 0usize);
    for s in &manifest.samples {
        match s.split {
            Split::Train => tr += 1,
            Split::Val => va += 1,
            Split::Test => te += 1,
        }
    }
    println!(
        "wrote {} samples (train {tr} / val {va} / test {te}) to {}",
        manifest.samples.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// build-priors

#[derive(Serialize)]
struct PriorsSnapshot {
    k: usize,
    #[serde(with = "seed_string")]
    seed: u64,
    resolution: usize,
    train_samples: usize,
    masks: usize,
    bank_hash: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    omitted_types: Vec<String>,
}

fn build_priors(args: BuildPriorsArgs) -> Result<()> {
    let taxonomy = Taxonomy::builtin();
    let (manifest, samples) = load_dataset(&args.data)?;
    check_taxonomy(&taxonomy, &manifest.taxonomy_hash)?;
    let mut masks: BTreeMap<usize, Vec<OccupancyGrid>> = BTreeMap::new();
    let mut train_samples = 0usize;
    for (record, sample) in manifest.samples.iter().zip(&samples) {
        if !matches!(record.split, Split::Train) {
            continue;
        }
        train_samples += 1;
        for part in &sample.tree.parts {
            masks.entry(part.part_type).or_default().push(part.mask.clone());
        }
    }
    if masks.is_empty() {
        bail!("no train-split part masks in {}", args.data.display());
    }
    let mask_count: usize = masks.values().map(Vec::len).sum();
    let (bank, _) = build_prior_bank(&masks, args.k, args.seed)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    bank.save(&args.out)?;
    write_snapshot(
        &args.out.with_extension("toml"),
        &PriorsSnapshot {
            k: args.k,
            seed: args.seed,
            resolution: bank.resolution(),
            train_samples,
            masks: mask_count,
            bank_hash: bank.content_hash_hex(),
            omitted_types: bank
                .omitted_types()
                .map(|t| taxonomy.part_name(t).to_string())
                .collect(),
        },
    )?;
    println!(
        "clustered {mask_count} masks from {train_samples} samples into {} priors across {} part types -> {}",
        bank.total_priors(),
        bank.part_types().count(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn train_cmd(args: TrainArgs) -> Result<()> {
    let taxonomy = Taxonomy::builtin();
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = args.pretrain_epochs {
        config.pretrain_epochs = v;
    }
    if let Some(v) = args.finetune_epochs {
        config.finetune_epochs = v;
    }
    if let Some(v) = args.resolution {
        config.resolution = v;
    }
    if let Some(v) = args.jitter_fraction {
        config.jitter_fraction = v;
    }
    config.ablation.no_priors |= args.no_priors;
    config.ablation.no_message_passing |= args.no_message_passing;
    config.ablation.no_refine |= args.no_refine;
    config.ablation.refine_absolute |= args.refine_absolute;
    config.validate()?;

    let (manifest, samples) = load_dataset(&args.data)?;
    check_taxonomy(&taxonomy, &manifest.taxonomy_hash)?;
    if manifest.resolution != config.resolution {
        bail!(
            "dataset resolution {} but config resolution {}",
            manifest.resolution,
            config.resolution
        );
    }
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for (record, sample) in manifest.samples.iter().zip(samples) {
        match record.split {
            Split::Train => train_set.push(sample),
            Split::Val => val_set.push(sample),
            Split::Test => {}
        }
    }
    let bank = PriorBank::load(&args.priors)?;
    let model_config = ModelConfig {
        resolution: config.resolution,
        taxonomy_hash: taxonomy.content_hash_hex(),
        prior_k: bank.k(),
        bank_hash: bank.content_hash_hex(),
        loss_weights: config.loss_weights.clone(),
        ablation: config.ablation.clone(),
    };

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let config_path = args.out.join("train-config.toml");
    let model_cfg_path = args.out.join("model.toml");
    let metrics_path = args.out.join("metrics.toml");
    let latest_path = args.out.join("latest.pfck");
    let best_path = args.out.join("best.pfck");
    let state_path = args.out.join("state.pfts");

    let (mut model, mut state) = if args.resume {
        let saved = TrainConfig::load(&config_path)?;
        if saved != config {
            bail!(
                "--resume config differs from the run's {}; pass identical settings",
                config_path.display()
            );
        }
        let saved_model = ModelConfig::load(&model_cfg_path)?;
        if saved_model != model_config {
            bail!("--resume model setup differs from {}", model_cfg_path.display());
        }
        let params = ParamStore::load(&latest_path)?;
        let state = TrainState::load(&state_path)?;
        (Model::from_parts(model_config, &taxonomy, &bank, params)?, state)
    } else {
        config.save(&config_path)?;
        model_config.save(&model_cfg_path)?;
        fs::write(&metrics_path, "")
            .with_context(|| format!("creating {}", metrics_path.display()))?;
        (
            Model::new(model_config, &taxonomy, &bank, config.seed)?,
            TrainState::new(),
        )
    };

    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let total = config.total_epochs();
    let report = train(
        &mut model,
        &bank,
        &train_set,
        &val_set,
        &config,
        &mut state,
        |log, params, st| {
            metrics_file
                .write_all(log.to_toml_block().as_bytes())
                .and_then(|_| metrics_file.flush())
                .map_err(|e| TrainError::Io {
                    path: metrics_path.clone(),
                    source: e,
                })?;
            save_atomic(&latest_path, &params.to_bytes())?;
            save_atomic(&state_path, &st.to_bytes())?;
            if st.best_epoch == Some(log.epoch) {
                save_atomic(&best_path, &params.to_bytes())?;
            }
            println!(
                "epoch {:>3}/{} [{}] lr {:.6}  train {:.4}  val {:.4}",
                log.epoch + 1,
                total,
                stage_name(log.stage),
                log.lr,
                log.train.total,
                log.val.total
            );
            Ok(())
        },
    )?;
    match state.best_epoch {
        Some(best) => println!(
            "done: {} epochs this run; best val {:.6} at epoch {}; checkpoints in {}",
            report.logs.len(),
            state.best_val,
            best + 1,
            args.out.display()
        ),
        None => println!("done: schedule already complete, nothing to run"),
    }
    Ok(())
}

/// Write-temp-then-rename so an interrupted run never leaves a torn file.
fn save_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    let io_err = |e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    }
}

// ---------------------------------------------------------------------------
// infer

#[derive(Serialize, Deserialize)]
struct InferReport {
    class: usize,
    class_name: String,
    rotation_bin: usize,
    rotation_degrees: f64,
    confidence: f64,
    parts: Vec<InferPartRecord>,
    /// Adjacent part pairs by index into `parts`, upper triangle.
    adjacency: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct InferPartRecord {
    /// Decoder slot the part came from.
    node: usize,
    part_type: usize,
    name: String,
    existence: f64,
    /// Voxels above the report threshold in the final mask.
    voxels: usize,
    /// Mask file, relative to the report's directory.
    mask: String,
}

#[derive(Serialize)]
struct InferSnapshot {
    model: String,
    priors: String,
    checkpoint: String,
    threshold: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    scan: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<String>,
}

fn infer_cmd(args: InferArgs) -> Result<()> {
    let taxonomy = Taxonomy::builtin();
    let bank = PriorBank::load(&args.priors)?;
    let model_config = ModelConfig::load(&args.model.join("model.toml"))?;
    let checkpoint = args
        .model
        .join(if args.latest { "latest.pfck" } else { "best.pfck" });
    let params = ParamStore::load(&checkpoint)?;
    let model = Model::from_parts(model_config, &taxonomy, &bank, params)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_snapshot(
        &args.out.join("infer-config.toml"),
        &InferSnapshot {
            model: args.model.display().to_string(),
            priors: args.priors.display().to_string(),
            checkpoint: checkpoint.display().to_string(),
            threshold: args.threshold,
            scan: args.scan.as_ref().map(|p| p.display().to_string()),
            class: args.class.clone(),
            data: args.data.as_ref().map(|p| p.display().to_string()),
        },
    )?;

    match (&args.scan, &args.data) {
        (Some(scan_path), None) => {
            let class_name = args
                .class
                .as_ref()
                .ok_or_else(|| anyhow!("--class is required with --scan"))?;
            let class = class_by_name(&taxonomy, class_name)?;
            let scan = OccupancyGrid::load(scan_path)
                .with_context(|| format!("reading {}", scan_path.display()))?;
            let tree = model.infer(&taxonomy, &bank, &scan, class)?;
            write_inference(&args.out, &tree, &taxonomy, args.threshold, args.obj)?;
            println!(
                "{}: {} parts, orientation bin {}",
                scan_path.display(),
                tree.parts.len(),
                tree.rotation.index()
            );
        }
        (None, Some(data)) => {
            let (manifest, samples) = load_dataset(data)?;
            if manifest.resolution != model.config.resolution {
                bail!(
                    "dataset resolution {} but model resolution {}",
                    manifest.resolution,
                    model.config.resolution
                );
            }
            for (record, sample) in manifest.samples.iter().zip(&samples) {
                let tree = model.infer(&taxonomy, &bank, &sample.scan, sample.class)?;
                let dir = args.out.join(&record.id);
                fs::create_dir_all(&dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                write_inference(&dir, &tree, &taxonomy, args.threshold, args.obj)?;
                println!(
                    "{}: {} parts, orientation bin {}",
                    record.id,
                    tree.parts.len(),
                    tree.rotation.index()
                );
            }
        }
        _ => bail!("exactly one of --scan or --data is required"),
    }
    Ok(())
}

fn write_inference(
    dir: &Path,
    tree: &InferredTree,
    taxonomy: &Taxonomy,
    threshold: f32,
    obj: bool,
) -> Result<()> {
    let mut parts = Vec::new();
    for (i, part) in tree.parts.iter().enumerate() {
        let name = taxonomy.part_name(part.part_type);
        let file = format!("part{i:02}_{name}.pfvg");
        part.mask.save(&dir.join(&file))?;
        if obj {
            write_mesh(&dir.join(format!("part{i:02}_{name}.obj")), &part.mask, threshold)?;
        }
        parts.push(InferPartRecord {
            node: part.node,
            part_type: part.part_type,
            name: name.to_string(),
            existence: part.existence,
            voxels: count_over(&part.mask, threshold),
            mask: file,
        });
    }
    let mut adjacency = Vec::new();
    for i in 0..tree.adjacency.len() {
        for j in (i + 1)..tree.adjacency.len() {
            if tree.adjacency[i][j] {
                adjacency.push([i, j]);
            }
        }
    }
    let report = InferReport {
        class: tree.class,
        class_name: taxonomy.class_name(tree.class).to_string(),
        rotation_bin: tree.rotation.index(),
        rotation_degrees: tree.rotation.degrees(),
        confidence: tree.confidence,
        parts,
        adjacency,
    };
    let path = dir.join("report.toml");
    fs::write(&path, toml::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", path.display()))?;
    if obj && !tree.parts.is_empty() {
        let masks: Vec<OccupancyGrid> = tree.parts.iter().map(|p| p.mask.clone()).collect();
        write_mesh(&dir.join("completed.obj"), &instance_union(&masks, threshold), 0.5)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Serialize)]
struct EvalSnapshot {
    pred: String,
    gt: String,
    mode: String,
    threshold: f32,
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let taxonomy = Taxonomy::builtin();
    let (manifest, samples) = load_dataset(&args.gt)?;
    check_taxonomy(&taxonomy, &manifest.taxonomy_hash)?;
    let mut scores = Vec::new();
    let mut detections = Vec::new();
    let mut targets = Vec::new();
    for (record, sample) in manifest.samples.iter().zip(&samples) {
        let pred_dir = args.pred.join(&record.id);
        let report_path = pred_dir.join("report.toml");
        let report: InferReport = toml::from_str(
            &fs::read_to_string(&report_path)
                .with_context(|| format!("reading {}", report_path.display()))?,
        )
        .with_context(|| format!("parsing {}", report_path.display()))?;
        let pred_masks: Vec<(usize, OccupancyGrid)> = report
            .parts
            .iter()
            .map(|p| {
                let path = pred_dir.join(&p.mask);
                let grid = OccupancyGrid::load(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Ok((p.part_type, grid))
            })
            .collect::<Result<_>>()?;
        match args.mode {
            EvalMode::Completion => {
                score_parts(&mut scores, record, sample, &pred_masks, None, args.threshold)
            }
            EvalMode::Segmentation => score_parts(
                &mut scores,
                record,
                sample,
                &pred_masks,
                Some(&sample.scan),
                args.threshold,
            ),
            EvalMode::Instance => {
                let masks: Vec<OccupancyGrid> =
                    pred_masks.into_iter().map(|(_, g)| g).collect();
                let union = if masks.is_empty() {
                    OccupancyGrid::zeros_binary(manifest.resolution)
                } else {
                    instance_union(&masks, args.threshold)
                };
                detections.push(DetectionPrediction {
                    class: record.class,
                    mask: union,
                    confidence: report.confidence,
                });
                targets.push(DetectionTarget {
                    class: record.class,
                    mask: sample.complete_mask(),
                });
                Ok(())
            }
        }?;
    }
    let report = match args.mode {
        EvalMode::Instance => {
            let mut r = aggregate(&[], &taxonomy);
            r.map_at_25 = Some(map_at_25(&detections, &targets, &taxonomy));
            r
        }
        _ => aggregate(&scores, &taxonomy),
    };
    print!("{}", report.render_text());
    if let Some(out) = &args.out {
        fs::write(out, report.to_toml_string())
            .with_context(|| format!("writing {}", out.display()))?;
        let stem = out.file_stem().unwrap_or_default().to_string_lossy();
        write_snapshot(
            &out.with_file_name(format!("{stem}-config.toml")),
            &EvalSnapshot {
                pred: args.pred.display().to_string(),
                gt: args.gt.display().to_string(),
                mode: format!("{:?}", args.mode).to_lowercase(),
                threshold: args.threshold,
            },
        )?;
    }
    Ok(())
}

/// Scores one object: the union of predicted masks of each ground-truth part
/// type against the union of its ground-truth masks. Types the model never
/// predicted score against an empty grid (IoU 0, maximal CD). In visible
/// mode both sides are first intersected with the scan, and types with no
/// visible ground-truth voxels are skipped.
fn score_parts(
    scores: &mut Vec<PartScore>,
    record: &SampleRecord,
    sample: &ObjectSample,
    pred_masks: &[(usize, OccupancyGrid)],
    visible: Option<&OccupancyGrid>,
    threshold: f32,
) -> Result<()> {
    let resolution = sample.scan.resolution();
    let mut gt_by_type: BTreeMap<usize, Vec<OccupancyGrid>> = BTreeMap::new();
    for part in &sample.tree.parts {
        gt_by_type.entry(part.part_type).or_default().push(part.mask.clone());
    }
    let mut pred_by_type: BTreeMap<usize, Vec<OccupancyGrid>> = BTreeMap::new();
    for (t, mask) in pred_masks {
        if mask.resolution() != resolution {
            bail!(
                "prediction for {} is {}^3 but ground truth is {}^3",
                record.id,
                mask.resolution(),
                resolution
            );
        }
        pred_by_type.entry(*t).or_default().push(mask.clone());
    }
    for (part_type, gt_masks) in gt_by_type {
        let mut gt = instance_union(&gt_masks, 0.5);
        let mut pred = match pred_by_type.get(&part_type) {
            Some(masks) => instance_union(masks, threshold),
            None => OccupancyGrid::zeros_binary(resolution),
        };
        if let Some(scan) = visible {
            gt = mask_to_visible(&gt, scan, 0.5);
            pred = mask_to_visible(&pred, scan, 0.5);
            if gt.values().iter().all(|&v| v <= 0.5) {
                continue;
            }
        }
        scores.push(PartScore {
            object: record.id.clone(),
            class: record.class,
            part_type,
            iou: part_iou(&pred, &gt, 0.5)?,
            cd: chamfer(&pred, &gt, 0.5)?,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export-mesh

fn export_mesh(args: ExportMeshArgs) -> Result<()> {
    let grid = OccupancyGrid::load(&args.grid)
        .with_context(|| format!("reading {}", args.grid.display()))?;
    write_mesh(&args.out, &grid, args.threshold)?;
    println!(
        "wrote {} ({} voxels over {})",
        args.out.display(),
        count_over(&grid, args.threshold),
        args.threshold
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared helpers

fn class_by_name(taxonomy: &Taxonomy, name: &str) -> Result<usize> {
    taxonomy.class_index(name).ok_or_else(|| {
        let known: Vec<&str> = (0..taxonomy.class_count())
            .map(|c| taxonomy.class_name(c))
            .collect();
        anyhow!("unknown class '{name}'; expected one of {}", known.join(", "))
    })
}

fn check_taxonomy(taxonomy: &Taxonomy, manifest_hash: &str) -> Result<()> {
    if taxonomy.content_hash_hex() != manifest_hash {
        bail!("dataset was generated against a different part taxonomy");
    }
    Ok(())
}

fn write_snapshot<T: Serialize>(path: &Path, snapshot: &T) -> Result<()> {
    let text = toml::to_string_pretty(snapshot)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_mesh(path: &Path, grid: &OccupancyGrid, threshold: f32) -> Result<()> {
    let file = fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut writer = std::io::BufWriter::new(file);
    write_obj(grid, threshold, &mut writer)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn count_over(grid: &OccupancyGrid, threshold: f32) -> usize {
    grid.values().iter().filter(|&&v| v > threshold).count()
}
