//! Command implementations behind the `cpp` binary: stream generation,
//! encoder pretraining, continual runs, re-evaluation, ablation grids, and
//! store utilities. Every report embeds the fully-resolved configuration so
//! identical inputs and seeds produce byte-identical output files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use cpp_core::backbone::{BackboneConfig, BackboneWeights};
use cpp_core::cluster::jacobi_eigen_sym;
use cpp_core::engine::{
    pretrain_backbone, Engine, PretrainConfig, RunVariant, TaskEval, TrainConfig, THREADS_ENV,
};
use cpp_core::error::{CppError, Result};
use cpp_core::linalg::{l2_normalize, Matrix, Vector};
use cpp_core::metrics::{run_report, Protocol, RunSummary};
use cpp_core::store::PrototypeStore;
use cpp_core::streams::{
    generate, load_stream_file, preset, save_stream_file, MaterializedStream, TaskData,
    TaskStream,
};

#[derive(Parser, Debug)]
#[command(
    name = "cpp",
    version,
    about = "Continual-learning benchmark harness: prompt-tuned prototypes over a frozen encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Materialize a synthetic class-incremental stream file.
    Gen(GenArgs),
    /// Train and freeze an encoder on a pretext stream.
    Pretrain(PretrainArgs),
    /// Train every task in a stream, evaluating after each commit.
    Run(RunArgs),
    /// Re-evaluate a saved store against a stream.
    Eval(EvalArgs),
    /// Run several training variants on one stream and tabulate them.
    Compare(CompareArgs),
    /// Dump 2-d principal-component projections of embeddings and prototypes.
    Export(ExportArgs),
    /// Print a JSON summary of a prototype store file.
    StoreInspect(StoreInspectArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Named preset stream.
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON stream specification (alternative to --preset).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the stream seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output stream file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Pretext stream file.
    pub stream: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the pretraining seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output encoder file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Evaluation stream file.
    pub stream: PathBuf,
    /// Frozen encoder file.
    pub backbone: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training variant.
    #[arg(long, default_value = "cpp")]
    pub variant: String,
    /// Output prototype store file.
    #[arg(long)]
    pub store: PathBuf,
    /// Output JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Accuracy protocol to flag in the report.
    #[arg(long, default_value = "both")]
    pub protocol: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Evaluation stream file.
    pub stream: PathBuf,
    /// Frozen encoder file.
    pub backbone: PathBuf,
    /// Prototype store file.
    pub store: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Accuracy protocol to flag in the report.
    #[arg(long, default_value = "both")]
    pub protocol: String,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Evaluation stream file.
    pub stream: PathBuf,
    /// Frozen encoder file.
    pub backbone: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Variant to include (repeatable); defaults to the full grid.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// Output JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON-lines training log covering all variants.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Accuracy protocol to flag in the report.
    #[arg(long, default_value = "both")]
    pub protocol: String,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Evaluation stream file.
    pub stream: PathBuf,
    /// Frozen encoder file.
    pub backbone: PathBuf,
    /// Prototype store file.
    pub store: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StoreInspectArgs {
    /// Prototype store file.
    pub store: PathBuf,
    /// Optional JSON output file (summary always goes to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit code for an error, per the documented contract: missing
/// file 2, malformed file 3, bad configuration 4, numeric failure 5,
/// anything else 1.
pub fn exit_code(e: &CppError) -> i32 {
    match e {
        CppError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        CppError::Format(_) => 3,
        CppError::Config(_) => 4,
        CppError::Numeric(_) => 5,
        _ => 1,
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if v.trim().parse::<usize>().map(|n| n >= 1) != Ok(true) {
            return Err(CppError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            )));
        }
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Export(a) => cmd_export(a),
        Command::StoreInspect(a) => cmd_store_inspect(a),
    }
}

/// All hyperparameters a config file can carry, materialized with defaults
/// for everything the file leaves out.
#[derive(Clone, Debug)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            train: TrainConfig::default(),
            backbone: BackboneConfig {
                num_layers: 4,
                embed_dim: 64,
                num_heads: 4,
                seq_len: 16,
                mlp_hidden: 128,
            },
            pretrain: PretrainConfig::default(),
        }
    }
}

fn parse_key<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CppError::Config(format!("bad value '{value}' for key '{key}'")))
}

/// Flat key=value parser: `#` starts a comment, blank lines are skipped,
/// keys may appear once. Unknown keys are refused so typos cannot silently
/// fall back to defaults.
pub fn parse_config_text(text: &str) -> Result<FileConfig> {
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CppError::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if seen.insert(key.clone(), value).is_some() {
            return Err(CppError::Config(format!("duplicate key '{key}'")));
        }
    }
    let mut fc = FileConfig::default();
    for (key, value) in &seen {
        let v = value.as_str();
        match key.as_str() {
            "epochs" => fc.train.epochs = parse_key(key, v)?,
            "batch_size" => fc.train.batch_size = parse_key(key, v)?,
            "lr_init" => fc.train.lr_init = parse_key(key, v)?,
            "lr_final" => fc.train.lr_final = parse_key(key, v)?,
            "weight_decay" => fc.train.weight_decay = parse_key(key, v)?,
            "tau" => fc.train.tau = parse_key(key, v)?,
            "prompt_len" => fc.train.prompt_len = parse_key(key, v)?,
            "max_centroids" => fc.train.max_centroids = parse_key(key, v)?,
            "retrieval_depth" => fc.train.retrieval_depth = parse_key(key, v)?,
            "neck_hidden" => fc.train.neck_hidden = parse_key(key, v)?,
            "jitter" => fc.train.jitter = parse_key(key, v)?,
            "seed" => fc.train.seed = parse_key(key, v)?,
            "backbone_layers" => fc.backbone.num_layers = parse_key(key, v)?,
            "backbone_dim" => fc.backbone.embed_dim = parse_key(key, v)?,
            "backbone_heads" => fc.backbone.num_heads = parse_key(key, v)?,
            "backbone_seq" => fc.backbone.seq_len = parse_key(key, v)?,
            "backbone_mlp_hidden" => fc.backbone.mlp_hidden = parse_key(key, v)?,
            "pretrain_epochs" => fc.pretrain.epochs = parse_key(key, v)?,
            "pretrain_batch_size" => fc.pretrain.batch_size = parse_key(key, v)?,
            "pretrain_lr_init" => fc.pretrain.lr_init = parse_key(key, v)?,
            "pretrain_lr_final" => fc.pretrain.lr_final = parse_key(key, v)?,
            "pretrain_weight_decay" => fc.pretrain.weight_decay = parse_key(key, v)?,
            "pretrain_seed" => fc.pretrain.seed = parse_key(key, v)?,
            other => {
                return Err(CppError::Config(format!("unknown config key '{other}'")));
            }
        }
    }
    Ok(fc)
}

/// Load the config file (if any) and apply the --seed override. The seed
/// steers whichever operation the command performs, so it lands on both the
/// training and pretraining configs.
pub fn load_file_config(path: Option<&Path>, seed: Option<u64>) -> Result<FileConfig> {
    let mut fc = match path {
        Some(p) => {
            let mut text = String::new();
            File::open(p)?.read_to_string(&mut text)?;
            parse_config_text(&text)?
        }
        None => FileConfig::default(),
    };
    if let Some(s) = seed {
        fc.train.seed = s;
        fc.pretrain.seed = s;
    }
    Ok(fc)
}

fn resolved_neck_hidden(train: &TrainConfig, backbone: &BackboneConfig) -> usize {
    if train.neck_hidden == 0 {
        4 * backbone.embed_dim
    } else {
        train.neck_hidden
    }
}

fn train_config_value(train: &TrainConfig, backbone: &BackboneConfig) -> Value {
    let mut v = serde_json::to_value(train).expect("plain struct");
    v["neck_hidden"] = json!(resolved_neck_hidden(train, backbone));
    v
}

fn backbone_config_value(b: &BackboneConfig) -> Value {
    json!({
        "num_layers": b.num_layers,
        "embed_dim": b.embed_dim,
        "num_heads": b.num_heads,
        "seq_len": b.seq_len,
        "mlp_hidden": b.mlp_hidden,
    })
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn opt_path_str(p: &Option<PathBuf>) -> Value {
    match p {
        Some(p) => json!(path_str(p)),
        None => Value::Null,
    }
}

fn write_json_file(path: &Path, value: &Value) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CppError::Format(format!("report serialization: {e}")))?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn log_manifest(manifest: &Value) {
    println!(
        "resolved: {}",
        serde_json::to_string(manifest).expect("manifest is plain json")
    );
}

fn check_stream_encoder(stream: &MaterializedStream, config: &BackboneConfig) -> Result<()> {
    if stream.token_dim != config.embed_dim || stream.seq_tokens != config.seq_len {
        return Err(CppError::Config(format!(
            "stream emits {}x{} tokens but the encoder expects {}x{} \
             (backbone_seq x backbone_dim)",
            stream.seq_tokens, stream.token_dim, config.seq_len, config.embed_dim
        )));
    }
    Ok(())
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut spec: TaskStream = match (&a.preset, &a.config) {
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => {
            let f = BufReader::new(File::open(path)?);
            serde_json::from_reader(f)
                .map_err(|e| CppError::Format(format!("stream spec {}: {e}", path.display())))?
        }
        _ => {
            return Err(CppError::Config(
                "gen needs exactly one of --preset or --config".into(),
            ));
        }
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let data = generate(&spec)?;
    save_stream_file(&a.out, &spec, &data)?;
    let manifest = json!({
        "command": "gen",
        "preset": a.preset,
        "config_file": opt_path_str(&a.config),
        "seed": spec.seed,
        "out": path_str(&a.out),
    });
    log_manifest(&manifest);
    let samples: usize = data
        .tasks
        .iter()
        .map(|t| t.train.len() + t.test.len())
        .sum();
    println!(
        "wrote {} ({} tasks, {} classes, {} samples)",
        a.out.display(),
        data.tasks.len(),
        data.all_class_ids().len(),
        samples
    );
    Ok(())
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let fc = load_file_config(a.config.as_deref(), a.seed)?;
    let (_, stream) = load_stream_file(&a.stream)?;
    check_stream_encoder(&stream, &fc.backbone)?;
    let manifest = json!({
        "command": "pretrain",
        "config_file": opt_path_str(&a.config),
        "stream": path_str(&a.stream),
        "out": path_str(&a.out),
        "backbone_config": backbone_config_value(&fc.backbone),
        "pretrain": serde_json::to_value(&fc.pretrain).expect("plain struct"),
    });
    log_manifest(&manifest);
    let (backbone, report) = pretrain_backbone(fc.backbone.clone(), &stream, &fc.pretrain)?;
    backbone.save(&a.out)?;
    println!(
        "wrote {} (held-out accuracy {:.2}%, final loss {:.6})",
        a.out.display(),
        report.test_accuracy,
        report.final_loss
    );
    Ok(())
}

/// How a named variant maps onto an engine run: the objective, an optional
/// centroid-cap override, and whether the stream collapses to a single
/// task (the joint-training reference).
pub struct VariantPlan {
    pub name: &'static str,
    pub run: RunVariant,
    pub centroid_override: Option<usize>,
    pub joint: bool,
}

/// Every variant the harness knows, in default comparison order.
pub const VARIANT_NAMES: [&str; 8] = [
    "cpp",
    "baseline",
    "ce",
    "supcon",
    "cpl-with-uniform",
    "cpl-no-proto",
    "mean-centroid",
    "joint",
];

pub fn resolve_variant(name: &str) -> Result<VariantPlan> {
    let (canonical, run, centroid_override, joint) = match name {
        "cpp" => ("cpp", RunVariant::parse("cpp")?, None, false),
        "baseline" => ("baseline", RunVariant::Baseline, None, false),
        "ce" => ("ce", RunVariant::parse("ce")?, None, false),
        "supcon" => ("supcon", RunVariant::parse("supcon")?, None, false),
        "cpl-with-uniform" => (
            "cpl-with-uniform",
            RunVariant::parse("cpl-with-uniform")?,
            None,
            false,
        ),
        "cpl-no-proto" => (
            "cpl-no-proto",
            RunVariant::parse("cpl-no-proto")?,
            None,
            false,
        ),
        "mean-centroid" => ("mean-centroid", RunVariant::parse("cpp")?, Some(1), false),
        "joint" => ("joint", RunVariant::parse("cpp")?, None, true),
        other => {
            return Err(CppError::Config(format!(
                "unknown variant '{other}' (expected one of {})",
                VARIANT_NAMES.join(", ")
            )));
        }
    };
    Ok(VariantPlan {
        name: canonical,
        run,
        centroid_override,
        joint,
    })
}

/// Collapse every task into one, for the joint-training reference run.
pub fn merge_stream(s: &MaterializedStream) -> MaterializedStream {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for t in &s.tasks {
        train.extend(t.train.iter().cloned());
        test.extend(t.test.iter().cloned());
    }
    MaterializedStream {
        seed: s.seed,
        token_dim: s.token_dim,
        seq_tokens: s.seq_tokens,
        tasks: vec![TaskData {
            task_id: s.tasks.first().map(|t| t.task_id).unwrap_or(0),
            train,
            test,
        }],
    }
}

struct VariantOutcome {
    plan_name: &'static str,
    summary_row: Value,
    matrix_rows: Vec<Vec<f64>>,
}

fn run_one_variant(
    backbone: &BackboneWeights,
    stream: &MaterializedStream,
    train: &TrainConfig,
    plan: &VariantPlan,
    log: &mut dyn Write,
) -> Result<VariantOutcome> {
    let mut cfg = train.clone();
    if let Some(c) = plan.centroid_override {
        cfg.max_centroids = c;
    }
    let mut engine = Engine::new(backbone.clone(), cfg)?;
    let data = if plan.joint {
        merge_stream(stream)
    } else {
        stream.clone()
    };
    let outcome = engine.run_stream(&data, plan.run, log)?;
    let t = outcome.matrix.num_tasks();
    let forgetting = if t >= 2 {
        Some(outcome.matrix.forgetting(t)?)
    } else {
        None
    };
    let summary_row = json!({
        "variant": plan.name,
        "avg_acc_last": outcome.matrix.average_accuracy(t)?,
        "avg_acc_macro": outcome.matrix.macro_average()?,
        "forgetting_last": forgetting,
        "avg_forward_passes": outcome.avg_forward_passes,
        "extra_params_per_class": outcome.extra_params_per_class,
        "mean_final_energy": outcome.mean_final_energy,
    });
    Ok(VariantOutcome {
        plan_name: plan.name,
        summary_row,
        matrix_rows: outcome.matrix.rows().to_vec(),
    })
}

pub fn cmd_run(a: &RunArgs) -> Result<()> {
    let fc = load_file_config(a.config.as_deref(), a.seed)?;
    let (_, stream) = load_stream_file(&a.stream)?;
    let backbone = BackboneWeights::load(&a.backbone)?;
    check_stream_encoder(&stream, &backbone.config)?;
    let plan = resolve_variant(&a.variant)?;
    let protocol = Protocol::parse(&a.protocol)?;
    let manifest = json!({
        "command": "run",
        "config_file": opt_path_str(&a.config),
        "stream": path_str(&a.stream),
        "backbone": path_str(&a.backbone),
        "store_out": path_str(&a.store),
        "report_out": path_str(&a.out),
        "log_out": opt_path_str(&a.log),
        "variant": plan.name,
        "protocol": protocol.name(),
        "train": train_config_value(&fc.train, &backbone.config),
        "backbone_config": backbone_config_value(&backbone.config),
    });
    log_manifest(&manifest);

    let mut cfg = fc.train.clone();
    if let Some(c) = plan.centroid_override {
        cfg.max_centroids = c;
    }
    let mut engine = Engine::new(backbone, cfg)?;
    let data = if plan.joint {
        merge_stream(&stream)
    } else {
        stream
    };
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::sink()),
    };
    let outcome = engine.run_stream(&data, plan.run, log.as_mut())?;
    log.flush()?;
    engine.store().save(&a.store)?;

    let summary = RunSummary {
        matrix: outcome.matrix.clone(),
        avg_forward_passes: outcome.avg_forward_passes,
        extra_params_per_class: outcome.extra_params_per_class,
        mean_final_energy: Some(outcome.mean_final_energy),
        manifest,
    };
    let report = run_report(&summary, protocol)?;
    write_json_file(&a.out, &report)?;
    let t = outcome.matrix.num_tasks();
    println!(
        "wrote {} (avg acc last {:.2}%, macro {:.2}%)",
        a.out.display(),
        outcome.matrix.average_accuracy(t)?,
        outcome.matrix.macro_average()?
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let fc = load_file_config(a.config.as_deref(), None)?;
    let (_, stream) = load_stream_file(&a.stream)?;
    let backbone = BackboneWeights::load(&a.backbone)?;
    check_stream_encoder(&stream, &backbone.config)?;
    let store = PrototypeStore::load(&a.store)?;
    let protocol = Protocol::parse(&a.protocol)?;
    let manifest = json!({
        "command": "eval",
        "config_file": opt_path_str(&a.config),
        "stream": path_str(&a.stream),
        "backbone": path_str(&a.backbone),
        "store": path_str(&a.store),
        "report_out": path_str(&a.out),
        "protocol": protocol.name(),
        "train": train_config_value(&fc.train, &backbone.config),
        "backbone_config": backbone_config_value(&backbone.config),
    });
    log_manifest(&manifest);

    let engine = Engine::from_parts(backbone, store, fc.train.clone())?;
    let mut row = Vec::with_capacity(stream.tasks.len());
    let mut per_task = Vec::with_capacity(stream.tasks.len());
    let mut agg = TaskEval::default();
    for task in &stream.tasks {
        let ev = engine.evaluate(&task.test)?;
        row.push(ev.accuracy_pct());
        per_task.push(json!({
            "task_id": task.task_id,
            "accuracy": ev.accuracy_pct(),
            "mean_forward_passes": ev.mean_forward_passes(),
            "candidate_hit_rate": ev.hit_rate(),
        }));
        agg.merge(&ev);
    }
    let average = row.iter().sum::<f64>() / row.len().max(1) as f64;
    let report = json!({
        "row": row,
        "per_task": per_task,
        "average_accuracy": average,
        "mean_forward_passes": agg.mean_forward_passes(),
        "mean_min_energy": agg.mean_min_energy(),
        "manifest": manifest,
    });
    write_json_file(&a.out, &report)?;
    println!("wrote {} (average accuracy {:.2}%)", a.out.display(), average);
    Ok(())
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let fc = load_file_config(a.config.as_deref(), a.seed)?;
    let (_, stream) = load_stream_file(&a.stream)?;
    let backbone = BackboneWeights::load(&a.backbone)?;
    check_stream_encoder(&stream, &backbone.config)?;
    let protocol = Protocol::parse(&a.protocol)?;
    let names: Vec<String> = if a.variants.is_empty() {
        VARIANT_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        a.variants.clone()
    };
    // Fail fast on any unknown name before spending time on runs.
    let plans: Vec<VariantPlan> = names
        .iter()
        .map(|n| resolve_variant(n))
        .collect::<Result<_>>()?;
    let manifest = json!({
        "command": "compare",
        "config_file": opt_path_str(&a.config),
        "stream": path_str(&a.stream),
        "backbone": path_str(&a.backbone),
        "report_out": path_str(&a.out),
        "log_out": opt_path_str(&a.log),
        "variants": plans.iter().map(|p| p.name).collect::<Vec<_>>(),
        "protocol": protocol.name(),
        "train": train_config_value(&fc.train, &backbone.config),
        "backbone_config": backbone_config_value(&backbone.config),
    });
    log_manifest(&manifest);

    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::sink()),
    };
    let mut rows = Vec::with_capacity(plans.len());
    let mut matrices = serde_json::Map::new();
    for plan in &plans {
        let out = run_one_variant(&backbone, &stream, &fc.train, plan, log.as_mut())?;
        println!(
            "{:<18} acc_last {:>6.2}%  macro {:>6.2}%",
            out.plan_name,
            out.summary_row["avg_acc_last"].as_f64().unwrap_or(f64::NAN),
            out.summary_row["avg_acc_macro"].as_f64().unwrap_or(f64::NAN),
        );
        matrices.insert(
            out.plan_name.to_string(),
            serde_json::to_value(&out.matrix_rows).expect("plain numbers"),
        );
        rows.push(out.summary_row);
    }
    log.flush()?;
    let report = json!({
        "table": rows,
        "per_task_rows": Value::Object(matrices),
        "manifest": manifest,
    });
    write_json_file(&a.out, &report)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Mean and the two leading principal directions of a point set, signs
/// fixed so the largest-magnitude coordinate of each direction is positive.
fn pca_basis(points: &[Vector], dim: usize) -> Result<(Vector, Vector, Vector)> {
    if points.is_empty() {
        return Err(CppError::EmptyInput("nothing to project".into()));
    }
    if dim < 2 {
        return Err(CppError::Config(
            "2-d projection needs at least 2 embedding dimensions".into(),
        ));
    }
    let n = points.len() as f64;
    let mut mean = Vector::zeros(dim);
    for p in points {
        for (m, v) in mean.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *m += v / n;
        }
    }
    let mut cov = Matrix::zeros(dim, dim);
    for p in points {
        let c: Vec<f64> = p
            .as_slice()
            .iter()
            .zip(mean.as_slice())
            .map(|(v, m)| v - m)
            .collect();
        for i in 0..dim {
            for j in 0..dim {
                cov.set(i, j, cov.get(i, j) + c[i] * c[j] / n);
            }
        }
    }
    let (_, vecs) = jacobi_eigen_sym(&cov)?;
    let take = |col: usize| {
        let mut v: Vec<f64> = (0..dim).map(|r| vecs.get(r, col)).collect();
        let lead = v
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        Vector::from_vec(v)
    };
    // Eigenvalues come back ascending; the last two columns span the
    // leading plane.
    let v1 = take(dim - 1);
    let v2 = take(dim - 2);
    Ok((mean, v1, v2))
}

pub fn cmd_export(a: &ExportArgs) -> Result<()> {
    let (_, stream) = load_stream_file(&a.stream)?;
    let backbone = BackboneWeights::load(&a.backbone)?;
    check_stream_encoder(&stream, &backbone.config)?;
    let store = PrototypeStore::load(&a.store)?;
    let manifest = json!({
        "command": "export",
        "stream": path_str(&a.stream),
        "backbone": path_str(&a.backbone),
        "store": path_str(&a.store),
        "out": path_str(&a.out),
    });
    log_manifest(&manifest);

    struct Row {
        kind: &'static str,
        task_id: u32,
        class_id: u32,
        index: usize,
        point: Vector,
    }
    let mut rows: Vec<Row> = Vec::new();
    for task in &stream.tasks {
        let prompt = store.prompt(task.task_id).ok_or_else(|| {
            CppError::Key(format!("store has no prompt for task {}", task.task_id))
        })?;
        for (i, s) in task.test.iter().enumerate() {
            let (raw, _) = backbone.encode(&s.tokens, None, false)?;
            rows.push(Row {
                kind: "raw",
                task_id: task.task_id,
                class_id: s.label,
                index: i,
                point: l2_normalize(&raw)?,
            });
            let (fine, _) = backbone.encode(&s.tokens, Some(prompt), false)?;
            rows.push(Row {
                kind: "prompted",
                task_id: task.task_id,
                class_id: s.label,
                index: i,
                point: l2_normalize(&fine)?,
            });
        }
    }
    for rec in store.records() {
        for (i, c) in rec.key_centroids.iter().enumerate() {
            rows.push(Row {
                kind: "key_centroid",
                task_id: rec.task_id,
                class_id: rec.class_id,
                index: i,
                point: c.clone(),
            });
        }
        for (i, c) in rec.value_centroids.iter().enumerate() {
            rows.push(Row {
                kind: "value_centroid",
                task_id: rec.task_id,
                class_id: rec.class_id,
                index: i,
                point: c.clone(),
            });
        }
    }
    let points: Vec<Vector> = rows.iter().map(|r| r.point.clone()).collect();
    let (mean, v1, v2) = pca_basis(&points, backbone.config.embed_dim)?;
    let mut f = BufWriter::new(File::create(&a.out)?);
    writeln!(f, "kind,task_id,class_id,index,pc1,pc2")?;
    for r in &rows {
        let centered: Vec<f64> = r
            .point
            .as_slice()
            .iter()
            .zip(mean.as_slice())
            .map(|(v, m)| v - m)
            .collect();
        let c = Vector::from_vec(centered);
        writeln!(
            f,
            "{},{},{},{},{:.17e},{:.17e}",
            r.kind,
            r.task_id,
            r.class_id,
            r.index,
            c.dot(&v1),
            c.dot(&v2)
        )?;
    }
    f.flush()?;
    println!("wrote {} ({} rows)", a.out.display(), rows.len());
    Ok(())
}

pub fn cmd_store_inspect(a: &StoreInspectArgs) -> Result<()> {
    let store = PrototypeStore::load(&a.store)?;
    let mut v = store.inspect();
    let checksum = store.checksum()?;
    let hex: String = checksum.iter().map(|b| format!("{b:02x}")).collect();
    v["checksum_sha256"] = json!(hex);
    let text = serde_json::to_string_pretty(&v)
        .map_err(|e| CppError::Format(format!("summary serialization: {e}")))?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_json_file(out, &v)?;
    }
    Ok(())
}
