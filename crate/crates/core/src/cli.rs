//! Command-line driver.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CfcbmError, Result};
use crate::evaluator::{
    activation_csv, alignment_csv, class_concept_summary, csv_field, emit_report, ensure_dir,
    evaluate, example_indicator_for_matching, infer, report_from_inference, write_file, write_json,
    EvaluationReport, ACTIVATION_FILE, ALIGNMENT_FILE, CONFIG_FILE, METRIC_COLUMNS,
};
use crate::hierarchy::ConceptHierarchy;
use crate::model::Mode;
use crate::store::{load_dataset, load_header, write_dataset, EmbeddingDataset};
use crate::synthetic::{planted, PlantedSpec};
use crate::trainer::{
    load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, TrainHistory, TrainState,
};

pub const CHECKPOINT_FILE: &str = "model.cfck";
pub const HISTORY_JSON: &str = "history.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const VARIABILITY_FILE: &str = "variability.csv";
pub const VARIABILITY_SUMMARY: &str = "variability_summary.json";

#[derive(Debug, Parser)]
#[command(
    name = "cfcbm",
    version,
    about = "Coarse-to-fine concept bottleneck training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model (or resume from --checkpoint) and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write report files.
    Eval(EvalArgs),
    /// Write alignment and per-class activation tables for a checkpoint.
    Analyze(EvalArgs),
    /// Train and evaluate once per patch count.
    AblatePatches(AblateArgs),
    /// Train and evaluate once per seed; report mean and standard deviation.
    Variability(VariabilityArgs),
    /// Print the header of an embedding file.
    Inspect(InspectArgs),
    /// Write a planted synthetic dataset and its manifest.
    Synth(SynthArgs),
}

/// Training hyperparameters; each one overrides the config file.
#[derive(Debug, Default, Args)]
struct TrainFlags {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Inference threshold on posterior means.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "alpha-h")]
    alpha_h: Option<f64>,
    #[arg(long = "alpha-l")]
    alpha_l: Option<f64>,
    /// joint, high-only, low-only or no-discovery.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Relaxed-sampler temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Learning-rate multiplier for the amortization matrices.
    #[arg(long = "lr-multiplier")]
    lr_multiplier: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint (file or directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Expected patch count.
    #[arg(long)]
    patches: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate under this mode instead of the one trained with.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Dataset path template; `{P}` is replaced by the patch count.
    #[arg(long)]
    data: Option<String>,
    /// Optional evaluation dataset template; defaults to --data.
    #[arg(long = "eval-data")]
    eval_data: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated patch counts.
    #[arg(long, value_delimiter = ',')]
    patches: Option<Vec<usize>>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct VariabilityArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "eval-data")]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (default 0..10).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    patches: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    examples: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long = "embed-dim", default_value_t = 32)]
    embed_dim: usize,
    #[arg(long = "attrs-per-class", default_value_t = 4)]
    attrs_per_class: usize,
    #[arg(long, default_value_t = 4)]
    patches: usize,
}

/// Config file contents: training fields plus path and sweep keys.
#[derive(Debug, Default)]
struct FileConfig {
    train: Map<String, Value>,
    paths: Map<String, Value>,
}

const PATH_KEYS: [&str; 6] = [
    "data",
    "eval_data",
    "manifest",
    "out",
    "checkpoint",
    "seeds",
];

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CfcbmError::io(path, e))?;
    let Value::Object(mut map) = serde_json::from_str::<Value>(&text)? else {
        return Err(CfcbmError::Parameter(format!(
            "{}: config must be a JSON object",
            path.display()
        )));
    };
    let mut paths = Map::new();
    for key in PATH_KEYS {
        if let Some(v) = map.remove(key) {
            paths.insert(key.to_string(), v);
        }
    }
    if let Some(v) = map.remove("tau") {
        map.insert("infer_tau".into(), v);
    }
    // a list of patch counts is an ablation sweep, not a single expectation
    if let Some(v @ Value::Array(_)) = map.remove("patches") {
        paths.insert("patches".into(), v);
    }
    Ok(FileConfig { train: map, paths })
}

impl FileConfig {
    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        match self.paths.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
            Some(other) => Err(CfcbmError::Parameter(format!(
                "config key {key:?} must be a string, got {other}"
            ))),
        }
    }

    fn list<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.paths.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => Ok(Some(serde_json::from_value(v.clone()).map_err(|e| {
                CfcbmError::Parameter(format!("config key {key:?}: {e}"))
            })?)),
        }
    }

    /// Merges file keys over `base`, then flags over that.
    fn train_config(
        &self,
        base: &TrainConfig,
        flags: &TrainFlags,
        patches: Option<usize>,
    ) -> Result<TrainConfig> {
        let Value::Object(mut merged) = serde_json::to_value(base)? else {
            unreachable!("TrainConfig serializes to an object")
        };
        merged.extend(self.train.clone());
        let mut cfg: TrainConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| CfcbmError::Parameter(format!("config: {e}")))?;
        macro_rules! apply {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = flags.$flag { cfg.$field = v; })*
            };
        }
        apply!(seed => seed, tau => infer_tau, epochs => epochs, lr => lr, beta => beta,
            alpha_h => alpha_h, alpha_l => alpha_l, mode => mode, batch_size => batch_size,
            temperature => gumbel_temperature, lr_multiplier => amortization_lr_multiplier);
        if patches.is_some() {
            cfg.patches = patches;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn required(value: Option<PathBuf>, file: &FileConfig, key: &str) -> Result<PathBuf> {
    match value {
        Some(v) => Ok(v),
        None => file.path(key)?.ok_or_else(|| {
            CfcbmError::Parameter(format!("--{} is required", key.replace('_', "-")))
        }),
    }
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

#[derive(Serialize)]
struct Effective<'a> {
    command: &'a str,
    #[serde(skip_serializing_if = "Map::is_empty")]
    inputs: Map<String, Value>,
    train: &'a TrainConfig,
}

fn effective(command: &str, inputs: &[(&str, Value)], train: &TrainConfig) -> Result<Value> {
    let inputs = inputs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    Ok(serde_json::to_value(Effective {
        command,
        inputs,
        train,
    })?)
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn history_csv(history: &TrainHistory) -> String {
    let mut out = String::from(
        "epoch,ce_high,ce_low,kl_high,kl_low,total,train_accuracy_high,train_accuracy_low,sparsity_high,sparsity_low\n",
    );
    for e in &history.epochs {
        let l = &e.loss;
        let cells = [
            l.ce_high,
            l.ce_low,
            l.kl_high,
            l.kl_low,
            l.total,
            e.train_accuracy_high,
            e.train_accuracy_low,
            e.sparsity_high,
            e.sparsity_low,
        ]
        .map(|x| crate::evaluator::round6(x).to_string());
        out.push_str(&format!("{},{}\n", e.epoch, cells.join(",")));
    }
    out
}

fn load_training_inputs(
    data: &Path,
    manifest: &Path,
) -> Result<(EmbeddingDataset, ConceptHierarchy)> {
    let ds = load_dataset(data)?;
    let hierarchy = ConceptHierarchy::load_manifest(manifest)?;
    hierarchy.validate(&ds.concepts)?;
    Ok((ds, hierarchy))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = read_config(args.flags.config.as_deref())?;
    let data = required(args.data, &file, "data")?;
    let out = required(args.out, &file, "out")?;
    let resume = match args.checkpoint.or(file.path("checkpoint")?) {
        Some(p) => Some(load_checkpoint(checkpoint_file(&p))?),
        None => None,
    };
    let ds = load_dataset(&data)?;
    let (mut state, hierarchy, manifest_input) = match resume {
        Some(Checkpoint {
            mut state,
            hierarchy,
        }) => {
            state.config = file.train_config(
                &state.config,
                &args.flags,
                args.patches.or(state.config.patches),
            )?;
            (state, hierarchy, None)
        }
        None => {
            let manifest = required(args.manifest, &file, "manifest")?;
            let hierarchy = ConceptHierarchy::load_manifest(&manifest)?;
            let cfg = file.train_config(&TrainConfig::default(), &args.flags, args.patches)?;
            (TrainState::new(&ds, &cfg), hierarchy, Some(manifest))
        }
    };
    let remaining = state.config.epochs.saturating_sub(state.epochs_done);
    println!(
        "training {} examples for {remaining} epochs (mode {}, seed {})",
        ds.n_examples(),
        state.config.mode,
        state.config.seed
    );
    let history = state.run(&ds, &hierarchy, remaining)?;

    ensure_dir(&out)?;
    save_checkpoint(out.join(CHECKPOINT_FILE), &state, &hierarchy)?;
    write_json(&out.join(HISTORY_JSON), &history)?;
    write_file(&out.join(HISTORY_CSV), &history_csv(&history))?;
    let mut inputs = vec![("data", path_value(&data))];
    if let Some(m) = &manifest_input {
        inputs.push(("manifest", path_value(m)));
    }
    write_json(
        &out.join(CONFIG_FILE),
        &effective("train", &inputs, &state.config)?,
    )?;
    if let Some(last) = history.epochs.last() {
        println!(
            "epoch {}: loss {:.6} train accuracy {:.4}/{:.4} sparsity {:.2}/{:.2}",
            last.epoch,
            last.loss.total,
            last.train_accuracy_high,
            last.train_accuracy_low,
            last.sparsity_high,
            last.sparsity_low
        );
    }
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

struct EvalSetup {
    ds: EmbeddingDataset,
    checkpoint: Checkpoint,
    config: TrainConfig,
    out: PathBuf,
    inputs: Vec<(&'static str, Value)>,
}

fn eval_setup(args: EvalArgs) -> Result<EvalSetup> {
    let file = read_config(args.config.as_deref())?;
    let data = required(args.data, &file, "data")?;
    let ckpt_path = checkpoint_file(&required(args.checkpoint, &file, "checkpoint")?);
    let out = required(args.out, &file, "out")?;
    let checkpoint = load_checkpoint(&ckpt_path)?;
    let flags = TrainFlags {
        tau: args.tau,
        mode: args.mode,
        ..TrainFlags::default()
    };
    let config = file.train_config(&checkpoint.state.config, &flags, None)?;
    let ds = load_dataset(&data)?;
    checkpoint.hierarchy.validate(&ds.concepts)?;
    Ok(EvalSetup {
        ds,
        checkpoint,
        config,
        out,
        inputs: vec![
            ("data", path_value(&data)),
            ("checkpoint", path_value(&ckpt_path)),
        ],
    })
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let s = eval_setup(args)?;
    let report = evaluate(
        &s.ds,
        &s.checkpoint.state.params,
        &s.checkpoint.hierarchy,
        s.config.mode,
        s.config.infer_tau,
    )?;
    let cfg = effective("eval", &s.inputs, &s.config)?;
    emit_report(
        &report,
        &s.out,
        Some(&s.checkpoint.hierarchy.low_names),
        Some(&cfg),
    )?;
    print_report(&report);
    println!("wrote {}", s.out.display());
    Ok(())
}

fn print_report(r: &EvaluationReport) {
    for (name, value) in METRIC_COLUMNS.iter().zip(r.metric_row()) {
        if !value.is_empty() {
            println!("{name}: {value}");
        }
    }
}

fn cmd_analyze(args: EvalArgs) -> Result<()> {
    let s = eval_setup(args)?;
    let hier = &s.checkpoint.hierarchy;
    let inf = infer(
        &s.ds,
        &s.checkpoint.state.params,
        hier,
        s.config.mode,
        s.config.infer_tau,
    )?;
    let report = report_from_inference(&s.ds, &inf)?;
    ensure_dir(&s.out)?;
    write_file(&s.out.join(ALIGNMENT_FILE), &alignment_csv(&report))?;
    write_file(
        &s.out.join(ACTIVATION_FILE),
        &activation_csv(&report, Some(&hier.low_names)),
    )?;

    let per_example = example_indicator_for_matching(&inf.z, inf.n_patches)?;
    let summary = class_concept_summary(&per_example, &s.ds.labels, s.ds.n_classes)?;
    let mut text = String::from("class,size,active_attributes\n");
    for c in 0..s.ds.n_classes {
        let names: Vec<&str> = (0..summary.active.cols)
            .filter(|&l| summary.active.row(c)[l] == 1)
            .map(|l| hier.low_names[l].as_str())
            .collect();
        text.push_str(&format!(
            "{c},{},{}\n",
            summary.class_sizes[c],
            csv_field(&names.join(";"))
        ));
    }
    write_file(&s.out.join("class_active_attributes.csv"), &text)?;
    write_json(
        &s.out.join(CONFIG_FILE),
        &effective("analyze", &s.inputs, &s.config)?,
    )?;
    println!("wrote {}", s.out.display());
    Ok(())
}

fn expand(template: &str, p: usize) -> PathBuf {
    PathBuf::from(template.replace("{P}", &p.to_string()))
}

fn train_and_report(
    train_ds: &EmbeddingDataset,
    eval_ds: &EmbeddingDataset,
    hierarchy: &ConceptHierarchy,
    config: &TrainConfig,
) -> Result<EvaluationReport> {
    let mut state = TrainState::new(train_ds, config);
    state.run(train_ds, hierarchy, config.epochs)?;
    evaluate(
        eval_ds,
        &state.params,
        hierarchy,
        config.mode,
        config.infer_tau,
    )
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let file = read_config(args.flags.config.as_deref())?;
    let data = match args.data {
        Some(d) => d,
        None => required(None, &file, "data")?.display().to_string(),
    };
    let eval_data = match args.eval_data {
        Some(d) => Some(d),
        None => file.path("eval_data")?.map(|p| p.display().to_string()),
    };
    let manifest = required(args.manifest, &file, "manifest")?;
    let out = required(args.out, &file, "out")?;
    let patch_list = match args.patches {
        Some(p) => p,
        None => file
            .list::<usize>("patches")?
            .ok_or_else(|| CfcbmError::Parameter("--patches is required".into()))?,
    };
    if patch_list.is_empty() {
        return Err(CfcbmError::Parameter(
            "--patches lists no patch counts".into(),
        ));
    }
    if patch_list.len() > 1 && !data.contains("{P}") {
        return Err(CfcbmError::Parameter(
            "--data must contain {P} when sweeping several patch counts".into(),
        ));
    }
    let hierarchy = ConceptHierarchy::load_manifest(&manifest)?;
    ensure_dir(&out)?;

    let mut table = "patches,accuracy_high,accuracy_low,sparsity_high,sparsity_low,jaccard_example,jaccard_class\n".to_string();
    for &p in &patch_list {
        let train_path = expand(&data, p);
        let ds = load_dataset(&train_path)?;
        hierarchy.validate(&ds.concepts)?;
        let eval_path = eval_data.as_deref().map(|t| expand(t, p));
        let eval_ds = match &eval_path {
            Some(path) => load_dataset(path)?,
            None => ds.clone(),
        };
        let config = file.train_config(&TrainConfig::default(), &args.flags, Some(p))?;
        println!("patches {p}: training on {}", train_path.display());
        let report = train_and_report(&ds, &eval_ds, &hierarchy, &config)?;

        let dir = out.join(format!("P{p}"));
        let mut inputs = vec![
            ("data", path_value(&train_path)),
            ("manifest", path_value(&manifest)),
        ];
        if let Some(e) = &eval_path {
            inputs.push(("eval_data", path_value(e)));
        }
        emit_report(
            &report,
            &dir,
            Some(&hierarchy.low_names),
            Some(&effective("ablate-patches", &inputs, &config)?),
        )?;
        let row = report.metric_row();
        table.push_str(&format!("{p},{}\n", row[..6].join(",")));
        println!(
            "patches {p}: accuracy {}/{} sparsity {}/{}",
            row[0], row[1], row[2], row[3]
        );
    }
    write_file(&out.join(ABLATION_FILE), &table)?;
    println!("wrote {}", out.join(ABLATION_FILE).display());
    Ok(())
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one sample).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Serialize)]
struct Spread {
    mean: f64,
    std: f64,
}

fn cmd_variability(args: VariabilityArgs) -> Result<()> {
    let file = read_config(args.flags.config.as_deref())?;
    let data = required(args.data, &file, "data")?;
    let eval_data = args.eval_data.or(file.path("eval_data")?);
    let manifest = required(args.manifest, &file, "manifest")?;
    let out = required(args.out, &file, "out")?;
    let seeds = match args.seeds {
        Some(s) => s,
        None => file
            .list::<u64>("seeds")?
            .unwrap_or_else(|| (0..10).collect()),
    };
    if seeds.is_empty() {
        return Err(CfcbmError::Parameter("--seeds lists no seeds".into()));
    }
    let (ds, hierarchy) = load_training_inputs(&data, &manifest)?;
    let eval_ds = match &eval_data {
        Some(p) => load_dataset(p)?,
        None => ds.clone(),
    };
    let base = file.train_config(&TrainConfig::default(), &args.flags, args.patches)?;
    ensure_dir(&out)?;

    let columns = [
        "accuracy_high",
        "accuracy_low",
        "sparsity_high",
        "sparsity_low",
    ];
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    let mut table = format!("seed,{}\n", columns.join(","));
    for &seed in &seeds {
        let config = TrainConfig {
            seed,
            ..base.clone()
        };
        let r = train_and_report(&ds, &eval_ds, &hierarchy, &config)?;
        let values = [
            r.accuracy_high,
            r.accuracy_low,
            r.sparsity_high,
            r.sparsity_low,
        ];
        for (s, v) in samples.iter_mut().zip(values) {
            s.push(v);
        }
        table.push_str(&format!(
            "{seed},{}\n",
            values.map(|v| v.to_string()).join(",")
        ));
        println!(
            "seed {seed}: accuracy {}/{} sparsity {}/{}",
            values[0], values[1], values[2], values[3]
        );
    }
    write_file(&out.join(VARIABILITY_FILE), &table)?;

    let mut summary = Map::new();
    for (name, xs) in columns.iter().zip(&samples) {
        let (mean, std) = mean_std(xs);
        let spread = Spread {
            mean: crate::evaluator::round6(mean),
            std: crate::evaluator::round6(std),
        };
        println!("{name}: {} ± {}", spread.mean, spread.std);
        summary.insert(name.to_string(), serde_json::to_value(spread)?);
    }
    summary.insert("seeds".into(), serde_json::to_value(&seeds)?);
    write_json(&out.join(VARIABILITY_SUMMARY), &Value::Object(summary))?;
    let mut inputs = vec![
        ("data", path_value(&data)),
        ("manifest", path_value(&manifest)),
    ];
    if let Some(e) = &eval_data {
        inputs.push(("eval_data", path_value(e)));
    }
    write_json(
        &out.join(CONFIG_FILE),
        &effective("variability", &inputs, &base)?,
    )?;
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let h = load_header(&args.data)?;
    println!("examples: {}", h.n_examples);
    println!("patches: {}", h.n_patches);
    println!("embed_dim: {}", h.embed_dim);
    println!("classes: {}", h.n_classes);
    println!("high_concepts: {}", h.n_high);
    println!("low_concepts: {}", h.n_low);
    println!(
        "example_ground_truth: {}",
        h.flags & crate::store::FLAG_EXAMPLE_GT != 0
    );
    println!(
        "class_ground_truth: {}",
        h.flags & crate::store::FLAG_CLASS_GT != 0
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = PlantedSpec {
        n_examples: args.examples,
        n_classes: args.classes,
        embed_dim: args.embed_dim,
        attrs_per_class: args.attrs_per_class,
        n_patches: args.patches,
        ..PlantedSpec::default()
    };
    let (ds, hierarchy) = planted(&spec, args.seed)?;
    ensure_dir(&args.out)?;
    let data = args.out.join("data.cfeb");
    write_dataset(&data, &ds)?;
    hierarchy.save_manifest(args.out.join("manifest.json"))?;
    println!("wrote {} and manifest.json", data.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::AblatePatches(a) => cmd_ablate(a),
        Command::Variability(a) => cmd_variability(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Runs the CLI on `argv` (including the program name). Returns the process
/// exit code: 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
