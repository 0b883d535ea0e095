//! `msl`: dataset and mask generation, training, evaluation and metrics.
//!
//! Every subcommand writes into its own run directory (`--out`, or
//! `$MSL_RUN_ROOT/<subcommand>`), echoes the resolved config there as
//! `config.json`, and refuses to touch an existing directory unless `--force`
//! is given. Config leaves are overridden with `--section.key=value`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msl::config::RunConfig;
use msl::data::{generate_dataset, load_split, Dataset, Split};
use msl::evaluation::{compare, draw_eval_masks, plot_csv, score_dataset, strata_for};
use msl::masking::{build_subsets, load_subsets, save_subsets, MaskSubsets};
use msl::metrics::{per_class_csv, predictions_from_jsonl, predictions_to_jsonl, stratified_report, ScoredPredictions};
use msl::model::{load_checkpoint_for, Architecture, ModelParams};
use msl::training::{train, train_vanilla};

const RUN_ROOT_ENV: &str = "MSL_RUN_ROOT";
const CONFIG_SECTIONS: [&str; 5] = ["dataset", "masks", "model", "train", "eval"];

#[derive(Parser, Debug)]
#[command(name = "msl", version, about = "Masked supervised learning experiments")]
#[command(after_help = "Config overrides: --<section>.<key>=<value>, sections: dataset, masks, model, train, eval.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory [default: $MSL_RUN_ROOT/<subcommand>, else runs/<subcommand>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test dataset.
    GenDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the high and low mask subsets.
    GenMasks {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from gen-dataset.
        #[arg(long)]
        data: PathBuf,
        /// Mask directory; required unless train.masking is none.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Use the plain supervised trainer instead of the MSL trainer.
        #[arg(long)]
        vanilla_baseline: bool,
    },
    /// Score one checkpoint on the test split, clean and optionally masked.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also evaluate with masked inputs, once per eval seed.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Compare checkpoints on clean and masked test inputs.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// `NAME=PATH` or `PATH` (named after the file stem); repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
    },
    /// Metric report for a JSON-lines predictions file.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(msl::Error),
}

impl From<msl::Error> for CliError {
    fn from(e: msl::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) if e.is_validation() => 2,
            CliError::Lib(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Lib(msl::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Splits `--section.key=value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let is_override = a
            .strip_prefix("--")
            .and_then(|s| s.split_once('.'))
            .is_some_and(|(section, _)| CONFIG_SECTIONS.contains(&section));
        if is_override {
            overrides.push(a[2..].to_string());
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

fn resolve_config(common: &Common, overrides: &[String]) -> CliResult<RunConfig> {
    let base = match &common.config {
        Some(p) => {
            require_exists(p, "config file")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        if !o.contains('=') {
            return Err(CliError::Usage(format!("override --{o} needs the form --section.key=value")));
        }
    }
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn require_exists(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Creates the run directory, replacing it only with `--force`.
fn prepare_out(common: &Common, subcommand: &str) -> CliResult<PathBuf> {
    let out = common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
        root.join(subcommand)
    });
    if out.exists() {
        if !common.force {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --force to replace it",
                out.display()
            )));
        }
        if out.is_dir() {
            fs::remove_dir_all(&out).map_err(|e| io_err(&out, e))?;
        } else {
            fs::remove_file(&out).map_err(|e| io_err(&out, e))?;
        }
    }
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    Ok(out)
}

fn echo_config(out: &Path, cfg: &RunConfig) -> CliResult {
    write(&out.join("config.json"), cfg.to_json())
}

/// Inputs of a run besides the config, recorded next to it.
fn echo_inputs(out: &Path, inputs: serde_json::Value) -> CliResult {
    let mut s = serde_json::to_string_pretty(&inputs).expect("json");
    s.push('\n');
    write(&out.join("inputs.json"), s)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Config architecture adapted to a loaded split's image size and classes.
fn architecture_for(cfg: &RunConfig, data: &Dataset) -> Architecture {
    Architecture {
        height: data.header.height,
        width: data.header.width,
        num_classes: data.header.num_classes,
        ..cfg.architecture()
    }
}

fn load_masks(dir: &Path, data: &Dataset) -> CliResult<MaskSubsets> {
    require_exists(dir, "mask directory")?;
    Ok(load_subsets(dir, data.header.height, data.header.width)?)
}

fn load_data(dir: &Path, split: Split) -> CliResult<Dataset> {
    require_exists(dir, "dataset directory")?;
    Ok(load_split(dir, split)?)
}

fn checkpoint_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn run(cmd: Command, overrides: &[String]) -> CliResult {
    match cmd {
        Command::GenDataset { common } => {
            let cfg = resolve_config(&common, overrides)?;
            let out = prepare_out(&common, "gen-dataset")?;
            echo_config(&out, &cfg)?;
            let (train_set, test_set) = generate_dataset(&cfg.dataset, &out)?;
            println!("{}", serde_json::json!({"train": train_set.summary(), "test": test_set.summary()}));
        }
        Command::GenMasks { common } => {
            let cfg = resolve_config(&common, overrides)?;
            let out = prepare_out(&common, "gen-masks")?;
            echo_config(&out, &cfg)?;
            let subsets = build_subsets(&cfg.masks)?;
            let records = save_subsets(&subsets, &out)?;
            println!(
                "{}",
                serde_json::json!({"high": subsets.high.len(), "low": subsets.low.len(), "files": records.len()})
            );
        }
        Command::Train {
            common,
            data,
            masks,
            vanilla_baseline,
        } => {
            let cfg = resolve_config(&common, overrides)?;
            let train_set = load_data(&data, Split::Train)?;
            let test_set = load_data(&data, Split::Test)?;
            let subsets = match (&masks, cfg.train.masking.subset()) {
                (Some(dir), _) => Some(load_masks(dir, &train_set)?),
                (None, Some(w)) if !vanilla_baseline => {
                    return Err(CliError::Usage(format!("train.masking={w} needs --masks")))
                }
                (None, _) => None,
            };
            let arch = architecture_for(&cfg, &train_set);
            let out = prepare_out(&common, "train")?;
            let mut resolved = cfg.clone();
            resolved.train = if vanilla_baseline {
                msl::training::TrainConfig {
                    masking: msl::training::Masking::None,
                    ..cfg.train.clone()
                }
                .normalized()
            } else {
                cfg.train.normalized()
            };
            echo_config(&out, &resolved)?;
            echo_inputs(
                &out,
                serde_json::json!({
                    "data": path_str(&data),
                    "masks": masks.as_deref().map(path_str),
                    "trainer": if vanilla_baseline { "vanilla" } else { "msl" },
                    "architecture": arch.describe(),
                }),
            )?;
            let outcome = if vanilla_baseline {
                train_vanilla(&resolved.train, &arch, &train_set, &test_set, Some(&out))?
            } else {
                train(&resolved.train, &arch, &train_set, &test_set, subsets.as_ref(), Some(&out))?
            };
            let last = outcome.log.last().map(|r| r.test_map);
            println!(
                "{}",
                serde_json::json!({"epochs": outcome.log.len(), "best_epoch": outcome.best_epoch, "final_test_map": last})
            );
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            masks,
        } => {
            let cfg = resolve_config(&common, overrides)?;
            let test_set = load_data(&data, Split::Test)?;
            require_exists(&checkpoint, "checkpoint")?;
            let params = load_checkpoint_for(&checkpoint, &architecture_for(&cfg, &test_set))?;
            let subsets = masks.as_deref().map(|m| load_masks(m, &test_set)).transpose()?;
            let out = prepare_out(&common, "eval")?;
            echo_config(&out, &cfg)?;
            echo_inputs(
                &out,
                serde_json::json!({
                    "data": path_str(&data),
                    "checkpoint": path_str(&checkpoint),
                    "masks": masks.as_deref().map(path_str),
                }),
            )?;
            let id = checkpoint_id(&checkpoint);
            let ids: Vec<String> = test_set.samples.iter().map(|s| s.id.clone()).collect();
            let strata = strata_for(&test_set);
            let emit = |stem: String, sp: ScoredPredictions| -> CliResult<f64> {
                let report = stratified_report(&sp, &strata, cfg.eval.threshold)?;
                write(&out.join(format!("{stem}.json")), to_json(&report))?;
                write(&out.join(format!("{stem}_predictions.jsonl")), predictions_to_jsonl(&ids, &sp))?;
                Ok(report.map)
            };
            let clean = emit(format!("{id}_clean"), score_dataset(&params, &test_set, None)?)?;
            let mut summary = serde_json::json!({"checkpoint": id, "clean_map": clean});
            if let Some(s) = &subsets {
                let mut masked = Vec::new();
                for &seed in &cfg.eval.seeds {
                    let m = draw_eval_masks(s, cfg.eval.subset, test_set.len(), seed)?;
                    let sp = score_dataset(&params, &test_set, Some(&m))?;
                    masked.push(emit(format!("{id}_masked-{}_seed{seed}", cfg.eval.subset), sp)?);
                }
                summary["masked_map"] = serde_json::json!(masked);
            }
            println!("{summary}");
        }
        Command::Robustness {
            common,
            data,
            masks,
            checkpoints,
        } => {
            let cfg = resolve_config(&common, overrides)?;
            let test_set = load_data(&data, Split::Test)?;
            let subsets = load_masks(&masks, &test_set)?;
            let arch = architecture_for(&cfg, &test_set);
            let mut models: Vec<(String, ModelParams)> = Vec::new();
            for spec in &checkpoints {
                let (name, path) = match spec.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => (checkpoint_id(Path::new(spec)), PathBuf::from(spec)),
                };
                require_exists(&path, "checkpoint")?;
                if models.iter().any(|(n, _)| *n == name) {
                    return Err(CliError::Usage(format!("duplicate model name {name}")));
                }
                models.push((name, load_checkpoint_for(&path, &arch)?));
            }
            let out = prepare_out(&common, "robustness")?;
            echo_config(&out, &cfg)?;
            echo_inputs(
                &out,
                serde_json::json!({"data": path_str(&data), "masks": path_str(&masks), "checkpoints": checkpoints}),
            )?;
            let named: Vec<(String, &ModelParams)> = models.iter().map(|(n, p)| (n.clone(), p)).collect();
            let report = compare(&named, &test_set, Some(&subsets), &cfg.eval)?;
            write(&out.join("robustness.json"), to_json(&report))?;
            write(&out.join("robustness.csv"), plot_csv(&report))?;
            for m in &report.models {
                println!(
                    "{}",
                    serde_json::json!({"model": m.model, "clean_map": m.clean.map, "masked_map": m.masked.map(|s| s.map)})
                );
            }
        }
        Command::Metrics { common, predictions } => {
            let cfg = resolve_config(&common, overrides)?;
            require_exists(&predictions, "predictions file")?;
            let text = fs::read_to_string(&predictions).map_err(|e| io_err(&predictions, e))?;
            let (_, sp) = predictions_from_jsonl(&text)?;
            let out = prepare_out(&common, "metrics")?;
            echo_config(&out, &cfg)?;
            echo_inputs(&out, serde_json::json!({"predictions": path_str(&predictions)}))?;
            let report = stratified_report(&sp, &[], cfg.eval.threshold)?;
            write(&out.join("metrics.json"), to_json(&report))?;
            write(&out.join("per_class.csv"), per_class_csv(&sp, cfg.eval.threshold, None))?;
            println!("{}", serde_json::json!({"images": report.images, "map": report.map}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
