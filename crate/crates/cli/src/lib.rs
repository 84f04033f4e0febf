//! Command-line front end: dataset generation, training, evaluation,
//! ablation suites and reports.

pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use thiserror::Error;

use irn_core::config::{apply_override, ExperimentConfig, PairMask};
use irn_core::interaction::pair_name;
use irn_core::synthdata::{default_catalog, Dataset, NoiseSpec, RenderSpec};
use irn_core::train::{
    ablation_registry, evaluate, load_checkpoint, run_ablation_rows, run_dir, run_experiment, EvalOptions,
    ABLATION_GROUPS,
};
use irn_core::IrnError;

pub const OUTPUT_ENV: &str = "IRN_OUTPUT_DIR";
pub const DEFAULT_OUTPUT: &str = "irn-output";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while doing the work; exit code 2.
    #[error(transparent)]
    Runtime(IrnError),
}

impl From<IrnError> for CliError {
    fn from(e: IrnError) -> Self {
        match e {
            IrnError::Config(m) => CliError::Validation(format!("invalid config: {m}")),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "irn", version, about = "Hand-object interaction recognition with interaction reasoning networks")]
pub struct Cli {
    /// Where runs, tables and plots go. Defaults to $IRN_OUTPUT_DIR, then ./irn-output.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Config file, dotted overrides and seed; applied in that order on top of
/// the desk defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file; may be partial.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `interaction.heads=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenerateData {
        /// Dataset directory (default: <output>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1200)]
        train: usize,
        #[arg(long, default_value_t = 300)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train one configuration and evaluate it on the validation split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint, optionally with corrupted detections or pairs masked.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0.0)]
        p_drop: f64,
        #[arg(long, default_value_t = 0.0)]
        p_swap: f64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Comma-separated pairs to keep, e.g. `hl_hr,hr_hl`; `none` disables all.
        #[arg(long)]
        pairs: Option<String>,
    },
    /// Run the ablation suite (every registered row, shared seed).
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Restrict to these groups. Repeatable.
        #[arg(long)]
        group: Vec<String>,
    },
    /// Render tables and plots from a metrics directory.
    Report {
        /// Directory holding `runs/` and `ablation.jsonl` (default: <output>).
        #[arg(long)]
        metrics_dir: Option<PathBuf>,
    },
    /// Print the resolved configuration and its hash.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Output directory: flag, then `IRN_OUTPUT_DIR`, then the default.
pub fn output_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

/// Copies every key of `src` into `dst`; keys unknown to `dst` are errors.
fn merge(dst: &mut Value, src: &Value, path: &str) -> CliResult<()> {
    let (Value::Object(d), Value::Object(s)) = (dst, src) else {
        return Err(CliError::Validation(format!("config `{path}` must be an object")));
    };
    for (k, v) in s {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        let slot = d
            .get_mut(k)
            .ok_or_else(|| CliError::Validation(format!("unknown config key `{key}`")))?;
        if slot.is_object() && v.is_object() {
            merge(slot, v, &key)?;
        } else {
            *slot = v.clone();
        }
    }
    Ok(())
}

/// Defaults, then file values, then `--set` overrides, then `--seed`.
pub fn resolve_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut v = ExperimentConfig::desk().to_value();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {} is not valid JSON: {e}", path.display())))?;
        merge(&mut v, &file, "")?;
    }
    for o in &args.overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("override `{o}` is not KEY=VALUE")))?;
        apply_override(&mut v, key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        v["seed"] = seed.into();
    }
    ExperimentConfig::from_value(v).map_err(|e| match e {
        IrnError::Json(j) => CliError::Validation(format!("invalid config: {j}")),
        other => other.into(),
    })
}

fn load_dataset(data: Option<&Path>, out: &Path) -> CliResult<Dataset> {
    let root = data.map(Path::to_path_buf).unwrap_or_else(|| out.join("data"));
    if !root.join("manifest.json").exists() {
        return Err(CliError::Validation(format!(
            "no dataset at {} (run `irn generate-data` or pass --data)",
            root.display()
        )));
    }
    Ok(Dataset::load(&root)?)
}

/// Parses `hl_hr,hr_hl` style pair lists.
pub fn parse_pairs(s: &str) -> CliResult<PairMask> {
    let mut flags = [false; 6];
    if s.trim() != "none" {
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            let p = (0..6)
                .find(|&p| pair_name(p) == name)
                .ok_or_else(|| CliError::Validation(format!("unknown pair `{name}`")))?;
            flags[p] = true;
        }
    }
    Ok(PairMask::from_array(flags))
}

/// Runs one parsed command; returns what to print on stdout.
pub fn run(cli: Cli) -> CliResult<String> {
    let out = output_dir(cli.output_dir.as_deref());
    match cli.command {
        Command::GenerateData {
            data,
            train,
            val,
            seed,
            frames,
            size,
        } => {
            let root = data.unwrap_or_else(|| out.join("data"));
            let render = RenderSpec { frames, size };
            let ds = Dataset::ensure(&root, &default_catalog(), train, val, seed, render)?;
            Ok(format!(
                "dataset {} at {}: {} train / {} val clips, manifest {}\n",
                seed,
                root.display(),
                ds.train.len(),
                ds.val.len(),
                &ds.manifest.hash()[..16]
            ))
        }
        Command::Train { data, cfg } => {
            let config = resolve_config(&cfg)?;
            let ds = load_dataset(data.as_deref(), &out)?;
            let dir = run_dir(&out, &config);
            let outcome = run_experiment(&config, &ds, &dir)?;
            Ok(format!(
                "{}\nrun directory: {}\n",
                serde_json::to_string(&outcome.final_val).expect("record serializes"),
                dir.display()
            ))
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            p_drop,
            p_swap,
            jitter,
            noise_seed,
            pairs,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(data.as_deref(), &out)?;
            let clips = match split.as_str() {
                "val" => &ds.val,
                "train" => &ds.train,
                other => return Err(CliError::Validation(format!("unknown split `{other}`"))),
            };
            let noise = NoiseSpec::new(p_drop, p_swap, jitter)?;
            let opts = EvalOptions {
                noise: (noise != NoiseSpec::NONE).then_some(noise),
                noise_seed,
                pairs: pairs.as_deref().map(parse_pairs).transpose()?,
            };
            let report = evaluate(&model, clips, &opts)?;
            let rec = report.record(0, &split, &model.config().hash(), 0.0);
            let mut s = serde_json::to_string(&rec).expect("record serializes");
            s.push('\n');
            for (c, acc) in report.per_class_top1().iter().enumerate() {
                let name = ds.manifest.catalog.get(c).map_or("?", String::as_str);
                s.push_str(&format!("class {c} {name:<14} top1 {acc:.3}\n"));
            }
            Ok(s)
        }
        Command::Ablate { data, cfg, group } => {
            let base = resolve_config(&cfg)?;
            for g in &group {
                if !ABLATION_GROUPS.contains(&g.as_str()) {
                    return Err(CliError::Validation(format!(
                        "unknown ablation group `{g}` (expected one of {})",
                        ABLATION_GROUPS.join(", ")
                    )));
                }
            }
            let ds = load_dataset(data.as_deref(), &out)?;
            let rows: Vec<_> = ablation_registry(&base)
                .into_iter()
                .filter(|r| group.is_empty() || group.iter().any(|g| g == r.group))
                .collect();
            let results = run_ablation_rows(&rows, &ds, &out)?;
            let failed = results.iter().filter(|r| r.error.is_some()).count();
            let text = report::build_report(&out)?.text;
            if failed > 0 {
                log::warn!("{failed} ablation rows failed");
            }
            Ok(text)
        }
        Command::Report { metrics_dir } => {
            let dir = metrics_dir.unwrap_or(out);
            let r = report::write_report(&dir)?;
            Ok(r.text)
        }
        Command::ShowConfig { cfg } => {
            let config = resolve_config(&cfg)?;
            Ok(format!("{}\nhash {}\n", config.to_json_pretty(), config.hash()))
        }
    }
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(s) => {
            print!("{s}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
