//! `fcil` command-line front end.
//!
//! Output layout under the run directory:
//! `config.toml`, `record.json`, `metrics.csv`, `checkpoints/stage_N.ckpt`,
//! `diagnostics/`. Exit codes: 0 success, 2 config error, 3 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{Aggregation, ExperimentConfig};
use crate::datagen::PartitionReport;
use crate::error::Error;
use crate::evaluation::{proto_distance_report, weight_alignment_report};
use crate::federation::{prepare_data, run_experiment_with, ExperimentRecord};
use crate::lora::{avg_cosine, cosine_pairs};
use crate::protomodel::ModelState;

/// Overrides the directory relative output paths are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "FCIL_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fcil", version, about = "Federated class-incremental learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Experiment config file (TOML).
    pub config: PathBuf,
    /// Override a config field, e.g. `--set rounds=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and evaluate all stages, writing artifacts to the output directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Aggregate prototypes by plain averaging instead of re-weighting.
        #[arg(long)]
        ablate_reweight: bool,
        /// Train clients on a thread pool (results are identical to serial).
        #[arg(long)]
        parallel_clients: bool,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Per-stage, per-client class counts without training.
    PartitionReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the JSON here instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Diagnostics computed from a finished run.
    Diagnose {
        /// `record.json` of a finished run.
        record: PathBuf,
        which: Diagnostic,
    },
    /// One run per value of a single field; writes a summary CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Print (or write) a config file with every default filled in.
    InitConfig {
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Diagnostic {
    Ortho,
    Prototypes,
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    #[value(name = "K", alias = "clients")]
    Clients,
    Alpha,
    Beta,
    Gamma,
    Eta,
    #[value(name = "attach-layer", alias = "attach_layer")]
    AttachLayer,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Clients => "K",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::Gamma => "gamma",
            SweepAxis::Eta => "eta",
            SweepAxis::AttachLayer => "attach_layer",
        }
    }

    fn override_for(self, value: &str) -> String {
        match self {
            SweepAxis::Clients => format!("clients={value}"),
            SweepAxis::AttachLayer => format!("attach_layers=[{value}]"),
            other => format!("{}={value}", other.name()),
        }
    }
}

pub fn main_from_env() -> i32 {
    main_with(std::env::args_os())
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run {
            cfg,
            ablate_reweight,
            parallel_clients,
            output,
        } => {
            let mut config = load_config(&cfg)?;
            if ablate_reweight {
                config.aggregation = Aggregation::Uniform;
            }
            if parallel_clients {
                config.parallel_clients = true;
            }
            let dir = resolve_output(output.as_deref().unwrap_or(&config.output_dir));
            let record = cmd_run(&config, &dir)?;
            println!(
                "A_N = {:.4}  Avg = {:.4}  ({})",
                record.a_n.unwrap_or(f64::NAN),
                record.avg.unwrap_or(f64::NAN),
                dir.display()
            );
            Ok(())
        }
        Command::PartitionReport { cfg, output } => {
            let config = load_config(&cfg)?;
            let reports = cmd_partition_report(&config)?;
            let text = serde_json::to_string_pretty(&reports)? + "\n";
            emit(output.as_deref(), &text)
        }
        Command::Diagnose { record, which } => {
            let text = cmd_diagnose(&record, which)?;
            print!("{text}");
            Ok(())
        }
        Command::Sweep {
            cfg,
            axis,
            values,
            output,
        } => {
            let config = load_config(&cfg)?;
            let dir = resolve_output(output.as_deref().unwrap_or(&config.output_dir));
            let csv = cmd_sweep(&config, axis, &values, &dir)?;
            print!("{csv}");
            Ok(())
        }
        Command::InitConfig { output } => emit(output.as_deref(), &ExperimentConfig::default_text()),
    }
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&args.config)?;
    Ok(cfg.with_overrides(&args.overrides)?)
}

fn emit(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Relative paths resolve against `$FCIL_OUTPUT_ROOT` when set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Runs the experiment, flushing the record, metrics and checkpoint after
/// every stage so a failed run leaves its completed stages on disk.
pub fn cmd_run(config: &ExperimentConfig, dir: &Path) -> anyhow::Result<ExperimentRecord> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.toml"), &config.to_toml())?;
    let _ = fs::remove_file(dir.join("error.txt"));
    let result = run_experiment_with(config, |record, model| {
        flush(dir, record, model).map_err(|e| Error::Diagnostic(format!("{e:#}")))
    });
    match result {
        Ok(outcome) => Ok(outcome.record),
        Err(e) => {
            let _ = fs::write(dir.join("error.txt"), format!("{e}\n"));
            Err(e.into())
        }
    }
}

fn flush(dir: &Path, record: &ExperimentRecord, model: &ModelState) -> anyhow::Result<()> {
    let stage = record.stages.len();
    if record.config.write_checkpoints {
        write_file(
            &dir.join("checkpoints").join(format!("stage_{stage}.ckpt")),
            &model.to_checkpoint(stage),
        )?;
    }
    write_file(&dir.join("record.json"), &record.to_json())?;
    write_file(&dir.join("metrics.csv"), &record.metrics_csv())?;
    Ok(())
}

pub fn cmd_partition_report(config: &ExperimentConfig) -> anyhow::Result<Vec<PartitionReport>> {
    config.validate()?;
    let data = prepare_data(config)?;
    let spec = config.partition_spec();
    let mut out = Vec::with_capacity(data.schedule.len());
    for (s, classes) in data.schedule.tasks.iter().enumerate() {
        let shards = spec.partition(&data.train_for(classes), classes, s)?;
        out.push(PartitionReport::from_shards(s + 1, classes, &shards));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct OrthoRow {
    attachment: usize,
    stage_i: usize,
    stage_j: usize,
    abs_cosine: f64,
}

/// Writes the diagnostic under `<run>/diagnostics/` and returns its text.
pub fn cmd_diagnose(record_path: &Path, which: Diagnostic) -> anyhow::Result<String> {
    let text = fs::read_to_string(record_path).map_err(|e| Error::io(record_path, e))?;
    let record = ExperimentRecord::from_json(&text)?;
    let run_dir = record_path.parent().unwrap_or(Path::new("."));
    let last = record
        .stages
        .last()
        .ok_or_else(|| Error::Diagnostic("record has no completed stages".into()))?;
    let load_model = |stage: usize| -> anyhow::Result<ModelState> {
        let rel = record.stages[stage - 1].checkpoint.clone().ok_or_else(|| {
            Error::Diagnostic(format!(
                "stage {stage} has no checkpoint; rerun with write_checkpoints = true"
            ))
        })?;
        let path = run_dir.join(rel);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::io(&path, e))
            .with_context(|| "missing checkpoint")?;
        Ok(ModelState::from_checkpoint(&text, &path)?.1)
    };

    let (name, body) = match which {
        Diagnostic::Ortho => {
            let model = load_model(last.stage)?;
            let mut wtr = csv::Writer::from_writer(Vec::new());
            let mut means = Vec::new();
            for (&at, ledger) in &model.ledgers {
                means.push((at, avg_cosine(ledger)?));
                for p in cosine_pairs(ledger) {
                    wtr.serialize(OrthoRow {
                        attachment: at,
                        stage_i: p.stage_i,
                        stage_j: p.stage_j,
                        abs_cosine: p.abs_cosine,
                    })?;
                }
            }
            if means.is_empty() {
                return Err(Error::Diagnostic("run has no adapters (freeze_all)".into()).into());
            }
            let mut body = String::from_utf8(wtr.into_inner()?)?;
            for (at, m) in means {
                body.push_str(&format!("# attachment {at} mean |cosine| {m:.6}\n"));
            }
            ("ortho.csv", body)
        }
        Diagnostic::Prototypes => {
            let model = load_model(last.stage)?;
            let data = prepare_data(&record.config)?;
            let test = data.test_for(&last.classes);
            let feats = model.features_batch(test.iter().map(|s| s.features.as_slice()))?;
            let labeled: Vec<_> = test.iter().map(|s| s.label).zip(feats).collect();
            let rows = proto_distance_report(
                &last.final_aggregates.reweight,
                &last.final_aggregates.uniform,
                &labeled,
            )?;
            let mut wtr = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                wtr.serialize(r)?;
            }
            ("prototypes.csv", String::from_utf8(wtr.into_inner()?)?)
        }
        Diagnostic::Weights => {
            let mut all = Vec::new();
            for st in &record.stages {
                let round = st
                    .rounds
                    .last()
                    .ok_or_else(|| Error::Diagnostic(format!("stage {} has no rounds", st.stage)))?;
                let rows = weight_alignment_report(&round.reweight, &st.partition)?;
                all.push(serde_json::json!({ "stage": st.stage, "classes": rows }));
            }
            ("weights.json", serde_json::to_string_pretty(&all)? + "\n")
        }
    };
    write_file(&run_dir.join("diagnostics").join(name), &body)?;
    Ok(body)
}

/// One run per value, each in `<dir>/<axis>_<value>/`. All values share the
/// base seed so runs differ only along the swept field.
pub fn cmd_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    dir: &Path,
) -> anyhow::Result<String> {
    let mut out = format!("{},a_n,avg,run_dir\n", axis.name());
    for v in values {
        let v = v.trim();
        let cfg = base.with_overrides(&[axis.override_for(v)])?;
        let sub = format!("{}_{v}", axis.name());
        let record = cmd_run(&cfg, &dir.join(&sub))?;
        out.push_str(&format!(
            "{v},{:.6},{:.6},{sub}\n",
            record.a_n.unwrap_or(f64::NAN),
            record.avg.unwrap_or(f64::NAN)
        ));
        write_file(&dir.join("sweep.csv"), &out)?;
    }
    Ok(out)
}
