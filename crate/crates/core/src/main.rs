//! `mixphm` command-line entry point.
//!
//! Exit codes: 0 success, 1 other failure, 2 missing checkpoint,
//! 3 invalid configuration, 4 numeric failure. Errors are one JSON line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mixphm::audit::{baseline_param_count, AuditDims, Method};
use mixphm::config::resolve;
use mixphm::gradsuite::gradient_suite;
use mixphm::model::{Adapters, Seq2Seq};
use mixphm::protocol::{evaluate, output_root, pretrain, sweep, PretrainConfig, RunConfig};
use mixphm::report::{aggregate_results, read_results_csv, write_csv, write_summary};
use mixphm::rsa::rsa_profile;
use mixphm::tasks::{generate_synthetic, SyntheticTask, TaskKind};
use mixphm::Error;

const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mixphm", version, about = "PHM mixture-of-experts adapters on a toy encoder-decoder")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config file; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $MIXPHM_OUT, else ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted override, e.g. `--set adapt.reg.alpha=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed; replaces every seed field of the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(output_root)
    }
}

#[derive(Subcommand)]
enum Verb {
    /// Train the backbone from scratch on the pretraining mixture.
    Pretrain(Common),
    /// Tune adapters on the shifted task for every seed and N_D of the run config.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Backbone checkpoint written by `pretrain`.
        #[arg(long)]
        backbone: PathBuf,
    },
    /// Exact-match of a checkpoint on freshly generated samples.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-layer RSA profile of an adapted checkpoint.
    Rsa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Closed-form trainable-parameter count.
    AuditParams {
        /// houlsby | pfeiffer | compacter | lora | adamix | mixphm | mixphm:<flags>
        #[arg(long)]
        method: String,
        #[arg(long = "L", default_value_t = 12)]
        layers: usize,
        #[arg(long = "Ne", default_value_t = 4)]
        n_experts: usize,
        #[arg(long, default_value_t = 768)]
        d: usize,
        #[arg(long, default_value_t = 64)]
        dr: usize,
        #[arg(long, default_value_t = 8)]
        dk: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// LoRA rank.
        #[arg(long, default_value_t = 4)]
        r: usize,
        /// Print a JSON object instead of the bare count.
        #[arg(long)]
        json: bool,
    },
    /// Average expert up-projection factors and save the merged checkpoint.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference gradient check of every component.
    Gradcheck,
    /// Mean and std over seeds of result rows.
    Aggregate {
        /// `results.csv` files written by `adapt`.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum EvalTask {
    Adaptation,
    Copy,
    Reverse,
    KvLookup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SampleConfig {
    task: EvalTask,
    samples: usize,
    seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            task: EvalTask::Adaptation,
            samples: 500,
            seed: 1,
        }
    }
}

/// Sample settings of the `rsa` verb; fewer samples by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
struct RsaConfig(SampleConfig);

impl Default for RsaConfig {
    fn default() -> Self {
        Self(SampleConfig {
            samples: 64,
            ..SampleConfig::default()
        })
    }
}

impl SampleConfig {
    fn generate(&self) -> mixphm::Result<Vec<mixphm::tasks::Sample>> {
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        let task = match self.task {
            EvalTask::Adaptation => SyntheticTask::adaptation(),
            EvalTask::Copy => SyntheticTask::pretraining(TaskKind::Copy),
            EvalTask::Reverse => SyntheticTask::pretraining(TaskKind::Reverse),
            EvalTask::KvLookup => SyntheticTask::pretraining(TaskKind::KvLookup),
        };
        Ok(generate_synthetic(&task, self.samples, self.seed))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Checkpoint(_) => 2,
        Error::Config(_) | Error::UnknownMethod(_) | Error::Json(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "checkpoint",
        3 => "config",
        4 => "numeric",
        _ => "runtime",
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn emit(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("JSON values always serialize"));
}

fn write_json(path: &Path, value: &impl Serialize) -> mixphm::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(verb: Verb) -> mixphm::Result<()> {
    match verb {
        Verb::Pretrain(common) => {
            let mut config: PretrainConfig = resolve(common.config.as_deref(), &common.overrides)?;
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            config.validate()?;
            let out = common.out_dir();
            write_json(&out.join("config.json"), &config)?;
            let (store, model, report) = pretrain(&config)?;
            model.save(&store, &out.join("backbone.ckpt"))?;
            write_json(&out.join("pretrain.json"), &report)?;
            emit(&json!({
                "checkpoint": out.join("backbone.ckpt"),
                "heldout_exact_match": report.heldout_exact_match,
                "per_task": report.per_task,
                "seconds": report.seconds,
            }));
        }
        Verb::Adapt { common, backbone } => {
            let mut config: RunConfig = resolve(common.config.as_deref(), &common.overrides)?;
            if let Some(seed) = common.seed {
                config.seeds = vec![seed];
            }
            config.validate()?;
            let (store, model) = Seq2Seq::load(&backbone)?;
            if !matches!(model.adapters, Adapters::None) {
                return Err(Error::Config(format!("{} already carries adapters", backbone.display())));
            }
            let out = common.out_dir();
            write_json(&out.join("config.json"), &config)?;
            let rows = sweep(&store, &model, &config, &out)?;
            write_csv(&out.join("results.csv"), &rows)?;
            let summary = aggregate_results(&rows)?;
            write_summary(&out, &summary)?;
            emit(&json!({ "results": rows, "summary": summary }));
        }
        Verb::Eval { common, checkpoint } => {
            let mut config: SampleConfig = resolve(common.config.as_deref(), &common.overrides)?;
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            let samples = config.generate()?;
            let (store, mut model) = Seq2Seq::load(&checkpoint)?;
            let score = evaluate(&mut model, &store, &samples)?;
            emit(&json!({ "task": config.task, "samples": samples.len(), "exact_match": score }));
        }
        Verb::Rsa { common, checkpoint } => {
            let RsaConfig(mut config) = resolve(common.config.as_deref(), &common.overrides)?;
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            let samples = config.generate()?;
            let (store, mut model) = Seq2Seq::load(&checkpoint)?;
            let dump = model.activation_dump(&store, &samples)?;
            let report = rsa_profile(&dump)?;
            let out = common.out_dir();
            std::fs::create_dir_all(&out)?;
            dump.save(&out.join("activations.ckpt"))?;
            report.write_csv(&out.join("rsa.csv"))?;
            let (with_stream, with_task) = report.layer_means();
            emit(&json!({
                "rows": report.rows,
                "mean_rsa_delta_vs_stream": with_stream,
                "mean_rsa_delta_vs_task": with_task,
            }));
        }
        Verb::AuditParams {
            method,
            layers,
            n_experts,
            d,
            dr,
            dk,
            n,
            r,
            json,
        } => {
            let method: Method = method.parse()?;
            let dims = AuditDims {
                layers,
                d,
                d_r: dr,
                n,
                d_k: dk,
                r,
                n_experts,
            };
            let count = baseline_param_count(method, &dims)?;
            if json {
                emit(&json!({ "method": method.to_string(), "dims": dims, "params": count }));
            } else {
                println!("{count}");
            }
        }
        Verb::Merge { checkpoint, output } => {
            let (mut store, mut model) = Seq2Seq::load(&checkpoint)?;
            match &mut model.adapters {
                Adapters::MixPhm(m) => m.merge_experts(&mut store),
                _ => return Err(Error::Config("only MixPHM checkpoints can be merged".into())),
            }
            if let Some(parent) = output.parent() {
                std::fs::create_dir_all(parent)?;
            }
            model.save(&store, &output)?;
            emit(&json!({ "checkpoint": output, "merged": true }));
        }
        Verb::Gradcheck => {
            let reports = gradient_suite()?;
            let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            for r in &reports {
                println!("{:<32} {:.3e}", r.component, r.max_rel_error);
            }
            emit(&json!({ "reports": reports, "max_rel_error": worst, "tolerance": GRADIENT_TOLERANCE }));
            if !(worst <= GRADIENT_TOLERANCE) {
                return Err(Error::Divergence {
                    step: 0,
                    what: format!("gradient check error {worst:.3e} exceeds {GRADIENT_TOLERANCE:e}"),
                });
            }
        }
        Verb::Aggregate { input, out } => {
            let mut rows = Vec::new();
            for path in &input {
                rows.extend(read_results_csv(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?);
            }
            let summary = aggregate_results(&rows)?;
            let out = out.unwrap_or_else(output_root);
            write_summary(&out, &summary)?;
            emit(&json!({ "summary": summary }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("config", e.to_string().lines().next().unwrap_or("invalid arguments"), 3),
    };
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(kind(&e), &e.to_string(), exit_code(&e)),
    }
}
