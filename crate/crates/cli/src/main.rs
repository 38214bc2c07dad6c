//! Command-line front end for pre-training, evaluation, ablations and
//! regret reports.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rtdk_core::harness::{
    emit_report, final_regrets, load_records, median, percentile, run_ablation, run_evaluation, run_pretraining,
    write_trajectory_log, EvaluationOutput, ExperimentConfig, Method, ObjectiveSpec, Pretrained, RegretRecord, Sweep,
};

#[derive(Parser)]
#[command(name = "rtdk", version, about = "Meta-learned Bayesian optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train (for the agent) and evaluate one method.
    Run {
        #[command(flatten)]
        common: Common,
        /// Reuse checkpoints from this directory instead of pre-training.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Repeat the experiment over a sweep such as `lengths=10,30,50` or
    /// `surrogates=none,feedforward,transformer`.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sweep: Sweep,
    },
    /// Rebuild summaries and the plot from raw record files.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Master seed of all random streams.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// `thomson_slice:<dim>`, `powell:<dim>` or `discrete_table:<path>`.
    #[arg(long)]
    objective: Option<ObjectiveSpec>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::from_json_file(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            config.master_seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(method) = self.method {
            config.method = method;
        }
        if let Some(objective) = &self.objective {
            config.objective = objective.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn print_final_regrets(records: &[RegretRecord]) {
    println!("{:<28} {:>12} {:>12} {:>12} {:>6}", "method", "p25", "median", "p75", "runs");
    for (method, mut v) in final_regrets(records) {
        v.sort_by(f64::total_cmp);
        println!(
            "{:<28} {:>12.6} {:>12.6} {:>12.6} {:>6}",
            method,
            percentile(&v, 0.25),
            median(&v),
            percentile(&v, 0.75),
            v.len()
        );
    }
}

fn write_outputs(config: &ExperimentConfig, dir: &Path, output: &EvaluationOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    if !output.failures.is_empty() {
        std::fs::write(dir.join("failures.json"), serde_json::to_string_pretty(&output.failures)?)?;
        log::warn!("{} runs failed; see failures.json", output.failures.len());
    }
    let files = emit_report(&output.records, dir, true)?;
    log::info!("wrote {} and {}", files.raw.display(), files.summary.display());
    Ok(())
}

fn save_pretrained(config: &ExperimentConfig, dir: &Path, pretrained: &Pretrained) -> Result<()> {
    pretrained.save(dir.join("checkpoints"))?;
    std::fs::write(dir.join("pretrain.json"), serde_json::to_string_pretty(&pretrained.report)?)?;
    write_trajectory_log(pretrained.buffer.trajectories(), config.epsilon_clamp, dir.join("pretrain_trajectories.csv"))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { common, checkpoints } => {
            let config = common.load()?;
            let out = config.output_dir.clone();
            let pretrained = match (config.method, checkpoints) {
                (Method::Rtdk, Some(dir)) => Some(Pretrained::load(&config, dir)?),
                (Method::Rtdk, None) => {
                    let p = run_pretraining(&config)?;
                    log::info!("pre-training used {} objective evaluations", p.report.evaluations);
                    save_pretrained(&config, &out, &p)?;
                    Some(p)
                }
                _ => None,
            };
            let output = run_evaluation(&config, pretrained.as_ref())?;
            write_outputs(&config, &out, &output)?;
            print_final_regrets(&output.records);
        }
        Command::Ablate { common, sweep } => {
            let config = common.load()?;
            let settings = run_ablation(&config, &sweep)?;
            let mut all = Vec::new();
            for s in &settings {
                write_outputs(&s.config, &config.output_dir.join(&s.tag), &s.output)?;
                all.extend(s.output.records.iter().cloned());
            }
            print_final_regrets(&all);
        }
        Command::Report { input, out } => {
            let records = load_records(&input)?;
            let files = emit_report(&records, &out, true)?;
            log::info!("wrote {}", files.summary.display());
            print_final_regrets(&records);
        }
    }
    Ok(())
}
