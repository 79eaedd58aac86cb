//! Command-line driver for falcon-core experiments.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use falcon_core::bench::{self, AblationRow};

use crate::config::{load_config, parse_config, resolve_seed, LoadedConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "falcon", version, about = "Partial-denoising reuse for diffusion action sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write per-episode metrics.
    Run(RunArgs),
    /// Sweep the candidate threshold.
    AblateEpsilon(RunArgs),
    /// Sweep the exploration probability.
    AblateDelta(RunArgs),
    /// Compare adaptive and fixed start-level selection.
    AblateSelection(RunArgs),
    /// Collect summary.json files into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file with `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set falcon.delta=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, or a parent whose subdirectories hold runs.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Where to write report.csv; defaults to the first directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    /// Loads the config, then applies flag and environment precedence.
    pub fn resolve(&self) -> Result<(LoadedConfig, PathBuf)> {
        let mut loaded = match &self.config {
            Some(path) => load_config(path, &self.overrides)?,
            None => parse_config("", &self.overrides)?,
        };
        let env_seed = std::env::var(SEED_ENV).ok();
        loaded.run.seed = resolve_seed(self.seed, env_seed.as_deref(), loaded.run.seed)?;
        if let Some(n) = self.episodes {
            loaded.run.episodes = n;
        }
        loaded.run.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| loaded.run.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((loaded, out))
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run(&args),
        Command::AblateEpsilon(args) => {
            ablation(&args, "ablate_epsilon.csv", |c| bench::ablate_epsilon(&c.run, c.epsilon_scale))
        }
        Command::AblateDelta(args) => ablation(&args, "ablate_delta.csv", |c| bench::ablate_delta(&c.run)),
        Command::AblateSelection(args) => {
            ablation(&args, "ablate_selection.csv", |c| bench::ablate_selection(&c.run))
        }
        Command::Report(args) => report(&args),
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let (loaded, out) = args.resolve()?;
    let metrics = bench::run_experiment(&loaded.run)?;
    bench::write_outputs(&metrics, &out)?;
    let a = &metrics.aggregates;
    println!(
        "{} {} falcon={}: score {:.3} ± {:.3}, nfe {:.2} ± {:.2} over {} episodes -> {}",
        loaded.run.env.name,
        loaded.run.backend,
        loaded.run.falcon_enabled,
        a.score_mean,
        a.score_std,
        a.nfe_mean,
        a.nfe_std,
        a.episodes,
        out.display()
    );
    Ok(())
}

fn ablation<F>(args: &RunArgs, file: &str, sweep: F) -> Result<()>
where
    F: FnOnce(&LoadedConfig) -> falcon_core::Result<Vec<AblationRow>>,
{
    let (loaded, out) = args.resolve()?;
    let rows = sweep(&loaded)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(file);
    bench::write_ablation_csv(&rows, &path)?;
    println!("{:<16} {:>10} {:>8} {:>9} {:>8} {:>8}", "label", "value", "score", "nfe", "nfe_std", "speedup");
    for r in &rows {
        println!(
            "{:<16} {:>10.4} {:>8.3} {:>9.2} {:>8.2} {:>8.2}",
            r.label, r.value, r.score_mean, r.nfe_mean, r.nfe_std, r.speedup
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn find_summaries(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for dir in dirs {
        let direct = dir.join("summary.json");
        if direct.is_file() {
            found.push(direct);
            continue;
        }
        let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
        let mut subs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path().join("summary.json")))
            .filter(|p| p.is_file())
            .collect();
        subs.sort();
        found.extend(subs);
    }
    if found.is_empty() {
        bail!("no summary.json found under the given directories");
    }
    Ok(found)
}

pub const REPORT_HEADER: &str =
    "run,env,backend,falcon,episodes,score_mean,score_std,nfe_mean,nfe_std,est_batch_mean,reuse_fraction";

fn run_label(path: &Path) -> String {
    path.parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| ".".into())
}

fn report(args: &ReportArgs) -> Result<()> {
    let summaries = find_summaries(&args.dirs)?;
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    println!(
        "{:<20} {:<14} {:<10} {:>6} {:>8} {:>9} {:>7}",
        "run", "env", "backend", "falcon", "score", "nfe", "reuse"
    );
    for path in &summaries {
        let s = bench::read_summary(path)?;
        let a = &s.aggregates;
        let label = run_label(path);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            label,
            s.config.env.name,
            s.config.backend,
            s.config.falcon_enabled,
            a.episodes,
            a.score_mean,
            a.score_std,
            a.nfe_mean,
            a.nfe_std,
            a.est_batch_mean,
            a.reuse_fraction
        ));
        println!(
            "{:<20} {:<14} {:<10} {:>6} {:>8.3} {:>9.2} {:>7.3}",
            label,
            s.config.env.name.to_string(),
            s.config.backend.to_string(),
            s.config.falcon_enabled,
            a.score_mean, a.nfe_mean, a.reuse_fraction
        );
    }
    let out = args.out.clone().unwrap_or_else(|| args.dirs[0].clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("report.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
