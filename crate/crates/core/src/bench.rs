//! Seeded experiment runner, metrics and persistence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::AnalyticDenoiser;
use crate::envs::{self, EnvKind, EnvSpec, EpisodeRecord};
use crate::error::{Error, Result};
use crate::falcon::{
    baseline_decide, distance, falcon_decide, Backend, DistanceMetric, FalconConfig, FalconState,
    SelectionMode, StartOrigin,
};
use crate::rng::{env_rng, DecisionRngs};
use crate::samplers::SamplerKind;
use crate::schedule::{NoiseSchedule, ScheduleKind, StepGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub backend: SamplerKind,
    pub schedule: ScheduleKind,
    /// Total diffusion levels `K`.
    pub levels: usize,
    /// Solver steps `M` for the few-step backends.
    pub steps: usize,
    pub falcon_enabled: bool,
    pub falcon: FalconConfig,
    pub episodes: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(env: EnvKind) -> Self {
        RunConfig {
            env: EnvSpec::new(env),
            backend: SamplerKind::Ddpm,
            schedule: ScheduleKind::Cosine,
            levels: 100,
            steps: 16,
            falcon_enabled: true,
            falcon: FalconConfig::default(),
            episodes: 200,
            seed: 0,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.falcon.validate()?;
        if self.episodes < 1 {
            return Err(Error::invalid("run.episodes must be >= 1"));
        }
        if self.levels < 1 {
            return Err(Error::invalid("diffusion.levels must be >= 1"));
        }
        if self.steps < 1 || self.steps > self.levels {
            return Err(Error::invalid(format!(
                "diffusion.steps must lie in [1, {}], got {}",
                self.levels, self.steps
            )));
        }
        Ok(())
    }

    /// The same run with Falcon switched off.
    pub fn baseline(&self) -> Self {
        RunConfig {
            falcon_enabled: false,
            ..self.clone()
        }
    }

    pub fn episode_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }
}

/// Schedule, grid and oracle shared by every episode of a run.
pub struct Harness {
    pub config: RunConfig,
    pub schedule: NoiseSchedule,
    pub grid: StepGrid,
    pub denoiser: AnalyticDenoiser<EnvSpec>,
}

impl Harness {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::build(config.schedule, config.levels)?;
        let grid = match config.backend {
            SamplerKind::Ddpm => StepGrid::full(config.levels)?,
            SamplerKind::Ddim | SamplerKind::DpmSolver => StepGrid::uniform(config.levels, config.steps)?,
        };
        let denoiser = AnalyticDenoiser::new(schedule.clone(), config.env.clone());
        Ok(Harness {
            config,
            schedule,
            grid,
            denoiser,
        })
    }

    pub fn backend(&self) -> Backend<'_, AnalyticDenoiser<EnvSpec>> {
        Backend {
            kind: self.config.backend,
            schedule: &self.schedule,
            grid: &self.grid,
            denoiser: &self.denoiser,
        }
    }

    pub fn run_episode(&self, index: usize) -> Result<EpisodeRecord> {
        let spec = &self.config.env;
        let horizon = spec.horizon();
        let seed = self.config.episode_seed(index);
        let mut state = envs::reset(spec, &mut env_rng(seed));
        let mut falcon = FalconState::new(&self.config.falcon)?;
        let mut decisions = Vec::with_capacity(spec.decisions());
        let mut executed = Array2::zeros((spec.episode_length, envs::ACTION_DIM));
        for d in 0..spec.decisions() {
            let obs = envs::observe(&state, spec);
            let mut rngs = DecisionRngs::new(seed, d);
            let result = if self.config.falcon_enabled {
                falcon_decide(self.backend(), &obs, &mut falcon, &self.config.falcon, &horizon, &mut rngs)?
            } else {
                baseline_decide(self.backend(), &obs, &horizon, &mut rngs)?
            };
            let actions = result.chunk.executed(horizon.execution);
            let row = d * horizon.execution;
            executed
                .slice_mut(s![row..row + horizon.execution, ..])
                .assign(&actions);
            state = envs::step_execute(&state, actions, spec)?;
            decisions.push(result);
        }
        let score = envs::score(&state, spec)?;
        Ok(EpisodeRecord {
            seed,
            decisions,
            executed,
            mode: envs::mode_label(&state, spec),
            final_state: state,
            score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub seed: u64,
    pub score: f64,
    pub nfe_mean: f64,
    pub nfe_total: usize,
    pub est_batch_total: usize,
    pub mode: Option<usize>,
    pub starts: Vec<StartOrigin>,
    /// Overlap RMS distance between each pair of consecutive final predictions.
    pub overlap_distances: Vec<f64>,
}

impl EpisodeMetrics {
    pub fn from_record(episode: usize, record: &EpisodeRecord, execution: usize) -> Self {
        let nfe_total: usize = record.decisions.iter().map(|d| d.nfe_sequential).sum();
        let overlap_distances = record
            .decisions
            .windows(2)
            .map(|w| {
                let prev = w[0].chunk.unexecuted(execution);
                let rows = prev.nrows();
                let next = w[1].chunk.values.slice(s![..rows, ..]);
                distance(prev, next, DistanceMetric::Rms)
            })
            .collect();
        EpisodeMetrics {
            episode,
            seed: record.seed,
            score: record.score,
            nfe_mean: nfe_total as f64 / record.decisions.len().max(1) as f64,
            nfe_total,
            est_batch_total: record.decisions.iter().map(|d| d.estimation_batch).sum(),
            mode: record.mode,
            starts: record.decisions.iter().map(|d| d.start).collect(),
            overlap_distances,
        }
    }

    pub fn mean_start_level(&self) -> f64 {
        self.starts.iter().map(|s| s.level() as f64).sum::<f64>() / self.starts.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub episodes: usize,
    pub score_mean: f64,
    pub score_std: f64,
    pub nfe_mean: f64,
    pub nfe_std: f64,
    pub est_batch_mean: f64,
    pub mean_start_level: f64,
    pub reuse_fraction: f64,
    pub mode_frequencies: Option<Vec<f64>>,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl Aggregates {
    pub fn compute(episodes: &[EpisodeMetrics]) -> Self {
        let (score_mean, score_std) = mean_std(episodes.iter().map(|e| e.score));
        let (nfe_mean, nfe_std) = mean_std(episodes.iter().map(|e| e.nfe_mean));
        let (est_batch_mean, _) = mean_std(episodes.iter().map(|e| e.est_batch_total as f64));
        let (mean_start_level, _) = mean_std(episodes.iter().map(|e| e.mean_start_level()));
        let decisions: usize = episodes.iter().map(|e| e.starts.len()).sum();
        let reused: usize = episodes
            .iter()
            .map(|e| e.starts.iter().filter(|s| s.is_reuse()).count())
            .sum();
        let labelled = !episodes.is_empty() && episodes.iter().all(|e| e.mode.is_some());
        Aggregates {
            episodes: episodes.len(),
            score_mean,
            score_std,
            nfe_mean,
            nfe_std,
            est_batch_mean,
            mean_start_level,
            reuse_fraction: if decisions == 0 { 0.0 } else { reused as f64 / decisions as f64 },
            mode_frequencies: if labelled { mode_histogram(episodes, 2).ok() } else { None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: RunConfig,
    pub episodes: Vec<EpisodeMetrics>,
    pub aggregates: Aggregates,
}

impl RunMetrics {
    pub fn from_episodes(config: RunConfig, mut episodes: Vec<EpisodeMetrics>) -> Self {
        episodes.sort_by_key(|e| e.episode);
        let aggregates = Aggregates::compute(&episodes);
        RunMetrics {
            config,
            episodes,
            aggregates,
        }
    }
}

/// Runs every episode of `cfg` on the rayon pool.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunMetrics> {
    let harness = Harness::new(cfg.clone())?;
    let execution = cfg.env.execution_horizon;
    let episodes = (0..cfg.episodes)
        .into_par_iter()
        .map(|i| {
            harness
                .run_episode(i)
                .map(|r| EpisodeMetrics::from_record(i, &r, execution))
                .map_err(|e| Error::Episode {
                    index: i,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunMetrics::from_episodes(cfg.clone(), episodes))
}

pub fn speedup_ratio(base_nfe: f64, fast_nfe: f64) -> Result<f64> {
    if fast_nfe == 0.0 {
        return Err(Error::invalid("speedup undefined for zero NFE"));
    }
    Ok(base_nfe / fast_nfe)
}

/// Mean NFE of `base` over mean NFE of `fast`.
pub fn compute_speedup(base: &RunMetrics, fast: &RunMetrics) -> Result<f64> {
    if base.config.env.name != fast.config.env.name || base.config.backend != fast.config.backend {
        return Err(Error::invalid(format!(
            "speedup needs matching env and backend, got {}/{} vs {}/{}",
            base.config.env.name, base.config.backend, fast.config.env.name, fast.config.backend
        )));
    }
    speedup_ratio(base.aggregates.nfe_mean, fast.aggregates.nfe_mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    /// `bins + 1` edges from 0 to `upper`; the last bin also takes overflow.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub threshold: f64,
    pub fraction_below: f64,
}

pub fn distance_density(episodes: &[EpisodeMetrics], bins: usize, upper: f64, threshold: f64) -> Result<Density> {
    if bins == 0 || upper.is_nan() || upper <= 0.0 {
        return Err(Error::invalid("density needs at least one bin and a positive range"));
    }
    let values: Vec<f64> = episodes.iter().flat_map(|e| e.overlap_distances.iter().copied()).collect();
    if values.is_empty() {
        return Err(Error::invalid("density needs an episode with at least two decisions"));
    }
    let width = upper / bins as f64;
    let mut counts = vec![0; bins];
    for &v in &values {
        counts[((v / width) as usize).min(bins - 1)] += 1;
    }
    let below = values.iter().filter(|&&v| v < threshold).count();
    Ok(Density {
        edges: (0..=bins).map(|i| i as f64 * width).collect(),
        counts,
        threshold,
        fraction_below: below as f64 / values.len() as f64,
    })
}

/// Frequency of each mode label `1..=modes`.
pub fn mode_histogram(episodes: &[EpisodeMetrics], modes: usize) -> Result<Vec<f64>> {
    if episodes.is_empty() {
        return Err(Error::invalid("mode histogram needs at least one episode"));
    }
    let mut counts = vec![0usize; modes];
    for e in episodes {
        match e.mode {
            Some(m) if (1..=modes).contains(&m) => counts[m - 1] += 1,
            Some(m) => return Err(Error::invalid(format!("episode {}: mode {m} out of range", e.episode))),
            None => return Err(Error::invalid(format!("episode {}: missing mode label", e.episode))),
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / episodes.len() as f64).collect())
}

/// `A[j, i] = k` when decision `i` started from a chunk of decision `j` at
/// level `k`; Gaussian starts sit on the diagonal. Unset cells hold -1.
pub fn start_heatmap(episode: &EpisodeMetrics, execution: usize) -> Array2<i64> {
    let n = episode.starts.len();
    let mut a = Array2::from_elem((n, n), -1);
    for (i, start) in episode.starts.iter().enumerate() {
        let (j, level) = match *start {
            StartOrigin::Gaussian { level, .. } => (i, level),
            StartOrigin::Buffer { origin, level } => ((origin - 1) / execution, level),
        };
        a[[j, i]] = level as i64;
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub config: RunConfig,
    pub aggregates: Aggregates,
    pub density: Option<Density>,
}

pub const METRICS_HEADER: &str = "episode,score,nfe_mean,nfe_total,est_batch_total,mode,seed";

pub fn write_metrics_csv(episodes: &[EpisodeMetrics], path: &Path) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for e in episodes {
        let mode = e.mode.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.episode, e.score, e.nfe_mean, e.nfe_total, e.est_batch_total, mode, e.seed
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn density_for(metrics: &RunMetrics) -> Option<Density> {
    distance_density(&metrics.episodes, 50, 1.0, 3.0 * metrics.config.env.component_std).ok()
}

/// Writes metrics.csv, summary.json, heatmap.csv and density.csv into `dir`.
pub fn write_outputs(metrics: &RunMetrics, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_csv(&metrics.episodes, &dir.join("metrics.csv"))?;

    let density = density_for(metrics);
    let summary = SummaryFile {
        config: metrics.config.clone(),
        aggregates: metrics.aggregates.clone(),
        density: density.clone(),
    };
    let path = dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("heatmap.csv");
    let mut out = String::from("episode,origin");
    let n = metrics.config.env.decisions();
    for i in 0..n {
        out.push_str(&format!(",d{i}"));
    }
    out.push('\n');
    for e in &metrics.episodes {
        let a = start_heatmap(e, metrics.config.env.execution_horizon);
        for (j, row) in a.rows().into_iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},{},{}\n", e.episode, j, cells.join(",")));
        }
    }
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("density.csv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = String::from("bin_lo,bin_hi,count\n");
    if let Some(d) = &density {
        for (i, c) in d.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", d.edges[i], d.edges[i + 1], c));
        }
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn read_summary(path: &Path) -> Result<SummaryFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// ε values swept by the threshold ablation.
pub const EPSILON_GRID: [f64; 8] = [1e-4, 5e-3, 8e-3, 1e-2, 3e-2, 5e-2, 8e-2, 1e-1];
/// δ values swept by the exploration ablation.
pub const DELTA_GRID: [f64; 8] = [0.001, 0.05, 0.0625, 0.076, 0.1, 0.2, 0.33, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub value: f64,
    pub score_mean: f64,
    pub nfe_mean: f64,
    pub nfe_std: f64,
    pub speedup: f64,
}

pub const ABLATION_HEADER: &str = "label,value,score_mean,nfe_mean,nfe_std,speedup";

fn ablation_row(label: String, value: f64, run: &RunMetrics, base: &RunMetrics) -> Result<AblationRow> {
    Ok(AblationRow {
        label,
        value,
        score_mean: run.aggregates.score_mean,
        nfe_mean: run.aggregates.nfe_mean,
        nfe_std: run.aggregates.nfe_std,
        speedup: compute_speedup(base, run)?,
    })
}

/// Sweeps `epsilon = scale * v` over [`EPSILON_GRID`].
pub fn ablate_epsilon(cfg: &RunConfig, scale: f64) -> Result<Vec<AblationRow>> {
    let base = run_experiment(&cfg.baseline())?;
    EPSILON_GRID
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.falcon_enabled = true;
            c.falcon.epsilon = v * scale;
            ablation_row(format!("epsilon={v}"), v * scale, &run_experiment(&c)?, &base)
        })
        .collect()
}

pub fn ablate_delta(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let base = run_experiment(&cfg.baseline())?;
    DELTA_GRID
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.falcon_enabled = true;
            c.falcon.delta = v;
            ablation_row(format!("delta={v}"), v, &run_experiment(&c)?, &base)
        })
        .collect()
}

/// Adaptive selection against fixed starts at `K/2` and `K/5`.
pub fn ablate_selection(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let base = run_experiment(&cfg.baseline())?;
    let k = cfg.levels;
    let modes = [
        ("adaptive".to_string(), SelectionMode::Adaptive, 0.0),
        ("fixed=K/2".to_string(), SelectionMode::Fixed((k / 2).max(1)), (k / 2) as f64),
        ("fixed=K/5".to_string(), SelectionMode::Fixed((k / 5).max(1)), (k / 5) as f64),
    ];
    modes
        .into_iter()
        .map(|(label, mode, value)| {
            let mut c = cfg.clone();
            c.falcon_enabled = true;
            c.falcon.selection = mode;
            ablation_row(label, value, &run_experiment(&c)?, &base)
        })
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label, r.value, r.score_mean, r.nfe_mean, r.nfe_std, r.speedup
        ));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
