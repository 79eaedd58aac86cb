//! Baseline reverse-process step rules and full-chain generation.
//!
//! All three rules read one [`NoiseSchedule`]. The DDIM rule uses the
//! cumulative `alpha_bar` at both ends of a step. The DPM-Solver rule uses
//! `alpha = sqrt(alpha_bar)`, `sigma = sqrt(1 - alpha_bar)` and log-SNR
//! `lambda = ln(alpha / sigma)`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ActionChunk, NoisePredictor, ObservationWindow};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, StepGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    #[serde(rename = "dpmsolver")]
    DpmSolver,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 3] = [SamplerKind::Ddpm, SamplerKind::Ddim, SamplerKind::DpmSolver];
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            "dpmsolver" => Ok(SamplerKind::DpmSolver),
            other => Err(Error::invalid(format!(
                "unknown sampler `{other}` (expected ddpm, ddim or dpmsolver)"
            ))),
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
            SamplerKind::DpmSolver => "dpmsolver",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ChainResult {
    pub final_chunk: ActionChunk,
    /// Every chunk a step rule was applied to, highest level first.
    pub trajectory: Vec<ActionChunk>,
    pub nfe: usize,
}

pub(crate) fn standard_normal(rng: &mut dyn RngCore, dim: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

fn finite(values: Array2<f64>, level: usize) -> Result<ActionChunk> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sampler output at level {level}")));
    }
    Ok(ActionChunk { values, level })
}

/// `a^{k-1} = (a^k - (1 - alpha_k) / sqrt(1 - alpha_bar_k) eps) / sqrt(alpha_k) + sigma_k z`.
pub fn ddpm_update(
    schedule: &NoiseSchedule,
    level: usize,
    sample: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
    noise: Option<ArrayView2<'_, f64>>,
) -> Array2<f64> {
    let alpha = schedule.alpha(level);
    let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar(level)).sqrt();
    let mut next = (&sample - &(&eps * coef)) / alpha.sqrt();
    if let Some(z) = noise {
        next.scaled_add(schedule.sigma(level), &z);
    }
    next
}

/// One ancestral step from `a_k` to level `k - 1`. Noise is drawn only for
/// `k > 1`; passing no rng forces `z = 0` everywhere.
pub fn ddpm_step<D: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    obs: &ObservationWindow,
    a_k: &ActionChunk,
    rng: Option<&mut dyn RngCore>,
) -> Result<ActionChunk> {
    let k = a_k.level;
    schedule.check_level(k)?;
    let eps = denoiser.epsilon(obs, a_k)?;
    let noise = match rng {
        Some(rng) if k > 1 => Some(standard_normal(rng, a_k.shape())),
        _ => None,
    };
    let next = ddpm_update(
        schedule,
        k,
        a_k.values.view(),
        eps.view(),
        noise.as_ref().map(|z| z.view()),
    );
    finite(next, k - 1)
}

/// Generalized DDIM update between cumulative levels `from` and `to`.
pub fn ddim_update(
    alpha_bar_from: f64,
    alpha_bar_to: f64,
    sample: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
    sigma: f64,
    noise: Option<ArrayView2<'_, f64>>,
) -> Result<Array2<f64>> {
    let dir_var = 1.0 - alpha_bar_to - sigma * sigma;
    if dir_var < -1e-15 {
        return Err(Error::invalid(format!(
            "sigma {sigma} too large for target alpha_bar {alpha_bar_to}"
        )));
    }
    let x0 = (&sample - &(&eps * (1.0 - alpha_bar_from).sqrt())) / alpha_bar_from.sqrt();
    let mut next = x0 * alpha_bar_to.sqrt();
    next.scaled_add(dir_var.max(0.0).sqrt(), &eps);
    if let Some(z) = noise {
        next.scaled_add(sigma, &z);
    }
    Ok(next)
}

/// DDIM step from `a_k` to `target < k`. `sigma = 0` is deterministic and
/// never touches the rng.
pub fn ddim_step<D: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    obs: &ObservationWindow,
    a_k: &ActionChunk,
    target: usize,
    sigma: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<ActionChunk> {
    let k = a_k.level;
    schedule.check_level(k)?;
    if target >= k {
        return Err(Error::level(target, format!("target must be below {k}")));
    }
    if sigma < 0.0 {
        return Err(Error::invalid("ddim sigma must be non-negative"));
    }
    let eps = denoiser.epsilon(obs, a_k)?;
    let noise = match rng {
        Some(rng) if sigma > 0.0 => Some(standard_normal(rng, a_k.shape())),
        _ => None,
    };
    let next = ddim_update(
        schedule.alpha_bar(k),
        schedule.alpha_bar(target),
        a_k.values.view(),
        eps.view(),
        sigma,
        noise.as_ref().map(|z| z.view()),
    )?;
    finite(next, target)
}

/// `lambda = ln(sqrt(ab) / sqrt(1 - ab))`; undefined at `ab` of 0 or 1.
pub fn log_snr(alpha_bar: f64) -> Result<f64> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::invalid(format!(
            "log-SNR undefined at alpha_bar = {alpha_bar}"
        )));
    }
    Ok(0.5 * (alpha_bar / (1.0 - alpha_bar)).ln())
}

/// First-order exponential-integrator update
/// `x' = (alpha' / alpha) x - sigma' (e^h - 1) eps` with `h = lambda' - lambda`.
pub fn dpmsolver_update(
    alpha_bar_from: f64,
    alpha_bar_to: f64,
    sample: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let h = log_snr(alpha_bar_to)? - log_snr(alpha_bar_from)?;
    let ratio = (alpha_bar_to / alpha_bar_from).sqrt();
    let sigma_to = (1.0 - alpha_bar_to).sqrt();
    Ok(&sample * ratio - &(&eps * (sigma_to * h.exp_m1())))
}

/// Limit of the exponential-integrator update as the target log-SNR goes to
/// infinity: the clean-sample prediction `(x - sigma eps) / alpha`.
fn dpmsolver_terminal(
    alpha_bar_from: f64,
    sample: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    log_snr(alpha_bar_from)?;
    Ok((&sample - &(&eps * (1.0 - alpha_bar_from).sqrt())) / alpha_bar_from.sqrt())
}

/// DPM-Solver-1 step from `a_k` to `target < k`. The final step into level 0
/// takes the closed-form limit.
pub fn dpmsolver_step<D: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    obs: &ObservationWindow,
    a_k: &ActionChunk,
    target: usize,
) -> Result<ActionChunk> {
    let k = a_k.level;
    schedule.check_level(k)?;
    if target >= k {
        return Err(Error::level(target, format!("target must be below {k}")));
    }
    let eps = denoiser.epsilon(obs, a_k)?;
    let next = if target == 0 {
        dpmsolver_terminal(schedule.alpha_bar(k), a_k.values.view(), eps.view())?
    } else {
        dpmsolver_update(
            schedule.alpha_bar(k),
            schedule.alpha_bar(target),
            a_k.values.view(),
            eps.view(),
        )?
    };
    finite(next, target)
}

/// Levels a chain visits from `start` (inclusive) down to the terminal 0.
pub fn chain_path(
    kind: SamplerKind,
    schedule: &NoiseSchedule,
    grid: &StepGrid,
    start: usize,
) -> Result<Vec<usize>> {
    match kind {
        SamplerKind::Ddpm => {
            schedule.check_level(start)?;
            Ok((0..=start).rev().collect())
        }
        SamplerKind::Ddim | SamplerKind::DpmSolver => {
            if grid.top() > schedule.levels() {
                return Err(Error::invalid(format!(
                    "grid top {} exceeds K = {}",
                    grid.top(),
                    schedule.levels()
                )));
            }
            grid.path_from(start)
                .ok_or_else(|| Error::level(start, "start level is not on the step grid"))
        }
    }
}

/// Runs the chosen step rule from `start` down to level 0.
///
/// `sink` sees every chunk a step is applied to, before the step runs, so a
/// chain of `n` steps hands it exactly `n` chunks with decreasing levels.
#[allow(clippy::too_many_arguments)]
pub fn run_chain<D: NoisePredictor + ?Sized>(
    kind: SamplerKind,
    schedule: &NoiseSchedule,
    grid: &StepGrid,
    denoiser: &D,
    obs: &ObservationWindow,
    start: ActionChunk,
    rng: &mut dyn RngCore,
    mut sink: Option<&mut dyn FnMut(&ActionChunk)>,
) -> Result<ChainResult> {
    let path = chain_path(kind, schedule, grid, start.level)?;
    let mut current = start;
    let mut trajectory = Vec::with_capacity(path.len() - 1);
    for &target in &path[1..] {
        if let Some(sink) = sink.as_mut() {
            sink(&current);
        }
        let next = match kind {
            SamplerKind::Ddpm => ddpm_step(schedule, denoiser, obs, &current, Some(&mut *rng))?,
            SamplerKind::Ddim => ddim_step(schedule, denoiser, obs, &current, target, 0.0, None)?,
            SamplerKind::DpmSolver => dpmsolver_step(schedule, denoiser, obs, &current, target)?,
        };
        trajectory.push(std::mem::replace(&mut current, next));
    }
    let nfe = trajectory.len();
    Ok(ChainResult {
        final_chunk: current,
        trajectory,
        nfe,
    })
}

/// `N(0, I)` chunk tagged with `level`.
pub fn standard_normal_chunk(rng: &mut dyn RngCore, shape: (usize, usize), level: usize) -> ActionChunk {
    ActionChunk {
        values: standard_normal(rng, shape),
        level,
    }
}

/// Fresh `N(0, I)` chunk at the chain's top level.
pub fn gaussian_start(
    kind: SamplerKind,
    schedule: &NoiseSchedule,
    grid: &StepGrid,
    shape: (usize, usize),
    rng: &mut dyn RngCore,
) -> ActionChunk {
    let level = match kind {
        SamplerKind::Ddpm => schedule.levels(),
        SamplerKind::Ddim | SamplerKind::DpmSolver => grid.top(),
    };
    standard_normal_chunk(rng, shape, level)
}

/// A baseline decision: Gaussian start at the top level, full chain.
#[allow(clippy::too_many_arguments)]
pub fn sample_baseline<D: NoisePredictor + ?Sized>(
    kind: SamplerKind,
    schedule: &NoiseSchedule,
    grid: &StepGrid,
    denoiser: &D,
    obs: &ObservationWindow,
    shape: (usize, usize),
    rng: &mut dyn RngCore,
    sink: Option<&mut dyn FnMut(&ActionChunk)>,
) -> Result<ChainResult> {
    let start = gaussian_start(kind, schedule, grid, shape, rng);
    run_chain(kind, schedule, grid, denoiser, obs, start, rng, sink)
}
