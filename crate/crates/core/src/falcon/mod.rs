//! Warm-started action generation from buffered partial denoising.
//!
//! Each decision after the first estimates the clean chunk behind every
//! buffered partial action with one denoiser pass, keeps the ones that agree
//! with the unexecuted tail of the previous prediction, and resumes the chain
//! from one of them instead of from pure noise.

mod buffer;

pub use buffer::{LatentBuffer, PartialAction};

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ActionChunk, NoisePredictor, ObservationWindow};
use crate::error::{Error, Result};
use crate::rng::DecisionRngs;
use crate::samplers::{chain_path, gaussian_start, run_chain, SamplerKind};
use crate::schedule::{NoiseSchedule, StepGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// L2 over the overlap divided by `sqrt(rows * D_a)`.
    #[default]
    Rms,
    /// Plain L2 over the overlap.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Threshold on Tweedie distance, then temperature softmax over levels.
    #[default]
    Adaptive,
    /// Always resume at the buffered level nearest to the given one.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FalconConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub kappa: f64,
    pub k_min: usize,
    pub capacity: usize,
    #[serde(default)]
    pub metric: DistanceMetric,
    #[serde(default)]
    pub selection: SelectionMode,
}

impl Default for FalconConfig {
    fn default() -> Self {
        FalconConfig {
            epsilon: 0.04,
            delta: 0.1,
            kappa: 1.0,
            k_min: 20,
            capacity: 50,
            metric: DistanceMetric::Rms,
            selection: SelectionMode::Adaptive,
        }
    }
}

impl FalconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::invalid(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.k_min < 1 {
            return Err(Error::invalid("k_min must be >= 1"));
        }
        if self.capacity < 1 {
            return Err(Error::invalid("capacity must be >= 1"));
        }
        if self.selection == SelectionMode::Fixed(0) {
            return Err(Error::invalid("fixed start level must be >= 1"));
        }
        Ok(())
    }
}

/// Chunk geometry: `T_p` predicted rows, the first `T_a` executed, `D_a` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub prediction: usize,
    pub execution: usize,
    pub action_dim: usize,
}

impl Horizon {
    pub fn new(prediction: usize, execution: usize, action_dim: usize) -> Result<Self> {
        if execution < 1 || execution >= prediction {
            return Err(Error::invalid(format!(
                "need 1 <= T_a < T_p, got T_a = {execution}, T_p = {prediction}"
            )));
        }
        if action_dim < 1 {
            return Err(Error::invalid("action dimension must be >= 1"));
        }
        Ok(Horizon {
            prediction,
            execution,
            action_dim,
        })
    }

    pub fn chunk_shape(&self) -> (usize, usize) {
        (self.prediction, self.action_dim)
    }
}

/// The unexecuted tail of the previous prediction, covering `[t, t - T_a + T_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceAction {
    pub values: Array2<f64>,
    pub t: usize,
}

impl ReferenceAction {
    pub fn new(values: Array2<f64>, t: usize, horizon: &Horizon) -> Result<Self> {
        let expected = (horizon.prediction - horizon.execution, horizon.action_dim);
        if values.dim() != expected {
            return Err(Error::ShapeMismatch {
                context: "reference action",
                expected,
                found: values.dim(),
            });
        }
        Ok(ReferenceAction { values, t })
    }

    /// Tail of a prediction made at `previous_t`, for the decision at `previous_t + T_a`.
    pub fn from_previous(chunk: &ActionChunk, previous_t: usize, horizon: &Horizon) -> Result<Self> {
        if chunk.shape() != horizon.chunk_shape() {
            return Err(Error::ShapeMismatch {
                context: "previous prediction",
                expected: horizon.chunk_shape(),
                found: chunk.shape(),
            });
        }
        Self::new(
            chunk.unexecuted(horizon.execution).to_owned(),
            previous_t + horizon.execution,
            horizon,
        )
    }
}

/// Rows shared by a chunk starting at `origin` and the reference window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub candidate_row: usize,
    pub reference_row: usize,
    pub rows: usize,
}

pub fn overlap(origin: usize, reference_t: usize, horizon: &Horizon) -> Option<Overlap> {
    let ref_end = reference_t + horizon.prediction - horizon.execution;
    let start = origin.max(reference_t);
    let end = (origin + horizon.prediction).min(ref_end);
    (end > start).then(|| Overlap {
        candidate_row: start - origin,
        reference_row: start - reference_t,
        rows: end - start,
    })
}

pub fn distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, metric: DistanceMetric) -> f64 {
    let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    match metric {
        DistanceMetric::L2 => sq.sqrt(),
        DistanceMetric::Rms => (sq / a.len().max(1) as f64).sqrt(),
    }
}

pub fn tweedie_from_eps(alpha_bar: f64, sample: ArrayView2<'_, f64>, eps: ArrayView2<'_, f64>) -> Array2<f64> {
    (&sample - &(&eps * (1.0 - alpha_bar).sqrt())) / alpha_bar.sqrt()
}

/// Posterior-mean estimate of the clean chunk behind `p`, conditioned on `obs`.
pub fn tweedie_estimate<D: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    obs: &ObservationWindow,
    p: &PartialAction,
) -> Result<Array2<f64>> {
    schedule.check_level(p.level)?;
    let chunk = ActionChunk {
        values: p.values.clone(),
        level: p.level,
    };
    let eps = denoiser.epsilon(obs, &chunk)?;
    let est = tweedie_from_eps(schedule.alpha_bar(p.level), p.values.view(), eps.view());
    if est.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("tweedie estimate at level {}", p.level)));
    }
    Ok(est)
}

/// One estimate per entry, evaluated in parallel.
pub fn tweedie_batch<D: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    obs: &ObservationWindow,
    entries: &[&PartialAction],
) -> Result<Vec<Array2<f64>>> {
    entries
        .par_iter()
        .map(|p| tweedie_estimate(schedule, denoiser, obs, p))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Index into the entry slice the estimates were built from.
    pub index: usize,
    pub level: usize,
    pub distance: f64,
}

/// Entries whose estimate lies strictly within `epsilon` of the reference on
/// the overlap rows and whose level is at least `k_min`. A `None` estimate
/// marks an entry that was not evaluated.
pub fn build_candidate_set(
    entries: &[&PartialAction],
    estimates: &[Option<Array2<f64>>],
    reference: &ReferenceAction,
    horizon: &Horizon,
    cfg: &FalconConfig,
) -> Result<Vec<Candidate>> {
    if entries.len() != estimates.len() {
        return Err(Error::invalid(format!(
            "{} estimates for {} buffer entries",
            estimates.len(),
            entries.len()
        )));
    }
    let mut out = Vec::new();
    for (index, (p, est)) in entries.iter().zip(estimates).enumerate() {
        let Some(est) = est else { continue };
        if p.level < cfg.k_min {
            continue;
        }
        let Some(ov) = overlap(p.origin, reference.t, horizon) else {
            continue;
        };
        let a = est.slice(s![ov.candidate_row..ov.candidate_row + ov.rows, ..]);
        let b = reference
            .values
            .slice(s![ov.reference_row..ov.reference_row + ov.rows, ..]);
        let d = distance(a, b, cfg.metric);
        if d < cfg.epsilon {
            out.push(Candidate {
                index,
                level: p.level,
                distance: d,
            });
        }
    }
    Ok(out)
}

/// Index into `candidates` drawn with probability proportional to
/// `exp(-level / kappa)`, using the uniform `u` in `[0, 1)`.
pub fn pick_candidate(candidates: &[Candidate], kappa: f64, u: f64) -> Option<usize> {
    let lowest = candidates.iter().map(|c| c.level).min()?;
    let weights: Vec<f64> = candidates
        .iter()
        .map(|c| (-((c.level - lowest) as f64) / kappa).exp())
        .collect();
    let target = u * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return Some(i);
        }
    }
    Some(candidates.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Gaussian(GaussianReason),
    Candidate(usize),
}

/// Exploration with probability `delta`, otherwise a softmax draw from the
/// candidates; an empty set falls back to a Gaussian start. Two uniforms are
/// drawn on every call.
pub fn select_start(candidates: &[Candidate], cfg: &FalconConfig, rng: &mut dyn RngCore) -> Selection {
    let explore: f64 = rng.random();
    let pick: f64 = rng.random();
    if explore < cfg.delta {
        return Selection::Gaussian(GaussianReason::Explored);
    }
    match pick_candidate(candidates, cfg.kappa, pick) {
        Some(i) => Selection::Candidate(i),
        None => Selection::Gaussian(GaussianReason::NoCandidate),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianReason {
    /// The first decision of an episode, or any baseline decision.
    Initial,
    Explored,
    NoCandidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartOrigin {
    Gaussian { reason: GaussianReason, level: usize },
    Buffer { origin: usize, level: usize },
}

impl StartOrigin {
    pub fn level(&self) -> usize {
        match *self {
            StartOrigin::Gaussian { level, .. } | StartOrigin::Buffer { level, .. } => level,
        }
    }

    pub fn is_reuse(&self) -> bool {
        matches!(self, StartOrigin::Buffer { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionResult {
    pub t: usize,
    pub chunk: ActionChunk,
    pub start: StartOrigin,
    pub nfe_sequential: usize,
    pub estimation_batch: usize,
}

/// The sampler a decision runs on.
pub struct Backend<'a, D: ?Sized> {
    pub kind: SamplerKind,
    pub schedule: &'a NoiseSchedule,
    pub grid: &'a StepGrid,
    pub denoiser: &'a D,
}

impl<D: ?Sized> Clone for Backend<'_, D> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<D: ?Sized> Copy for Backend<'_, D> {}

impl<'a, D: NoisePredictor + ?Sized> Backend<'a, D> {
    /// Level a Gaussian start begins at.
    pub fn top_level(&self) -> usize {
        match self.kind {
            SamplerKind::Ddpm => self.schedule.levels(),
            SamplerKind::Ddim | SamplerKind::DpmSolver => self.grid.top(),
        }
    }

    /// Steps from `level` to 0, or an error if the chain cannot start there.
    pub fn chain_length(&self, level: usize) -> Result<usize> {
        Ok(chain_path(self.kind, self.schedule, self.grid, level)?.len() - 1)
    }

    fn complete(
        &self,
        obs: &ObservationWindow,
        start: ActionChunk,
        rng: &mut dyn RngCore,
        buffer: Option<&mut LatentBuffer>,
    ) -> Result<(ActionChunk, usize)> {
        let t = obs.t;
        let result = match buffer {
            Some(buffer) => {
                let mut sink = |c: &ActionChunk| {
                    // level >= 1 and finite values are guaranteed by the chain
                    buffer.insert(PartialAction {
                        origin: t,
                        level: c.level,
                        values: c.values.clone(),
                    });
                };
                run_chain(self.kind, self.schedule, self.grid, self.denoiser, obs, start, rng, Some(&mut sink))?
            }
            None => run_chain(self.kind, self.schedule, self.grid, self.denoiser, obs, start, rng, None)?,
        };
        Ok((result.final_chunk, result.nfe))
    }
}

/// One plain decision: fresh noise from the chain stream, full chain.
pub fn baseline_decide<D: NoisePredictor + ?Sized>(
    backend: Backend<'_, D>,
    obs: &ObservationWindow,
    horizon: &Horizon,
    rngs: &mut DecisionRngs,
) -> Result<DecisionResult> {
    let start = gaussian_start(backend.kind, backend.schedule, backend.grid, horizon.chunk_shape(), &mut rngs.chain);
    let level = start.level;
    let (chunk, nfe) = backend.complete(obs, start, &mut rngs.chain, None)?;
    Ok(DecisionResult {
        t: obs.t,
        chunk,
        start: StartOrigin::Gaussian {
            reason: GaussianReason::Initial,
            level,
        },
        nfe_sequential: nfe,
        estimation_batch: 0,
    })
}

/// Per-episode Falcon state.
#[derive(Debug, Clone)]
pub struct FalconState {
    pub buffer: LatentBuffer,
    pub previous: Option<(usize, ActionChunk)>,
}

impl FalconState {
    pub fn new(cfg: &FalconConfig) -> Result<Self> {
        Ok(FalconState {
            buffer: LatentBuffer::new(cfg.capacity)?,
            previous: None,
        })
    }

    pub fn reset(&mut self) {
        self.buffer.clear();
        self.previous = None;
    }

    pub fn reference(&self, horizon: &Horizon) -> Result<Option<ReferenceAction>> {
        self.previous
            .as_ref()
            .map(|(t, chunk)| ReferenceAction::from_previous(chunk, *t, horizon))
            .transpose()
    }
}

/// One Falcon decision. Buffered entries at the top level are never reused,
/// so a reused start always saves at least one step.
pub fn falcon_decide<D: NoisePredictor + ?Sized>(
    backend: Backend<'_, D>,
    obs: &ObservationWindow,
    state: &mut FalconState,
    cfg: &FalconConfig,
    horizon: &Horizon,
    rngs: &mut DecisionRngs,
) -> Result<DecisionResult> {
    let top = backend.top_level();
    let mut estimation_batch = 0;
    let selection = match state.reference(horizon)? {
        None => Selection::Gaussian(GaussianReason::Initial),
        Some(reference) => {
            let explore: f64 = rngs.select.random();
            let pick: f64 = rngs.select.random();
            let eligible: Vec<&PartialAction> = state
                .buffer
                .iter()
                .filter(|p| p.level < top && overlap(p.origin, reference.t, horizon).is_some())
                .collect();
            if explore < cfg.delta {
                Selection::Gaussian(GaussianReason::Explored)
            } else {
                let chosen = match cfg.selection {
                    SelectionMode::Adaptive => {
                        let eligible: Vec<&PartialAction> =
                            eligible.into_iter().filter(|p| p.level >= cfg.k_min).collect();
                        let estimates = tweedie_batch(backend.schedule, backend.denoiser, obs, &eligible)?;
                        estimation_batch = estimates.len();
                        let estimates: Vec<Option<Array2<f64>>> = estimates.into_iter().map(Some).collect();
                        let candidates = build_candidate_set(&eligible, &estimates, &reference, horizon, cfg)?;
                        pick_candidate(&candidates, cfg.kappa, pick).map(|i| eligible[candidates[i].index])
                    }
                    SelectionMode::Fixed(target) => nearest_level(&eligible, target),
                };
                match chosen {
                    Some(p) => {
                        let start = ActionChunk {
                            values: p.values.clone(),
                            level: p.level,
                        };
                        let origin = StartOrigin::Buffer {
                            origin: p.origin,
                            level: p.level,
                        };
                        let (chunk, nfe) = backend.complete(obs, start, &mut rngs.chain, Some(&mut state.buffer))?;
                        state.previous = Some((obs.t, chunk.clone()));
                        return Ok(DecisionResult {
                            t: obs.t,
                            chunk,
                            start: origin,
                            nfe_sequential: nfe,
                            estimation_batch,
                        });
                    }
                    None => Selection::Gaussian(GaussianReason::NoCandidate),
                }
            }
        }
    };
    let Selection::Gaussian(reason) = selection else {
        unreachable!("buffered starts return early")
    };
    let start = gaussian_start(backend.kind, backend.schedule, backend.grid, horizon.chunk_shape(), &mut rngs.chain);
    let level = start.level;
    let (chunk, nfe) = backend.complete(obs, start, &mut rngs.chain, Some(&mut state.buffer))?;
    state.previous = Some((obs.t, chunk.clone()));
    Ok(DecisionResult {
        t: obs.t,
        chunk,
        start: StartOrigin::Gaussian { reason, level },
        nfe_sequential: nfe,
        estimation_batch,
    })
}

/// Entry from the most recent origin whose level is closest to `target`,
/// preferring the lower level on ties.
fn nearest_level<'b>(entries: &[&'b PartialAction], target: usize) -> Option<&'b PartialAction> {
    let latest = entries.iter().map(|p| p.origin).max()?;
    entries
        .iter()
        .filter(|p| p.origin == latest)
        .min_by_key(|p| (p.level.abs_diff(target), p.level))
        .copied()
}
