//! Noise-prediction functions `eps(O, A^k, k)`.
//!
//! [`AnalyticDenoiser`] is exact for observation-conditioned isotropic Gaussian
//! mixtures, so every sampler and warm-start path can be checked against ground
//! truth. [`mlp::MicroMlp`] is a small trainable network for the training loss.

pub mod mlp;

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// The latest `T_o` observation rows at decision step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub values: Array2<f64>,
    pub t: usize,
}

impl ObservationWindow {
    pub fn new(values: Array2<f64>, t: usize) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::invalid("observation window has no rows"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation window".into()));
        }
        Ok(Self { values, t })
    }

    pub fn latest(&self) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(self.values.nrows() - 1)
    }
}

/// A `T_p x D_a` action chunk at noise level `level` (0 = clean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub values: Array2<f64>,
    pub level: usize,
}

impl ActionChunk {
    pub fn new(values: Array2<f64>, level: usize) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("action chunk at level {level}")));
        }
        Ok(Self { values, level })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// The first `exec` rows, the part a controller executes.
    pub fn executed(&self, exec: usize) -> ArrayView2<'_, f64> {
        self.values.slice(ndarray::s![..exec, ..])
    }

    /// Rows from `exec` onward, the part left for later decisions.
    pub fn unexecuted(&self, exec: usize) -> ArrayView2<'_, f64> {
        self.values.slice(ndarray::s![exec.., ..])
    }
}

/// An isotropic Gaussian mixture over action chunks, evaluated at one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMixture {
    weights: Vec<f64>,
    means: Vec<Array2<f64>>,
    std: f64,
}

impl ConditionalMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Array2<f64>>, std: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if weights.len() != means.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} means",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|w| w.is_nan() || *w <= 0.0) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::invalid(format!("component std {std} must be >= 0")));
        }
        let shape = means[0].dim();
        if let Some(m) = means.iter().find(|m| m.dim() != shape) {
            return Err(Error::ShapeMismatch {
                context: "mixture means",
                expected: shape,
                found: m.dim(),
            });
        }
        Ok(Self {
            weights,
            means,
            std,
        })
    }

    pub fn single(mean: Array2<f64>, std: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], std)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Array2<f64>] {
        &self.means
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.means[0].dim()
    }

    /// Posterior component probabilities given a sample at cumulative level `alpha_bar`.
    pub fn responsibilities(&self, alpha_bar: f64, sample: ArrayView2<'_, f64>) -> Vec<f64> {
        if self.components() == 1 {
            return vec![1.0];
        }
        let scale = alpha_bar.sqrt();
        let var = alpha_bar * self.std * self.std + 1.0 - alpha_bar;
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, mean)| {
                let sq: f64 = Zip::from(&sample)
                    .and(mean)
                    .fold(0.0, |acc, &a, &m| acc + (a - scale * m).powi(2));
                w.ln() - sq / (2.0 * var)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}

/// Maps an observation to the ground-truth conditional action distribution.
pub trait ExpertModel: Sync {
    fn mixture(&self, obs: &ObservationWindow) -> Result<ConditionalMixture>;
}

/// A noise-prediction network `eps(O, A^k, k)`.
pub trait NoisePredictor: Sync {
    fn epsilon(&self, obs: &ObservationWindow, chunk: &ActionChunk) -> Result<Array2<f64>>;
}

impl<T: NoisePredictor + ?Sized> NoisePredictor for &T {
    fn epsilon(&self, obs: &ObservationWindow, chunk: &ActionChunk) -> Result<Array2<f64>> {
        (**self).epsilon(obs, chunk)
    }
}

/// Exact `eps` for a known mixture at an arbitrary `alpha_bar` in `[0, 1)`.
///
/// Component `i` marginalizes to `N(sqrt(ab) mu_i, (ab s^2 + 1 - ab) I)` at the
/// noised level; the score is the responsibility-weighted sum of component
/// scores and `eps = -sqrt(1 - ab) * score`.
pub fn analytic_epsilon_at(
    mix: &ConditionalMixture,
    alpha_bar: f64,
    sample: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if sample.dim() != mix.shape() {
        return Err(Error::ShapeMismatch {
            context: "analytic epsilon",
            expected: mix.shape(),
            found: sample.dim(),
        });
    }
    if !(0.0..1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!(
            "alpha_bar {alpha_bar} leaves no noise to predict"
        )));
    }
    let scale = alpha_bar.sqrt();
    let var = alpha_bar * mix.std() * mix.std() + 1.0 - alpha_bar;
    let coef = (1.0 - alpha_bar).sqrt() / var;
    let resp = mix.responsibilities(alpha_bar, sample);
    let mut eps = Array2::<f64>::zeros(sample.dim());
    for (r, mean) in resp.iter().zip(mix.means()) {
        Zip::from(&mut eps)
            .and(&sample)
            .and(mean)
            .for_each(|e, &a, &m| *e += r * coef * (a - scale * m));
    }
    Ok(eps)
}

/// Exact `eps` for the chunk's own noise level under `schedule`.
pub fn analytic_epsilon(
    mix: &ConditionalMixture,
    schedule: &NoiseSchedule,
    chunk: &ActionChunk,
) -> Result<Array2<f64>> {
    if chunk.level == 0 {
        return Err(Error::level(0, "clean chunk has no noise to predict"));
    }
    schedule.check_level(chunk.level)?;
    analytic_epsilon_at(mix, schedule.alpha_bar(chunk.level), chunk.values.view())
}

/// Ground-truth denoiser backed by an [`ExpertModel`].
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser<M> {
    schedule: NoiseSchedule,
    model: M,
}

impl<M: ExpertModel> AnalyticDenoiser<M> {
    pub fn new(schedule: NoiseSchedule, model: M) -> Self {
        Self { schedule, model }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl<M: ExpertModel> NoisePredictor for AnalyticDenoiser<M> {
    fn epsilon(&self, obs: &ObservationWindow, chunk: &ActionChunk) -> Result<Array2<f64>> {
        let mix = self.model.mixture(obs)?;
        analytic_epsilon(&mix, &self.schedule, chunk)
    }
}

/// A fixed mixture that ignores the observation.
impl ExpertModel for ConditionalMixture {
    fn mixture(&self, _obs: &ObservationWindow) -> Result<ConditionalMixture> {
        Ok(self.clone())
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl NoisePredictor for ZeroDenoiser {
    fn epsilon(&self, _obs: &ObservationWindow, chunk: &ActionChunk) -> Result<Array2<f64>> {
        Ok(Array2::zeros(chunk.values.dim()))
    }
}

/// Wraps a predictor and counts forward evaluations.
#[derive(Debug, Default)]
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<D: NoisePredictor> NoisePredictor for CountingDenoiser<D> {
    fn epsilon(&self, obs: &ObservationWindow, chunk: &ActionChunk) -> Result<Array2<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.epsilon(obs, chunk)
    }
}
