//! Discrete noise schedules and few-step sampling grids.
//!
//! Levels are 1-based: level `k` in `1..=K` indexes `betas[k - 1]`, and
//! level 0 denotes the clean sample with `alpha_bar(0) == 1`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clamp applied to generated betas.
const MAX_BETA: f64 = 0.999;
/// Offset of the squared-cosine schedule.
const COSINE_OFFSET: f64 = 0.008;
/// Endpoints of the linear family at 1000 levels; rescaled by `1000 / K`.
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!(
                "unknown schedule kind `{other}` (expected linear or cosine)"
            ))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

/// Reverse-step noise scale for the ancestral sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// `sigma_k^2 = beta_k (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k)`.
    #[default]
    Posterior,
    /// `sigma_k^2 = beta_k`.
    Beta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    sigma_kind: SigmaKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule of `levels` steps from one of the named families.
    pub fn build(kind: ScheduleKind, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::invalid("schedule needs at least one level"));
        }
        let betas = match kind {
            ScheduleKind::Linear => linear_betas(levels),
            ScheduleKind::Cosine => cosine_betas(levels),
        };
        Self::from_betas(kind, betas, SigmaKind::Posterior)
    }

    /// Builds a schedule from explicit betas; `kind` is kept only as a label.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>, sigma_kind: SigmaKind) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one level"));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.is_finite() && **b > 0.0 && **b < 1.0))
        {
            return Err(Error::invalid(format!(
                "beta at level {} is {b}, must lie in (0, 1)",
                i + 1
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || alpha_bars.iter().any(|a| *a <= 0.0) {
            return Err(Error::invalid(
                "cumulative alpha product underflowed; schedule is not strictly decreasing",
            ));
        }
        let sigmas = (0..betas.len())
            .map(|i| match sigma_kind {
                SigmaKind::Beta => betas[i].sqrt(),
                SigmaKind::Posterior => {
                    let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                    (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
                }
            })
            .collect();
        Ok(Self {
            kind,
            sigma_kind,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn sigma_kind(&self) -> SigmaKind {
        self.sigma_kind
    }

    /// Total number of diffusion levels `K`.
    pub fn levels(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[self.index(k)]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[self.index(k)]
    }

    /// Cumulative product at level `k`; level 0 is the clean sample (1.0).
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[self.index(k)]
        }
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[self.index(k)]
    }

    fn index(&self, k: usize) -> usize {
        assert!(
            (1..=self.levels()).contains(&k),
            "level {k} outside 1..={}",
            self.levels()
        );
        k - 1
    }

    pub fn check_level(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.levels() {
            Err(Error::level(
                k,
                format!("expected a level in 1..={}", self.levels()),
            ))
        } else {
            Ok(())
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ScheduleRecord::from(self)).expect("schedule record serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let record: ScheduleRecord = serde_json::from_value(value.clone())?;
        record.try_into()
    }
}

/// Serialized form of a schedule: `{kind, K, betas[]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub kind: ScheduleKind,
    #[serde(rename = "K")]
    pub levels: usize,
    pub betas: Vec<f64>,
    #[serde(default)]
    pub sigma: SigmaKind,
}

impl From<&NoiseSchedule> for ScheduleRecord {
    fn from(s: &NoiseSchedule) -> Self {
        Self {
            kind: s.kind,
            levels: s.levels(),
            betas: s.betas.clone(),
            sigma: s.sigma_kind,
        }
    }
}

impl TryFrom<ScheduleRecord> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRecord) -> Result<Self> {
        if r.levels != r.betas.len() {
            return Err(Error::invalid(format!(
                "K = {} but {} betas given",
                r.levels,
                r.betas.len()
            )));
        }
        NoiseSchedule::from_betas(r.kind, r.betas, r.sigma)
    }
}

fn linear_betas(levels: usize) -> Vec<f64> {
    let scale = 1000.0 / levels as f64;
    let (start, end) = (LINEAR_BETA_START * scale, LINEAR_BETA_END * scale);
    (0..levels)
        .map(|i| {
            let frac = if levels == 1 {
                0.0
            } else {
                i as f64 / (levels - 1) as f64
            };
            (start + frac * (end - start)).min(MAX_BETA)
        })
        .collect()
}

fn cosine_alpha_bar(frac: f64) -> f64 {
    ((frac + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2)
        .cos()
        .powi(2)
}

fn cosine_betas(levels: usize) -> Vec<f64> {
    let n = levels as f64;
    (0..levels)
        .map(|i| {
            let lo = cosine_alpha_bar(i as f64 / n);
            let hi = cosine_alpha_bar((i + 1) as f64 / n);
            (1.0 - hi / lo).clamp(f64::MIN_POSITIVE, MAX_BETA)
        })
        .collect()
}

/// Descending solver levels `k_M > ... > k_1`; the terminal clean level 0
/// is implicit and never stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid {
    levels: Vec<usize>,
}

impl StepGrid {
    /// Uniform-stride grid `k_i = round(i * K / M)` for `i = 1..=M`.
    pub fn uniform(total_levels: usize, steps: usize) -> Result<Self> {
        if total_levels == 0 || steps == 0 {
            return Err(Error::invalid("grid needs K >= 1 and M >= 1"));
        }
        if steps > total_levels {
            return Err(Error::invalid(format!(
                "grid has M = {steps} steps but only K = {total_levels} levels"
            )));
        }
        let mut levels: Vec<usize> = (1..=steps)
            .rev()
            .map(|i| (2 * i * total_levels + steps) / (2 * steps))
            .collect();
        levels.dedup();
        Ok(Self { levels })
    }

    /// Every level from `K` down to 1.
    pub fn full(total_levels: usize) -> Result<Self> {
        Self::uniform(total_levels, total_levels)
    }

    pub fn from_levels(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("grid needs at least one level"));
        }
        if levels.windows(2).any(|w| w[1] >= w[0]) || levels.last() == Some(&0) {
            return Err(Error::invalid(
                "grid levels must be strictly decreasing and positive",
            ));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// Number of solver steps `M`.
    pub fn steps(&self) -> usize {
        self.levels.len()
    }

    pub fn top(&self) -> usize {
        self.levels[0]
    }

    pub fn contains(&self, level: usize) -> bool {
        self.levels.contains(&level)
    }

    /// Number of steps a chain starting at `level` runs, if `level` is on the grid.
    pub fn steps_from(&self, level: usize) -> Option<usize> {
        self.levels
            .iter()
            .position(|&l| l == level)
            .map(|i| self.levels.len() - i)
    }

    /// The chain's visited levels from `level` downward, followed by the terminal 0.
    pub fn path_from(&self, level: usize) -> Option<Vec<usize>> {
        let i = self.levels.iter().position(|&l| l == level)?;
        let mut path = self.levels[i..].to_vec();
        path.push(0);
        Some(path)
    }
}

/// Builds a named schedule family with `levels` steps.
pub fn build_schedule(kind: ScheduleKind, levels: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::build(kind, levels)
}

pub fn make_step_grid(total_levels: usize, steps: usize) -> Result<StepGrid> {
    StepGrid::uniform(total_levels, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn explicit_betas_give_products() {
        let s =
            NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.1, 0.2], SigmaKind::Posterior)
                .unwrap();
        assert_abs_diff_eq!(s.alphas()[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alphas()[1], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bars()[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bars()[1], 0.72, epsilon = 1e-15);
    }

    #[test]
    fn single_level_schedule() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::from_betas(kind, vec![1e-4], SigmaKind::Posterior).unwrap();
            assert_abs_diff_eq!(s.alpha_bars()[0], 0.9999, epsilon = 1e-15);
            assert_eq!(s.sigma(1), 0.0);
        }
        assert_eq!(build_schedule(ScheduleKind::Cosine, 1).unwrap().levels(), 1);
    }

    #[test]
    fn cosine_hundred_levels_reaches_noise() {
        let s = build_schedule(ScheduleKind::Cosine, 100).unwrap();
        assert!(s.alpha_bar(100) < 1e-2);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_schedule(ScheduleKind::Linear, 0).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
        assert!(
            NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.5, 1.0], SigmaKind::Beta)
                .is_err()
        );
        assert!(
            NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.0], SigmaKind::Beta).is_err()
        );
    }

    #[test]
    fn sigma_variants() {
        let s = build_schedule(ScheduleKind::Cosine, 50).unwrap();
        assert_eq!(s.sigma(1), 0.0);
        for k in 1..=50 {
            assert!(s.sigma(k).powi(2) <= s.beta(k) + 1e-15);
        }
        let b =
            NoiseSchedule::from_betas(ScheduleKind::Cosine, s.betas().to_vec(), SigmaKind::Beta)
                .unwrap();
        assert_abs_diff_eq!(b.sigma(7).powi(2), b.beta(7), epsilon = 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let s = build_schedule(ScheduleKind::Cosine, 20).unwrap();
        let v = s.to_json();
        assert_eq!(v["kind"], "cosine");
        assert_eq!(v["K"], 20);
        assert_eq!(NoiseSchedule::from_json(&v).unwrap(), s);
    }

    #[test]
    fn grid_examples() {
        assert_eq!(make_step_grid(10, 5).unwrap().levels(), &[10, 8, 6, 4, 2]);
        assert_eq!(
            make_step_grid(10, 10).unwrap().levels(),
            &[10, 9, 8, 7, 6, 5, 4, 3, 2, 1]
        );
        let g = make_step_grid(100, 16).unwrap();
        assert_eq!(g.steps(), 16);
        assert_eq!(g.top(), 100);
        assert!(make_step_grid(10, 11).is_err());
        assert_eq!(g.steps_from(100), Some(16));
        assert_eq!(g.path_from(g.levels()[15]).unwrap(), vec![g.levels()[15], 0]);
    }

    proptest! {
        #[test]
        fn schedule_invariants(levels in 1usize..=500, cosine in any::<bool>()) {
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
            let s = build_schedule(kind, levels).unwrap();
            for k in 1..=levels {
                prop_assert!(s.beta(k) > 0.0 && s.beta(k) < 1.0);
                prop_assert_eq!(s.alpha(k), 1.0 - s.beta(k));
                prop_assert!((s.alpha_bar(k) - s.alpha(k) * s.alpha_bar(k - 1)).abs() < 1e-12);
                if k > 1 {
                    prop_assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
                }
            }
        }

        #[test]
        fn grid_strictly_decreasing(total in 1usize..=500, frac in 0.0f64..1.0) {
            let steps = 1 + ((total - 1) as f64 * frac) as usize;
            let g = make_step_grid(total, steps).unwrap();
            prop_assert_eq!(g.steps(), steps);
            prop_assert_eq!(g.top(), total);
            prop_assert!(g.levels().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(*g.levels().last().unwrap() >= 1);
        }
    }
}
