//! Planar point-agent tasks with analytically known expert action mixtures.
//!
//! The agent integrates velocity actions with unit timestep. Each observation
//! row is `[position, context] / world_scale`, where the context is the goal
//! the expert is heading to, or zeros while a bimodal task is undecided. The
//! expert plans `T_p` steps ahead with a capped proportional controller, so
//! the conditional action distribution is a mixture of Gaussians centred on
//! those plans.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionalMixture, ExpertModel, ObservationWindow};
use crate::error::{Error, Result};
use crate::falcon::{DecisionResult, Horizon};

pub const ACTION_DIM: usize = 2;
pub const OBS_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    SmoothTrack,
    BimodalPush,
    JumpySwitch,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::SmoothTrack, EnvKind::BimodalPush, EnvKind::JumpySwitch];
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth_track" => Ok(EnvKind::SmoothTrack),
            "bimodal_push" => Ok(EnvKind::BimodalPush),
            "jumpy_switch" => Ok(EnvKind::JumpySwitch),
            other => Err(Error::invalid(format!(
                "unknown env `{other}` (expected smooth_track, bimodal_push or jumpy_switch)"
            ))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::SmoothTrack => "smooth_track",
            EnvKind::BimodalPush => "bimodal_push",
            EnvKind::JumpySwitch => "jumpy_switch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvKind,
    pub obs_horizon: usize,
    pub execution_horizon: usize,
    pub prediction_horizon: usize,
    pub episode_length: usize,
    pub success_radius: f64,
    pub component_std: f64,
    pub world_scale: f64,
    pub gain: f64,
    pub speed_cap: f64,
    pub start_low: [f64; 2],
    pub start_high: [f64; 2],
    /// Goal for smooth_track; the positive-side goal for the two-goal tasks.
    pub goal: [f64; 2],
    /// Horizontal displacement from the start that latches a bimodal_push mode.
    pub commit_distance: f64,
    /// Per-decision goal flip probability for jumpy_switch.
    pub switch_prob: f64,
    /// Trailing decisions of jumpy_switch that never flip the goal.
    pub quiet_decisions: usize,
}

impl EnvSpec {
    pub fn new(name: EnvKind) -> Self {
        let base = EnvSpec {
            name,
            obs_horizon: 2,
            execution_horizon: 8,
            prediction_horizon: 16,
            episode_length: 96,
            success_radius: 0.2,
            component_std: 0.02,
            world_scale: 1.0,
            gain: 0.15,
            speed_cap: 0.06,
            start_low: [-1.5, -1.5],
            start_high: [-0.5, -0.5],
            goal: [1.0, 1.0],
            commit_distance: 0.25,
            switch_prob: 0.0,
            quiet_decisions: 0,
        };
        match name {
            EnvKind::SmoothTrack => base,
            EnvKind::BimodalPush => EnvSpec {
                speed_cap: 0.08,
                start_low: [-0.1, -0.1],
                start_high: [0.1, 0.1],
                goal: [1.5, 0.0],
                ..base
            },
            EnvKind::JumpySwitch => EnvSpec {
                world_scale: 3.0,
                gain: 0.4,
                speed_cap: 1.0,
                start_low: [-0.5, -0.5],
                start_high: [0.5, 0.5],
                goal: [3.0, 0.0],
                switch_prob: 0.65,
                quiet_decisions: 2,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        Horizon::new(self.prediction_horizon, self.execution_horizon, ACTION_DIM)?;
        if self.obs_horizon < 1 {
            return Err(Error::invalid("env.obs_horizon must be >= 1"));
        }
        if self.episode_length == 0 || !self.episode_length.is_multiple_of(self.execution_horizon) {
            return Err(Error::invalid(format!(
                "env.episode_length {} must be a positive multiple of T_a = {}",
                self.episode_length, self.execution_horizon
            )));
        }
        let positive = [
            ("env.success_radius", self.success_radius),
            ("env.world_scale", self.world_scale),
            ("env.gain", self.gain),
            ("env.speed_cap", self.speed_cap),
            ("env.commit_distance", self.commit_distance),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{key} must be positive, got {v}")));
            }
        }
        if !(self.component_std >= 0.0 && self.component_std.is_finite()) {
            return Err(Error::invalid("env.component_std must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(Error::invalid("env.switch_prob must lie in [0, 1]"));
        }
        if self.goal == [0.0, 0.0] {
            return Err(Error::invalid("env.goal must be nonzero"));
        }
        if (0..2).any(|i| self.start_low[i] > self.start_high[i]) {
            return Err(Error::invalid("env.start_low must not exceed env.start_high"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> Horizon {
        Horizon {
            prediction: self.prediction_horizon,
            execution: self.execution_horizon,
            action_dim: ACTION_DIM,
        }
    }

    pub fn decisions(&self) -> usize {
        self.episode_length / self.execution_horizon
    }

    /// Goal with index 0 (negative side) or 1 (positive side).
    pub fn side_goal(&self, index: usize) -> [f64; 2] {
        if index == 1 {
            self.goal
        } else {
            [-self.goal[0], -self.goal[1]]
        }
    }

    /// Velocities the expert would command over `T_p` steps from `pos`.
    pub fn expert_plan(&self, pos: [f64; 2], goal: [f64; 2]) -> Array2<f64> {
        let mut p = pos;
        let mut plan = Array2::zeros((self.prediction_horizon, ACTION_DIM));
        for mut row in plan.rows_mut() {
            let mut v = [self.gain * (goal[0] - p[0]), self.gain * (goal[1] - p[1])];
            let norm = v[0].hypot(v[1]);
            if norm > self.speed_cap {
                v = [v[0] * self.speed_cap / norm, v[1] * self.speed_cap / norm];
            }
            row[0] = v[0];
            row[1] = v[1];
            p = [p[0] + v[0], p[1] + v[1]];
        }
        plan
    }

    fn encode(&self, pos: [f64; 2], context: [f64; 2]) -> [f64; OBS_DIM] {
        let s = self.world_scale;
        [pos[0] / s, pos[1] / s, context[0] / s, context[1] / s]
    }
}

impl ExpertModel for EnvSpec {
    fn mixture(&self, obs: &ObservationWindow) -> Result<ConditionalMixture> {
        expert_mixture(self, obs)
    }
}

/// The expert's conditional action distribution given the latest observation row.
pub fn expert_mixture(spec: &EnvSpec, obs: &ObservationWindow) -> Result<ConditionalMixture> {
    if obs.values.ncols() != OBS_DIM {
        return Err(Error::ShapeMismatch {
            context: "expert observation",
            expected: (spec.obs_horizon, OBS_DIM),
            found: obs.values.dim(),
        });
    }
    let row = obs.latest();
    let s = spec.world_scale;
    let pos = [row[0] * s, row[1] * s];
    let context = [row[2] * s, row[3] * s];
    if spec.name == EnvKind::BimodalPush && context == [0.0, 0.0] {
        return ConditionalMixture::new(
            vec![0.5, 0.5],
            vec![
                spec.expert_plan(pos, spec.side_goal(0)),
                spec.expert_plan(pos, spec.side_goal(1)),
            ],
            spec.component_std,
        );
    }
    ConditionalMixture::single(spec.expert_plan(pos, context), spec.component_std)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub start: [f64; 2],
    pub elapsed: usize,
    /// Latched goal side for bimodal_push.
    pub committed: Option<usize>,
    /// Goal side per decision for jumpy_switch.
    pub goal_sides: Vec<usize>,
    history: Vec<[f64; OBS_DIM]>,
}

impl EnvState {
    /// Goal the expert is currently heading to, if one is defined.
    pub fn goal(&self, spec: &EnvSpec) -> Option<[f64; 2]> {
        match spec.name {
            EnvKind::SmoothTrack => Some(spec.goal),
            EnvKind::BimodalPush => self.committed.map(|i| spec.side_goal(i)),
            EnvKind::JumpySwitch => {
                let d = (self.elapsed / spec.execution_horizon).min(self.goal_sides.len() - 1);
                Some(spec.side_goal(self.goal_sides[d]))
            }
        }
    }

    fn context(&self, spec: &EnvSpec) -> [f64; 2] {
        self.goal(spec).unwrap_or([0.0, 0.0])
    }
}

pub fn reset(spec: &EnvSpec, rng: &mut dyn RngCore) -> EnvState {
    let mut start = [0.0; 2];
    for (i, s) in start.iter_mut().enumerate() {
        let u: f64 = rng.random();
        *s = spec.start_low[i] + u * (spec.start_high[i] - spec.start_low[i]);
    }
    let decisions = spec.decisions();
    let mut goal_sides = Vec::with_capacity(decisions);
    if spec.name == EnvKind::JumpySwitch {
        let mut side = usize::from(rng.random::<bool>());
        goal_sides.push(side);
        for d in 1..decisions {
            if d + spec.quiet_decisions < decisions && rng.random::<f64>() < spec.switch_prob {
                side = 1 - side;
            }
            goal_sides.push(side);
        }
    }
    let mut state = EnvState {
        position: start,
        start,
        elapsed: 0,
        committed: None,
        goal_sides,
        history: Vec::new(),
    };
    let first = spec.encode(start, state.context(spec));
    state.history.push(first);
    state
}

/// The latest `T_o` encodings; before `T_o` steps exist the earliest is repeated.
pub fn observe(state: &EnvState, spec: &EnvSpec) -> ObservationWindow {
    let n = state.history.len();
    let mut values = Array2::zeros((spec.obs_horizon, OBS_DIM));
    for (r, mut row) in values.rows_mut().into_iter().enumerate() {
        let idx = (n + r).saturating_sub(spec.obs_horizon);
        for (c, v) in state.history[idx].iter().enumerate() {
            row[c] = *v;
        }
    }
    ObservationWindow {
        values,
        t: state.elapsed + 1,
    }
}

/// Integrates `T_a` velocity actions.
pub fn step_execute(state: &EnvState, actions: ArrayView2<'_, f64>, spec: &EnvSpec) -> Result<EnvState> {
    let expected = (spec.execution_horizon, ACTION_DIM);
    if actions.dim() != expected {
        return Err(Error::ShapeMismatch {
            context: "executed actions",
            expected,
            found: actions.dim(),
        });
    }
    if actions.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("executed actions".into()));
    }
    if state.elapsed + spec.execution_horizon > spec.episode_length {
        return Err(Error::invalid("episode already finished"));
    }
    let mut next = state.clone();
    for (j, a) in actions.rows().into_iter().enumerate() {
        next.position = [next.position[0] + a[0], next.position[1] + a[1]];
        if spec.name == EnvKind::BimodalPush && next.committed.is_none() {
            let dx = next.position[0] - next.start[0];
            if dx.abs() > spec.commit_distance {
                next.committed = Some(usize::from(dx * spec.goal[0] > 0.0));
            }
        }
        if j + 1 == spec.execution_horizon {
            next.elapsed += spec.execution_horizon;
        }
        let enc = spec.encode(next.position, next.context(spec));
        next.history.push(enc);
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub decisions: Vec<DecisionResult>,
    /// Executed actions, `T x D_a`.
    pub executed: Array2<f64>,
    pub final_state: EnvState,
    pub score: f64,
    pub mode: Option<usize>,
}

/// 1 when the final position lies strictly within the success radius of the
/// active goal, else 0.
pub fn score(state: &EnvState, spec: &EnvSpec) -> Result<f64> {
    if state.elapsed != spec.episode_length {
        return Err(Error::invalid(format!(
            "episode incomplete: {} of {} steps",
            state.elapsed, spec.episode_length
        )));
    }
    let Some(goal) = state.goal(spec) else {
        return Ok(0.0);
    };
    let d = (state.position[0] - goal[0]).hypot(state.position[1] - goal[1]);
    Ok(if d < spec.success_radius { 1.0 } else { 0.0 })
}

/// 1-based mode label: 1 for the negative-side goal, 2 for the positive side.
pub fn mode_label(state: &EnvState, spec: &EnvSpec) -> Option<usize> {
    match spec.name {
        EnvKind::BimodalPush => state.committed.map(|i| i + 1),
        _ => None,
    }
}

/// `(observation, expert chunk)` pairs from one rollout.
pub type ExpertPairs = Vec<(ObservationWindow, Array2<f64>)>;

/// One expert rollout executing mixture means. The bimodal side is drawn once
/// from `rng`; the returned pairs are `(observation, expert chunk)` per decision.
pub fn expert_rollout(
    spec: &EnvSpec,
    rng: &mut dyn RngCore,
) -> Result<(EnvState, ExpertPairs)> {
    let mut state = reset(spec, rng);
    let side = usize::from(rng.random::<bool>());
    let mut pairs = Vec::with_capacity(spec.decisions());
    for _ in 0..spec.decisions() {
        let obs = observe(&state, spec);
        let mix = expert_mixture(spec, &obs)?;
        let chunk = mix.means()[side.min(mix.components() - 1)].clone();
        state = step_execute(&state, chunk.slice(ndarray::s![..spec.execution_horizon, ..]), spec)?;
        pairs.push((obs, chunk));
    }
    Ok((state, pairs))
}

/// Expert `(O, A^0)` pairs from `episodes` rollouts.
pub fn expert_dataset(
    spec: &EnvSpec,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<(ObservationWindow, Array2<f64>)>> {
    let mut out = Vec::new();
    for _ in 0..episodes {
        out.extend(expert_rollout(spec, rng)?.1);
    }
    Ok(out)
}

/// CSV with a one-line header `o{row}_{col},...,a{row}_{col},...`.
pub fn write_dataset_csv(path: &Path, data: &[(ObservationWindow, Array2<f64>)]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    if let Some((o, a)) = data.first() {
        let mut header = Vec::new();
        for ((r, c), _) in o.values.indexed_iter() {
            header.push(format!("o{r}_{c}"));
        }
        for ((r, c), _) in a.indexed_iter() {
            header.push(format!("a{r}_{c}"));
        }
        writeln!(w, "{}", header.join(",")).map_err(io)?;
    }
    for (o, a) in data {
        let row: Vec<String> = o.values.iter().chain(a.iter()).map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
