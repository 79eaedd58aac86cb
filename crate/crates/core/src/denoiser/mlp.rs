//! A small fully connected noise-prediction network with hand-written backprop.
//!
//! Input is the row-major flattening of the observation window, then the noised
//! chunk, then the scalar `k / K`. Output is the flattened `T_p x D_a` noise.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ActionChunk, NoisePredictor, ObservationWindow};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activated value.
    fn slope(self, activated: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - activated * activated,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub obs_rows: usize,
    pub obs_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    /// Total diffusion levels `K`, used to normalize the level input.
    pub levels: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpShape {
    pub fn input_dim(&self) -> usize {
        self.obs_rows * self.obs_dim + self.horizon * self.action_dim + 1
    }

    pub fn output_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(self.output_dim());
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroMlp {
    shape: MlpShape,
    layers: Vec<Dense>,
}

/// One training example for the noise-prediction loss.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub obs: ObservationWindow,
    pub clean: Array2<f64>,
    pub level: usize,
    pub noise: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl MicroMlp {
    pub fn zeros(shape: MlpShape) -> Self {
        let widths = shape.widths();
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { shape, layers }
    }

    /// Gaussian init scaled by `1 / sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(shape: MlpShape, rng: &mut R) -> Self {
        let mut net = Self::zeros(shape);
        for layer in &mut net.layers {
            let scale = 1.0 / (layer.weights.ncols() as f64).sqrt();
            layer
                .weights
                .mapv_inplace(|_| scale * rng.sample::<f64, _>(StandardNormal));
            layer
                .bias
                .mapv_inplace(|_| 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        net
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn input(&self, obs: &ObservationWindow, chunk: &ActionChunk) -> Result<Array1<f64>> {
        let s = &self.shape;
        if obs.values.dim() != (s.obs_rows, s.obs_dim) {
            return Err(Error::ShapeMismatch {
                context: "mlp observation",
                expected: (s.obs_rows, s.obs_dim),
                found: obs.values.dim(),
            });
        }
        if chunk.values.dim() != (s.horizon, s.action_dim) {
            return Err(Error::ShapeMismatch {
                context: "mlp action chunk",
                expected: (s.horizon, s.action_dim),
                found: chunk.values.dim(),
            });
        }
        let mut x = Vec::with_capacity(s.input_dim());
        x.extend(obs.values.iter());
        x.extend(chunk.values.iter());
        x.push(chunk.level as f64 / s.levels as f64);
        Ok(Array1::from(x))
    }

    /// Activations of every layer, input first.
    fn forward_all(&self, input: Array1<f64>) -> Vec<Array1<f64>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.dot(acts.last().unwrap()) + &layer.bias;
            if i != last {
                let act = self.shape.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            acts.push(z);
        }
        acts
    }

    fn loss_and_grad(&self, input: Array1<f64>, target: &Array1<f64>) -> (f64, Vec<Dense>) {
        let acts = self.forward_all(input);
        let out = acts.last().unwrap();
        let residual = out - target;
        let loss = residual.dot(&residual);
        let mut delta = residual * 2.0;
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let a_in = &acts[i];
            let gw = delta
                .view()
                .insert_axis(Axis(1))
                .dot(&a_in.view().insert_axis(Axis(0)));
            grads.push(Dense {
                weights: gw,
                bias: delta.clone(),
            });
            if i > 0 {
                let act = self.shape.activation;
                let back = layer.weights.t().dot(&delta);
                delta = back * &a_in.mapv(|a| act.slope(a));
            }
        }
        grads.reverse();
        (loss, grads)
    }

    fn probe_terms(
        &self,
        schedule: &NoiseSchedule,
        probe: &GradProbe,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        schedule.check_level(probe.level)?;
        let ab = schedule.alpha_bar(probe.level);
        let noised = &probe.clean * ab.sqrt() + &probe.noise * (1.0 - ab).sqrt();
        let chunk = ActionChunk::new(noised, probe.level)?;
        let input = self.input(&probe.obs, &chunk)?;
        let target = Array1::from_iter(probe.noise.iter().cloned());
        Ok((input, target))
    }

    /// Loss `||eps - net(O, sqrt(ab) A0 + sqrt(1 - ab) eps, k)||^2` for one probe.
    pub fn probe_loss(&self, schedule: &NoiseSchedule, probe: &GradProbe) -> Result<f64> {
        let (input, target) = self.probe_terms(schedule, probe)?;
        let out = self.forward_all(input).pop().unwrap();
        let r = out - &target;
        Ok(r.dot(&r))
    }

    pub fn probe_gradient(
        &self,
        schedule: &NoiseSchedule,
        probe: &GradProbe,
    ) -> Result<(f64, Vec<Dense>)> {
        let (input, target) = self.probe_terms(schedule, probe)?;
        Ok(self.loss_and_grad(input, &target))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(MlpRecord::from(self)).expect("mlp record serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let record: MlpRecord = serde_json::from_value(value.clone())?;
        record.try_into()
    }
}

impl NoisePredictor for MicroMlp {
    fn epsilon(&self, obs: &ObservationWindow, chunk: &ActionChunk) -> Result<Array2<f64>> {
        let input = self.input(obs, chunk)?;
        let out = self.forward_all(input).pop().unwrap();
        Ok(out
            .into_shape_with_order((self.shape.horizon, self.shape.action_dim))
            .expect("output width matches chunk"))
    }
}

/// Evaluates the network; same contract as [`NoisePredictor::epsilon`].
pub fn mlp_epsilon(
    net: &MicroMlp,
    obs: &ObservationWindow,
    chunk: &ActionChunk,
) -> Result<Array2<f64>> {
    net.epsilon(obs, chunk)
}

/// Max over parameters of `|analytic - central FD| / (|analytic| + 1e-8)`.
pub fn gradcheck(
    net: &MicroMlp,
    schedule: &NoiseSchedule,
    probe: &GradProbe,
    step: f64,
) -> Result<f64> {
    let (_, grads) = net.probe_gradient(schedule, probe)?;
    let mut work = net.clone();
    let mut worst: f64 = 0.0;
    for (li, grad) in grads.iter().enumerate() {
        let n_w = grad.weights.len();
        let weights = grad.weights.as_standard_layout();
        for pi in 0..n_w + grad.bias.len() {
            let analytic = if pi < n_w {
                weights.as_slice().unwrap()[pi]
            } else {
                grad.bias[pi - n_w]
            };
            let original = param(&work, li, pi);
            *param_mut(&mut work, li, pi) = original + step;
            let up = work.probe_loss(schedule, probe)?;
            *param_mut(&mut work, li, pi) = original - step;
            let down = work.probe_loss(schedule, probe)?;
            *param_mut(&mut work, li, pi) = original;
            let fd = (up - down) / (2.0 * step);
            worst = worst.max((analytic - fd).abs() / (analytic.abs() + 1e-8));
        }
    }
    Ok(worst)
}

fn param(net: &MicroMlp, layer: usize, index: usize) -> f64 {
    let l = &net.layers[layer];
    let n_w = l.weights.len();
    if index < n_w {
        l.weights.as_slice().unwrap()[index]
    } else {
        l.bias[index - n_w]
    }
}

fn param_mut(net: &mut MicroMlp, layer: usize, index: usize) -> &mut f64 {
    let l = &mut net.layers[layer];
    let n_w = l.weights.len();
    if index < n_w {
        &mut l.weights.as_slice_mut().unwrap()[index]
    } else {
        &mut l.bias[index - n_w]
    }
}

/// Minibatch SGD on the noise-prediction loss with uniform levels and Gaussian noise.
pub fn train_micro_mlp(
    net: &mut MicroMlp,
    dataset: &[(ObservationWindow, Array2<f64>)],
    schedule: &NoiseSchedule,
    opts: TrainOptions,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    if net.shape.levels != schedule.levels() {
        return Err(Error::invalid(format!(
            "network expects K = {} but schedule has {}",
            net.shape.levels,
            schedule.levels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut acc: Option<Vec<Dense>> = None;
            for &i in batch {
                let (obs, clean) = &dataset[i];
                let probe = GradProbe {
                    obs: obs.clone(),
                    clean: clean.clone(),
                    level: rng.random_range(1..=schedule.levels()),
                    noise: clean.mapv(|_| rng.sample(StandardNormal)),
                };
                let (loss, grads) = net.probe_gradient(schedule, &probe)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch} (learning rate {})",
                        opts.learning_rate
                    )));
                }
                total += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (ga, g) in a.iter_mut().zip(grads) {
                            ga.weights += &g.weights;
                            ga.bias += &g.bias;
                        }
                    }
                }
            }
            let scale = opts.learning_rate / batch.len() as f64;
            for (layer, g) in net.layers.iter_mut().zip(acc.unwrap()) {
                layer.weights.scaled_add(-scale, &g.weights);
                layer.bias.scaled_add(-scale, &g.bias);
            }
        }
        epoch_losses.push(total / dataset.len() as f64);
    }
    Ok(TrainReport { epoch_losses })
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpRecord {
    shape: MlpShape,
    layers: Vec<LayerRecord>,
}

impl From<&MicroMlp> for MlpRecord {
    fn from(net: &MicroMlp) -> Self {
        Self {
            shape: net.shape.clone(),
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l.weights.outer_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpRecord> for MicroMlp {
    type Error = Error;

    fn try_from(r: MlpRecord) -> Result<Self> {
        let mut net = MicroMlp::zeros(r.shape);
        if r.layers.len() != net.layers.len() {
            return Err(Error::invalid(format!(
                "expected {} layers, found {}",
                net.layers.len(),
                r.layers.len()
            )));
        }
        for (layer, rec) in net.layers.iter_mut().zip(r.layers) {
            let (rows, cols) = layer.weights.dim();
            let found = (rec.weights.len(), rec.weights.first().map_or(0, Vec::len));
            if found != (rows, cols)
                || rec.weights.iter().any(|row| row.len() != cols)
                || rec.bias.len() != rows
            {
                return Err(Error::ShapeMismatch {
                    context: "mlp layer",
                    expected: (rows, cols),
                    found,
                });
            }
            let flat: Vec<f64> = rec.weights.into_iter().flatten().collect();
            layer.weights = Array2::from_shape_vec((rows, cols), flat).expect("checked shape");
            layer.bias = Array1::from(rec.bias);
        }
        Ok(net)
    }
}
