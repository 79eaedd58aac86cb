#![allow(dead_code)]

use std::cmp::Reverse;

use falcon_core::denoiser::{AnalyticDenoiser, ConditionalMixture, ObservationWindow};
use falcon_core::falcon::{LatentBuffer, PartialAction};
use falcon_core::rng::stream;
use falcon_core::samplers::{run_chain, standard_normal_chunk, SamplerKind};
use falcon_core::schedule::{NoiseSchedule, ScheduleKind, StepGrid};
use ndarray::{array, Array2};
use rand::Rng;

pub fn dummy_obs() -> ObservationWindow {
    ObservationWindow::new(array![[0.0, 0.0]], 1).unwrap()
}

pub fn two_component_mixture() -> ConditionalMixture {
    ConditionalMixture::new(
        vec![0.4, 0.6],
        vec![
            array![[0.8, -0.4], [0.6, -0.2], [0.4, 0.0]],
            array![[-0.7, 0.5], [-0.5, 0.3], [-0.3, 0.1]],
        ],
        0.1,
    )
    .unwrap()
}

fn rms(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    ((a - b).mapv(|v| v * v).sum() / a.len() as f64).sqrt()
}

/// Median final-sample error against a 1000-step reference chain, for each
/// solver step count in `steps`, over `chains` shared-seed starts.
pub fn grid_refinement_errors(kind: SamplerKind, steps: &[usize], chains: u64) -> Vec<f64> {
    let k = 1000;
    let schedule = NoiseSchedule::build(ScheduleKind::Cosine, k).unwrap();
    let den = AnalyticDenoiser::new(schedule.clone(), two_component_mixture());
    let obs = dummy_obs();
    let full = StepGrid::full(k).unwrap();
    let grids: Vec<StepGrid> = steps.iter().map(|&m| StepGrid::uniform(k, m).unwrap()).collect();
    let mut errors: Vec<Vec<f64>> = vec![Vec::new(); steps.len()];
    for c in 0..chains {
        let mut rng = stream(c, 0);
        let start = standard_normal_chunk(&mut rng, (3, 2), k);
        let reference = run_chain(kind, &schedule, &full, &den, &obs, start.clone(), &mut rng, None)
            .unwrap()
            .final_chunk;
        for (i, grid) in grids.iter().enumerate() {
            let out = run_chain(kind, &schedule, grid, &den, &obs, start.clone(), &mut rng, None)
                .unwrap()
                .final_chunk;
            errors[i].push(rms(&out.values, &reference.values));
        }
    }
    errors
        .into_iter()
        .map(|mut e| {
            e.sort_by(f64::total_cmp);
            let n = e.len();
            if n % 2 == 1 {
                e[n / 2]
            } else {
                0.5 * (e[n / 2 - 1] + e[n / 2])
            }
        })
        .collect()
}

/// Drives a buffer with `ops` random operations and checks it against a
/// sorted-vector model after each one.
pub fn buffer_trace(seed: u64, ops: usize, capacity: usize) -> Result<(), String> {
    let mut rng = stream(seed, 0);
    let mut buffer = LatentBuffer::new(capacity).map_err(|e| e.to_string())?;
    let mut model: Vec<(usize, Reverse<usize>, u64)> = Vec::new();
    let mut seq = 0u64;
    let mut tau = 1usize;
    for op in 0..ops {
        let roll: f64 = rng.random();
        if roll < 0.002 {
            buffer.clear();
            model.clear();
        } else if roll < 0.02 {
            let level = 0;
            if PartialAction::new(tau, level, array![[0.0]]).is_ok() {
                return Err(format!("op {op}: level 0 accepted"));
            }
        } else {
            if rng.random::<f64>() < 0.05 {
                tau += rng.random_range(1..10);
            }
            let origin = rng.random_range(1..=tau);
            let level = rng.random_range(1..=100);
            let values = array![[seq as f64]];
            let evicted = buffer.insert(PartialAction::new(origin, level, values).unwrap());
            model.push((origin, Reverse(level), seq));
            seq += 1;
            model.sort();
            let expected = if model.len() > capacity { Some(model.remove(0)) } else { None };
            match (evicted, expected) {
                (None, None) => {}
                (Some(p), Some((o, Reverse(l), s))) => {
                    if (p.origin, p.level, p.values[[0, 0]] as u64) != (o, l, s) {
                        return Err(format!("op {op}: evicted ({}, {}) instead of ({o}, {l})", p.origin, p.level));
                    }
                }
                (got, want) => {
                    return Err(format!("op {op}: eviction mismatch {:?} vs {want:?}", got.map(|p| (p.origin, p.level))));
                }
            }
        }
        if buffer.len() > capacity {
            return Err(format!("op {op}: size {} over capacity {capacity}", buffer.len()));
        }
        if buffer.len() != model.len() {
            return Err(format!("op {op}: size {} but model has {}", buffer.len(), model.len()));
        }
        if buffer.iter().any(|p| p.level < 1) {
            return Err(format!("op {op}: entry below level 1"));
        }
        if let Some(next) = buffer.next_eviction() {
            let (o, Reverse(l), _) = model[0];
            if (next.origin, next.level) != (o, l) {
                return Err(format!("op {op}: priority head ({}, {}) vs ({o}, {l})", next.origin, next.level));
            }
        }
    }
    Ok(())
}
