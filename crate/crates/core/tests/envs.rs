use falcon_core::bench::{run_experiment, RunConfig};
use falcon_core::envs::{expert_mixture, expert_rollout, observe, reset, step_execute, EnvKind, EnvSpec};
use falcon_core::falcon::{distance, DistanceMetric};
use falcon_core::rng::env_rng;
use ndarray::{s, Array2};

fn expert_overlaps(spec: &EnvSpec, seed: u64) -> Vec<f64> {
    let (_, pairs) = expert_rollout(spec, &mut env_rng(seed)).unwrap();
    let ta = spec.execution_horizon;
    let rows = spec.prediction_horizon - ta;
    pairs
        .windows(2)
        .map(|w| distance(w[0].1.slice(s![ta.., ..]), w[1].1.slice(s![..rows, ..]), DistanceMetric::Rms))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn mixture_weights_are_normalized_along_rollouts() {
    for kind in EnvKind::ALL {
        let spec = EnvSpec::new(kind);
        for seed in 0..10 {
            let mut state = reset(&spec, &mut env_rng(seed));
            for _ in 0..spec.decisions() {
                let obs = observe(&state, &spec);
                assert_eq!(obs.values.nrows(), spec.obs_horizon);
                let mix = expert_mixture(&spec, &obs).unwrap();
                assert!((mix.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let chunk = mix.means()[mix.components() - 1].clone();
                state = step_execute(&state, chunk.slice(s![..spec.execution_horizon, ..]), &spec).unwrap();
            }
            assert_eq!(state.elapsed, spec.episode_length);
        }
    }
}

#[test]
fn smooth_expert_chunks_overlap_closely() {
    let spec = EnvSpec::new(EnvKind::SmoothTrack);
    for seed in 0..20 {
        for d in expert_overlaps(&spec, seed) {
            assert!(d < 0.05, "seed {seed}: {d}");
        }
    }
}

#[test]
fn jumpy_expert_chunks_jump_at_switches() {
    let spec = EnvSpec::new(EnvKind::JumpySwitch);
    let mut switches = 0;
    for seed in 0..20 {
        let state = reset(&spec, &mut env_rng(seed));
        let overlaps = expert_overlaps(&spec, seed);
        for (d, w) in state.goal_sides.windows(2).enumerate() {
            if w[0] != w[1] {
                switches += 1;
                assert!(overlaps[d] > 0.5, "seed {seed} decision {}: {}", d + 1, overlaps[d]);
            }
        }
    }
    assert!(switches > 50);
}

#[test]
fn dependency_contrast_between_smooth_and_jumpy() {
    let mut smooth = RunConfig::new(EnvKind::SmoothTrack).baseline();
    smooth.episodes = 20;
    let mut jumpy = RunConfig::new(EnvKind::JumpySwitch).baseline();
    jumpy.episodes = 20;
    let collect = |c: &RunConfig| {
        run_experiment(c)
            .unwrap()
            .episodes
            .iter()
            .flat_map(|e| e.overlap_distances.clone())
            .collect::<Vec<_>>()
    };
    let (s, j) = (median(collect(&smooth)), median(collect(&jumpy)));
    assert!(5.0 * s <= j, "smooth median {s}, jumpy median {j}");
}

#[test]
fn episodes_reproduce_from_seed() {
    for kind in EnvKind::ALL {
        let spec = EnvSpec::new(kind);
        let a = expert_rollout(&spec, &mut env_rng(11)).unwrap();
        let b = expert_rollout(&spec, &mut env_rng(11)).unwrap();
        assert_eq!(a.0, b.0);
        let zero = Array2::zeros((spec.execution_horizon, 2));
        let s0 = reset(&spec, &mut env_rng(5));
        assert_eq!(step_execute(&s0, zero.view(), &spec).unwrap().position, s0.position);
    }
}
