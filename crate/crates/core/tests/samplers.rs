mod common;

use falcon_core::denoiser::{AnalyticDenoiser, ConditionalMixture, CountingDenoiser};
use falcon_core::rng::stream;
use falcon_core::samplers::{run_chain, sample_baseline, SamplerKind};
use falcon_core::schedule::{NoiseSchedule, ScheduleKind, StepGrid};
use ndarray::array;

#[test]
fn refinement_error_shrinks_as_steps_double() {
    for kind in [SamplerKind::Ddim, SamplerKind::DpmSolver] {
        let errors = common::grid_refinement_errors(kind, &[4, 8, 16, 32], 64);
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{kind}: {errors:?}");
    }
}

#[test]
fn full_ddpm_chain_costs_k_evaluations() {
    let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
    let den = CountingDenoiser::new(AnalyticDenoiser::new(schedule.clone(), common::two_component_mixture()));
    let grid = StepGrid::full(100).unwrap();
    let mut rng = stream(1, 0);
    let r = sample_baseline(SamplerKind::Ddpm, &schedule, &grid, &den, &common::dummy_obs(), (3, 2), &mut rng, None)
        .unwrap();
    assert_eq!(r.nfe, 100);
    assert_eq!(den.calls(), 100);
    assert_eq!(r.final_chunk.level, 0);
}

#[test]
fn few_step_chains_cost_grid_length() {
    let schedule = NoiseSchedule::build(ScheduleKind::Linear, 100).unwrap();
    let den = CountingDenoiser::new(AnalyticDenoiser::new(
        schedule.clone(),
        ConditionalMixture::single(array![[0.5, 0.5], [0.0, 0.0], [1.0, -1.0]], 0.2).unwrap(),
    ));
    let obs = common::dummy_obs();
    for m in [1, 4, 16, 100] {
        let grid = StepGrid::uniform(100, m).unwrap();
        for kind in [SamplerKind::Ddim, SamplerKind::DpmSolver] {
            den.reset();
            let mut rng = stream(2, 0);
            let r = sample_baseline(kind, &schedule, &grid, &den, &obs, (3, 2), &mut rng, None).unwrap();
            assert_eq!(r.nfe, m);
            assert_eq!(den.calls(), m);
            assert!(r.final_chunk.values.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn same_stream_same_chain() {
    let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 50).unwrap();
    let den = AnalyticDenoiser::new(schedule.clone(), common::two_component_mixture());
    let grid = StepGrid::full(50).unwrap();
    let run = || {
        let mut rng = stream(9, 3);
        let start = falcon_core::samplers::standard_normal_chunk(&mut rng, (3, 2), 50);
        run_chain(SamplerKind::Ddpm, &schedule, &grid, &den, &common::dummy_obs(), start, &mut rng, None).unwrap()
    };
    assert_eq!(run().final_chunk, run().final_chunk);
}
