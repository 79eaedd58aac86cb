//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::fs;
use std::process::ExitCode;

use falcon_core::bench::{
    ablate_delta, ablate_epsilon, compute_speedup, run_experiment, speedup_ratio, write_outputs, Harness,
    RunConfig, EPSILON_GRID,
};
use falcon_core::denoiser::mlp::{gradcheck, Activation, GradProbe, MicroMlp, MlpShape};
use falcon_core::denoiser::{ActionChunk, AnalyticDenoiser, ConditionalMixture, ObservationWindow};
use falcon_core::envs::EnvKind;
use falcon_core::falcon::{tweedie_estimate, PartialAction};
use falcon_core::rng::stream;
use falcon_core::samplers::{ddpm_step, run_chain, SamplerKind};
use falcon_core::schedule::{NoiseSchedule, ScheduleKind, SigmaKind, StepGrid};
use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn speedup_cross_check() -> Outcome {
    let ddpm = speedup_ratio(100.0, 12.9).map_err(|e| e.to_string())?;
    let ddim = speedup_ratio(16.0, 7.5).map_err(|e| e.to_string())?;
    check(
        (ddpm - 7.78).abs() <= 0.19 && (ddim - 2.13).abs() <= 0.03,
        format!("100/12.9 = {ddpm:.4} (7.78 +/- 0.19), 16/7.5 = {ddim:.4} (2.13 +/- 0.03)"),
    )
}

fn baseline_reduction() -> Outcome {
    let mut compared = 0;
    for kind in SamplerKind::ALL {
        let mut cfg = RunConfig::new(EnvKind::BimodalPush);
        cfg.backend = kind;
        cfg.seed = 100;
        cfg.falcon.delta = 1.0;
        let falcon = Harness::new(cfg.clone()).map_err(|e| e.to_string())?;
        let base = Harness::new(cfg.baseline()).map_err(|e| e.to_string())?;
        for ep in 0..10 {
            let a = falcon.run_episode(ep).map_err(|e| e.to_string())?;
            let b = base.run_episode(ep).map_err(|e| e.to_string())?;
            for (x, y) in a.decisions.iter().zip(&b.decisions) {
                let same = x.chunk == y.chunk && x.nfe_sequential == y.nfe_sequential;
                if !same {
                    return Err(format!("{kind} episode {ep} decision t={} differs", x.t));
                }
                compared += 1;
            }
            if a.executed != b.executed || a.score != b.score {
                return Err(format!("{kind} episode {ep} rollout differs"));
            }
        }
    }
    Ok(format!("{compared} decisions bit-identical across ddpm, ddim, dpmsolver"))
}

fn tweedie_exactness() -> Outcome {
    let mut rng = stream(3, 0);
    let obs = ObservationWindow::new(array![[0.0]], 1).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let alpha_bar: f64 = rng.random_range(0.01..0.99);
        let mu: f64 = rng.random_range(-2.0..2.0);
        let s: f64 = rng.random_range(0.05..2.0);
        let a: f64 = rng.random_range(-3.0..3.0);
        let schedule = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![1.0 - alpha_bar], SigmaKind::Posterior)
            .map_err(|e| e.to_string())?;
        let den = AnalyticDenoiser::new(schedule.clone(), ConditionalMixture::single(array![[mu]], s).unwrap());
        let p = PartialAction::new(1, 1, array![[a]]).unwrap();
        let est = tweedie_estimate(&schedule, &den, &obs, &p).map_err(|e| e.to_string())?[[0, 0]];
        let ab = schedule.alpha_bar(1);
        let posterior = mu + ab.sqrt() * s * s / (ab * s * s + 1.0 - ab) * (a - ab.sqrt() * mu);
        worst = worst.max((est - posterior).abs());
    }
    check(worst < 1e-9, format!("max |tweedie - posterior mean| = {worst:.3e} over 1000 probes"))
}

fn sampler_correctness() -> Outcome {
    let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 100).map_err(|e| e.to_string())?;
    let mu = array![[0.7, -0.3], [0.1, 0.4]];
    let den = AnalyticDenoiser::new(schedule.clone(), ConditionalMixture::single(mu.clone(), 0.0).unwrap());
    let obs = common::dummy_obs();
    let start = ActionChunk::new(array![[1.2, 0.5], [-0.8, 0.3]], 100).unwrap();
    let err = |x: &Array2<f64>| (x - &mu).iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut a = start.clone();
    while a.level > 0 {
        a = ddpm_step(&schedule, &den, &obs, &a, None).map_err(|e| e.to_string())?;
    }
    let ddpm = err(&a.values);
    let grid = StepGrid::uniform(100, 16).map_err(|e| e.to_string())?;
    let mut rng = stream(0, 0);
    let mut few = Vec::new();
    for kind in [SamplerKind::Ddim, SamplerKind::DpmSolver] {
        let r = run_chain(kind, &schedule, &grid, &den, &obs, start.clone(), &mut rng, None).map_err(|e| e.to_string())?;
        few.push(err(&r.final_chunk.values));
    }
    let steps = [4, 8, 16, 32];
    let ddim_ref = common::grid_refinement_errors(SamplerKind::Ddim, &steps, 64);
    let dpm_ref = common::grid_refinement_errors(SamplerKind::DpmSolver, &steps, 64);
    let decreasing = |e: &[f64]| e.windows(2).all(|w| w[1] < w[0]);
    check(
        ddpm < 1e-6 && few[0] < 1e-6 && few[1] < 1e-3 && decreasing(&ddim_ref) && decreasing(&dpm_ref),
        format!(
            "point-mass errors ddpm {ddpm:.1e}, ddim {:.1e}, dpmsolver {:.1e}; median refinement errors ddim {:?}, dpmsolver {:?}",
            few[0],
            few[1],
            ddim_ref.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>(),
            dpm_ref.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>()
        ),
    )
}

fn gradient_check() -> Outcome {
    let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 50).map_err(|e| e.to_string())?;
    let mut rng = stream(5, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let shape = MlpShape {
            obs_rows: 2,
            obs_dim: 4,
            horizon: 4,
            action_dim: 2,
            levels: 50,
            hidden: vec![8, 6],
            activation: Activation::Tanh,
        };
        let net = MicroMlp::random(shape, &mut rng);
        let mut n = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.sample(StandardNormal));
        let probe = GradProbe {
            obs: ObservationWindow::new(n(2, 4), 1).unwrap(),
            clean: n(4, 2),
            level: 0,
            noise: n(4, 2),
        };
        let probe = GradProbe {
            level: rng.random_range(1..=50),
            ..probe
        };
        worst = worst.max(gradcheck(&net, &schedule, &probe, 1e-5).map_err(|e| e.to_string())?);
    }
    check(worst < 1e-4, format!("max relative error {worst:.3e} over 20 probes"))
}

fn lift_config(env: EnvKind, episodes: usize) -> RunConfig {
    let mut cfg = RunConfig::new(env);
    cfg.episodes = episodes;
    cfg.falcon.epsilon = 0.04;
    cfg.falcon.delta = 0.1;
    cfg.falcon.k_min = 20;
    cfg.falcon.capacity = 50;
    cfg
}

fn acceleration() -> Outcome {
    let cfg = lift_config(EnvKind::SmoothTrack, 100);
    let fast = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let base = run_experiment(&cfg.baseline()).map_err(|e| e.to_string())?;
    let (f, b) = (&fast.aggregates, &base.aggregates);
    let speedup = compute_speedup(&base, &fast).map_err(|e| e.to_string())?;
    check(
        f.nfe_mean <= 50.0 && f.score_mean >= 0.95 * b.score_mean,
        format!(
            "nfe {:.2} (baseline {:.0}, speedup {speedup:.2}x), score {:.3} vs baseline {:.3}",
            f.nfe_mean, b.nfe_mean, f.score_mean, b.score_mean
        ),
    )
}

fn multimodality() -> Outcome {
    let cfg = lift_config(EnvKind::BimodalPush, 200);
    let fast = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let base = run_experiment(&cfg.baseline()).map_err(|e| e.to_string())?;
    let fm = fast.aggregates.mode_frequencies.clone().ok_or("falcon run has no mode labels")?;
    let bm = base.aggregates.mode_frequencies.clone().ok_or("baseline run has no mode labels")?;
    let in_band = |m: &[f64]| m.iter().all(|&p| (0.40..=0.60).contains(&p));
    let gap = fm.iter().zip(&bm).fold(0.0f64, |g, (a, b)| g.max((a - b).abs()));
    check(
        in_band(&fm) && in_band(&bm) && gap <= 0.10,
        format!("baseline modes {bm:?}, falcon modes {fm:?}, max gap {gap:.3}"),
    )
}

fn dependency_contrast() -> Outcome {
    let smooth = run_experiment(&lift_config(EnvKind::SmoothTrack, 50)).map_err(|e| e.to_string())?;
    let jumpy = run_experiment(&lift_config(EnvKind::JumpySwitch, 50)).map_err(|e| e.to_string())?;
    let (s, j) = (smooth.aggregates.mean_start_level, jumpy.aggregates.mean_start_level);
    check(j > s, format!("mean start level jumpy_switch {j:.2} vs smooth_track {s:.2}"))
}

fn ablation_monotonicity() -> Outcome {
    let mut eps_cfg = lift_config(EnvKind::JumpySwitch, 100);
    eps_cfg.backend = SamplerKind::Ddim;
    eps_cfg.falcon.k_min = 1;
    let eps_rows = ablate_epsilon(&eps_cfg, 1.0).map_err(|e| e.to_string())?;
    let eps_nfe: Vec<f64> = eps_rows.iter().map(|r| r.nfe_mean).collect();
    let eps_score: Vec<f64> = eps_rows.iter().map(|r| r.score_mean).collect();
    let nfe_ok = eps_nfe.windows(2).all(|w| w[1] <= w[0]);
    let last = eps_score.len() - 1;
    let mid_best = eps_score[1..last].iter().cloned().fold(f64::MIN, f64::max);
    let collapse = eps_score[last] < mid_best;

    let delta_rows = ablate_delta(&lift_config(EnvKind::SmoothTrack, 100)).map_err(|e| e.to_string())?;
    let delta_nfe: Vec<f64> = delta_rows.iter().map(|r| r.nfe_mean).collect();
    let delta_ok = delta_nfe.windows(2).all(|w| w[1] >= w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    check(
        nfe_ok && collapse && delta_ok,
        format!(
            "epsilon {:?}: nfe [{}], score [{}] (max-eps {:.3} vs mid-grid best {mid_best:.3}); delta nfe [{}]",
            EPSILON_GRID,
            fmt(&eps_nfe),
            fmt(&eps_score),
            eps_score[last],
            fmt(&delta_nfe)
        ),
    )
}

fn buffer_properties() -> Outcome {
    for (seed, capacity) in [(1, 1), (2, 7), (3, 50), (4, 200)] {
        common::buffer_trace(seed, 10_000, capacity)?;
    }
    Ok("4 traces x 10000 ops: capacity, eviction priority and k >= 1 hold".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = lift_config(EnvKind::BimodalPush, 20);
    cfg.seed = 42;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let m = run_experiment(&cfg).map_err(|e| e.to_string())?;
        write_outputs(&m, &out).map_err(|e| e.to_string())?;
        let read = |name: &str| fs::read(out.join(name)).map_err(|e| e.to_string());
        files.push((read("metrics.csv")?, read("summary.json")?));
    }
    check(
        files[0] == files[1],
        format!("metrics.csv {} bytes, summary.json {} bytes, reruns identical", files[0].0.len(), files[0].1.len()),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("speedup arithmetic cross-check", speedup_cross_check),
        ("baseline reduction at delta = 1", baseline_reduction),
        ("tweedie exactness", tweedie_exactness),
        ("sampler correctness", sampler_correctness),
        ("micro-mlp gradient check", gradient_check),
        ("acceleration on smooth_track", acceleration),
        ("multimodality preservation", multimodality),
        ("dependency contrast", dependency_contrast),
        ("ablation monotonicity", ablation_monotonicity),
        ("buffer properties", buffer_properties),
        ("determinism and persistence", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = std::time::Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
