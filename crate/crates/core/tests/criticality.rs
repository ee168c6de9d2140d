use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use d3p_core::config::{Config, StudyConfig};
use d3p_core::criticality::{
    criticality_profile, expert_episode, perturbed_return, perturbed_rollout, probe_times, run_study, spearman,
    train_return_predictor, windows, PerturbationRecord, RecordBuffer, ReturnPredictor, StudyError, Window,
};
use d3p_core::envs::{Environment, PointMassEnv, Region, ScriptedExpert};

const STUDY: &str = include_str!("../../../configs/criticality.conf");

fn narrow_gate() -> PointMassEnv {
    Config::parse(STUDY).unwrap().env.build().unwrap()
}

/// Chunk rewards of an unperturbed expert episode started from `seed`,
/// replaying the same draws `perturbed_rollout` makes before acting.
fn expert_rewards(env: &PointMassEnv, seed: u64) -> (Vec<f64>, bool, Vec<Region>) {
    let mut env = env.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut expert = ScriptedExpert::default();
    env.reset(&mut rng);
    expert.begin_episode(&env, &mut rng);
    let (mut rewards, mut regions) = (Vec::new(), Vec::new());
    while !env.is_done() {
        regions.push(env.region());
        let chunk = expert.chunk(&env);
        rewards.push(env.step_chunk(&chunk).unwrap().rewards.iter().sum());
    }
    (rewards, env.succeeded(), regions)
}

fn tail_return(rewards: &[f64], t: usize, success: bool, gamma: f64) -> f64 {
    let mut j = 0.0;
    let mut g = 1.0;
    for r in &rewards[t..] {
        j += g * r;
        g *= gamma;
    }
    if success {
        j += g * rewards.last().unwrap() / (1.0 - gamma);
    }
    j
}

fn perturbed(env: &PointMassEnv, seed: u64, t: usize, v: f64) -> PerturbationRecord {
    let mut env = env.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturbed_rollout(&mut env, &mut ScriptedExpert::default(), t, v, 0.99, false, &mut rng).unwrap()
}

#[test]
fn zero_noise_gives_the_expert_tail_return() {
    let env = narrow_gate();
    for seed in 0..5 {
        let (rewards, success, _) = expert_rewards(&env, seed);
        for t in [0, 3, rewards.len() / 2, rewards.len() - 1] {
            let rec = perturbed(&env, seed, t, 0.0);
            let expected = tail_return(&rewards, t, success, 0.99);
            assert!((rec.ret - expected).abs() < 1e-9, "seed {seed} t {t}: {} vs {expected}", rec.ret);
            assert_eq!(rec.t, t);
        }
    }
}

#[test]
fn zero_noise_dataset_is_a_function_of_seed_and_step() {
    let env = narrow_gate();
    for t in [2, 9, 20] {
        assert_eq!(perturbed(&env, 7, t, 0.0), perturbed(&env, 7, t, 0.0));
    }
}

/// A reset episode and its expert, drawn exactly as `perturbed_rollout` draws them.
fn episode(env: &PointMassEnv, seed: u64) -> (PointMassEnv, ScriptedExpert) {
    let mut env = env.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut expert = ScriptedExpert::default();
    env.reset(&mut rng);
    expert.begin_episode(&env, &mut rng);
    (env, expert)
}

/// Mean perturbed return at `t_l` over `draws` noise draws on one episode.
fn mean_return(env: &PointMassEnv, seed: u64, t_l: usize, v: f64, draws: u64) -> f64 {
    let (start, expert) = episode(env, seed);
    let total: f64 = (0..draws)
        .map(|d| {
            let mut noise = ChaCha8Rng::seed_from_u64(1000 + d);
            rollout_from(&mut start.clone(), &mut expert.clone(), t_l, v, &mut noise)
        })
        .sum();
    total / draws as f64
}

#[test]
fn perturbing_after_success_changes_nothing() {
    let env = narrow_gate();
    let mut checked = 0;
    for seed in 0..5 {
        let ep = expert_episode(&env, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let Some(first) = ep.first_success else { continue };
        for t in [first + 1, ep.chunks.len() - 1] {
            let clean = perturbed(&env, seed, t, 0.0).ret;
            assert_eq!(perturbed(&env, seed, t, 0.3).ret, clean);
            assert!((mean_return(&env, seed, t, 0.3, 10) - clean).abs() < 1e-9);
            checked += 1;
        }
    }
    assert!(checked > 0, "no expert episode succeeded");
}

#[test]
fn large_noise_at_the_gate_lowers_the_mean_return() {
    let env = narrow_gate();
    for seed in 0..3 {
        let (_, success, regions) = expert_rewards(&env, seed);
        assert!(success);
        let gate = regions.iter().rposition(|&r| r == Region::Approach).unwrap();
        let clean = perturbed(&env, seed, gate, 0.0).ret;
        let mean = mean_return(&env, seed, gate, 0.5, 100);
        assert!(mean < clean, "seed {seed}: mean {mean} vs clean {clean}");
    }
}

/// Same perturbation rule as the study, from an already reset episode.
fn rollout_from(env: &mut PointMassEnv, expert: &mut ScriptedExpert, t_l: usize, v: f64, rng: &mut ChaCha8Rng) -> f64 {
    let mut rewards = Vec::new();
    let mut t = 0;
    while !env.is_done() {
        let mut chunk = expert.chunk(env);
        if t == t_l {
            for a in &mut chunk {
                *a += v * rng.sample::<f64, _>(StandardNormal);
            }
            env.spec().clamp_chunk(&mut chunk);
        }
        rewards.push(env.step_chunk(&chunk).unwrap().rewards.iter().sum());
        t += 1;
    }
    tail_return(&rewards, t_l.min(rewards.len()), env.succeeded(), 0.99)
}

fn record(obs: Vec<f64>, ret: f64) -> PerturbationRecord {
    PerturbationRecord {
        t: 0,
        action: vec![0.1, -0.1],
        obs,
        ret,
    }
}

fn fit_config(epochs: usize) -> StudyConfig {
    StudyConfig {
        update_epochs: epochs,
        lr: 3e-3,
        weight_decay: 0.0,
        batch_size: 16,
        ..StudyConfig::default()
    }
}

#[test]
fn constant_targets_are_fitted_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records: Vec<_> = (0..64).map(|i| record(vec![i as f64 / 64.0, 0.5], 7.5)).collect();
    let (pred, losses) = train_return_predictor(&records, &fit_config(100), &mut rng).unwrap();
    for r in &records {
        assert!((pred.predict(&r.input()).unwrap() - 7.5).abs() < 1e-2);
    }
    assert!(*losses.last().unwrap() < 1e-4, "{losses:?}");
}

#[test]
fn two_clusters_are_separated_within_five_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut records = Vec::new();
    for i in 0..60 {
        let jitter = (i % 6) as f64 * 0.01;
        records.push(record(vec![-1.0 + jitter, 0.0], 20.0));
        records.push(record(vec![1.0 + jitter, 0.0], 80.0));
    }
    let (pred, _) = train_return_predictor(&records, &fit_config(150), &mut rng).unwrap();
    // the least-squares fit of a cluster is its mean target
    for (x, target) in [(-0.97, 20.0), (1.03, 80.0)] {
        let p = pred.predict(&[x, 0.0, 0.1, -0.1]).unwrap();
        assert!((p - target).abs() <= 0.05 * target, "{p} vs {target}");
    }
}

#[test]
fn loss_does_not_increase_on_a_fixed_buffer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let records: Vec<_> = (0..200)
        .map(|i| {
            let x = i as f64 / 100.0 - 1.0;
            record(vec![x, x * x], 50.0 + 30.0 * x.sin())
        })
        .collect();
    let cfg = StudyConfig {
        update_epochs: 30,
        ..StudyConfig::default()
    };
    let (_, losses) = train_return_predictor(&records, &cfg, &mut rng).unwrap();
    // jitter is measured against the scale of the curve, its first epoch
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 0.05 * losses[0], "{losses:?}");
    }
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn empty_dataset_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert!(matches!(
        train_return_predictor(&[], &StudyConfig::default(), &mut rng),
        Err(StudyError::NoEpisodes)
    ));
    let cfg = StudyConfig {
        episodes: 0,
        ..StudyConfig::default()
    };
    let err = run_study(&narrow_gate(), &cfg, 0).unwrap_err();
    assert_eq!(err.to_string(), "no episodes configured");
}

#[test]
fn buffer_evicts_oldest_first() {
    let mut b = RecordBuffer::new(3);
    for i in 0..10 {
        b.push(record(vec![0.0], i as f64));
        assert!(b.len() <= 3);
    }
    let kept: Vec<f64> = b.iter().map(|r| r.ret).collect();
    assert_eq!(kept, vec![7.0, 8.0, 9.0]);
}

#[test]
fn small_study_keeps_the_buffer_cap_and_profile_shape() {
    let env = narrow_gate();
    let cfg = StudyConfig {
        episodes: 60,
        buffer_size: 25,
        envs: 2,
        ..StudyConfig::default()
    };
    let run = run_study(&env, &cfg, 5).unwrap();
    assert_eq!(run.buffer.len(), 25);
    assert_eq!(run.losses.len(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ep = expert_episode(&env, &mut rng).unwrap();
    let profile = criticality_profile(&run.predictor, &ep).unwrap();
    assert_eq!(profile.len(), ep.chunks.len());
    assert_eq!(windows(&ep).len(), ep.chunks.len());
    assert!(profile.iter().all(|p| p.is_finite()));
}

#[test]
fn windows_follow_the_episode_phases() {
    let env = narrow_gate();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ep = expert_episode(&env, &mut rng).unwrap();
    let w = windows(&ep);
    assert_eq!(w[0], Window::Start);
    assert!(w.contains(&Window::Approach));
    let order = |x: Window| [Window::Start, Window::Approach, Window::Transit, Window::Solved].iter().position(|&y| y == x);
    // the phases never go backwards, except that approach and transit can alternate
    for pair in w.windows(2) {
        let (a, b) = (order(pair[0]).unwrap(), order(pair[1]).unwrap());
        assert!(b >= a || (pair[0] == Window::Transit && pair[1] == Window::Approach), "{w:?}");
    }
    let probes = probe_times(&ep, 12);
    assert!(probes.len() <= 12 && probes.windows(2).all(|p| p[0] < p[1]));
}

#[test]
fn spearman_examples() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    // average ranks for the tie: (0, 1.5, 1.5, 3) against (0, 1, 2, 3)
    let expected = 4.5 / (4.5f64 * 5.0).sqrt();
    assert!((spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]) - expected).abs() < 1e-12);
}

#[test]
fn predictor_standardises_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = ReturnPredictor::new(3, &[4], &mut rng).unwrap();
    let rs = [record(vec![0.0], 2.0), record(vec![0.0], 6.0)];
    p.fit_scale(&rs.iter().collect::<Vec<_>>());
    assert_eq!(p.target_mean, 4.0);
    assert_eq!(p.target_std, 2.0);
}

proptest! {
    #[test]
    fn spearman_is_invariant_under_monotone_maps(v in prop::collection::vec(-100.0f64..100.0, 3..30)) {
        let w: Vec<f64> = v.iter().map(|x| (x / 10.0).exp()).collect();
        let idx: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        let a = spearman(&v, &idx);
        let b = spearman(&w, &idx);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn tail_return_matches_its_definition(
        rewards in prop::collection::vec(0.0f64..4.0, 1..40),
        frac in 0.0f64..1.0,
        success in any::<bool>(),
        gamma in 0.5f64..0.999,
    ) {
        let t = ((rewards.len() - 1) as f64 * frac) as usize;
        let got = perturbed_return(&rewards, t, success, gamma, false);
        prop_assert!((got - tail_return(&rewards, t, success, gamma)).abs() < 1e-9 * (1.0 + got.abs()));
        // the full-sum variant adds exactly the rewards before t
        let full = perturbed_return(&rewards, t, success, gamma, true);
        let head: f64 = (0..t).map(|k| gamma.powi(k as i32 - t as i32) * rewards[k]).sum();
        prop_assert!((full - got - head).abs() < 1e-9 * (1.0 + full.abs()));
    }
}
