mod common;

use std::sync::Arc;

use common::*;
use proptest::prelude::*;
use robin_core::ampn::{AmpnConfig, GraphIndex};
use robin_core::diffusion::NoiseSchedule;
use robin_core::hierarchy::GraphHierarchy;
use robin_core::mesh::{Mesh, Trajectory};
use robin_core::model::{physical_target, PhysState, Query, Scenario};
use robin_core::robi::*;
use robin_core::stats::ChannelStats;
use robin_core::Error;

/// Returns the velocity whose clean estimate is the true next frame,
/// relative to whatever state the query is conditioned on.
struct Oracle<'a> {
    cfg: AmpnConfig,
    schedule: NoiseSchedule,
    stats: ChannelStats,
    truth: &'a Trajectory,
}

impl VelocityModel for Oracle<'_> {
    fn config(&self) -> &AmpnConfig {
        &self.cfg
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    fn target_stats(&self) -> &ChannelStats {
        &self.stats
    }
    fn velocities(&self, _: &GraphHierarchy, _: &Mesh, _: &Arc<GraphIndex>, qs: &[Query]) -> robin_core::Result<Vec<Vec<f64>>> {
        qs.iter()
            .map(|q| {
                let next = PhysState::from_trajectory(self.truth, q.frame);
                let u0 = self.stats.normalize(&physical_target(&self.cfg, q.state, &next));
                let ab = self.schedule.alpha_bar[q.k];
                let eps: Vec<f64> = q.noisy.iter().zip(&u0).map(|(u, c)| (u - ab.sqrt() * c) / (1.0 - ab).sqrt()).collect();
                self.schedule.v_target(&u0, &eps, q.k)
            })
            .collect()
    }
}

/// Constant velocity, for counting calls on synthetic scenarios.
struct Constant {
    cfg: AmpnConfig,
    schedule: NoiseSchedule,
    stats: ChannelStats,
    value: f64,
}

impl VelocityModel for Constant {
    fn config(&self) -> &AmpnConfig {
        &self.cfg
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    fn target_stats(&self) -> &ChannelStats {
        &self.stats
    }
    fn velocities(&self, _: &GraphHierarchy, m: &Mesh, _: &Arc<GraphIndex>, qs: &[Query]) -> robin_core::Result<Vec<Vec<f64>>> {
        Ok(qs.iter().map(|_| vec![self.value; m.num_nodes() * self.cfg.out_width()]).collect())
    }
}

fn constant(k: usize, value: f64) -> Constant {
    let cfg = beam_config(8);
    Constant { stats: ChannelStats::identity(cfg.out_width()), cfg, schedule: NoiseSchedule::new(k).unwrap(), value }
}

struct Synthetic {
    mesh: Mesh,
    hier: GraphHierarchy,
    zeros: Vec<f64>,
}

impl Synthetic {
    fn new(frames: usize) -> Self {
        let mesh = path_mesh(6);
        let hier = path_hierarchy(6, 1);
        Synthetic { zeros: vec![0.0; frames * 12], mesh, hier }
    }

    fn scenario(&self, steps: usize) -> Scenario<'_> {
        Scenario {
            mesh: &self.mesh,
            bc_force: &self.zeros,
            bc_disp: &self.zeros,
            start_frame: 0,
            initial: PhysState { positions: self.mesh.positions0.clone(), stress: vec![0.0; 6], last_disp: vec![0.0; 12] },
            num_steps: steps,
        }
    }
}

fn calls(k: usize, m: usize, steps: usize) -> Rollout {
    let syn = Synthetic::new(steps + 1);
    let model = constant(k, 0.1);
    robi_rollout(&model, &syn.hier, &syn.scenario(steps), m, RolloutOptions::new(1, 0)).unwrap()
}

#[test]
fn call_count_law_on_reference_triples() {
    for (k, m, t) in [(20, 1, 50), (20, 5, 50), (20, 20, 50), (10, 2, 30), (5, 5, 10)] {
        let r = calls(k, m, t);
        assert_eq!(r.call_count, k - m + m * t, "K={k} m={m} T={t}");
        assert_eq!(r.call_count, Mode::Robi { m }.expected_calls(k, t));
        assert_eq!(r.num_steps(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn call_count_law_holds(k in 2usize..12, t in 1usize..15, pick in 0usize..12) {
        let divisors: Vec<usize> = (1..=k).filter(|d| k % d == 0).collect();
        let m = divisors[pick % divisors.len()];
        let r = calls(k, m, t);
        prop_assert_eq!(r.call_count, k - m + m * t);
        prop_assert_eq!(r.iteration_seconds.len(), r.call_count);
        prop_assert_eq!(r.peak_slots, (k / m).min(t));
        for row in &r.schedule {
            prop_assert!(row.len() <= k / m);
            // Older steps are always at least as denoised as younger ones.
            for w in row.windows(2) {
                prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
            }
        }
    }
}

#[test]
fn window_holds_at_most_k_over_m_steps() {
    assert_eq!(calls(20, 1, 50).peak_slots, 20);
    assert_eq!(calls(20, 5, 50).peak_slots, 4);
    assert_eq!(calls(20, 20, 50).peak_slots, 1);
    assert_eq!(calls(20, 1, 3).peak_slots, 3);
}

#[test]
fn stride_one_schedule_for_three_levels() {
    let r = calls(3, 1, 4);
    let expect: Vec<Vec<(usize, usize)>> = vec![
        vec![(1, 3)],
        vec![(1, 2), (2, 3)],
        vec![(1, 1), (2, 2), (3, 3)],
        vec![(2, 1), (3, 2), (4, 3)],
        vec![(3, 1), (4, 2)],
        vec![(4, 1)],
    ];
    assert_eq!(r.schedule, expect);
}

#[test]
fn invalid_stride_is_rejected() {
    let syn = Synthetic::new(5);
    let model = constant(20, 0.0);
    for m in [0, 3, 21] {
        let err = robi_rollout(&model, &syn.hier, &syn.scenario(4), m, RolloutOptions::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)), "{err}");
    }
}

#[test]
fn non_finite_velocity_is_numerical_error() {
    let syn = Synthetic::new(5);
    let model = constant(4, f64::NAN);
    for mode in [Mode::Robi { m: 1 }, Mode::Sequential, Mode::OneStep] {
        let err = rollout(&model, &syn.hier, &syn.scenario(4), mode, RolloutOptions::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }
}

#[test]
fn foreign_hierarchy_is_rejected() {
    let syn = Synthetic::new(5);
    let other = path_hierarchy(7, 1);
    let err = sequential_rollout(&constant(4, 0.0), &other, &syn.scenario(4), RolloutOptions::new(0, 0)).unwrap_err();
    assert!(matches!(err, Error::Structural(_)), "{err}");
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn exact_denoiser_reproduces_ground_truth() {
    let traj = tiny_beam(12, 1e-3);
    let hier = hierarchy(&traj.mesh, 1);
    let cfg = beam_config(8);
    let pairs = [(&traj, &hier)];
    let norm = robin_core::model::Normalizer::fit(&cfg, &pairs).unwrap();
    let oracle = Oracle { cfg, schedule: NoiseSchedule::new(6).unwrap(), stats: norm.targets, truth: &traj };
    let scen = Scenario::from_trajectory(&traj, 0, 12).unwrap();
    for mode in [Mode::Robi { m: 1 }, Mode::Robi { m: 2 }, Mode::Robi { m: 6 }, Mode::Sequential, Mode::OneStep] {
        let r = rollout(&oracle, &hier, &scen, mode, RolloutOptions::new(3, 0)).unwrap();
        assert_eq!(r.call_count, mode.expected_calls(6, 12));
        for (f, s) in r.states.iter().enumerate() {
            assert!(max_dev(&s.positions, traj.positions_at(f)) < 1e-9, "{mode:?} frame {f}");
            assert!(max_dev(&s.stress, traj.stress_at(f)) < 1e-9, "{mode:?} frame {f}");
        }
        let out = r.to_trajectory(&scen);
        assert!(robin_core::training::rmse(&out, &traj).unwrap() < 1e-9);
    }
}

fn bits(r: &Rollout) -> Vec<u64> {
    r.states.iter().flat_map(|s| s.positions.iter().chain(&s.stress)).map(|x| x.to_bits()).collect()
}

#[test]
fn full_stride_matches_sequential_bitwise() {
    let traj = tiny_beam(20, 1e-3);
    let hier = hierarchy(&traj.mesh, 1);
    let den = smoke_denoiser(&traj, &hier, 5, 11);
    let scen = Scenario::from_trajectory(&traj, 0, 20).unwrap();
    let opts = RolloutOptions::new(7, 2);
    let a = robi_rollout(&den, &hier, &scen, 5, opts).unwrap();
    let b = sequential_rollout(&den, &hier, &scen, opts).unwrap();
    assert_eq!(a.call_count, b.call_count);
    assert_eq!(a.schedule, b.schedule);
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn sequential_rollout_replays_from_any_frame() {
    let traj = tiny_beam(8, 1e-3);
    let hier = hierarchy(&traj.mesh, 1);
    let den = smoke_denoiser(&traj, &hier, 4, 2);
    let opts = RolloutOptions::new(5, 1);
    let full = sequential_rollout(&den, &hier, &Scenario::from_trajectory(&traj, 0, 8).unwrap(), opts).unwrap();
    let mut scen = Scenario::from_trajectory(&traj, 3, 5).unwrap();
    scen.initial = full.states[3].clone();
    let tail = sequential_rollout(&den, &hier, &scen, opts).unwrap();
    let head: Vec<u64> = full.states[3..].iter().flat_map(|s| s.positions.iter()).map(|x| x.to_bits()).collect();
    let replay: Vec<u64> = tail.states.iter().flat_map(|s| s.positions.iter()).map(|x| x.to_bits()).collect();
    assert_eq!(head, replay);
}

#[test]
fn one_step_matches_first_clean_estimate_of_first_step() {
    let traj = tiny_beam(6, 1e-3);
    let hier = hierarchy(&traj.mesh, 1);
    let den = smoke_denoiser(&traj, &hier, 4, 9);
    let scen = Scenario::from_trajectory(&traj, 0, 6).unwrap();
    let opts = RolloutOptions::new(1, 0);
    let one = one_step_rollout(&den, &hier, &scen, opts).unwrap();
    let robi = robi_rollout(&den, &hier, &scen, 1, opts).unwrap();
    assert_eq!(one.call_count, 6);
    assert_eq!(one.first_clean[0], robi.first_clean[0]);
}

#[test]
fn rollouts_are_deterministic_and_seed_dependent() {
    let traj = tiny_beam(6, 1e-3);
    let hier = hierarchy(&traj.mesh, 1);
    let den = smoke_denoiser(&traj, &hier, 4, 9);
    let scen = Scenario::from_trajectory(&traj, 0, 6).unwrap();
    let a = robi_rollout(&den, &hier, &scen, 2, RolloutOptions::new(4, 0)).unwrap();
    let b = robi_rollout(&den, &hier, &scen, 2, RolloutOptions::new(4, 0)).unwrap();
    let c = robi_rollout(&den, &hier, &scen, 2, RolloutOptions::new(5, 0)).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn boundary_nodes_follow_their_conditions() {
    let traj = tiny_beam(5, 1e-3);
    let hier = hierarchy(&traj.mesh, 1);
    let den = smoke_denoiser(&traj, &hier, 4, 3);
    let scen = Scenario::from_trajectory(&traj, 0, 5).unwrap();
    let r = robi_rollout(&den, &hier, &scen, 1, RolloutOptions::new(0, 0)).unwrap();
    for s in &r.states {
        for (i, t) in traj.mesh.node_type.iter().enumerate() {
            if *t == robin_core::mesh::NodeType::Handle {
                assert_eq!(&s.positions[2 * i..2 * i + 2], traj.mesh.position0(i));
            }
        }
    }
}
