//! Rollout drivers: rolling-window batched denoising, plain sequential
//! denoising and single-call prediction.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ampn::{AmpnConfig, GraphIndex};
use crate::autodiff::Scalar;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::hierarchy::GraphHierarchy;
use crate::mesh::{Mesh, Trajectory, TrajectoryMeta};
use crate::model::{advance_state, Denoiser, PhysState, Query, Scenario};
use crate::rng::{normal_vec, stream, DrawKind};
use crate::stats::ChannelStats;

/// Anything that predicts denoising velocities for a batch of queries.
pub trait VelocityModel {
    fn config(&self) -> &AmpnConfig;
    fn schedule(&self) -> &NoiseSchedule;
    fn target_stats(&self) -> &ChannelStats;
    /// One velocity block of `n * out_width` normalized values per query.
    fn velocities(
        &self,
        hier: &GraphHierarchy,
        mesh: &Mesh,
        index: &Arc<GraphIndex>,
        queries: &[Query],
    ) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> VelocityModel for Denoiser<T> {
    fn config(&self) -> &AmpnConfig {
        &self.net.config
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn target_stats(&self) -> &ChannelStats {
        &self.norm.targets
    }

    fn velocities(
        &self,
        hier: &GraphHierarchy,
        mesh: &Mesh,
        index: &Arc<GraphIndex>,
        queries: &[Query],
    ) -> Result<Vec<Vec<f64>>> {
        self.predict(hier, mesh, index, queries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Robi { m: usize },
    Sequential,
    OneStep,
}

impl Mode {
    /// Model calls needed for `steps` time steps with `k` denoising steps.
    pub fn expected_calls(self, k: usize, steps: usize) -> usize {
        if steps == 0 {
            return 0;
        }
        match self {
            Mode::Robi { m } => k - m + m * steps,
            Mode::Sequential => k * steps,
            Mode::OneStep => steps,
        }
    }

    pub fn label(self) -> String {
        match self {
            Mode::Robi { m } => format!("robi_m{m}"),
            Mode::Sequential => "sequential".into(),
            Mode::OneStep => "onestep".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutOptions {
    pub seed: u64,
    /// Trajectory id, part of every noise stream key.
    pub trajectory: u64,
    /// Feed zeros instead of Gaussian noise as the initial sample.
    pub zero_init: bool,
}

impl RolloutOptions {
    pub fn new(seed: u64, trajectory: u64) -> Self {
        RolloutOptions { seed, trajectory, zero_init: false }
    }
}

/// Result of a rollout. `states[0]` is the initial state.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<PhysState>,
    pub call_count: usize,
    pub peak_slots: usize,
    pub iteration_seconds: Vec<f64>,
    /// `(frame, k)` of every in-flight slot at each model call, oldest first.
    pub schedule: Vec<Vec<(usize, usize)>>,
    /// Normalized clean estimate from the first model call of each step.
    pub first_clean: Vec<Vec<f64>>,
}

impl Rollout {
    pub fn num_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn to_trajectory(&self, scen: &Scenario) -> Trajectory {
        let n = scen.mesh.num_nodes();
        let w = n * scen.mesh.dim;
        let frames = self.states.len();
        let range = scen.start_frame * w..(scen.start_frame + frames) * w;
        Trajectory {
            mesh: scen.mesh.clone(),
            num_frames: frames,
            positions: self.states.iter().flat_map(|s| s.positions.iter().copied()).collect(),
            stress: self.states.iter().flat_map(|s| s.stress.iter().copied()).collect(),
            bc_force: scen.bc_force[range.clone()].to_vec(),
            bc_disp: scen.bc_disp[range].to_vec(),
            node_extras: Vec::new(),
            meta: TrajectoryMeta {
                kind: "rollout".into(),
                ..Default::default()
            },
        }
    }
}

struct Slot {
    frame: usize,
    k: usize,
    noisy: Vec<f64>,
    clean: Option<Vec<f64>>,
}

struct Runner<'a, M: VelocityModel> {
    model: &'a M,
    hier: &'a GraphHierarchy,
    scen: &'a Scenario<'a>,
    opts: RolloutOptions,
    indices: HashMap<usize, Arc<GraphIndex>>,
}

impl<'a, M: VelocityModel> Runner<'a, M> {
    fn new(model: &'a M, hier: &'a GraphHierarchy, scen: &'a Scenario<'a>, opts: RolloutOptions) -> Result<Self> {
        let cfg = model.config();
        if scen.mesh.dim != cfg.dim {
            return Err(Error::Config(format!("model dim {} but mesh dim {}", cfg.dim, scen.mesh.dim)));
        }
        if hier.node_count.first() != Some(&scen.mesh.num_nodes()) {
            return Err(Error::structural("hierarchy does not belong to the scenario mesh"));
        }
        Ok(Runner { model, hier, scen, opts, indices: HashMap::new() })
    }

    fn k_max(&self) -> usize {
        self.model.schedule().steps
    }

    fn initial_noise(&self, frame: usize) -> Vec<f64> {
        let len = self.scen.mesh.num_nodes() * self.model.config().out_width();
        if self.opts.zero_init {
            return vec![0.0; len];
        }
        let mut rng = stream(self.opts.seed, self.opts.trajectory, frame as u64, self.k_max() as u64, DrawKind::Init);
        normal_vec(&mut rng, len)
    }

    fn advance(&self, base: &PhysState, clean_normalized: &[f64], frame: usize) -> PhysState {
        let clean = self.model.target_stats().denormalize(clean_normalized);
        advance_state(self.model.config(), self.scen.mesh, base, &clean, self.scen.bc_disp_at(frame))
    }

    /// Velocities for `(conditioning state, noisy, k, frame)` batch members.
    fn call(&mut self, members: &[(&PhysState, &[f64], usize, usize)]) -> Result<Vec<Vec<f64>>> {
        let index = self
            .indices
            .entry(members.len())
            .or_insert_with(|| Arc::new(GraphIndex::new(self.hier, members.len())))
            .clone();
        let queries: Vec<Query> = members
            .iter()
            .map(|&(state, noisy, k, frame)| Query {
                state,
                bc_force: self.scen.bc_force_at(frame),
                bc_disp: self.scen.bc_disp_at(frame),
                noisy,
                k,
                frame,
            })
            .collect();
        let v = self.model.velocities(self.hier, self.scen.mesh, &index, &queries)?;
        if v.len() != members.len() || v.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("model produced non-finite or missing velocities".into()));
        }
        Ok(v)
    }

    fn step(&self, slot: &mut Slot, v: &[f64]) -> Result<Vec<f64>> {
        let mut rng = stream(self.opts.seed, self.opts.trajectory, slot.frame as u64, slot.k as u64, DrawKind::Step);
        let (next, clean) = self.model.schedule().ddpm_step(&slot.noisy, v, slot.k, &mut rng)?;
        slot.noisy = next;
        slot.k -= 1;
        Ok(clean)
    }
}

fn empty(scen: &Scenario) -> Rollout {
    Rollout {
        states: vec![scen.initial.clone()],
        call_count: 0,
        peak_slots: 0,
        iteration_seconds: Vec::new(),
        schedule: Vec::new(),
        first_clean: Vec::new(),
    }
}

/// Rolling-window inference with denoising stride `m`.
///
/// A new time step enters the window every `m` model calls. Each call
/// denoises all in-flight steps by one level in a single batched forward
/// pass; a step is conditioned on the finalized state advanced by the
/// current clean estimates of all older in-flight steps.
pub fn robi_rollout<M: VelocityModel>(
    model: &M,
    hier: &GraphHierarchy,
    scen: &Scenario,
    m: usize,
    opts: RolloutOptions,
) -> Result<Rollout> {
    let mut run = Runner::new(model, hier, scen, opts)?;
    let k_max = run.k_max();
    if m == 0 || k_max % m != 0 {
        return Err(Error::parameter(format!("denoising stride {m} does not divide K = {k_max}")));
    }
    let mut out = empty(scen);
    let total = scen.num_steps;
    let mut base = scen.initial.clone();
    let mut window: VecDeque<Slot> = VecDeque::new();
    let mut admitted = 0;
    let mut iteration = 0;
    while admitted < total || !window.is_empty() {
        if iteration % m == 0 && admitted < total {
            let frame = scen.start_frame + admitted + 1;
            window.push_back(Slot {
                frame,
                k: k_max,
                noisy: run.initial_noise(frame),
                clean: None,
            });
            admitted += 1;
        }
        let started = Instant::now();
        out.peak_slots = out.peak_slots.max(window.len());
        out.schedule.push(window.iter().map(|s| (s.frame, s.k)).collect());

        let mut cond = Vec::with_capacity(window.len());
        cond.push(base.clone());
        for j in 1..window.len() {
            let prev = &window[j - 1];
            let clean = prev
                .clean
                .as_ref()
                .ok_or_else(|| Error::Contract("older slot has no clean estimate".into()))?;
            let next = run.advance(&cond[j - 1], clean, prev.frame);
            cond.push(next);
        }
        let members: Vec<_> = window
            .iter()
            .zip(&cond)
            .map(|(s, c)| (c, s.noisy.as_slice(), s.k, s.frame))
            .collect();
        let v = run.call(&members)?;
        for (slot, v) in window.iter_mut().zip(&v) {
            let first = slot.k == k_max;
            let clean = run.step(slot, v)?;
            if first {
                out.first_clean.push(clean.clone());
            }
            slot.clean = Some(clean);
        }
        out.call_count += 1;
        while window.front().is_some_and(|s| s.k == 0) {
            let done = window.pop_front().expect("front exists");
            base = run.advance(&base, &done.noisy, done.frame);
            out.states.push(base.clone());
        }
        out.iteration_seconds.push(started.elapsed().as_secs_f64());
        iteration += 1;
    }
    Ok(out)
}

/// Conventional inference: every time step is fully denoised before the
/// next one starts.
pub fn sequential_rollout<M: VelocityModel>(
    model: &M,
    hier: &GraphHierarchy,
    scen: &Scenario,
    opts: RolloutOptions,
) -> Result<Rollout> {
    let mut run = Runner::new(model, hier, scen, opts)?;
    let k_max = run.k_max();
    let mut out = empty(scen);
    let mut base = scen.initial.clone();
    for step in 0..scen.num_steps {
        let frame = scen.start_frame + step + 1;
        let mut slot = Slot {
            frame,
            k: k_max,
            noisy: run.initial_noise(frame),
            clean: None,
        };
        while slot.k > 0 {
            let started = Instant::now();
            out.peak_slots = 1;
            out.schedule.push(vec![(frame, slot.k)]);
            let v = run.call(&[(&base, slot.noisy.as_slice(), slot.k, frame)])?;
            let first = slot.k == k_max;
            let clean = run.step(&mut slot, &v[0])?;
            if first {
                out.first_clean.push(clean);
            }
            out.call_count += 1;
            out.iteration_seconds.push(started.elapsed().as_secs_f64());
        }
        base = run.advance(&base, &slot.noisy, frame);
        out.states.push(base.clone());
    }
    Ok(out)
}

/// Single model call per time step at `k = K`, using its clean estimate as
/// the prediction.
pub fn one_step_rollout<M: VelocityModel>(
    model: &M,
    hier: &GraphHierarchy,
    scen: &Scenario,
    opts: RolloutOptions,
) -> Result<Rollout> {
    let mut run = Runner::new(model, hier, scen, opts)?;
    let k_max = run.k_max();
    let mut out = empty(scen);
    let mut base = scen.initial.clone();
    for step in 0..scen.num_steps {
        let frame = scen.start_frame + step + 1;
        let started = Instant::now();
        out.peak_slots = 1;
        out.schedule.push(vec![(frame, k_max)]);
        let noisy = run.initial_noise(frame);
        let v = run.call(&[(&base, noisy.as_slice(), k_max, frame)])?;
        let clean = model.schedule().reconstruct_clean(&noisy, &v[0], k_max)?;
        base = run.advance(&base, &clean, frame);
        out.first_clean.push(clean);
        out.states.push(base.clone());
        out.call_count += 1;
        out.iteration_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(out)
}

pub fn rollout<M: VelocityModel>(
    model: &M,
    hier: &GraphHierarchy,
    scen: &Scenario,
    mode: Mode,
    opts: RolloutOptions,
) -> Result<Rollout> {
    match mode {
        Mode::Robi { m } => robi_rollout(model, hier, scen, m, opts),
        Mode::Sequential => sequential_rollout(model, hier, scen, opts),
        Mode::OneStep => one_step_rollout(model, hier, scen, opts),
    }
}
