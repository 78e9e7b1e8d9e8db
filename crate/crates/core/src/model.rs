//! Glue between physical trajectories and the normalized denoising space.
//!
//! Output channels are laid out per node as `[displacement (dim), stress]`.
//! A residual channel is denoised as the per-step increment, a
//! non-residual one as the absolute next value.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ampn::{build_inputs, raw_edge_inputs, Ampn, AmpnConfig, CondChannel, FeatureStats, GraphIndex, SlotInput};
use crate::autodiff::{Eager, ParamStore, Recorder, Scalar};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::hierarchy::GraphHierarchy;
use crate::mesh::{Mesh, NodeType, Trajectory};
use crate::stats::{ChannelStats, StatsAccumulator};

/// Physical state of every node at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysState {
    pub positions: Vec<f64>,
    pub stress: Vec<f64>,
    /// Displacement increment that led to this frame.
    pub last_disp: Vec<f64>,
}

impl PhysState {
    pub fn from_trajectory(traj: &Trajectory, f: usize) -> Self {
        let last_disp = if f == 0 {
            vec![0.0; traj.positions_at(0).len()]
        } else {
            traj.displacement_increment(f)
        };
        PhysState {
            positions: traj.positions_at(f).to_vec(),
            stress: traj.stress_at(f).to_vec(),
            last_disp,
        }
    }
}

/// Everything a rollout may read: mesh, boundary signals and a start state.
#[derive(Debug, Clone)]
pub struct Scenario<'a> {
    pub mesh: &'a Mesh,
    /// Per-frame force increments, `frames * n * dim`.
    pub bc_force: &'a [f64],
    /// Per-frame scripted displacement increments, `frames * n * dim`.
    pub bc_disp: &'a [f64],
    /// Absolute frame index of `initial`.
    pub start_frame: usize,
    pub initial: PhysState,
    pub num_steps: usize,
}

impl<'a> Scenario<'a> {
    pub fn from_trajectory(traj: &'a Trajectory, start_frame: usize, num_steps: usize) -> Result<Self> {
        if start_frame + num_steps > traj.num_steps() {
            return Err(Error::parameter(format!(
                "rollout of {num_steps} steps from frame {start_frame} exceeds the {} available",
                traj.num_steps()
            )));
        }
        Ok(Scenario {
            mesh: &traj.mesh,
            bc_force: &traj.bc_force,
            bc_disp: &traj.bc_disp,
            start_frame,
            initial: PhysState::from_trajectory(traj, start_frame),
            num_steps,
        })
    }

    fn frame_slice<'b>(&self, data: &'b [f64], f: usize) -> &'b [f64] {
        let w = self.mesh.num_nodes() * self.mesh.dim;
        &data[f * w..(f + 1) * w]
    }

    pub fn bc_force_at(&self, f: usize) -> &[f64] {
        self.frame_slice(self.bc_force, f)
    }

    pub fn bc_disp_at(&self, f: usize) -> &[f64] {
        self.frame_slice(self.bc_disp, f)
    }
}

/// Width of a named conditioning channel.
pub fn cond_channel(name: &str, dim: usize) -> Result<CondChannel> {
    let width = match name {
        "bc_force" | "bc_disp" | "disp_prev" => dim,
        "stress_prev" => 1,
        other => return Err(Error::Config(format!("unknown conditioning channel {other:?}"))),
    };
    Ok(CondChannel { name: name.into(), width })
}

/// Per-node conditioning rows for predicting frame `f` from `state`.
pub fn cond_values(
    cond: &[CondChannel],
    dim: usize,
    bc_force: &[f64],
    bc_disp: &[f64],
    state: &PhysState,
) -> Result<Vec<f64>> {
    let n = state.stress.len();
    let width: usize = cond.iter().map(|c| c.width).sum();
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        for c in cond {
            match c.name.as_str() {
                "bc_force" => out.extend_from_slice(&bc_force[i * dim..(i + 1) * dim]),
                "bc_disp" => out.extend_from_slice(&bc_disp[i * dim..(i + 1) * dim]),
                "disp_prev" => out.extend_from_slice(&state.last_disp[i * dim..(i + 1) * dim]),
                "stress_prev" => out.push(state.stress[i]),
                other => return Err(Error::Config(format!("unknown conditioning channel {other:?}"))),
            }
        }
    }
    Ok(out)
}

fn check_outputs(cfg: &AmpnConfig) -> Result<()> {
    let ok = cfg.outputs.len() == 2
        && cfg.outputs[0].name == "displacement"
        && cfg.outputs[0].width == cfg.dim
        && cfg.outputs[1].name == "stress"
        && cfg.outputs[1].width == 1;
    if ok {
        Ok(())
    } else {
        Err(Error::Config("output channels must be [displacement (dim), stress (1)]".into()))
    }
}

/// Physical target rows `[n, dim + 1]` for the transition `prev -> next`.
pub fn physical_target(cfg: &AmpnConfig, prev: &PhysState, next: &PhysState) -> Vec<f64> {
    let dim = cfg.dim;
    let n = prev.stress.len();
    let (rd, rs) = (cfg.outputs[0].residual, cfg.outputs[1].residual);
    let mut out = Vec::with_capacity(n * (dim + 1));
    for i in 0..n {
        for c in 0..dim {
            let j = i * dim + c;
            out.push(if rd { next.positions[j] - prev.positions[j] } else { next.positions[j] });
        }
        out.push(if rs { next.stress[i] - prev.stress[i] } else { next.stress[i] });
    }
    out
}

/// Applies a physical-space clean estimate to `base`, enforcing boundary
/// conditions: handles stay put and actuators follow their script.
pub fn advance_state(cfg: &AmpnConfig, mesh: &Mesh, base: &PhysState, clean: &[f64], bc_disp: &[f64]) -> PhysState {
    let dim = cfg.dim;
    let n = base.stress.len();
    let (rd, rs) = (cfg.outputs[0].residual, cfg.outputs[1].residual);
    let mut next = PhysState {
        positions: vec![0.0; n * dim],
        stress: vec![0.0; n],
        last_disp: vec![0.0; n * dim],
    };
    for i in 0..n {
        let row = &clean[i * (dim + 1)..(i + 1) * (dim + 1)];
        for c in 0..dim {
            let j = i * dim + c;
            let d = match mesh.node_type[i] {
                NodeType::Handle => 0.0,
                NodeType::Actuator => bc_disp[j],
                NodeType::Normal => {
                    if rd {
                        row[c]
                    } else {
                        row[c] - base.positions[j]
                    }
                }
            };
            next.positions[j] = base.positions[j] + d;
            next.last_disp[j] = d;
        }
        next.stress[i] = if rs { base.stress[i] + row[dim] } else { row[dim] };
    }
    next
}

/// Standardization of encoder inputs and of the denoised channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub features: FeatureStats,
    pub targets: ChannelStats,
    /// Per-coordinate std of node positions, scale of the input perturbation.
    pub position_std: f64,
}

impl Normalizer {
    pub fn identity(cfg: &AmpnConfig) -> Self {
        Normalizer {
            features: FeatureStats::identity(cfg.dim, cfg.cond_width()),
            targets: ChannelStats::identity(cfg.out_width()),
            position_std: 1.0,
        }
    }

    /// Exact statistics over every transition of the given trajectories.
    pub fn fit(cfg: &AmpnConfig, data: &[(&Trajectory, &GraphHierarchy)]) -> Result<Self> {
        check_outputs(cfg)?;
        if data.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty split".into()));
        }
        let dim = cfg.dim;
        let mut cond = StatsAccumulator::new(cfg.cond_width());
        let mut mesh = StatsAccumulator::new(2 * dim + 2);
        let mut contact = StatsAccumulator::new(dim + 1);
        let mut down = StatsAccumulator::new(2 * dim + 2);
        let mut up = StatsAccumulator::new(2 * dim + 2);
        let mut targets = StatsAccumulator::new(cfg.out_width());
        let mut pos = StatsAccumulator::new(1);
        for (traj, hier) in data {
            for f in 1..=traj.num_steps() {
                let prev = PhysState::from_trajectory(traj, f - 1);
                let next = PhysState::from_trajectory(traj, f);
                cond.push_rows(&cond_values(&cfg.cond, dim, traj.bc_force_at(f), traj.bc_disp_at(f), &prev)?)?;
                targets.push_rows(&physical_target(cfg, &prev, &next))?;
                pos.push_rows(&prev.positions)?;
                let raw = raw_edge_inputs(hier, &traj.mesh, &prev.positions);
                raw.mesh.iter().try_for_each(|r| mesh.push_rows(r))?;
                raw.contact.iter().try_for_each(|r| contact.push_rows(r))?;
                raw.down.iter().try_for_each(|r| down.push_rows(r))?;
                raw.up.iter().try_for_each(|r| up.push_rows(r))?;
            }
        }
        let or_identity = |acc: StatsAccumulator, w: usize| -> Result<ChannelStats> {
            if acc.count() == 0 {
                Ok(ChannelStats::identity(w))
            } else {
                acc.finish()
            }
        };
        let features = FeatureStats {
            cond: cond.finish()?,
            mesh: mesh.finish()?,
            contact: or_identity(contact, dim + 1)?,
            down: or_identity(down, 2 * dim + 2)?,
            up: or_identity(up, 2 * dim + 2)?,
        };
        let targets = targets.finish()?;
        for (name, s) in [("cond", &features.cond), ("targets", &targets)] {
            if !s.degenerate.is_empty() {
                log::warn!("{name} channels {:?} have zero variance; std set to 1", s.degenerate);
            }
        }
        Ok(Normalizer {
            features,
            targets,
            position_std: pos.finish()?.std[0],
        })
    }
}

/// A network with its parameters, normalization and noise schedule.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    pub net: Ampn,
    pub params: ParamStore<T>,
    pub norm: Normalizer,
    pub schedule: NoiseSchedule,
}

/// One batch member for [`Denoiser::predict`].
#[derive(Debug, Clone)]
pub struct Query<'a> {
    pub state: &'a PhysState,
    pub bc_force: &'a [f64],
    pub bc_disp: &'a [f64],
    /// Noisy sample in normalized space, `n * out_width`.
    pub noisy: &'a [f64],
    pub k: usize,
    /// Absolute frame being predicted.
    pub frame: usize,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: AmpnConfig, norm: Normalizer, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        check_outputs(&config)?;
        let mut params = ParamStore::new();
        let net = Ampn::init(config, &mut params, seed)?;
        Ok(Denoiser { net, params, norm, schedule })
    }

    pub fn config(&self) -> &AmpnConfig {
        &self.net.config
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps
    }

    /// Builds standardized inputs for a batch sharing one mesh.
    pub fn inputs(
        &self,
        hier: &GraphHierarchy,
        mesh: &Mesh,
        index: &Arc<GraphIndex>,
        queries: &[Query],
    ) -> Result<crate::ampn::ModelInputs<T>> {
        let cfg = self.config();
        let conds: Vec<Vec<f64>> = queries
            .iter()
            .map(|q| cond_values(&cfg.cond, cfg.dim, q.bc_force, q.bc_disp, q.state))
            .collect::<Result<_>>()?;
        let slots: Vec<SlotInput> = queries
            .iter()
            .zip(&conds)
            .map(|(q, c)| SlotInput {
                positions: &q.state.positions,
                noisy: q.noisy,
                cond: c,
                k: q.k,
            })
            .collect();
        build_inputs(cfg, hier, mesh, index, &self.norm.features, &slots)
    }

    /// Predicted velocities in normalized space, one block of
    /// `n * out_width` values per query, from a single batched forward pass.
    pub fn predict(
        &self,
        hier: &GraphHierarchy,
        mesh: &Mesh,
        index: &Arc<GraphIndex>,
        queries: &[Query],
    ) -> Result<Vec<Vec<f64>>> {
        let inputs = self.inputs(hier, mesh, index, queries)?;
        let mut ev = Eager;
        let out = self.net.forward(&mut ev, &self.params, &inputs)?;
        let v = ev.value(&out);
        let block = mesh.num_nodes() * self.config().out_width();
        Ok(v.data.chunks(block.max(1)).map(|c| c.iter().map(|x| x.f64()).collect()).collect())
    }

    pub fn denormalize_targets(&self, normalized: &[f64]) -> Vec<f64> {
        self.norm.targets.denormalize(normalized)
    }

    pub fn normalize_targets(&self, physical: &[f64]) -> Vec<f64> {
        self.norm.targets.normalize(physical)
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            net: self.net.clone(),
            params: self.params.cast(),
            norm: self.norm.clone(),
            schedule: self.schedule.clone(),
        }
    }
}
