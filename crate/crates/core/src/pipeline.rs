//! End-to-end steps shared by the command-line driver and the benchmarks:
//! hierarchy preparation, training from a run config, rollout evaluation
//! and the mode sweep.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::config::RunConfig;
use crate::datagen::frame0_contact_edges;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::hierarchy::{build_hierarchy, GraphHierarchy, HierarchyCache, HierarchyParams};
use crate::mesh::Trajectory;
use crate::model::{Denoiser, Normalizer, Scenario};
use crate::robi::{rollout, Mode, Rollout, RolloutOptions, VelocityModel};
use crate::training::{rmse_per_step, train, Checkpoint, Example, LogRow, TrainOutcome};

pub const ROLLOUT_REPORT_VERSION: u32 = 1;
pub const BENCH_REPORT_VERSION: u32 = 1;

/// Trajectories with their hierarchies.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub trajs: Vec<Trajectory>,
    pub hiers: Vec<GraphHierarchy>,
}

impl Prepared {
    /// Builds each hierarchy from the mesh and the frame-0 contact edges,
    /// reusing `cache` entries when given.
    pub fn new(trajs: Vec<Trajectory>, params: &HierarchyParams, cache: Option<&HierarchyCache>) -> Result<Self> {
        let hiers = trajs
            .iter()
            .map(|t| {
                let contact = frame0_contact_edges(t)?;
                match cache {
                    Some(c) => c.get_or_build(&t.mesh, &contact, params),
                    None => build_hierarchy(&t.mesh, &contact, params),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { trajs, hiers })
    }

    pub fn examples(&self) -> Vec<Example<'_>> {
        self.trajs.iter().zip(&self.hiers).map(|(t, h)| Example::new(t, h)).collect()
    }

    pub fn len(&self) -> usize {
        self.trajs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajs.is_empty()
    }
}

/// Result of [`train_run`].
#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Parameters after the last iteration.
    pub last: Checkpoint,
    /// Parameters with the lowest validation loss, if validation ran.
    pub best: Option<Checkpoint>,
    pub curve: Vec<LogRow>,
}

impl TrainRun {
    pub fn preferred(&self) -> &Checkpoint {
        self.best.as_ref().unwrap_or(&self.last)
    }
}

/// Hierarchy settings a run config trains with, ablations applied.
pub fn hierarchy_params(cfg: &RunConfig, dim: usize) -> Result<HierarchyParams> {
    Ok(cfg.build(dim)?.1)
}

/// Fits normalization on `train_set`, initializes a denoiser and trains it.
/// Both sets must have been prepared with [`hierarchy_params`].
pub fn train_run<T: Scalar>(
    cfg: &RunConfig,
    train_set: &Prepared,
    valid: &Prepared,
    log: impl FnMut(&LogRow),
) -> Result<TrainRun> {
    cfg.validate()?;
    let first = train_set.trajs.first().ok_or_else(|| Error::Data("training split is empty".into()))?;
    let (model, hier) = cfg.build(first.dim())?;
    let pairs: Vec<_> = train_set.trajs.iter().zip(&train_set.hiers).collect();
    let norm = Normalizer::fit(&model, &pairs)?;
    let schedule = NoiseSchedule::new(cfg.diffusion.steps)?;
    let mut den = Denoiser::<T>::new(model, norm, schedule, cfg.model.init_seed)?;
    let TrainOutcome { curve, best, final_val_loss } =
        train(&mut den, &train_set.examples(), &valid.examples(), &cfg.training, log)?;
    let last = Checkpoint::from_denoiser(&den, &den.params, &hier, &cfg.training, cfg.training.iterations, final_val_loss);
    let best = best.map(|(params, it, v)| Checkpoint::from_denoiser(&den, &params, &hier, &cfg.training, it, Some(v)));
    Ok(TrainRun { last, best, curve })
}

/// One rollout of one trajectory under one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub trajectory: usize,
    pub seed: u64,
    pub mode: String,
    pub m: usize,
    pub k: usize,
    pub steps: usize,
    pub call_count: usize,
    pub peak_slots: usize,
    pub wall_seconds: f64,
    pub iteration_seconds: Vec<f64>,
    pub step_rmse: Vec<f64>,
    pub rmse: f64,
}

/// Mode and zero-input flag a checkpoint is rolled out with. Models trained
/// without diffusion only know `k = K` with zero input, so they always run
/// one call per step.
pub fn inference_plan(ck: &Checkpoint, requested: Mode) -> Result<(Mode, bool)> {
    if ck.train.ablations.no_diffusion {
        return Ok((Mode::OneStep, true));
    }
    if let Mode::Robi { m } = requested {
        if m == 0 || !ck.diffusion_steps.is_multiple_of(m) {
            return Err(Error::Config(format!("denoising stride {m} does not divide K = {}", ck.diffusion_steps)));
        }
    }
    Ok((requested, false))
}

/// Rolls out `traj` from `start` for `steps` steps (to the end when `None`)
/// and scores positions against the ground truth.
#[allow(clippy::too_many_arguments)]
pub fn rollout_and_score<M: VelocityModel>(
    model: &M,
    traj: &Trajectory,
    hier: &GraphHierarchy,
    index: usize,
    mode: Mode,
    opts: RolloutOptions,
    start: usize,
    steps: Option<usize>,
) -> Result<(RolloutRecord, Rollout, Trajectory)> {
    let seed = opts.seed;
    let available = traj.num_steps().saturating_sub(start);
    let steps = steps.unwrap_or(available);
    if steps == 0 || steps > available {
        return Err(Error::Config(format!(
            "cannot roll out {steps} steps from frame {start} of a {}-step trajectory",
            traj.num_steps()
        )));
    }
    let scen = Scenario::from_trajectory(traj, start, steps)?;
    let started = Instant::now();
    let out = rollout(model, hier, &scen, mode, opts)?;
    let wall_seconds = started.elapsed().as_secs_f64();
    let pred: Vec<&[f64]> = out.states[1..].iter().map(|s| s.positions.as_slice()).collect();
    let truth: Vec<&[f64]> = (start + 1..=start + steps).map(|f| traj.positions_at(f)).collect();
    let step_rmse = rmse_per_step(&pred, &truth, traj.dim())?;
    let rmse = step_rmse.iter().sum::<f64>() / step_rmse.len() as f64;
    let (m, k) = (mode_stride(mode, model.schedule().steps), model.schedule().steps);
    let record = RolloutRecord {
        trajectory: index,
        seed,
        mode: mode.label(),
        m,
        k,
        steps,
        call_count: out.call_count,
        peak_slots: out.peak_slots,
        wall_seconds,
        iteration_seconds: out.iteration_seconds.clone(),
        step_rmse,
        rmse,
    };
    let predicted = out.to_trajectory(&scen);
    Ok((record, out, predicted))
}

/// Denoising stride of a mode; sequential is stride `K`, one-step stride 1.
pub fn mode_stride(mode: Mode, k: usize) -> usize {
    match mode {
        Mode::Robi { m } => m,
        Mode::Sequential => k,
        Mode::OneStep => 1,
    }
}

/// Modes compared by the benchmark: one-step, rolling window with strides 1
/// and 5 (when 5 divides `K`) and sequential.
pub fn bench_modes(k: usize) -> Vec<Mode> {
    let mut modes = vec![Mode::OneStep, Mode::Robi { m: 1 }];
    if k.is_multiple_of(5) && k > 5 {
        modes.push(Mode::Robi { m: 5 });
    }
    modes.push(Mode::Sequential);
    modes
}

/// One benchmark row, aggregated over trajectories and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub schema_version: u32,
    pub mode: String,
    pub m: usize,
    pub k: usize,
    pub steps: usize,
    /// Calls per rollout; identical for every trajectory and seed.
    pub call_count: usize,
    /// Mean wall time of one rollout.
    pub wall_seconds: f64,
    /// Mean and population std over seeds of the per-seed mean RMSE.
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

/// Aggregates the records of one mode.
pub fn bench_row(records: &[RolloutRecord]) -> Result<BenchRow> {
    let first = records.first().ok_or_else(|| Error::Data("no rollouts to aggregate".into()))?;
    if records.iter().any(|r| r.call_count != first.call_count || r.mode != first.mode) {
        return Err(Error::Data("records of one benchmark row must share mode and call count".into()));
    }
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let per_seed: Vec<f64> = seeds
        .iter()
        .map(|s| {
            let rs: Vec<f64> = records.iter().filter(|r| r.seed == *s).map(|r| r.rmse).collect();
            rs.iter().sum::<f64>() / rs.len() as f64
        })
        .collect();
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let var = per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / per_seed.len() as f64;
    Ok(BenchRow {
        schema_version: BENCH_REPORT_VERSION,
        mode: first.mode.clone(),
        m: first.m,
        k: first.k,
        steps: first.steps,
        call_count: first.call_count,
        wall_seconds: records.iter().map(|r| r.wall_seconds).sum::<f64>() / records.len() as f64,
        rmse_mean: mean,
        rmse_std: var.sqrt(),
    })
}

/// Rollout report written next to predicted trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutReport {
    pub schema_version: u32,
    pub mode: String,
    pub m: usize,
    pub k: usize,
    pub records: Vec<RolloutRecord>,
}

impl RolloutReport {
    pub fn new(mode: Mode, k: usize, records: Vec<RolloutRecord>) -> Self {
        RolloutReport {
            schema_version: ROLLOUT_REPORT_VERSION,
            mode: mode.label(),
            m: mode_stride(mode, k),
            k,
            records,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, rmse: f64) -> RolloutRecord {
        RolloutRecord {
            trajectory: 0,
            seed,
            mode: "onestep".into(),
            m: 1,
            k: 20,
            steps: 3,
            call_count: 3,
            peak_slots: 1,
            wall_seconds: 2.0,
            iteration_seconds: vec![],
            step_rmse: vec![],
            rmse,
        }
    }

    #[test]
    fn bench_row_averages_per_seed_first() {
        let row = bench_row(&[rec(0, 1.0), rec(0, 3.0), rec(1, 4.0)]).unwrap();
        assert_eq!(row.rmse_mean, 3.0);
        assert_eq!(row.rmse_std, 1.0);
        assert_eq!(row.wall_seconds, 2.0);
        assert!(bench_row(&[]).is_err());
    }

    #[test]
    fn sweep_modes() {
        assert_eq!(bench_modes(20), vec![Mode::OneStep, Mode::Robi { m: 1 }, Mode::Robi { m: 5 }, Mode::Sequential]);
        assert_eq!(bench_modes(4), vec![Mode::OneStep, Mode::Robi { m: 1 }, Mode::Sequential]);
    }
}
