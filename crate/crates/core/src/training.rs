//! Training loop, evaluation metric and checkpoints.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ampn::{Ampn, AmpnConfig, GraphIndex, LayerCounts, ModelInputs, WeightSharing};
use crate::autodiff::{adam_step, clip_global_norm, lr_schedule, AdamConfig, Eager, Grads, ParamStore, Recorder, Scalar, Tape, Tensor};
use crate::container::Container;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::hierarchy::{GraphHierarchy, HierarchyParams};
use crate::mesh::{NodeType, Trajectory};
use crate::model::{physical_target, Denoiser, Normalizer, PhysState, Query};
use crate::rng::{keyed, normal_vec, DrawKind};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RBCK1";

/// Ablation switches; several may be combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Train and roll out at `k = K` only, with zero input instead of noise.
    pub no_diffusion: bool,
    /// Message passing on the input mesh only, with one 15-layer stack.
    pub no_hierarchy: bool,
    /// Denoise absolute positions instead of increments.
    pub state_prediction: bool,
    /// Separate parameters per level, distributed 1/1/5/1/1.
    pub no_shared_layers: bool,
}

impl Ablations {
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_diffusion" => self.no_diffusion = true,
            "no_hierarchy" => self.no_hierarchy = true,
            "state_prediction" => self.state_prediction = true,
            "no_shared_layers" => self.no_shared_layers = true,
            "none" => {}
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.no_diffusion {
            out.push("no_diffusion");
        }
        if self.no_hierarchy {
            out.push("no_hierarchy");
        }
        if self.state_prediction {
            out.push("state_prediction");
        }
        if self.no_shared_layers {
            out.push("no_shared_layers");
        }
        out
    }

    /// Rewrites model and hierarchy settings for the enabled ablations.
    pub fn apply(&self, model: &mut AmpnConfig, hier: &mut HierarchyParams) {
        if self.no_hierarchy {
            hier.levels = 0;
            model.levels = 0;
            model.level_code = false;
            model.layers = LayerCounts { pre: 0, down: 0, solve: model.layers.total(), up: 0, post: 0 };
        }
        if self.no_shared_layers {
            model.sharing = WeightSharing::PerLevel;
            model.levels = hier.levels;
            model.layers = LayerCounts { pre: 1, down: 1, solve: 5, up: 1, post: 1 };
        }
        if self.state_prediction {
            if let Some(c) = model.outputs.iter_mut().find(|c| c.name == "displacement") {
                c.residual = false;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup: u64,
    /// Position perturbation as a multiple of the position std.
    pub position_noise: f64,
    /// Perturbation of the previous-displacement channel, same units.
    pub history_noise: f64,
    pub clip_norm: f64,
    pub val_every: u64,
    pub val_samples: usize,
    pub seed: u64,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 16,
            lr_max: 1e-4,
            lr_min: 1e-6,
            warmup: 1000,
            position_noise: 1e-5,
            history_noise: 0.0,
            clip_norm: 1.0,
            val_every: 500,
            val_samples: 32,
            seed: 0,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch size must be at least 1".into()));
        }
        if self.warmup >= self.iterations {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than the {} iterations",
                self.warmup, self.iterations
            )));
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config("learning rates must satisfy 0 < lr_min <= lr_max".into()));
        }
        if !(self.clip_norm > 0.0) || self.position_noise < 0.0 || self.history_noise < 0.0 {
            return Err(Error::Config("clip norm must be positive and noise scales non-negative".into()));
        }
        Ok(())
    }
}

/// A trajectory with the hierarchy and single-copy index used for it.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub traj: &'a Trajectory,
    pub hier: &'a GraphHierarchy,
    pub index: Arc<GraphIndex>,
}

impl<'a> Example<'a> {
    pub fn new(traj: &'a Trajectory, hier: &'a GraphHierarchy) -> Self {
        Example { traj, hier, index: Arc::new(GraphIndex::new(hier, 1)) }
    }
}

/// Network inputs and velocity target of one training sample.
#[derive(Debug, Clone)]
pub struct PreparedSample<T> {
    pub inputs: ModelInputs<T>,
    pub target: Arc<Tensor<T>>,
    pub frame: usize,
    pub k: usize,
}

/// Knobs of sample construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleNoise {
    pub position: f64,
    pub history: f64,
    pub no_diffusion: bool,
}

impl SampleNoise {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        SampleNoise {
            position: cfg.position_noise,
            history: cfg.history_noise,
            no_diffusion: cfg.ablations.no_diffusion,
        }
    }

    pub fn none() -> Self {
        SampleNoise { position: 0.0, history: 0.0, no_diffusion: false }
    }
}

/// Builds the sample predicting `frame` from `frame - 1`. Positions of free
/// nodes are perturbed and the target is computed from the perturbed input.
pub fn prepare_sample<T: Scalar>(
    den: &Denoiser<T>,
    ex: &Example,
    frame: usize,
    noise: SampleNoise,
    rng: &mut impl Rng,
) -> Result<PreparedSample<T>> {
    let traj = ex.traj;
    if frame == 0 || frame > traj.num_steps() {
        return Err(Error::parameter(format!("frame {frame} outside 1..={}", traj.num_steps())));
    }
    let cfg = den.config();
    let dim = cfg.dim;
    let mut prev = PhysState::from_trajectory(traj, frame - 1);
    let next = PhysState::from_trajectory(traj, frame);
    let n = traj.num_nodes();
    let sx = den.norm.position_std;
    let z = normal_vec(rng, n * dim);
    let h = normal_vec(rng, n * dim);
    for i in (0..n).filter(|&i| traj.mesh.node_type[i] == NodeType::Normal) {
        for c in 0..dim {
            prev.positions[i * dim + c] += noise.position * sx * z[i * dim + c];
            prev.last_disp[i * dim + c] += noise.history * sx * h[i * dim + c];
        }
    }
    let u0 = den.normalize_targets(&physical_target(cfg, &prev, &next));
    let k_max = den.steps();
    let k = if noise.no_diffusion { k_max } else { rng.gen_range(1..=k_max) };
    let eps = normal_vec(rng, u0.len());
    let noisy = if noise.no_diffusion { vec![0.0; u0.len()] } else { den.schedule.q_sample(&u0, &eps, k)? };
    let v = den.schedule.v_target(&u0, &eps, k)?;
    let query = Query {
        state: &prev,
        bc_force: traj.bc_force_at(frame),
        bc_disp: traj.bc_disp_at(frame),
        noisy: &noisy,
        k,
        frame,
    };
    let inputs = den.inputs(ex.hier, &traj.mesh, &ex.index, &[query])?;
    let target = Arc::new(Tensor::from_f64(vec![n, cfg.out_width()], &v)?);
    Ok(PreparedSample { inputs, target, frame, k })
}

fn sample_loss<T: Scalar, R: Recorder<T>>(rec: &mut R, net: &Ampn, params: &ParamStore<T>, s: &PreparedSample<T>) -> Result<R::V> {
    let out = net.forward(rec, params, &s.inputs)?;
    let t = rec.constant_shared(&s.target);
    rec.mse(&out, &t)
}

fn weights<T>(samples: &[PreparedSample<T>]) -> Vec<f64> {
    let total: usize = samples.iter().map(|s| s.target.data.len()).sum();
    samples.iter().map(|s| s.target.data.len() as f64 / total.max(1) as f64).collect()
}

/// Element-weighted mean velocity MSE over the samples and its gradient.
pub fn training_loss<T: Scalar>(den: &Denoiser<T>, samples: &[PreparedSample<T>]) -> Result<(f64, Grads<T>)> {
    let mut grads = den.params.zero_grads();
    let mut loss = 0.0;
    for (s, w) in samples.iter().zip(weights(samples)) {
        let mut tape = Tape::new();
        let l = sample_loss(&mut tape, &den.net, &den.params, s)?;
        loss += w * tape.value(&l).item()?.f64();
        tape.backward(l, T::of(w), &mut grads)?;
    }
    Ok((loss, grads))
}

/// Same value as [`training_loss`] without recording a tape.
pub fn evaluate_loss<T: Scalar>(den: &Denoiser<T>, samples: &[PreparedSample<T>]) -> Result<f64> {
    let mut loss = 0.0;
    for (s, w) in samples.iter().zip(weights(samples)) {
        let mut ev = Eager;
        let l = sample_loss(&mut ev, &den.net, &den.params, s)?;
        loss += w * ev.value(&l).item()?.f64();
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub curve: Vec<LogRow>,
    /// Parameters with the lowest validation loss, with iteration and loss.
    pub best: Option<(ParamStore<T>, u64, f64)>,
    pub final_val_loss: Option<f64>,
}

/// Fixed validation set drawn once from the validation examples.
pub fn validation_set<T: Scalar>(
    den: &Denoiser<T>,
    valid: &[Example],
    count: usize,
    seed: u64,
    no_diffusion: bool,
) -> Result<Vec<PreparedSample<T>>> {
    let noise = SampleNoise { no_diffusion, ..SampleNoise::none() };
    (0..count)
        .map(|j| {
            let mut rng = keyed(&[seed, DrawKind::Validation as u64, j as u64]);
            let ex = &valid[rng.gen_range(0..valid.len())];
            let frame = rng.gen_range(1..=ex.traj.num_steps());
            prepare_sample(den, ex, frame, noise, &mut rng)
        })
        .collect()
}

/// Runs the optimization. `log` sees every iteration's row.
pub fn train<T: Scalar>(
    den: &mut Denoiser<T>,
    train_set: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    mut log: impl FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if train_set.iter().any(|e| e.traj.num_steps() == 0) {
        return Err(Error::Data("training trajectory without transitions".into()));
    }
    let val = if valid.is_empty() || cfg.val_samples == 0 {
        Vec::new()
    } else {
        validation_set(den, valid, cfg.val_samples, cfg.seed, cfg.ablations.no_diffusion)?
    };
    let noise = SampleNoise::from_config(cfg);
    let adam = AdamConfig::default();
    let mut out = TrainOutcome { curve: Vec::new(), best: None, final_val_loss: None };
    for it in 0..cfg.iterations {
        let mut pick = keyed(&[cfg.seed, DrawKind::Batch as u64, it]);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut provenance = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let e = pick.gen_range(0..train_set.len());
            let frame = pick.gen_range(1..=train_set[e].traj.num_steps());
            let mut rng = keyed(&[cfg.seed, DrawKind::Train as u64, it, b as u64]);
            batch.push(prepare_sample(den, &train_set[e], frame, noise, &mut rng)?);
            provenance.push((e, frame));
        }
        let (loss, mut grads) = training_loss(den, &batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {loss} at iteration {it}; batch (example, frame) = {provenance:?}"
            )));
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm)?;
        let lr = lr_schedule(it, cfg.iterations, cfg.lr_max, cfg.lr_min, cfg.warmup)?;
        adam_step(&mut den.params, &grads, lr, &adam)?;
        let last = it + 1 == cfg.iterations;
        let val_loss = if !val.is_empty() && ((it + 1) % cfg.val_every.max(1) == 0 || last) {
            let v = evaluate_loss(den, &val)?;
            if out.best.as_ref().is_none_or(|b| v < b.2) {
                out.best = Some((den.params.clone(), it + 1, v));
            }
            if last {
                out.final_val_loss = Some(v);
            }
            Some(v)
        } else {
            None
        };
        let row = LogRow { iteration: it, loss, lr, grad_norm, val_loss };
        log(&row);
        out.curve.push(row);
    }
    Ok(out)
}

/// Per-step RMSE of node positions, `sqrt(1/N sum_i sum_j (p_ij - t_ij)^2)`.
pub fn rmse_per_step(pred: &[&[f64]], truth: &[&[f64]], dim: usize) -> Result<Vec<f64>> {
    if pred.len() != truth.len() || dim == 0 {
        return Err(Error::Data(format!("{} predicted steps vs {} true steps", pred.len(), truth.len())));
    }
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            if p.len() != t.len() || p.len() % dim != 0 || p.is_empty() {
                return Err(Error::Data(format!("step shapes differ: {} vs {}", p.len(), t.len())));
            }
            let sq: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((sq / (p.len() / dim) as f64).sqrt())
        })
        .collect()
}

/// Mean over frames `1..` of the per-step position RMSE.
pub fn rmse(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    if pred.num_frames != truth.num_frames || pred.num_nodes() != truth.num_nodes() || pred.dim() != truth.dim() {
        return Err(Error::Data(format!(
            "trajectory shapes differ: {}x{} vs {}x{}",
            pred.num_frames,
            pred.num_nodes(),
            truth.num_frames,
            truth.num_nodes()
        )));
    }
    if pred.num_frames < 2 {
        return Err(Error::Data("need at least one predicted step".into()));
    }
    let p: Vec<&[f64]> = (1..pred.num_frames).map(|f| pred.positions_at(f)).collect();
    let t: Vec<&[f64]> = (1..truth.num_frames).map(|f| truth.positions_at(f)).collect();
    let steps = rmse_per_step(&p, &t, pred.dim())?;
    Ok(steps.iter().sum::<f64>() / steps.len() as f64)
}

/// Everything needed to rebuild a trained denoiser.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: AmpnConfig,
    pub norm: Normalizer,
    pub diffusion_steps: usize,
    pub hierarchy: HierarchyParams,
    pub train: TrainConfig,
    pub iteration: u64,
    pub val_loss: Option<f64>,
    pub params: ParamStore<f64>,
}

impl Checkpoint {
    pub fn from_denoiser<T: Scalar>(
        den: &Denoiser<T>,
        params: &ParamStore<T>,
        hierarchy: &HierarchyParams,
        train: &TrainConfig,
        iteration: u64,
        val_loss: Option<f64>,
    ) -> Self {
        Checkpoint {
            model: den.config().clone(),
            norm: den.norm.clone(),
            diffusion_steps: den.steps(),
            hierarchy: *hierarchy,
            train: train.clone(),
            iteration,
            val_loss,
            params: params.cast(),
        }
    }

    pub fn to_denoiser<T: Scalar>(&self) -> Result<Denoiser<T>> {
        let mut den = Denoiser::<T>::new(
            self.model.clone(),
            self.norm.clone(),
            NoiseSchedule::new(self.diffusion_steps)?,
            0,
        )?;
        if den.params.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameter tensors, model expects {}",
                self.params.len(),
                den.params.len()
            )));
        }
        for id in self.params.ids() {
            let name = self.params.name(id);
            let target = den
                .params
                .find(name)
                .ok_or_else(|| Error::Data(format!("checkpoint parameter {name} unknown to the model")))?;
            let src = self.params.get(id);
            if src.shape != den.params.get(target).shape {
                return Err(Error::Data(format!("parameter {name} has shape {:?}", src.shape)));
            }
            *den.params.get_mut(target) = src.cast();
        }
        Ok(den)
    }

    fn to_container(&self) -> Container {
        let names: Vec<&str> = self.params.ids().map(|id| self.params.name(id)).collect();
        let mut c = Container::new(json!({
            "version": 1,
            "model": self.model,
            "normalizer": self.norm,
            "diffusion_steps": self.diffusion_steps,
            "hierarchy": self.hierarchy,
            "train": self.train,
            "iteration": self.iteration,
            "val_loss": self.val_loss,
            "params": names,
        }));
        for id in self.params.ids() {
            let t = self.params.get(id);
            c.push_f64(&format!("param.{}", self.params.name(id)), t.shape.clone(), t.data.clone());
        }
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        let field = |k: &str| -> Result<serde_json::Value> {
            c.meta.get(k).cloned().ok_or_else(|| Error::Data(format!("checkpoint header lacks '{k}'")))
        };
        let mut params = ParamStore::new();
        let names: Vec<String> = serde_json::from_value(field("params")?)?;
        for name in names {
            let (shape, data) = c.f64_block(&format!("param.{name}"))?;
            params.add(name, Tensor::new(shape.to_vec(), data.to_vec())?)?;
        }
        Ok(Checkpoint {
            model: serde_json::from_value(field("model")?)?,
            norm: serde_json::from_value(field("normalizer")?)?,
            diffusion_steps: serde_json::from_value(field("diffusion_steps")?)?,
            hierarchy: serde_json::from_value(field("hierarchy")?)?,
            train: serde_json::from_value(field("train")?)?,
            iteration: serde_json::from_value(field("iteration")?)?,
            val_loss: serde_json::from_value(field("val_loss")?)?,
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes(CHECKPOINT_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes, CHECKPOINT_MAGIC)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write_to(path, CHECKPOINT_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read_from(path, CHECKPOINT_MAGIC)?)
    }
}
