use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rayon::prelude::*;
use robin_core::autodiff::Scalar;
use robin_core::config::{ModeName, Precision, RunConfig};
use robin_core::datagen::{
    generate_trajectory, load_split, split_index, write_dataset, DatasetKind, DatasetManifest, SolverSettings,
};
use robin_core::hierarchy::HierarchyCache;
use robin_core::mesh::{load_trajectory, save_trajectory, Trajectory};
use robin_core::model::Denoiser;
use robin_core::pipeline::{
    bench_modes, bench_row, hierarchy_params, inference_plan, rollout_and_score, train_run, Prepared,
    RolloutRecord, RolloutReport, TrainRun,
};
use robin_core::robi::{Mode, RolloutOptions};
use robin_core::training::{rmse_per_step, Checkpoint, LogRow};
use robin_core::Error;
use serde::Serialize;

use crate::{BenchArgs, ConfigArgs, EvalArgs, GenDataArgs, HierarchyArgs, RolloutArgs, RolloutSel, TrainArgs};

const MANIFEST: &str = "manifest.json";
const REPORT_VERSION: u32 = 1;

/// 2 for usage and configuration problems, 4 for numerical failures and 3
/// for everything else (data, generation, i/o).
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Parameter(_)) => 2,
        Some(Error::Numerical(_)) => 4,
        _ => 3,
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn pool(args: &ConfigArgs) -> Result<rayon::ThreadPool> {
    let threads = if args.deterministic { 1 } else { args.jobs };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

fn parse_counts(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| config_error(format!("--counts {s:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| config_error(format!("--counts expects train,valid,test, got {s:?}")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn require_dataset(dir: &Path) -> Result<DatasetManifest> {
    if !dir.join(MANIFEST).is_file() {
        return Err(config_error(format!("no dataset at {} (missing {MANIFEST})", dir.display())));
    }
    Ok(DatasetManifest::load(dir)?)
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let kind: DatasetKind = match &args.kind {
        Some(k) => k.parse()?,
        None => cfg.dataset.kind,
    };
    let counts = match &args.counts {
        Some(c) => parse_counts(c)?,
        None => cfg.dataset.counts,
    };
    let steps = args.steps.unwrap_or(cfg.dataset.steps);
    let seed = args.seed.unwrap_or(cfg.dataset.seed);
    let ranges = cfg.dataset.ranges.clone();
    let settings = SolverSettings::default();
    let started = Instant::now();
    let manifest = pool(&args.common)?.install(|| {
        write_dataset(&args.out, kind, &ranges, counts, steps, seed, |jobs| {
            jobs.par_iter()
                .map(|&(s, i)| generate_trajectory(kind, &ranges, steps, seed, s, i, &settings))
                .collect()
        })
    })?;
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    log::info!(
        "wrote {} trajectories to {} in {:.1}s",
        counts.iter().sum::<usize>(),
        args.out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

#[derive(Serialize)]
struct HierarchyEntry {
    split: String,
    file: String,
    node_counts: Vec<usize>,
    contact_edges: usize,
}

#[derive(Serialize)]
struct HierarchySummary {
    schema_version: u32,
    levels: usize,
    entries: Vec<HierarchyEntry>,
}

pub fn hierarchy(args: HierarchyArgs) -> Result<()> {
    let manifest = require_dataset(&args.data)?;
    let cfg = load_config(&args.common)?;
    let cache = HierarchyCache::new(&args.out)?;
    let mut entries = Vec::new();
    let mut levels = 0;
    for (s, name) in ["train", "valid", "test"].iter().enumerate() {
        let trajs = load_split(&args.data, s)?;
        let Some(first) = trajs.first() else { continue };
        let params = hierarchy_params(&cfg, first.dim())?;
        levels = params.levels;
        let prep = pool(&args.common)?.install(|| {
            trajs
                .into_par_iter()
                .map(|t| Prepared::new(vec![t], &params, Some(&cache)))
                .collect::<robin_core::Result<Vec<_>>>()
        })?;
        for (p, file) in prep.iter().zip(&manifest.files[s]) {
            entries.push(HierarchyEntry {
                split: name.to_string(),
                file: file.clone(),
                node_counts: p.hiers[0].node_count.clone(),
                contact_edges: p.hiers[0].contact_edges[0].len(),
            });
        }
    }
    log::info!("{} hierarchies cached in {}", entries.len(), args.out.display());
    write_json(&args.out.join("summary.json"), &HierarchySummary { schema_version: REPORT_VERSION, levels, entries })
}

#[derive(Serialize)]
struct TrainSummary {
    schema_version: u32,
    iterations: u64,
    best_iteration: Option<u64>,
    best_val_loss: Option<f64>,
    final_val_loss: Option<f64>,
    final_loss: f64,
    seconds: f64,
    ablations: Vec<&'static str>,
}

fn run_training<T: Scalar>(cfg: &RunConfig, train: &Prepared, valid: &Prepared, curve: &Path) -> Result<TrainRun> {
    let mut writer = csv::Writer::from_path(curve)?;
    writer.write_record(["iteration", "loss", "lr", "grad_norm", "val_loss"])?;
    let mut failure: Option<csv::Error> = None;
    let total = cfg.training.iterations;
    let run = train_run::<T>(cfg, train, valid, |row: &LogRow| {
        let rec = [
            row.iteration.to_string(),
            row.loss.to_string(),
            row.lr.to_string(),
            row.grad_norm.to_string(),
            row.val_loss.map(|v| v.to_string()).unwrap_or_default(),
        ];
        if let Err(e) = writer.write_record(&rec) {
            failure.get_or_insert(e);
        }
        if row.val_loss.is_some() || (row.iteration + 1).is_multiple_of(100) {
            log::info!(
                "iteration {}/{total} loss {:.5} lr {:.2e}{}",
                row.iteration + 1,
                row.loss,
                row.lr,
                row.val_loss.map(|v| format!(" val {v:.5}")).unwrap_or_default()
            );
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    writer.flush()?;
    Ok(run)
}

pub fn train(args: TrainArgs) -> Result<()> {
    require_dataset(&args.data)?;
    let mut cfg = load_config(&args.common)?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
        cfg.model.init_seed = seed;
    }
    for a in &args.ablation {
        cfg.training.ablations.set(a.trim())?;
    }
    cfg.validate()?;
    let train_trajs = load_split(&args.data, 0)?;
    let valid_trajs = load_split(&args.data, 1)?;
    let dim = train_trajs.first().map(|t| t.dim()).ok_or_else(|| Error::Data("training split is empty".into()))?;
    let params = hierarchy_params(&cfg, dim)?;
    let cache = args.cache.as_ref().map(HierarchyCache::new).transpose()?;
    let train = Prepared::new(train_trajs, &params, cache.as_ref())?;
    let valid = Prepared::new(valid_trajs, &params, cache.as_ref())?;
    std::fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("run_config.json"), &cfg)?;
    let started = Instant::now();
    let curve = args.out.join("curve.csv");
    let run = match cfg.model.precision {
        Precision::F32 => run_training::<f32>(&cfg, &train, &valid, &curve)?,
        Precision::F64 => run_training::<f64>(&cfg, &train, &valid, &curve)?,
    };
    run.preferred().save(&args.out.join("checkpoint.rbck"))?;
    run.last.save(&args.out.join("last.rbck"))?;
    let summary = TrainSummary {
        schema_version: REPORT_VERSION,
        iterations: cfg.training.iterations,
        best_iteration: run.best.as_ref().map(|b| b.iteration),
        best_val_loss: run.best.as_ref().and_then(|b| b.val_loss),
        final_val_loss: run.last.val_loss,
        final_loss: run.curve.last().map_or(f64::NAN, |r| r.loss),
        seconds: started.elapsed().as_secs_f64(),
        ablations: cfg.training.ablations.names(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    log::info!("checkpoint written to {}", args.out.join("checkpoint.rbck").display());
    Ok(())
}

/// Everything a rollout-type command needs, resolved from flags and config.
struct Plan {
    ckpt: Checkpoint,
    precision: Precision,
    data: Prepared,
    split: String,
    mode: Mode,
    zero_init: bool,
    seeds: Vec<u64>,
    start: usize,
    steps: Option<usize>,
    pool: rayon::ThreadPool,
}

fn requested_mode(sel: &RolloutSel, cfg: &RunConfig) -> Result<Mode> {
    let mut r = cfg.rollout.clone();
    if let Some(m) = &sel.mode {
        r.mode = m.parse::<ModeName>()?;
    }
    if let Some(m) = sel.m {
        r.m = m;
    }
    Ok(r.mode())
}

fn load_selected(sel: &RolloutSel, cfg: &RunConfig) -> Result<(String, Vec<Trajectory>)> {
    require_dataset(&sel.data)?;
    let split = sel.split.clone().unwrap_or_else(|| cfg.rollout.split.clone());
    let mut trajs = load_split(&sel.data, split_index(&split)?)?;
    if let Some(n) = sel.limit {
        trajs.truncate(n);
    }
    if trajs.is_empty() {
        return Err(Error::Data(format!("split {split} has no trajectories")).into());
    }
    Ok((split, trajs))
}

fn plan(sel: &RolloutSel) -> Result<Plan> {
    let cfg = load_config(&sel.common)?;
    let path = sel.ckpt.as_ref().ok_or_else(|| config_error("--ckpt is required"))?;
    let ckpt = Checkpoint::load(path)?;
    let (mode, zero_init) = inference_plan(&ckpt, requested_mode(sel, &cfg)?)?;
    let seeds = if sel.seeds.is_empty() { cfg.rollout.seeds.clone() } else { sel.seeds.clone() };
    let (split, trajs) = load_selected(sel, &cfg)?;
    let cache = sel.cache.as_ref().map(HierarchyCache::new).transpose()?;
    let data = Prepared::new(trajs, &ckpt.hierarchy, cache.as_ref())?;
    Ok(Plan {
        precision: cfg.model.precision,
        ckpt,
        data,
        split,
        mode,
        zero_init,
        seeds,
        start: cfg.rollout.start_frame,
        steps: sel.t.or(cfg.rollout.steps),
        pool: pool(&sel.common)?,
    })
}

fn rollouts_with<T: Scalar>(plan: &Plan, mode: Mode, den: &Denoiser<T>) -> Result<Vec<(RolloutRecord, Trajectory)>> {
    let jobs: Vec<(usize, u64)> =
        (0..plan.data.len()).flat_map(|i| plan.seeds.iter().map(move |&s| (i, s))).collect();
    let out = plan.pool.install(|| {
        jobs.par_iter()
            .map(|&(i, seed)| {
                let opts = RolloutOptions { zero_init: plan.zero_init, ..RolloutOptions::new(seed, i as u64) };
                let (rec, _, pred) = rollout_and_score(
                    den,
                    &plan.data.trajs[i],
                    &plan.data.hiers[i],
                    i,
                    mode,
                    opts,
                    plan.start,
                    plan.steps,
                )?;
                Ok((rec, pred))
            })
            .collect::<robin_core::Result<Vec<_>>>()
    })?;
    Ok(out)
}

fn run_rollouts(plan: &Plan, mode: Mode) -> Result<Vec<(RolloutRecord, Trajectory)>> {
    match plan.precision {
        Precision::F32 => rollouts_with(plan, mode, &plan.ckpt.to_denoiser::<f32>()?),
        Precision::F64 => rollouts_with(plan, mode, &plan.ckpt.to_denoiser::<f64>()?),
    }
}

fn prediction_name(traj: usize, seed: u64) -> String {
    format!("traj_{traj:04}_seed_{seed}.rbtj")
}

pub fn rollout(args: RolloutArgs) -> Result<()> {
    let plan = plan(&args.sel)?;
    let results = run_rollouts(&plan, plan.mode)?;
    std::fs::create_dir_all(&args.out)?;
    for (rec, pred) in &results {
        save_trajectory(pred, &args.out.join(prediction_name(rec.trajectory, rec.seed)))?;
    }
    let records: Vec<RolloutRecord> = results.into_iter().map(|(r, _)| r).collect();
    let mean = records.iter().map(|r| r.rmse).sum::<f64>() / records.len() as f64;
    log::info!("{} rollouts on split {}, mean RMSE {mean:.6}", records.len(), plan.split);
    write_json(&args.out.join("report.json"), &RolloutReport::new(plan.mode, plan.ckpt.diffusion_steps, records))
}

#[derive(Serialize)]
struct EvalRow {
    schema_version: u32,
    trajectory: usize,
    seed: Option<u64>,
    mode: String,
    m: Option<usize>,
    k: Option<usize>,
    steps: usize,
    call_count: Option<usize>,
    rmse: f64,
}

fn trajectory_number(file: &Path) -> Option<usize> {
    let stem = file.file_stem()?.to_str()?;
    stem.strip_prefix("traj_")?.get(..4)?.parse().ok()
}

fn score_files(sel: &RolloutSel, pred_dir: &Path) -> Result<Vec<EvalRow>> {
    let cfg = load_config(&sel.common)?;
    let (_, truth) = load_selected(sel, &cfg)?;
    let start = cfg.rollout.start_frame;
    let mut files: Vec<PathBuf> = std::fs::read_dir(pred_dir)
        .with_context(|| format!("reading {}", pred_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "rbtj"));
    files.sort();
    let mut rows = Vec::new();
    for file in files {
        let Some(i) = trajectory_number(&file) else { continue };
        let t = truth
            .get(i)
            .ok_or_else(|| Error::Data(format!("{} has no ground-truth trajectory {i}", file.display())))?;
        let pred = load_trajectory(&file)?;
        let steps = pred.num_steps();
        if steps == 0 || start + steps > t.num_steps() || pred.num_nodes() != t.num_nodes() {
            return Err(Error::Data(format!("{} does not match trajectory {i}", file.display())).into());
        }
        let p: Vec<&[f64]> = (1..=steps).map(|f| pred.positions_at(f)).collect();
        let q: Vec<&[f64]> = (start + 1..=start + steps).map(|f| t.positions_at(f)).collect();
        let per = rmse_per_step(&p, &q, t.dim())?;
        let seed = file
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.rsplit_once("_seed_"))
            .and_then(|(_, v)| v.parse().ok());
        rows.push(EvalRow {
            schema_version: REPORT_VERSION,
            trajectory: i,
            seed,
            mode: "file".into(),
            m: None,
            k: None,
            steps,
            call_count: None,
            rmse: per.iter().sum::<f64>() / per.len() as f64,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("no traj_XXXX*.rbtj files in {}", pred_dir.display())).into());
    }
    Ok(rows)
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let rows = match &args.pred {
        Some(dir) => score_files(&args.sel, dir)?,
        None => {
            let plan = plan(&args.sel)?;
            run_rollouts(&plan, plan.mode)?
                .into_iter()
                .map(|(r, _)| EvalRow {
                    schema_version: REPORT_VERSION,
                    trajectory: r.trajectory,
                    seed: Some(r.seed),
                    mode: r.mode,
                    m: Some(r.m),
                    k: Some(r.k),
                    steps: r.steps,
                    call_count: Some(r.call_count),
                    rmse: r.rmse,
                })
                .collect()
        }
    };
    log::info!("mean RMSE {:.6} over {} rows", rows.iter().map(|r| r.rmse).sum::<f64>() / rows.len() as f64, rows.len());
    write_csv(&args.out, &rows)
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let plan = plan(&args.sel)?;
    let modes = if plan.zero_init { vec![Mode::OneStep] } else { bench_modes(plan.ckpt.diffusion_steps) };
    let mut rows = Vec::new();
    for mode in modes {
        let records: Vec<RolloutRecord> = run_rollouts(&plan, mode)?.into_iter().map(|(r, _)| r).collect();
        let row = bench_row(&records)?;
        log::info!(
            "{:<12} calls {:>5} wall {:>8.3}s rmse {:.6} ± {:.6}",
            row.mode,
            row.call_count,
            row.wall_seconds,
            row.rmse_mean,
            row.rmse_std
        );
        rows.push(row);
    }
    write_csv(&args.out, &rows)
}
