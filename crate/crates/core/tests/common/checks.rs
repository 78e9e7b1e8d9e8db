use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robin_core::ampn::{perturb_params, AmpnConfig};
use robin_core::autodiff::Scalar;
use robin_core::config::RunConfig;
use robin_core::datagen::{generate_trajectory, DatasetKind, SolverSettings};
use robin_core::diffusion::NoiseSchedule;
use robin_core::hierarchy::{
    adjacency_with_self_loops, aggregate, build_hierarchy_from_edges, coarse_mesh_edges, smooth_prolongator,
    strength_of_connection, tentative_prolongator, GraphHierarchy, HierarchyParams,
};
use robin_core::mesh::{Edge, Trajectory};
use robin_core::model::{Denoiser, Normalizer};
use robin_core::pipeline::Prepared;
use robin_core::training::{evaluate_loss, prepare_sample, training_loss, Example, LogRow, PreparedSample, SampleNoise};

use super::{beam, beam_config, denoiser, hierarchy, small_layers};

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fail(e: robin_core::Error) -> String {
    e.to_string()
}

/// Bidirectional, sorted, deduplicated edge list.
pub fn undirected(pairs: impl IntoIterator<Item = (usize, usize)>) -> Vec<Edge> {
    let set: BTreeSet<Edge> = pairs.into_iter().filter(|(a, b)| a != b).flat_map(|(a, b)| [(a, b), (b, a)]).collect();
    set.into_iter().collect()
}

/// Random spanning tree on `n` nodes plus `extra` random chords.
pub fn random_connected_graph(n: usize, extra: usize, seed: u64) -> Vec<Edge> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, usize)> = (1..n).map(|i| (i, rng.gen_range(0..i))).collect();
    for _ in 0..extra {
        pairs.push((rng.gen_range(0..n), rng.gen_range(0..n)));
    }
    undirected(pairs)
}

pub fn components(n: usize, edges: &[Edge]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

/// Partition, connectivity, smoothing and inter-level edge properties of one
/// coarsening step over a graph given as directed edges.
pub fn check_coarsening(n: usize, edges: &[Edge]) -> Result<(), String> {
    let a = adjacency_with_self_loops(edges, n).map_err(fail)?;
    let s = strength_of_connection(&a, 0.0).map_err(fail)?;
    let agg = aggregate(&s, &(0..n).collect::<Vec<_>>()).map_err(fail)?;
    let nc = agg.num_aggregates();

    ensure!(agg.assign.len() == n, "assignment covers {} of {n} nodes", agg.assign.len());
    ensure!(agg.assign.iter().all(|&x| x < nc), "assignment out of range");
    let sizes = agg.sizes();
    ensure!(sizes.iter().sum::<usize>() == n, "aggregate sizes sum to {}", sizes.iter().sum::<usize>());
    ensure!(sizes.iter().all(|&c| c > 0), "empty aggregate");
    ensure!(agg.roots.iter().collect::<BTreeSet<_>>().len() == nc, "roots not distinct");
    for (k, &r) in agg.roots.iter().enumerate() {
        ensure!(agg.assign[r] == k, "root {r} not in its own aggregate {k}");
    }

    let coarse = coarse_mesh_edges(&agg, edges).map_err(fail)?;
    let (cf, cc) = (components(n, edges), components(nc, &coarse));
    ensure!(cf == cc, "fine graph has {cf} components, coarse graph {cc}");

    let p_tent = tentative_prolongator(&agg, n).map_err(fail)?;
    let (p0, r0) = smooth_prolongator(&a, &agg, &p_tent, 0.0).map_err(fail)?;
    ensure!(p0 == p_tent, "omega = 0 changed the tentative prolongator");
    ensure!(r0 == p_tent.transpose(), "restriction is not the transpose at omega = 0");
    let (p, r) = smooth_prolongator(&a, &agg, &p_tent, 2.0 / 3.0).map_err(fail)?;
    ensure!(r == p.transpose(), "restriction is not the transpose");
    for (i, j, _) in p_tent.triplets() {
        ensure!(p.get(i, j).is_some_and(|v| v != 0.0), "smoothing dropped P[{i}, {j}]");
    }
    ensure!(p.nnz() >= p_tent.nnz(), "smoothing shrank nnz {} -> {}", p_tent.nnz(), p.nnz());
    if !coarse.is_empty() {
        ensure!(p.nnz() > p_tent.nnz(), "smoothing kept nnz at {} despite coarse edges", p.nnz());
    }

    if nc >= 2 && nc < n {
        let params = HierarchyParams { levels: 1, omega: 0.0, ..HierarchyParams::default() };
        let h = build_hierarchy_from_edges(n, edges, &[], &params).map_err(fail)?;
        let fibers: Vec<Edge> = agg.assign.iter().enumerate().map(|(i, &c)| (i, c)).collect();
        let mut reversed: Vec<Edge> = fibers.iter().map(|&(i, c)| (c, i)).collect();
        reversed.sort_unstable();
        ensure!(h.down_edges[0] == fibers, "down edges are not the aggregation fibers at omega = 0");
        ensure!(h.up_edges[0] == reversed, "up edges are not the reversed down edges at omega = 0");
    }
    Ok(())
}

/// Aggregation, prolongator and coarse graph of the 7-node path 0-1-...-6.
pub fn check_seven_node_path() -> Result<(), String> {
    let n = 7;
    let edges = undirected((0..n - 1).map(|i| (i, i + 1)));
    let a = adjacency_with_self_loops(&edges, n).map_err(fail)?;
    let s = strength_of_connection(&a, 0.0).map_err(fail)?;
    let agg = aggregate(&s, &(0..n).collect::<Vec<_>>()).map_err(fail)?;
    ensure!(agg.assign == vec![0, 0, 1, 1, 1, 2, 2], "assign {:?}", agg.assign);
    ensure!(agg.roots == vec![0, 3, 6], "roots {:?}", agg.roots);
    let p = tentative_prolongator(&agg, n).map_err(fail)?;
    let col_sums: Vec<f64> = (0..3).map(|j| (0..n).filter_map(|i| p.get(i, j)).sum()).collect();
    ensure!(col_sums == vec![2.0, 3.0, 2.0], "column sums {col_sums:?}");
    let coarse = coarse_mesh_edges(&agg, &edges).map_err(fail)?;
    ensure!(coarse == vec![(0, 1), (1, 0), (1, 2), (2, 1)], "coarse edges {coarse:?}");
    let params = HierarchyParams { levels: 1, omega: 0.0, ..HierarchyParams::default() };
    let h = build_hierarchy_from_edges(n, &edges, &[], &params).map_err(fail)?;
    let down = vec![(0, 0), (1, 0), (2, 1), (3, 1), (4, 1), (5, 2), (6, 2)];
    ensure!(h.down_edges[0] == down, "down edges {:?}", h.down_edges[0]);
    let up = vec![(0, 0), (0, 1), (1, 2), (1, 3), (1, 4), (2, 5), (2, 6)];
    ensure!(h.up_edges[0] == up, "up edges {:?}", h.up_edges[0]);
    Ok(())
}

pub fn ten_node_beam() -> Trajectory {
    let t = beam(0.8, 0.2, 4, 2e-3);
    assert_eq!(t.num_nodes(), 10);
    t
}

pub fn gradient_model<T: Scalar>(traj: &Trajectory, hier: &GraphHierarchy, seed: u64) -> Denoiser<T> {
    let cfg = AmpnConfig { layers: small_layers(), levels: hier.num_levels() - 1, ..beam_config(8) };
    let norm = Normalizer::fit(&cfg, &[(traj, hier)]).unwrap();
    let mut den = denoiser::<T>(cfg, norm, 5, seed);
    perturb_params(&mut den.params, 0.1, seed + 1);
    den
}

pub fn gradient_samples<T: Scalar>(den: &Denoiser<T>, ex: &Example, seed: u64) -> Vec<PreparedSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = SampleNoise { position: 1e-3, ..SampleNoise::none() };
    (1..=3).map(|f| prepare_sample(den, ex, f, noise, &mut rng).unwrap()).collect()
}

/// Worst relative error between the analytic gradient of the training loss
/// and central differences over `probes` random parameter entries.
pub fn gradient_check(probes: usize, seed: u64) -> f64 {
    let traj = ten_node_beam();
    let hier = hierarchy(&traj.mesh, 1);
    let ex = Example::new(&traj, &hier);
    let mut den = gradient_model::<f64>(&traj, &hier, 3);
    let batch = gradient_samples(&den, &ex, 1);
    let (_, grads) = training_loss(&den, &batch).unwrap();
    let ids: Vec<_> = den.params.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let id = ids[rng.gen_range(0..ids.len())];
        let j = rng.gen_range(0..den.params.get(id).data.len());
        let x = den.params.get(id).data[j];
        den.params.get_mut(id).data[j] = x + h;
        let up = evaluate_loss(&den, &batch).unwrap();
        den.params.get_mut(id).data[j] = x - h;
        let down = evaluate_loss(&den, &batch).unwrap();
        den.params.get_mut(id).data[j] = x;
        let fd = (up - down) / (2.0 * h);
        let an = grads.tensors[id.0].data[j];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    worst
}

pub const SMOKE_CONFIG: &str = r#"{
  "dataset": {
    "counts": [4, 1, 1], "steps": 20, "seed": 1,
    "ranges": {"length": [1.6, 2.0], "height": [0.4, 0.5], "resolution": 0.2, "max_notches": 1}
  },
  "hierarchy": {"levels": 1},
  "model": {"hidden": 64, "fourier_bands": 4, "layers": {"pre": 1, "down": 1, "solve": 2, "up": 1, "post": 1}},
  "diffusion": {"steps": 20},
  "training": {"iterations": 200, "batch_size": 8, "lr_max": 5e-3, "lr_min": 5e-4, "warmup": 10, "val_every": 50, "val_samples": 8}
}"#;

/// Smoke run configuration with training and initialization seeded by `seed`.
pub fn smoke_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::from_json(SMOKE_CONFIG).unwrap();
    cfg.training.seed = seed;
    cfg.model.init_seed = seed;
    cfg
}

/// Train and validation splits described by the dataset section of `cfg`,
/// generated in memory.
pub fn generate_splits(cfg: &RunConfig) -> (Prepared, Prepared) {
    let d = &cfg.dataset;
    let settings = SolverSettings::default();
    let split = |s: usize| -> Vec<Trajectory> {
        (0..d.counts[s])
            .map(|i| generate_trajectory(DatasetKind::Beam, &d.ranges, d.steps, d.seed, s, i, &settings).unwrap())
            .collect()
    };
    let params = robin_core::pipeline::hierarchy_params(cfg, 2).unwrap();
    (Prepared::new(split(0), &params, None).unwrap(), Prepared::new(split(1), &params, None).unwrap())
}

/// Mean loss of the last ten iterations over the mean of the first ten.
pub fn plateau_ratio(curve: &[LogRow]) -> f64 {
    let w = 10.min(curve.len());
    let mean = |rows: &[LogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    mean(&curve[curve.len() - w..]) / mean(&curve[..w])
}

pub struct ScheduleErrors {
    pub round_trip: f64,
    pub rollback: f64,
}

/// Exact endpoint identities of a `k`-step schedule and the worst errors of
/// the velocity round trip and of a reverse chain driven by the true velocity.
pub fn check_schedule(k: usize, seed: u64) -> Result<ScheduleErrors, String> {
    let s = NoiseSchedule::new(k).map_err(fail)?;
    ensure!(s.alpha_bar[k] == 0.0, "alpha_bar[K] = {:e}", s.alpha_bar[k]);
    let r = (1.0f64 / 1e-4).powf(1.0 / (k - 1) as f64);
    let mut prod = 1.0;
    for i in 1..=k {
        prod *= 1.0 - 1e-4 * r.powi(i as i32 - 1);
        ensure!((s.alpha_bar[i] - prod).abs() < 1e-12, "alpha_bar[{i}] = {} vs {prod}", s.alpha_bar[i]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 64;
    let u0: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();

    let vk = s.v_target(&u0, &eps, k).map_err(fail)?;
    ensure!(vk.iter().zip(&u0).all(|(v, u)| *v == -u), "v at k = K is not -u0");

    let max_dev = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut round_trip: f64 = 0.0;
    for j in 1..=k {
        let uj = s.q_sample(&u0, &eps, j).map_err(fail)?;
        let v = s.v_target(&u0, &eps, j).map_err(fail)?;
        round_trip = round_trip.max(max_dev(&s.reconstruct_clean(&uj, &v, j).map_err(fail)?, &u0));
        round_trip = round_trip.max(max_dev(&s.reconstruct_noise(&uj, &v, j).map_err(fail)?, &eps));
    }

    let mut u = eps.clone();
    for j in (1..=k).rev() {
        let ab = s.alpha_bar[j];
        let e: Vec<f64> = u.iter().zip(&u0).map(|(x, c)| (x - ab.sqrt() * c) / (1.0 - ab).sqrt()).collect();
        let v = s.v_target(&u0, &e, j).map_err(fail)?;
        u = s.ddpm_step(&u, &v, j, &mut rng).map_err(fail)?.0;
    }
    Ok(ScheduleErrors { round_trip, rollback: max_dev(&u, &u0) })
}

/// Root mean squared per-node Euclidean distance, by direct loops.
pub fn naive_rmse(p: &[f64], t: &[f64], dim: usize) -> f64 {
    let n = p.len() / dim;
    let mut acc = 0.0;
    for i in 0..n {
        let mut d2 = 0.0;
        for c in 0..dim {
            let d = p[i * dim + c] - t[i * dim + c];
            d2 += d * d;
        }
        acc += d2;
    }
    (acc / n as f64).sqrt()
}

/// Worst deviation of the step RMSE from [`naive_rmse`] over random frames.
pub fn rmse_deviation(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (dim, n, steps) = (rng.gen_range(2..4), rng.gen_range(1..40), rng.gen_range(1..6));
        let mut frame = || (0..n * dim).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let p: Vec<Vec<f64>> = (0..steps).map(|_| frame()).collect();
        let t: Vec<Vec<f64>> = (0..steps).map(|_| frame()).collect();
        let pr: Vec<&[f64]> = p.iter().map(|v| v.as_slice()).collect();
        let tr: Vec<&[f64]> = t.iter().map(|v| v.as_slice()).collect();
        let got = robin_core::training::rmse_per_step(&pr, &tr, dim).unwrap();
        for s in 0..steps {
            worst = worst.max((got[s] - naive_rmse(&p[s], &t[s], dim)).abs());
        }
    }
    worst
}
