#![allow(dead_code)]

pub mod checks;
pub mod support;

use robin_core::ampn::{AmpnConfig, LayerCounts};
use robin_core::datagen::{generate_beam_mesh, simulate_beam, BeamSpec, SolverSettings};
use robin_core::diffusion::NoiseSchedule;
use robin_core::hierarchy::{build_hierarchy, build_hierarchy_from_edges, GraphHierarchy, HierarchyParams};
use robin_core::mesh::{Mesh, NodeType, Trajectory};
use robin_core::model::{cond_channel, Denoiser, Normalizer};

/// Small loaded beam, about 20 nodes.
pub fn tiny_beam(steps: usize, force: f64) -> Trajectory {
    beam(1.2, 0.4, steps, force)
}

pub fn beam(length: f64, height: f64, steps: usize, force: f64) -> Trajectory {
    let spec = BeamSpec {
        length,
        height,
        resolution: 0.2,
        force_increment: [0.0, -force],
        num_steps: steps,
        ..BeamSpec::default()
    };
    simulate_beam(&generate_beam_mesh(&spec).unwrap(), &spec, &SolverSettings::default()).unwrap()
}

pub fn hierarchy(mesh: &Mesh, levels: usize) -> GraphHierarchy {
    build_hierarchy(mesh, &[], &HierarchyParams { levels, ..HierarchyParams::default() }).unwrap()
}

/// Straight chain of `n` free nodes with unit spacing and no elements.
pub fn path_mesh(n: usize) -> Mesh {
    let positions0 = (0..n).flat_map(|i| [i as f64, 0.0]).collect();
    Mesh::new(2, positions0, Vec::new(), vec![NodeType::Normal; n], vec![0; n]).unwrap()
}

pub fn path_hierarchy(n: usize, levels: usize) -> GraphHierarchy {
    let mut edges = Vec::new();
    for i in 0..n - 1 {
        edges.push((i, i + 1));
        edges.push((i + 1, i));
    }
    edges.sort_unstable();
    build_hierarchy_from_edges(n, &edges, &[], &HierarchyParams { levels, ..HierarchyParams::default() }).unwrap()
}

pub fn beam_config(hidden: usize) -> AmpnConfig {
    let cond = vec![cond_channel("bc_force", 2).unwrap(), cond_channel("stress_prev", 2).unwrap()];
    AmpnConfig { hidden, fourier_bands: 4, ..AmpnConfig::new(2, cond) }
}

pub fn small_layers() -> LayerCounts {
    LayerCounts { pre: 1, down: 1, solve: 2, up: 1, post: 1 }
}

pub fn denoiser<T: robin_core::autodiff::Scalar>(cfg: AmpnConfig, norm: Normalizer, k: usize, seed: u64) -> Denoiser<T> {
    Denoiser::new(cfg, norm, NoiseSchedule::new(k).unwrap(), seed).unwrap()
}

/// Untrained small denoiser with statistics fitted on `traj`.
pub fn smoke_denoiser(traj: &Trajectory, hier: &GraphHierarchy, k: usize, seed: u64) -> Denoiser<f64> {
    let cfg = AmpnConfig { layers: small_layers(), levels: hier.num_levels() - 1, ..beam_config(16) };
    let norm = Normalizer::fit(&cfg, &[(traj, hier)]).unwrap();
    let mut den = denoiser::<f64>(cfg, norm, k, seed);
    robin_core::ampn::perturb_params(&mut den.params, 0.05, seed + 1);
    den
}
