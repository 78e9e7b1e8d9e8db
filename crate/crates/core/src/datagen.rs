//! Synthetic datasets: force-loaded notched beams and a plate pressed by a
//! scripted actuator, both simulated as damped mass-spring systems.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{contact_edges, load_trajectory, mesh_edges, save_trajectory, Edge, Mesh, NodeType, Trajectory, TrajectoryMeta};
use crate::rng::{keyed, DrawKind};
use crate::stats::{ChannelStats, StatsAccumulator};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Rectangular cut from the top edge of a beam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notch {
    /// Centre along the beam.
    pub x: f64,
    pub depth: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamSpec {
    pub length: f64,
    pub height: f64,
    pub notches: Vec<Notch>,
    /// Target element size away from notches.
    pub resolution: f64,
    /// Fraction of right-edge nodes that carry load.
    pub force_node_fraction: f64,
    /// Position of the loaded block along the right edge, in `[0, 1]`.
    pub force_offset: f64,
    /// Force added to every loaded node per frame.
    pub force_increment: [f64; 2],
    pub num_steps: usize,
    /// Spring stiffness per unit rest length.
    pub stiffness: f64,
    pub damping: f64,
}

impl Default for BeamSpec {
    fn default() -> Self {
        BeamSpec {
            length: 4.0,
            height: 0.8,
            notches: Vec::new(),
            resolution: 0.2,
            force_node_fraction: 0.5,
            force_offset: 0.5,
            force_increment: [0.0, -1e-4],
            num_steps: 50,
            stiffness: 1.0,
            damping: 0.05,
        }
    }
}

impl BeamSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !(pos(self.length) && pos(self.height) && pos(self.resolution)) {
            return Err(Error::parameter("beam dimensions and resolution must be positive"));
        }
        if !(pos(self.stiffness) && pos(self.damping)) {
            return Err(Error::parameter("stiffness and damping must be positive"));
        }
        if self.num_steps < 2 {
            return Err(Error::parameter(format!("need at least 2 steps, got {}", self.num_steps)));
        }
        if !(self.force_node_fraction > 0.0 && self.force_node_fraction <= 1.0) || !(0.0..=1.0).contains(&self.force_offset) {
            return Err(Error::parameter("force node fraction must be in (0, 1] and offset in [0, 1]"));
        }
        for n in &self.notches {
            if !(n.depth > 0.0 && n.depth < self.height) || !(n.width > 0.0) {
                return Err(Error::parameter(format!("notch depth {} must lie in (0, height)", n.depth)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorSpec {
    pub plate_width: f64,
    pub plate_height: f64,
    pub resolution: f64,
    pub actuator_width: f64,
    pub actuator_height: f64,
    /// Horizontal centre of the actuator.
    pub actuator_x: f64,
    /// Initial vertical clearance between actuator and plate.
    pub gap: f64,
    /// Scripted actuator displacement per frame.
    pub path_increment: [f64; 2],
    /// Radius for the model's contact edges.
    pub contact_radius: f64,
    /// Distance below which the penalty contact force acts.
    pub contact_thickness: f64,
    pub contact_stiffness: f64,
    pub num_steps: usize,
    pub stiffness: f64,
    pub damping: f64,
}

impl Default for ActuatorSpec {
    fn default() -> Self {
        ActuatorSpec {
            plate_width: 3.0,
            plate_height: 1.0,
            resolution: 0.2,
            actuator_width: 0.6,
            actuator_height: 0.2,
            actuator_x: 1.5,
            gap: 0.15,
            path_increment: [0.0, -0.006],
            contact_radius: 0.3,
            contact_thickness: 0.12,
            contact_stiffness: 20.0,
            num_steps: 50,
            stiffness: 1.0,
            damping: 0.5,
        }
    }
}

impl ActuatorSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        for (name, v) in [
            ("plate width", self.plate_width),
            ("plate height", self.plate_height),
            ("resolution", self.resolution),
            ("actuator width", self.actuator_width),
            ("actuator height", self.actuator_height),
            ("contact radius", self.contact_radius),
            ("contact thickness", self.contact_thickness),
            ("contact stiffness", self.contact_stiffness),
            ("stiffness", self.stiffness),
            ("damping", self.damping),
        ] {
            if !pos(v) {
                return Err(Error::parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.num_steps < 2 {
            return Err(Error::parameter(format!("need at least 2 steps, got {}", self.num_steps)));
        }
        if self.gap < self.contact_thickness {
            return Err(Error::Scenario(format!(
                "actuator starts in contact: gap {} below contact thickness {}",
                self.gap, self.contact_thickness
            )));
        }
        let travel = -self.path_increment[1] * self.num_steps as f64;
        if travel - self.gap >= self.plate_height {
            return Err(Error::Scenario(format!(
                "actuator travels {travel} and would pass through the plate (gap {}, thickness {})",
                self.gap, self.plate_height
            )));
        }
        Ok(())
    }
}

/// Settings of the quasi-static relaxation loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Converged once the largest free-node residual is below `tolerance * stiffness`.
    pub tolerance: f64,
    /// Non-convergence is reported when the residual stays above `warn_tolerance * stiffness`.
    pub warn_tolerance: f64,
    pub max_substeps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tolerance: 1e-8,
            warn_tolerance: 1e-6,
            max_substeps: 400_000,
        }
    }
}

fn grid_lines(extent: f64, h: f64, refine: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    let cells = ((extent / h).round() as usize).max(1);
    let step = extent / cells as f64;
    let mut out = vec![0.0];
    for c in 0..cells {
        let (a, b) = (c as f64 * step, (c + 1) as f64 * step);
        if refine(a, b) {
            out.push(0.5 * (a + b));
        }
        out.push(if c + 1 == cells { extent } else { b });
    }
    out
}

/// Triangulates the kept cells of a tensor grid and drops unused nodes.
/// Returns `(positions, triangles)`.
fn grid_triangles(xs: &[f64], ys: &[f64], keep: impl Fn(f64, f64) -> bool) -> (Vec<f64>, Vec<Vec<usize>>) {
    let nx = xs.len();
    let id = |i: usize, j: usize| j * nx + i;
    let mut tris = Vec::new();
    for j in 0..ys.len() - 1 {
        for i in 0..nx - 1 {
            let (cx, cy) = (0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1]));
            if !keep(cx, cy) {
                continue;
            }
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            if (i + j) % 2 == 0 {
                tris.push(vec![a, b, c]);
                tris.push(vec![a, c, d]);
            } else {
                tris.push(vec![a, b, d]);
                tris.push(vec![b, c, d]);
            }
        }
    }
    let mut remap = vec![usize::MAX; nx * ys.len()];
    let mut used: Vec<usize> = tris.iter().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    let mut positions = Vec::with_capacity(used.len() * 2);
    for (new, &old) in used.iter().enumerate() {
        remap[old] = new;
        positions.push(xs[old % nx]);
        positions.push(ys[old / nx]);
    }
    for t in &mut tris {
        t.iter_mut().for_each(|v| *v = remap[*v]);
    }
    (positions, tris)
}

fn in_notch(spec: &BeamSpec, x: f64, y: f64) -> bool {
    spec.notches
        .iter()
        .any(|n| (x - n.x).abs() < 0.5 * n.width && y > spec.height - n.depth)
}

/// Structured triangulation of a notched beam. Columns within one notch
/// depth of a notch are twice as dense. The `x = 0` column is clamped.
pub fn generate_beam_mesh(spec: &BeamSpec) -> Result<Mesh> {
    spec.validate()?;
    let near_notch = |a: f64, b: f64| {
        spec.notches
            .iter()
            .any(|n| b > n.x - 0.5 * n.width - n.depth && a < n.x + 0.5 * n.width + n.depth)
    };
    let xs = grid_lines(spec.length, spec.resolution, near_notch);
    let ys = grid_lines(spec.height, spec.resolution, |_, _| false);
    let dy = ys[1] - ys[0];
    for (k, n) in spec.notches.iter().enumerate() {
        let removed = xs.windows(2).any(|w| {
            let cx = 0.5 * (w[0] + w[1]);
            (cx - n.x).abs() < 0.5 * n.width
        });
        if !removed || n.depth < 0.5 * dy || n.depth > spec.height - dy {
            return Err(Error::Geometry(format!(
                "notch {k} (x {}, depth {}, width {}) is not resolved by resolution {}",
                n.x, n.depth, n.width, spec.resolution
            )));
        }
    }
    let (positions, tris) = grid_triangles(&xs, &ys, |x, y| !in_notch(spec, x, y));
    let n = positions.len() / 2;
    let node_type = (0..n)
        .map(|i| if positions[2 * i] == 0.0 { NodeType::Handle } else { NodeType::Normal })
        .collect();
    Mesh::new(2, positions, tris, node_type, vec![0; n])
}

/// Loaded nodes: a contiguous block of the right edge, bottom to top.
pub fn beam_force_nodes(mesh: &Mesh, spec: &BeamSpec) -> Vec<usize> {
    let mut edge: Vec<usize> = (0..mesh.num_nodes())
        .filter(|&i| (mesh.positions0[2 * i] - spec.length).abs() < 1e-12)
        .collect();
    edge.sort_by(|&a, &b| mesh.positions0[2 * a + 1].total_cmp(&mesh.positions0[2 * b + 1]));
    let count = ((edge.len() as f64 * spec.force_node_fraction).ceil() as usize).clamp(1, edge.len());
    let start = ((edge.len() - count) as f64 * spec.force_offset).round() as usize;
    edge[start..start + count].to_vec()
}

/// Springs along every undirected mesh edge.
#[derive(Debug, Clone)]
pub struct SpringSystem {
    pub dim: usize,
    pub springs: Vec<Edge>,
    pub rest: Vec<f64>,
    pub k: Vec<f64>,
}

impl SpringSystem {
    pub fn new(mesh: &Mesh, stiffness: f64) -> Result<Self> {
        let dim = mesh.dim;
        let springs: Vec<Edge> = mesh_edges(mesh)?.into_iter().filter(|&(a, b)| a < b).collect();
        let mut rest = Vec::with_capacity(springs.len());
        for &(a, b) in &springs {
            let l = dist(&mesh.positions0, dim, a, b);
            if !(l > 0.0) {
                return Err(Error::Geometry(format!("nodes {a} and {b} coincide")));
            }
            rest.push(l);
        }
        let k = rest.iter().map(|l| stiffness / l).collect();
        Ok(SpringSystem { dim, springs, rest, k })
    }

    /// Adds spring forces at `x` into `f` and returns the elastic energy.
    pub fn add_forces(&self, x: &[f64], f: &mut [f64]) -> f64 {
        let d = self.dim;
        let mut energy = 0.0;
        for (s, &(a, b)) in self.springs.iter().enumerate() {
            let l = dist(x, d, a, b);
            let stretch = l - self.rest[s];
            energy += 0.5 * self.k[s] * stretch * stretch;
            let mag = self.k[s] * stretch / l;
            for c in 0..d {
                let g = mag * (x[b * d + c] - x[a * d + c]);
                f[a * d + c] += g;
                f[b * d + c] -= g;
            }
        }
        energy
    }

    /// Per-node largest absolute engineering strain of incident springs.
    pub fn max_strain(&self, x: &[f64], n: usize, include: impl Fn(usize) -> bool) -> Vec<f64> {
        let mut out = vec![0.0f64; n];
        for (s, &(a, b)) in self.springs.iter().enumerate() {
            if !(include(a) && include(b)) {
                continue;
            }
            let e = ((dist(x, self.dim, a, b) - self.rest[s]) / self.rest[s]).abs();
            out[a] = out[a].max(e);
            out[b] = out[b].max(e);
        }
        out
    }

    /// Gershgorin-style bound on the largest stiffness eigenvalue.
    fn stiffness_bound(&self, n: usize) -> f64 {
        let mut row = vec![0.0; n];
        for (s, &(a, b)) in self.springs.iter().enumerate() {
            row[a] += 2.0 * self.k[s];
            row[b] += 2.0 * self.k[s];
        }
        row.into_iter().fold(0.0, f64::max)
    }
}

fn dist(x: &[f64], d: usize, a: usize, b: usize) -> f64 {
    (0..d).map(|c| (x[b * d + c] - x[a * d + c]).powi(2)).sum::<f64>().sqrt()
}

/// Penalty repulsion between node pairs closer than `thickness`.
struct Contact<'a> {
    pairs_from: &'a [usize],
    pairs_to: &'a [usize],
    thickness: f64,
    stiffness: f64,
}

impl Contact<'_> {
    fn add_forces(&self, x: &[f64], f: &mut [f64]) -> f64 {
        let mut energy = 0.0;
        for &p in self.pairs_from {
            for &q in self.pairs_to {
                let l = dist(x, 2, q, p);
                if l < self.thickness && l > 0.0 {
                    let pen = self.thickness - l;
                    energy += 0.5 * self.stiffness * pen * pen;
                    for c in 0..2 {
                        f[p * 2 + c] += self.stiffness * pen * (x[p * 2 + c] - x[q * 2 + c]) / l;
                    }
                }
            }
        }
        energy
    }
}

/// Outcome of relaxing one frame.
#[derive(Debug, Clone, Copy)]
pub struct Relaxation {
    pub substeps: usize,
    pub residual: f64,
}

/// Damped semi-implicit Euler relaxation to static equilibrium.
struct Stepper<'a> {
    springs: &'a SpringSystem,
    free: Vec<bool>,
    dt: f64,
    damping: f64,
    settings: SolverSettings,
    scale: f64,
}

impl<'a> Stepper<'a> {
    fn new(springs: &'a SpringSystem, free: Vec<bool>, damping: f64, extra_stiffness: f64, stiffness: f64, settings: SolverSettings) -> Self {
        let n = free.len();
        let bound = springs.stiffness_bound(n) + extra_stiffness;
        Stepper {
            springs,
            free,
            dt: 1.0 / bound.sqrt(),
            damping,
            settings,
            scale: stiffness,
        }
    }

    fn residual(&self, f: &[f64]) -> f64 {
        let d = self.springs.dim;
        (0..self.free.len())
            .filter(|&i| self.free[i])
            .map(|i| (0..d).map(|c| f[i * d + c].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    fn relax(&self, x: &mut [f64], ext: &[f64], contact: Option<&Contact>) -> Relaxation {
        let d = self.springs.dim;
        let mut v = vec![0.0; x.len()];
        let mut f = vec![0.0; x.len()];
        let tol = self.settings.tolerance * self.scale;
        let mut substeps = 0;
        loop {
            f.copy_from_slice(ext);
            self.springs.add_forces(x, &mut f);
            if let Some(c) = contact {
                c.add_forces(x, &mut f);
            }
            let r = self.residual(&f);
            if r < tol || substeps >= self.settings.max_substeps {
                return Relaxation { substeps, residual: r };
            }
            for i in (0..self.free.len()).filter(|&i| self.free[i]) {
                for c in 0..d {
                    let j = i * d + c;
                    v[j] += self.dt * (f[j] - self.damping * v[j]);
                    x[j] += self.dt * v[j];
                }
            }
            substeps += 1;
        }
    }
}

fn new_trajectory(mesh: &Mesh, frames: usize, kind: &str, contact_radius: Option<f64>) -> Trajectory {
    let w = mesh.num_nodes() * mesh.dim;
    Trajectory {
        mesh: mesh.clone(),
        num_frames: frames,
        positions: Vec::with_capacity(frames * w),
        stress: Vec::with_capacity(frames * mesh.num_nodes()),
        bc_force: vec![0.0; frames * w],
        bc_disp: vec![0.0; frames * w],
        node_extras: Vec::new(),
        meta: TrajectoryMeta {
            kind: kind.into(),
            contact_radius,
            warnings: Vec::new(),
        },
    }
}

fn note_convergence(traj: &mut Trajectory, frame: usize, r: Relaxation, settings: &SolverSettings, stiffness: f64) {
    if r.residual > settings.warn_tolerance * stiffness {
        let msg = format!(
            "frame {frame}: relaxation stopped after {} substeps with residual {:e}",
            r.substeps, r.residual
        );
        log::warn!("{msg}");
        traj.meta.warnings.push(msg);
    }
}

/// Quasi-static beam response to a linearly ramped load on the right edge.
pub fn simulate_beam(mesh: &Mesh, spec: &BeamSpec, settings: &SolverSettings) -> Result<Trajectory> {
    spec.validate()?;
    if mesh.dim != 2 {
        return Err(Error::Geometry("beam simulation is two-dimensional".into()));
    }
    let n = mesh.num_nodes();
    let springs = SpringSystem::new(mesh, spec.stiffness)?;
    let free: Vec<bool> = mesh.node_type.iter().map(|t| *t == NodeType::Normal).collect();
    let stepper = Stepper::new(&springs, free, spec.damping, 0.0, spec.stiffness, *settings);
    let loaded = beam_force_nodes(mesh, spec);
    let frames = spec.num_steps + 1;
    let mut traj = new_trajectory(mesh, frames, "beam", None);
    let mut x = mesh.positions0.clone();
    let mut ext = vec![0.0; 2 * n];
    traj.positions.extend_from_slice(&x);
    traj.stress.extend(vec![0.0; n]);
    for f in 1..frames {
        for &i in &loaded {
            for c in 0..2 {
                ext[2 * i + c] += spec.force_increment[c];
                traj.bc_force[(f * n + i) * 2 + c] = spec.force_increment[c];
            }
        }
        let r = stepper.relax(&mut x, &ext, None);
        note_convergence(&mut traj, f, r, settings, spec.stiffness);
        traj.positions.extend_from_slice(&x);
        traj.stress
            .extend(springs.max_strain(&x, n, |_| true).into_iter().map(|e| spec.stiffness * e));
    }
    traj.validate()?;
    Ok(traj)
}

/// Plate (part 0, bottom edge clamped) and rigid actuator block (part 1).
pub fn generate_actuator_mesh(spec: &ActuatorSpec) -> Result<Mesh> {
    spec.validate()?;
    let xs = grid_lines(spec.plate_width, spec.resolution, |_, _| false);
    let ys = grid_lines(spec.plate_height, spec.resolution, |_, _| false);
    let (plate_pos, plate_tris) = grid_triangles(&xs, &ys, |_, _| true);
    let ax = grid_lines(spec.actuator_width, spec.resolution, |_, _| false);
    let ay = grid_lines(spec.actuator_height, spec.resolution, |_, _| false);
    let (act_pos, act_tris) = grid_triangles(&ax, &ay, |_, _| true);
    let np = plate_pos.len() / 2;
    let x0 = spec.actuator_x - 0.5 * spec.actuator_width;
    let y0 = spec.plate_height + spec.gap;
    let mut positions = plate_pos;
    for p in act_pos.chunks(2) {
        positions.push(p[0] + x0);
        positions.push(p[1] + y0);
    }
    let n = positions.len() / 2;
    let mut elements = plate_tris;
    elements.extend(act_tris.into_iter().map(|t| t.into_iter().map(|v| v + np).collect::<Vec<_>>()));
    let node_type = (0..n)
        .map(|i| {
            if i >= np {
                NodeType::Actuator
            } else if positions[2 * i + 1] == 0.0 {
                NodeType::Handle
            } else {
                NodeType::Normal
            }
        })
        .collect();
    let part_id = (0..n).map(|i| u32::from(i >= np)).collect();
    Mesh::new(2, positions, elements, node_type, part_id)
}

/// Plate response to the scripted actuator motion with penalty contact.
pub fn simulate_actuator(mesh: &Mesh, spec: &ActuatorSpec, settings: &SolverSettings) -> Result<Trajectory> {
    spec.validate()?;
    let n = mesh.num_nodes();
    let springs = SpringSystem::new(mesh, spec.stiffness)?;
    let free: Vec<bool> = mesh.node_type.iter().map(|t| *t == NodeType::Normal).collect();
    let plate: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
    let actuator: Vec<usize> = (0..n).filter(|&i| mesh.node_type[i] == NodeType::Actuator).collect();
    let contact = Contact {
        pairs_from: &plate,
        pairs_to: &actuator,
        thickness: spec.contact_thickness,
        stiffness: spec.contact_stiffness,
    };
    let stepper = Stepper::new(&springs, free, spec.damping, 4.0 * spec.contact_stiffness, spec.stiffness, *settings);
    let frames = spec.num_steps + 1;
    let mut traj = new_trajectory(mesh, frames, "actuator", Some(spec.contact_radius));
    let mut x = mesh.positions0.clone();
    let ext = vec![0.0; 2 * n];
    traj.positions.extend_from_slice(&x);
    traj.stress.extend(vec![0.0; n]);
    let is_plate = |i: usize| mesh.part_id[i] == 0;
    for f in 1..frames {
        for &i in &actuator {
            for c in 0..2 {
                x[2 * i + c] = mesh.positions0[2 * i + c] + spec.path_increment[c] * f as f64;
                traj.bc_disp[(f * n + i) * 2 + c] = spec.path_increment[c];
            }
        }
        let r = stepper.relax(&mut x, &ext, Some(&contact));
        note_convergence(&mut traj, f, r, settings, spec.stiffness);
        traj.positions.extend_from_slice(&x);
        traj.stress
            .extend(springs.max_strain(&x, n, is_plate).into_iter().map(|e| spec.stiffness * e));
    }
    traj.validate()?;
    Ok(traj)
}

/// Contact edges of the first frame, or none for single-part meshes.
pub fn frame0_contact_edges(traj: &Trajectory) -> Result<Vec<Edge>> {
    match traj.meta.contact_radius {
        Some(r) if traj.mesh.num_parts() > 1 => {
            contact_edges(traj.positions_at(0), traj.dim(), &traj.mesh.part_id, r)
        }
        _ => Ok(Vec::new()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Beam,
    Actuator,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam" => Ok(DatasetKind::Beam),
            "actuator" => Ok(DatasetKind::Actuator),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}; expected beam or actuator"))),
        }
    }
}

/// Sampling ranges of randomized scenario parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecRanges {
    pub length: (f64, f64),
    pub height: (f64, f64),
    pub max_notches: usize,
    /// Notch depth as a fraction of beam height.
    pub notch_depth: (f64, f64),
    /// Force per loaded node per frame.
    pub force_magnitude: (f64, f64),
    /// Load direction measured from straight down, radians.
    pub force_angle: (f64, f64),
    pub resolution: f64,
    pub actuator_x: (f64, f64),
    pub actuator_speed: (f64, f64),
    pub actuator_drift: (f64, f64),
}

impl Default for SpecRanges {
    fn default() -> Self {
        SpecRanges {
            length: (3.0, 4.5),
            height: (0.6, 0.9),
            max_notches: 2,
            notch_depth: (0.25, 0.5),
            force_magnitude: (5e-5, 1.5e-4),
            force_angle: (-0.5, 0.5),
            resolution: 0.15,
            actuator_x: (0.8, 2.2),
            actuator_speed: (0.003, 0.008),
            actuator_drift: (-0.002, 0.002),
        }
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_beam_spec(ranges: &SpecRanges, steps: usize, rng: &mut impl Rng) -> BeamSpec {
    let length = draw(rng, ranges.length);
    let height = draw(rng, ranges.height);
    let count = rng.gen_range(0..=ranges.max_notches);
    let mut notches: Vec<Notch> = Vec::new();
    for _ in 0..count {
        let x = draw(rng, (0.2 * length, 0.85 * length));
        if notches.iter().any(|n| (n.x - x).abs() < 0.15 * length) {
            continue;
        }
        notches.push(Notch {
            x,
            depth: draw(rng, ranges.notch_depth) * height,
            width: ranges.resolution,
        });
    }
    let mag = draw(rng, ranges.force_magnitude);
    let angle = draw(rng, ranges.force_angle);
    BeamSpec {
        length,
        height,
        notches,
        resolution: ranges.resolution,
        force_node_fraction: draw(rng, (0.3, 0.7)),
        force_offset: draw(rng, (0.0, 1.0)),
        force_increment: [mag * angle.sin(), -mag * angle.cos()],
        num_steps: steps,
        ..BeamSpec::default()
    }
}

pub fn sample_actuator_spec(ranges: &SpecRanges, steps: usize, rng: &mut impl Rng) -> ActuatorSpec {
    let base = ActuatorSpec::default();
    let speed = draw(rng, ranges.actuator_speed);
    let max_speed = 0.5 * base.plate_height / steps as f64;
    ActuatorSpec {
        actuator_x: draw(rng, ranges.actuator_x),
        path_increment: [draw(rng, ranges.actuator_drift), -speed.min(max_speed)],
        resolution: ranges.resolution.max(0.1),
        num_steps: steps,
        ..base
    }
}

/// One trajectory, keyed by `(seed, split, index)`.
pub fn generate_trajectory(
    kind: DatasetKind,
    ranges: &SpecRanges,
    steps: usize,
    seed: u64,
    split: usize,
    index: usize,
    settings: &SolverSettings,
) -> Result<Trajectory> {
    let mut rng = keyed(&[seed, DrawKind::Data as u64, split as u64, index as u64]);
    match kind {
        DatasetKind::Beam => {
            let spec = sample_beam_spec(ranges, steps, &mut rng);
            simulate_beam(&generate_beam_mesh(&spec)?, &spec, settings)
        }
        DatasetKind::Actuator => {
            let spec = sample_actuator_spec(ranges, steps, &mut rng);
            simulate_actuator(&generate_actuator_mesh(&spec)?, &spec, settings)
        }
    }
}

/// Raw per-channel statistics of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawStats {
    pub positions: ChannelStats,
    pub displacement: ChannelStats,
    pub stress: ChannelStats,
    pub bc_force: ChannelStats,
    pub bc_disp: ChannelStats,
}

pub fn raw_stats(trajs: &[Trajectory]) -> Result<RawStats> {
    let dim = trajs.first().ok_or_else(|| Error::Data("empty split".into()))?.dim();
    let mut pos = StatsAccumulator::new(dim);
    let mut disp = StatsAccumulator::new(dim);
    let mut stress = StatsAccumulator::new(1);
    let mut force = StatsAccumulator::new(dim);
    let mut bdisp = StatsAccumulator::new(dim);
    for t in trajs {
        for f in 1..t.num_frames {
            pos.push_rows(t.positions_at(f - 1))?;
            disp.push_rows(&t.displacement_increment(f))?;
            stress.push_rows(t.stress_at(f))?;
            force.push_rows(t.bc_force_at(f))?;
            bdisp.push_rows(t.bc_disp_at(f))?;
        }
    }
    Ok(RawStats {
        positions: pos.finish()?,
        displacement: disp.finish()?,
        stress: stress.finish()?,
        bc_force: force.finish()?,
        bc_disp: bdisp.finish()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub kind: DatasetKind,
    pub seed: u64,
    pub steps: usize,
    pub counts: [usize; 3],
    pub ranges: SpecRanges,
    pub files: [Vec<String>; 3],
    /// Statistics of the train split only.
    pub train_stats: RawStats,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split_paths(&self, dir: &Path, split: usize) -> Vec<PathBuf> {
        self.files[split].iter().map(|f| dir.join(f)).collect()
    }
}

pub fn split_index(name: &str) -> Result<usize> {
    SPLITS
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| Error::Config(format!("unknown split {name:?}")))
}

pub fn load_split(dir: &Path, split: usize) -> Result<Vec<Trajectory>> {
    let manifest = DatasetManifest::load(dir)?;
    manifest.split_paths(dir, split).iter().map(|p| load_trajectory(p)).collect()
}

/// Generates and writes a dataset. `generate` produces one trajectory for
/// `(split, index)` and may be backed by a worker pool.
pub fn write_dataset(
    dir: &Path,
    kind: DatasetKind,
    ranges: &SpecRanges,
    counts: [usize; 3],
    steps: usize,
    seed: u64,
    generate: impl Fn(&[(usize, usize)]) -> Vec<Result<Trajectory>>,
) -> Result<DatasetManifest> {
    if counts.contains(&0) {
        return Err(Error::parameter(format!("every split needs at least one trajectory, got {counts:?}")));
    }
    if steps < 2 {
        return Err(Error::parameter(format!("need at least 2 steps, got {steps}")));
    }
    let jobs: Vec<(usize, usize)> = (0..3).flat_map(|s| (0..counts[s]).map(move |i| (s, i))).collect();
    let trajs = generate(&jobs).into_iter().collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(dir)?;
    let mut files: [Vec<String>; 3] = Default::default();
    let mut warnings = Vec::new();
    for (&(s, i), t) in jobs.iter().zip(&trajs) {
        std::fs::create_dir_all(dir.join(SPLITS[s]))?;
        let name = format!("{}/traj_{i:04}.rbtj", SPLITS[s]);
        save_trajectory(t, &dir.join(&name))?;
        warnings.extend(t.meta.warnings.iter().map(|w| format!("{name}: {w}")));
        files[s].push(name);
    }
    let train: Vec<Trajectory> = jobs.iter().zip(trajs).filter(|(j, _)| j.0 == 0).map(|(_, t)| t).collect();
    let manifest = DatasetManifest {
        version: 1,
        kind,
        seed,
        steps,
        counts,
        ranges: ranges.clone(),
        files,
        train_stats: raw_stats(&train)?,
        warnings,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Sequential dataset generation.
pub fn generate_dataset(
    dir: &Path,
    kind: DatasetKind,
    ranges: &SpecRanges,
    counts: [usize; 3],
    steps: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let settings = SolverSettings::default();
    write_dataset(dir, kind, ranges, counts, steps, seed, |jobs| {
        jobs.iter()
            .map(|&(s, i)| generate_trajectory(kind, ranges, steps, seed, s, i, &settings))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unnotched_strip_counts() {
        let spec = BeamSpec { length: 4.0, height: 1.0, resolution: 0.5, ..BeamSpec::default() };
        let m = generate_beam_mesh(&spec).unwrap();
        assert_eq!(m.num_nodes(), (8 + 1) * (2 + 1));
        assert_eq!(m.elements.len(), 8 * 2 * 2);
        for i in 0..m.num_nodes() {
            assert_eq!(m.node_type[i] == NodeType::Handle, m.positions0[2 * i] == 0.0);
        }
    }

    #[test]
    fn notch_adds_nodes_and_coarse_notch_fails() {
        let plain = BeamSpec { resolution: 0.2, ..BeamSpec::default() };
        let notched = BeamSpec {
            notches: vec![Notch { x: 2.0, depth: 0.4, width: 0.2 }],
            ..plain.clone()
        };
        let a = generate_beam_mesh(&plain).unwrap();
        let b = generate_beam_mesh(&notched).unwrap();
        assert!(b.num_nodes() > a.num_nodes());
        let shallow = BeamSpec {
            notches: vec![Notch { x: 2.0, depth: 0.05, width: 0.2 }],
            ..plain
        };
        assert!(matches!(generate_beam_mesh(&shallow), Err(Error::Geometry(_))));
    }

    #[test]
    fn force_nodes_are_contiguous_right_edge() {
        let spec = BeamSpec { force_node_fraction: 0.5, force_offset: 1.0, ..BeamSpec::default() };
        let m = generate_beam_mesh(&spec).unwrap();
        let f = beam_force_nodes(&m, &spec);
        assert_eq!(f.len(), 3);
        let ys: Vec<f64> = f.iter().map(|&i| m.positions0[2 * i + 1]).collect();
        assert!((ys[2] - spec.height).abs() < 1e-12);
        assert!(f.iter().all(|&i| m.positions0[2 * i] == spec.length));
    }

    #[test]
    fn penetrating_path_is_scenario_error() {
        let spec = ActuatorSpec { path_increment: [0.0, -0.05], ..ActuatorSpec::default() };
        assert!(matches!(spec.validate(), Err(Error::Scenario(_))));
    }
}
