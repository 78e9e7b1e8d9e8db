//! Mesh and trajectory data model, graph-edge extraction, and trajectory files.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};

pub const TRAJECTORY_MAGIC: &[u8; 5] = b"RBTJ1";

/// Directed edge `(sender, receiver)`.
pub type Edge = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeType {
    Normal = 0,
    Handle = 1,
    Actuator = 2,
}

impl NodeType {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: u64) -> Result<Self> {
        match i {
            0 => Ok(NodeType::Normal),
            1 => Ok(NodeType::Handle),
            2 => Ok(NodeType::Actuator),
            _ => Err(Error::Data(format!("unknown node type {i}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub dim: usize,
    /// Rest positions, `num_nodes * dim`, node-major.
    pub positions0: Vec<f64>,
    /// Element connectivity, `dim + 1` vertices per element.
    pub elements: Vec<Vec<usize>>,
    pub node_type: Vec<NodeType>,
    pub part_id: Vec<u32>,
}

impl Mesh {
    pub fn new(
        dim: usize,
        positions0: Vec<f64>,
        elements: Vec<Vec<usize>>,
        node_type: Vec<NodeType>,
        part_id: Vec<u32>,
    ) -> Result<Self> {
        let mesh = Mesh {
            dim,
            positions0,
            elements,
            node_type,
            part_id,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn num_nodes(&self) -> usize {
        self.node_type.len()
    }

    pub fn position0(&self, i: usize) -> &[f64] {
        &self.positions0[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::structural(format!("unsupported dimension {}", self.dim)));
        }
        let n = self.node_type.len();
        if self.positions0.len() != n * self.dim || self.part_id.len() != n {
            return Err(Error::structural(format!(
                "per-node arrays disagree: {} positions for {} nodes of dim {}, {} part ids",
                self.positions0.len(),
                n,
                self.dim,
                self.part_id.len()
            )));
        }
        for (e, el) in self.elements.iter().enumerate() {
            if el.len() != self.dim + 1 {
                return Err(Error::structural(format!(
                    "element {e} has {} vertices, expected {}",
                    el.len(),
                    self.dim + 1
                )));
            }
            for (a, &i) in el.iter().enumerate() {
                if i >= n {
                    return Err(Error::structural(format!(
                        "element {e} references node {i} but mesh has {n} nodes"
                    )));
                }
                if el[..a].contains(&i) {
                    return Err(Error::structural(format!(
                        "element {e} repeats vertex {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_parts(&self) -> usize {
        self.part_id.iter().collect::<BTreeSet<_>>().len()
    }
}

/// Union of element-boundary edges, both directions, sorted and deduplicated.
pub fn mesh_edges(mesh: &Mesh) -> Result<Vec<Edge>> {
    let n = mesh.num_nodes();
    let mut set = BTreeSet::new();
    for (e, el) in mesh.elements.iter().enumerate() {
        for (a, &i) in el.iter().enumerate() {
            if i >= n {
                return Err(Error::structural(format!(
                    "element {e} references node {i} but mesh has {n} nodes"
                )));
            }
            for &j in &el[a + 1..] {
                if i != j {
                    set.insert((i, j));
                    set.insert((j, i));
                }
            }
        }
    }
    Ok(set.into_iter().collect())
}

/// Bidirectional edges between nodes of different parts closer than `radius`.
///
/// Uses a uniform bucket grid with cell size `radius`; every pair within the
/// radius lies in the same or an adjacent cell.
pub fn contact_edges(positions: &[f64], dim: usize, part_id: &[u32], radius: f64) -> Result<Vec<Edge>> {
    if !(radius > 0.0) {
        return Err(Error::parameter(format!("contact radius must be > 0, got {radius}")));
    }
    let n = part_id.len();
    if positions.len() != n * dim {
        return Err(Error::structural("positions and part ids disagree in length"));
    }
    let cell_of = |i: usize| -> Vec<i64> {
        (0..dim)
            .map(|d| (positions[i * dim + d] / radius).floor() as i64)
            .collect()
    };
    let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for i in 0..n {
        grid.entry(cell_of(i)).or_default().push(i);
    }
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(dim as u32))
        .map(|mut code| {
            (0..dim)
                .map(|_| {
                    let o = (code % 3) as i64 - 1;
                    code /= 3;
                    o
                })
                .collect()
        })
        .collect();
    let r2 = radius * radius;
    let mut set = BTreeSet::new();
    for i in 0..n {
        let c = cell_of(i);
        for off in &offsets {
            let key: Vec<i64> = c.iter().zip(off).map(|(a, b)| a + b).collect();
            let Some(bucket) = grid.get(&key) else { continue };
            for &j in bucket {
                if part_id[i] == part_id[j] {
                    continue;
                }
                let d2: f64 = (0..dim)
                    .map(|d| (positions[i * dim + d] - positions[j * dim + d]).powi(2))
                    .sum();
                if d2 < r2 {
                    set.insert((i, j));
                }
            }
        }
    }
    Ok(set.into_iter().collect())
}

/// A simulated trajectory with `num_frames` frames; frame 0 is the rest state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mesh: Mesh,
    pub num_frames: usize,
    /// `num_frames * num_nodes * dim`
    pub positions: Vec<f64>,
    /// `num_frames * num_nodes` stress proxy.
    pub stress: Vec<f64>,
    /// Per-frame force increment applied between frame `f-1` and `f`.
    pub bc_force: Vec<f64>,
    /// Per-frame scripted displacement increment on actuator nodes.
    pub bc_disp: Vec<f64>,
    /// Optional per-node material channels such as density or stiffness.
    pub node_extras: Vec<(String, Vec<f64>)>,
    pub meta: TrajectoryMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub kind: String,
    pub contact_radius: Option<f64>,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn num_nodes(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim
    }

    /// Number of transitions, i.e. predictable steps.
    pub fn num_steps(&self) -> usize {
        self.num_frames.saturating_sub(1)
    }

    fn vec_frame<'a>(&self, data: &'a [f64], f: usize) -> &'a [f64] {
        let w = self.num_nodes() * self.dim();
        &data[f * w..(f + 1) * w]
    }

    pub fn positions_at(&self, f: usize) -> &[f64] {
        self.vec_frame(&self.positions, f)
    }

    pub fn bc_force_at(&self, f: usize) -> &[f64] {
        self.vec_frame(&self.bc_force, f)
    }

    pub fn bc_disp_at(&self, f: usize) -> &[f64] {
        self.vec_frame(&self.bc_disp, f)
    }

    pub fn stress_at(&self, f: usize) -> &[f64] {
        let n = self.num_nodes();
        &self.stress[f * n..(f + 1) * n]
    }

    /// Displacement increment from frame `f-1` to frame `f`.
    pub fn displacement_increment(&self, f: usize) -> Vec<f64> {
        self.positions_at(f)
            .iter()
            .zip(self.positions_at(f - 1))
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.mesh.validate()?;
        let n = self.num_nodes();
        let d = self.dim();
        let fr = self.num_frames;
        if fr == 0 {
            return Err(Error::Data("trajectory has no frames".into()));
        }
        for (name, len, want) in [
            ("positions", self.positions.len(), fr * n * d),
            ("stress", self.stress.len(), fr * n),
            ("bc_force", self.bc_force.len(), fr * n * d),
            ("bc_disp", self.bc_disp.len(), fr * n * d),
        ] {
            if len != want {
                return Err(Error::Data(format!("{name} has {len} values, expected {want}")));
            }
        }
        if self.positions_at(0) != self.mesh.positions0.as_slice() {
            return Err(Error::Data("frame 0 differs from mesh rest positions".into()));
        }
        for i in (0..n).filter(|&i| self.mesh.node_type[i] == NodeType::Handle) {
            for f in 1..fr {
                for c in 0..d {
                    let drift = (self.positions_at(f)[i * d + c] - self.mesh.positions0[i * d + c]).abs();
                    if drift > 1e-12 {
                        return Err(Error::Data(format!(
                            "handle node {i} drifts by {drift:e} at frame {f}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn to_container(&self) -> Container {
        let n = self.num_nodes();
        let d = self.dim();
        let fr = self.num_frames;
        let extras: Vec<&str> = self.node_extras.iter().map(|(k, _)| k.as_str()).collect();
        let mut c = Container::new(json!({
            "version": 1,
            "dim": d,
            "num_nodes": n,
            "num_frames": fr,
            "num_elements": self.mesh.elements.len(),
            "dt": 1.0,
            "extras": extras,
            "info": self.meta,
        }));
        c.push_f64("positions0", vec![n, d], self.mesh.positions0.clone());
        c.push_u64(
            "elements",
            vec![self.mesh.elements.len(), d + 1],
            self.mesh.elements.iter().flatten().map(|&i| i as u64).collect(),
        );
        c.push_u64("node_type", vec![n], self.mesh.node_type.iter().map(|t| *t as u64).collect());
        c.push_u64("part_id", vec![n], self.mesh.part_id.iter().map(|&p| p as u64).collect());
        c.push_f64("positions", vec![fr, n, d], self.positions.clone());
        c.push_f64("stress", vec![fr, n], self.stress.clone());
        c.push_f64("bc_force", vec![fr, n, d], self.bc_force.clone());
        c.push_f64("bc_disp", vec![fr, n, d], self.bc_disp.clone());
        for (name, vals) in &self.node_extras {
            c.push_f64(&format!("extra.{name}"), vec![n], vals.clone());
        }
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            c.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Data(format!("header field '{k}' missing")))
        };
        let d = get("dim")?;
        let fr = get("num_frames")?;
        let (_, el) = c.u64_block("elements")?;
        let elements = el.chunks(d + 1).map(|e| e.iter().map(|&i| i as usize).collect()).collect();
        let node_type = c
            .u64_block("node_type")?
            .1
            .iter()
            .map(|&t| NodeType::from_index(t))
            .collect::<Result<Vec<_>>>()?;
        let part_id = c.u64_block("part_id")?.1.iter().map(|&p| p as u32).collect();
        let mesh = Mesh::new(d, c.f64_block("positions0")?.1.to_vec(), elements, node_type, part_id)?;
        let mut node_extras = Vec::new();
        if let Some(names) = c.meta["extras"].as_array() {
            for name in names.iter().filter_map(|v| v.as_str()) {
                node_extras.push((name.to_string(), c.f64_block(&format!("extra.{name}"))?.1.to_vec()));
            }
        }
        let meta: TrajectoryMeta = serde_json::from_value(c.meta["info"].clone())?;
        let traj = Trajectory {
            mesh,
            num_frames: fr,
            positions: c.f64_block("positions")?.1.to_vec(),
            stress: c.f64_block("stress")?.1.to_vec(),
            bc_force: c.f64_block("bc_force")?.1.to_vec(),
            bc_disp: c.f64_block("bc_disp")?.1.to_vec(),
            node_extras,
            meta,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes(TRAJECTORY_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes, TRAJECTORY_MAGIC)?)
    }
}

pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    traj.to_container().write_to(path, TRAJECTORY_MAGIC)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    Trajectory::from_container(&Container::read_from(path, TRAJECTORY_MAGIC)?)
}
