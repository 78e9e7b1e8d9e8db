//! Multi-level graph hierarchy built from algebraic-multigrid coarsening.
//!
//! Level 0 is the input mesh graph. Each coarser level is obtained by
//! aggregating the level below; aggregate roots are fine nodes, so every
//! coarse node has a physical location (its root's position, applied
//! recursively through [`GraphHierarchy::node_origin`]). Inter-level edges
//! come from the sparsity of the smoothed prolongator `P` and its transpose.

pub mod amg;
pub mod sparse;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::mesh::{mesh_edges, Edge, Mesh};

pub use amg::{
    adjacency_with_self_loops, aggregate, coarse_mesh_edges, smooth_prolongator,
    strength_of_connection, tentative_prolongator, Aggregation,
};
pub use sparse::SparseMatrix;

pub const HIERARCHY_MAGIC: &[u8; 5] = b"RBHI1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyParams {
    /// Number of coarse levels `L`; the hierarchy has `L + 1` levels.
    pub levels: usize,
    pub theta: f64,
    pub omega: f64,
    /// Map contact edges onto coarse levels through the aggregation.
    pub lift_contact: bool,
}

impl Default for HierarchyParams {
    fn default() -> Self {
        HierarchyParams {
            levels: 2,
            theta: 0.0,
            omega: 2.0 / 3.0,
            lift_contact: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphHierarchy {
    pub node_count: Vec<usize>,
    pub mesh_edges: Vec<Vec<Edge>>,
    pub contact_edges: Vec<Vec<Edge>>,
    /// `down_edges[l]`: fine node at level `l` -> coarse node at level `l+1`.
    pub down_edges: Vec<Vec<Edge>>,
    /// `up_edges[l]`: coarse node at level `l+1` -> fine node at level `l`.
    pub up_edges: Vec<Vec<Edge>>,
    /// Level-0 node each node descends from (identity at level 0).
    pub node_origin: Vec<Vec<usize>>,
    /// Aggregate id of each node of level `l` in level `l+1`.
    pub assign: Vec<Vec<usize>>,
}

impl GraphHierarchy {
    pub fn num_levels(&self) -> usize {
        self.node_count.len()
    }

    /// Index of the coarsest level, `L`.
    pub fn coarsest(&self) -> usize {
        self.node_count.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let nl = self.num_levels();
        if nl == 0 || self.node_count[nl - 1] == 0 {
            return Err(Error::structural("hierarchy has no nodes"));
        }
        for l in 1..nl {
            if self.node_count[l] >= self.node_count[l - 1] {
                return Err(Error::structural(format!("level {l} is not coarser than level {}", l - 1)));
            }
        }
        let check = |edges: &[Edge], ns: usize, nr: usize, what: &str| -> Result<()> {
            match edges.iter().find(|&&(s, r)| s >= ns || r >= nr) {
                Some(e) => Err(Error::structural(format!("{what} edge {e:?} out of range"))),
                None => Ok(()),
            }
        };
        for l in 0..nl {
            let n = self.node_count[l];
            check(&self.mesh_edges[l], n, n, "mesh")?;
            check(&self.contact_edges[l], n, n, "contact")?;
            if self.node_origin[l].len() != n {
                return Err(Error::structural(format!("node_origin[{l}] has wrong length")));
            }
        }
        for l in 0..nl - 1 {
            let (nf, nc) = (self.node_count[l], self.node_count[l + 1]);
            check(&self.down_edges[l], nf, nc, "down")?;
            check(&self.up_edges[l], nc, nf, "up")?;
            let mut has_in = vec![false; nc];
            let mut has_out = vec![false; nc];
            self.down_edges[l].iter().for_each(|&(_, c)| has_in[c] = true);
            self.up_edges[l].iter().for_each(|&(c, _)| has_out[c] = true);
            if has_in.iter().chain(&has_out).any(|&b| !b) {
                return Err(Error::structural(format!(
                    "a level-{} node lacks an inter-level edge",
                    l + 1
                )));
            }
        }
        Ok(())
    }

    fn to_container(&self) -> Container {
        let mut c = Container::new(json!({"version": 1, "node_count": self.node_count}));
        let push_edges = |c: &mut Container, name: String, e: &[Edge]| {
            c.push_u64(&name, vec![e.len(), 2], e.iter().flat_map(|&(a, b)| [a as u64, b as u64]).collect());
        };
        for l in 0..self.num_levels() {
            push_edges(&mut c, format!("mesh.{l}"), &self.mesh_edges[l]);
            push_edges(&mut c, format!("contact.{l}"), &self.contact_edges[l]);
            c.push_u64(
                &format!("origin.{l}"),
                vec![self.node_origin[l].len()],
                self.node_origin[l].iter().map(|&i| i as u64).collect(),
            );
        }
        for l in 0..self.num_levels() - 1 {
            push_edges(&mut c, format!("down.{l}"), &self.down_edges[l]);
            push_edges(&mut c, format!("up.{l}"), &self.up_edges[l]);
            c.push_u64(
                &format!("assign.{l}"),
                vec![self.assign[l].len()],
                self.assign[l].iter().map(|&i| i as u64).collect(),
            );
        }
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        let node_count: Vec<usize> = serde_json::from_value(c.meta["node_count"].clone())?;
        let edges = |name: String| -> Result<Vec<Edge>> {
            Ok(c.u64_block(&name)?
                .1
                .chunks(2)
                .map(|p| (p[0] as usize, p[1] as usize))
                .collect())
        };
        let idx = |name: String| -> Result<Vec<usize>> {
            Ok(c.u64_block(&name)?.1.iter().map(|&i| i as usize).collect())
        };
        let nl = node_count.len();
        let h = GraphHierarchy {
            mesh_edges: (0..nl).map(|l| edges(format!("mesh.{l}"))).collect::<Result<_>>()?,
            contact_edges: (0..nl).map(|l| edges(format!("contact.{l}"))).collect::<Result<_>>()?,
            node_origin: (0..nl).map(|l| idx(format!("origin.{l}"))).collect::<Result<_>>()?,
            down_edges: (0..nl.saturating_sub(1)).map(|l| edges(format!("down.{l}"))).collect::<Result<_>>()?,
            up_edges: (0..nl.saturating_sub(1)).map(|l| edges(format!("up.{l}"))).collect::<Result<_>>()?,
            assign: (0..nl.saturating_sub(1)).map(|l| idx(format!("assign.{l}"))).collect::<Result<_>>()?,
            node_count,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write_to(path, HIERARCHY_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read_from(path, HIERARCHY_MAGIC)?)
    }

    /// Bytes of the cache file; identical hierarchies give identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes(HIERARCHY_MAGIC)
    }
}

/// Builds the hierarchy for a mesh and its level-0 contact edges.
pub fn build_hierarchy(mesh: &Mesh, contact: &[Edge], params: &HierarchyParams) -> Result<GraphHierarchy> {
    mesh.validate()?;
    let edges = mesh_edges(mesh)?;
    build_hierarchy_from_edges(mesh.num_nodes(), &edges, contact, params)
}

/// Same as [`build_hierarchy`] for a bare graph given as directed edges.
pub fn build_hierarchy_from_edges(
    n: usize,
    edges: &[Edge],
    contact: &[Edge],
    params: &HierarchyParams,
) -> Result<GraphHierarchy> {
    if n == 0 {
        return Err(Error::structural("cannot build a hierarchy over an empty graph"));
    }
    let mut h = GraphHierarchy {
        node_count: vec![n],
        mesh_edges: vec![edges.to_vec()],
        contact_edges: vec![contact.to_vec()],
        down_edges: Vec::new(),
        up_edges: Vec::new(),
        node_origin: vec![(0..n).collect()],
        assign: Vec::new(),
    };
    for l in 0..params.levels {
        let nf = h.node_count[l];
        let a = adjacency_with_self_loops(&h.mesh_edges[l], nf)?;
        let s = strength_of_connection(&a, params.theta)?;
        let agg = aggregate(&s, &(0..nf).collect::<Vec<_>>())?;
        let nc = agg.num_aggregates();
        if nc < 2 {
            log::warn!(
                "stopping hierarchy at {} levels: level {} would have {} node(s)",
                l + 1,
                l + 1,
                nc
            );
            break;
        }
        if nc >= nf {
            return Err(Error::Hierarchy {
                level: l + 1,
                reason: format!("coarsening did not reduce {nf} nodes"),
            });
        }
        let p_tent = tentative_prolongator(&agg, nf)?;
        let (p, _r) = smooth_prolongator(&a, &agg, &p_tent, params.omega)?;
        let mut up = Vec::with_capacity(p.nnz());
        for (i, j, _) in p.triplets() {
            up.push((j, i));
        }
        up.sort_unstable();
        // R = P^T, so R[j, i] != 0 exactly where P[i, j] != 0
        let down: Vec<Edge> = {
            let mut d: Vec<Edge> = p.triplets().into_iter().map(|(i, j, _)| (i, j)).collect();
            d.sort_unstable();
            d
        };
        let coarse_mesh = coarse_mesh_edges(&agg, &h.mesh_edges[l])?;
        let coarse_contact = if params.lift_contact {
            amg::lift_edges(&agg, &h.contact_edges[l])?
        } else {
            Vec::new()
        };
        let origin: Vec<usize> = agg.roots.iter().map(|&r| h.node_origin[l][r]).collect();
        h.node_count.push(nc);
        h.mesh_edges.push(coarse_mesh);
        h.contact_edges.push(coarse_contact);
        h.down_edges.push(down);
        h.up_edges.push(up);
        h.node_origin.push(origin);
        h.assign.push(agg.assign);
    }
    h.validate()?;
    Ok(h)
}

/// Content hash of every input that determines a hierarchy.
pub fn hierarchy_key(mesh: &Mesh, contact: &[Edge], params: &HierarchyParams) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"hierarchy-v1");
    hasher.update((mesh.dim as u64).to_le_bytes());
    for x in &mesh.positions0 {
        hasher.update(x.to_le_bytes());
    }
    for el in &mesh.elements {
        for &i in el {
            hasher.update((i as u64).to_le_bytes());
        }
    }
    for &(a, b) in contact {
        hasher.update((a as u64).to_le_bytes());
        hasher.update((b as u64).to_le_bytes());
    }
    hasher.update((params.levels as u64).to_le_bytes());
    hasher.update(params.theta.to_le_bytes());
    hasher.update(params.omega.to_le_bytes());
    hasher.update([params.lift_contact as u8]);
    hex::encode(hasher.finalize())
}

/// Directory of hierarchy files keyed by [`hierarchy_key`].
#[derive(Debug, Clone)]
pub struct HierarchyCache {
    dir: PathBuf,
}

impl HierarchyCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(HierarchyCache { dir })
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.rbhi"))
    }

    pub fn get_or_build(&self, mesh: &Mesh, contact: &[Edge], params: &HierarchyParams) -> Result<GraphHierarchy> {
        let path = self.path_for(&hierarchy_key(mesh, contact, params));
        if path.exists() {
            return GraphHierarchy::load(&path);
        }
        let h = build_hierarchy(mesh, contact, params)?;
        h.save(&path)?;
        Ok(h)
    }
}
