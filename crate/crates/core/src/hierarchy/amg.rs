//! Root-node smoothed-aggregation coarsening.

use std::collections::BTreeSet;

use super::sparse::SparseMatrix;
use crate::error::{Error, Result};
use crate::mesh::Edge;

pub const UNASSIGNED: usize = usize::MAX;

/// Partition of fine nodes into aggregates, each anchored at a root node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Aggregation {
    /// Aggregate id of every fine node.
    pub assign: Vec<usize>,
    /// Fine-node index of each aggregate's root.
    pub roots: Vec<usize>,
}

impl Aggregation {
    pub fn num_aggregates(&self) -> usize {
        self.roots.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.roots.len()];
        for &a in &self.assign {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, a: usize) -> Vec<usize> {
        (0..self.assign.len()).filter(|&i| self.assign[i] == a).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let na = self.roots.len();
        if let Some(i) = self.assign.iter().position(|&a| a >= na) {
            return Err(Error::structural(format!("node {i} has no valid aggregate")));
        }
        let distinct: BTreeSet<_> = self.roots.iter().collect();
        if distinct.len() != na {
            return Err(Error::structural("aggregate roots are not distinct"));
        }
        for (a, &r) in self.roots.iter().enumerate() {
            if self.assign.get(r) != Some(&a) {
                return Err(Error::structural(format!("root {r} not assigned to its aggregate {a}")));
            }
        }
        Ok(())
    }
}

/// Symmetric 0/1 adjacency of `n` nodes with unit diagonal.
pub fn adjacency_with_self_loops(edges: &[Edge], n: usize) -> Result<SparseMatrix> {
    let mut set = BTreeSet::new();
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::structural(format!("edge ({i}, {j}) references node outside 0..{n}")));
        }
        set.insert((i, j));
        set.insert((j, i));
    }
    for i in 0..n {
        set.insert((i, i));
    }
    let trips: Vec<_> = set.into_iter().map(|(i, j)| (i, j, 1.0)).collect();
    SparseMatrix::from_triplets(n, n, &trips)
}

/// Strong-connection pattern.
///
/// Off-diagonal `(i, j)` is strong when `|A_ij| >= theta * max_{k != i} |A_ik|`
/// holds in row `i` and the mirrored test holds in row `j`; the diagonal is
/// always strong. The two-sided test keeps the pattern symmetric.
pub fn strength_of_connection(a: &SparseMatrix, theta: f64) -> Result<SparseMatrix> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::parameter(format!("theta must lie in [0, 1], got {theta}")));
    }
    let n = a.rows();
    let row_max: Vec<f64> = (0..n)
        .map(|i| {
            a.row(i)
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v.abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let strong_in_row = |i: usize, v: f64| v.abs() >= theta * row_max[i];
    let mut trips = Vec::new();
    for i in 0..n {
        for (j, v) in a.row(i) {
            let keep = if i == j {
                true
            } else {
                let mirrored = a.get(j, i).unwrap_or(0.0);
                strong_in_row(i, v) && strong_in_row(j, mirrored)
            };
            if keep {
                trips.push((i, j, v));
            }
        }
    }
    for i in 0..n {
        if a.get(i, i).is_none() {
            trips.push((i, i, 1.0));
        }
    }
    SparseMatrix::from_triplets(n, n, &trips)
}

/// Two-pass greedy aggregation.
///
/// Pass 1 walks `order`; a node whose strong neighbourhood (itself included)
/// is entirely unassigned seeds an aggregate of that neighbourhood and becomes
/// its root. Pass 2 attaches every remaining node to the aggregate of its
/// strongest assigned neighbour, ties going to the lowest neighbour id.
pub fn aggregate(s: &SparseMatrix, order: &[usize]) -> Result<Aggregation> {
    let n = s.rows();
    if order.len() != n || order.iter().collect::<BTreeSet<_>>().len() != n || order.iter().any(|&i| i >= n) {
        return Err(Error::parameter("node ordering must be a permutation of 0..n"));
    }
    let mut assign = vec![UNASSIGNED; n];
    let mut roots = Vec::new();

    for &i in order {
        if assign[i] != UNASSIGNED {
            continue;
        }
        let free = s.row(i).all(|(j, _)| assign[j] == UNASSIGNED);
        if free {
            let a = roots.len();
            roots.push(i);
            assign[i] = a;
            for (j, _) in s.row(i) {
                assign[j] = a;
            }
        }
    }

    let after_first = assign.clone();
    for i in 0..n {
        if assign[i] != UNASSIGNED {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (j, v) in s.row(i) {
            if j == i || after_first[j] == UNASSIGNED {
                continue;
            }
            let w = v.abs();
            match best {
                Some((bw, _)) if w <= bw => {}
                _ => best = Some((w, j)),
            }
        }
        assign[i] = match best {
            Some((_, j)) => after_first[j],
            None => {
                roots.push(i);
                roots.len() - 1
            }
        };
    }

    let agg = Aggregation { assign, roots };
    agg.validate()?;
    Ok(agg)
}

/// Piecewise-constant interpolation: `P[i, assign[i]] = 1`.
pub fn tentative_prolongator(agg: &Aggregation, n_fine: usize) -> Result<SparseMatrix> {
    if agg.assign.len() != n_fine {
        return Err(Error::structural("aggregation size does not match fine node count"));
    }
    let trips: Vec<_> = agg.assign.iter().enumerate().map(|(i, &a)| (i, a, 1.0)).collect();
    SparseMatrix::from_triplets(n_fine, agg.num_aggregates(), &trips)
}

/// One damped-Jacobi smoothing step `P = (I - omega D^-1 A) P_tent`, with
/// root rows reset to their tentative rows. Returns `(P, R = P^T)`.
///
/// Entries that cancel to exactly zero are dropped, except the entry linking
/// each fine node to its own aggregate, which is always kept.
pub fn smooth_prolongator(
    a: &SparseMatrix,
    agg: &Aggregation,
    p_tent: &SparseMatrix,
    omega: f64,
) -> Result<(SparseMatrix, SparseMatrix)> {
    if !(omega >= 0.0) || !omega.is_finite() {
        return Err(Error::parameter(format!("omega must be >= 0, got {omega}")));
    }
    if a.cols() != p_tent.rows() || a.rows() != a.cols() {
        return Err(Error::structural(format!(
            "cannot smooth {}x{} prolongator with {}x{} operator",
            p_tent.rows(),
            p_tent.cols(),
            a.rows(),
            a.cols()
        )));
    }
    let diag = a.diagonal();
    if let Some(i) = diag.iter().position(|&d| d == 0.0) {
        return Err(Error::Numerical(format!("zero diagonal in row {i}; Jacobi smoothing undefined")));
    }
    let ap = a.matmul(p_tent)?;
    let is_root: Vec<bool> = {
        let mut r = vec![false; a.rows()];
        agg.roots.iter().for_each(|&i| r[i] = true);
        r
    };
    let p = ap.map_rows(|i, row| {
        if is_root[i] {
            row.clear();
            row.insert(agg.assign[i], 1.0);
            return;
        }
        let scale = omega / diag[i];
        for v in row.values_mut() {
            *v *= -scale;
        }
        for (j, t) in p_tent.row(i) {
            *row.entry(j).or_insert(0.0) += t;
        }
        let own = agg.assign[i];
        row.retain(|&j, v| *v != 0.0 || j == own);
        row.entry(own).or_insert(0.0);
    });
    let r = p.transpose();
    Ok((p, r))
}

/// Directed coarse edge `(a, b)`, `a != b`, for every fine edge crossing aggregates.
pub fn coarse_mesh_edges(agg: &Aggregation, fine_edges: &[Edge]) -> Result<Vec<Edge>> {
    lift_edges(agg, fine_edges)
}

pub(crate) fn lift_edges(agg: &Aggregation, edges: &[Edge]) -> Result<Vec<Edge>> {
    let mut set = BTreeSet::new();
    for &(i, j) in edges {
        let (Some(&a), Some(&b)) = (agg.assign.get(i), agg.assign.get(j)) else {
            return Err(Error::structural(format!("edge ({i}, {j}) not covered by aggregation")));
        };
        if a != b {
            set.insert((a, b));
        }
    }
    Ok(set.into_iter().collect())
}
