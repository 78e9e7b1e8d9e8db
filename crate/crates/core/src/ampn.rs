//! Hierarchical message-passing denoiser.
//!
//! Inputs are encoded per level, refined by a V-cycle of message-passing
//! stacks (pre, down, solve, up, post) and decoded on the finest level into
//! one velocity per output channel. Batches of independent samples on the
//! same hierarchy run as one disjoint-union graph.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{fourier_encode, ParamId, ParamStore, Recorder, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::hierarchy::GraphHierarchy;
use crate::mesh::{Edge, Mesh, NodeType};
use crate::rng::{keyed, DrawKind};
use crate::stats::ChannelStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerCounts {
    pub pre: usize,
    pub down: usize,
    pub solve: usize,
    pub up: usize,
    pub post: usize,
}

impl Default for LayerCounts {
    fn default() -> Self {
        LayerCounts { pre: 3, down: 2, solve: 5, up: 2, post: 3 }
    }
}

impl LayerCounts {
    pub fn total(&self) -> usize {
        self.pre + self.down + self.solve + self.up + self.post
    }
}

/// How stack parameters relate across hierarchy levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSharing {
    /// One parameter set per module kind, reused at every level.
    Shared,
    /// Separate parameter sets per level (per level transition for down/up).
    PerLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputChannel {
    pub name: String,
    pub width: usize,
    /// Denoise the per-step increment instead of the absolute value.
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondChannel {
    pub name: String,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmpnConfig {
    pub dim: usize,
    pub hidden: usize,
    pub layers: LayerCounts,
    pub fourier_bands: usize,
    pub outputs: Vec<OutputChannel>,
    pub cond: Vec<CondChannel>,
    pub sharing: WeightSharing,
    /// Coarse levels the per-level parameter sets are allocated for.
    pub levels: usize,
    /// Add the projected level code to node embeddings.
    pub level_code: bool,
}

impl AmpnConfig {
    pub fn new(dim: usize, cond: Vec<CondChannel>) -> Self {
        AmpnConfig {
            dim,
            hidden: 128,
            layers: LayerCounts::default(),
            fourier_bands: 16,
            outputs: vec![
                OutputChannel { name: "displacement".into(), width: dim, residual: true },
                OutputChannel { name: "stress".into(), width: 1, residual: false },
            ],
            cond,
            sharing: WeightSharing::Shared,
            levels: 2,
            level_code: true,
        }
    }

    pub fn out_width(&self) -> usize {
        self.outputs.iter().map(|c| c.width).sum()
    }

    pub fn cond_width(&self) -> usize {
        self.cond.iter().map(|c| c.width).sum()
    }

    pub fn node_in_width(&self) -> usize {
        NodeType::COUNT + self.out_width() + self.cond_width()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dim) {
            return Err(Error::Config(format!("dim must be 2 or 3, got {}", self.dim)));
        }
        if self.hidden == 0 || self.fourier_bands == 0 {
            return Err(Error::Config("hidden width and fourier bands must be positive".into()));
        }
        if self.layers.solve == 0 {
            return Err(Error::Config("solve stack must have at least one layer".into()));
        }
        if self.outputs.is_empty() || self.outputs.iter().any(|c| c.width == 0) {
            return Err(Error::Config("output channels must be non-empty with positive widths".into()));
        }
        Ok(())
    }
}

/// Mean/std for every encoder input block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub cond: ChannelStats,
    pub mesh: ChannelStats,
    pub contact: ChannelStats,
    pub down: ChannelStats,
    pub up: ChannelStats,
}

impl FeatureStats {
    pub fn identity(dim: usize, cond_width: usize) -> Self {
        FeatureStats {
            cond: ChannelStats::identity(cond_width),
            mesh: ChannelStats::identity(2 * dim + 2),
            contact: ChannelStats::identity(dim + 1),
            down: ChannelStats::identity(2 * dim + 2),
            up: ChannelStats::identity(2 * dim + 2),
        }
    }

    fn check(&self, cfg: &AmpnConfig) -> Result<()> {
        let d = cfg.dim;
        let ok = self.cond.width() == cfg.cond_width()
            && self.mesh.width() == 2 * d + 2
            && self.down.width() == 2 * d + 2
            && self.up.width() == 2 * d + 2
            && self.contact.width() == d + 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("normalization statistics missing or sized for another model".into()))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    ln_g: ParamId,
    ln_b: ParamId,
    l1: Lin,
    l2: Lin,
}

#[derive(Debug, Clone, Copy)]
struct IntraLayer {
    wc: ParamId,
    fc: Mlp,
    wm: ParamId,
    fm: Mlp,
    wv: ParamId,
    fv: Mlp,
}

#[derive(Debug, Clone, Copy)]
struct InterLayer {
    we: ParamId,
    fe: Mlp,
    wv: ParamId,
    fv: Mlp,
}

/// Parameter sets of one module kind: `sets[0]` when shared, else one per level.
#[derive(Debug, Clone)]
struct Stack<L> {
    sets: Vec<Vec<L>>,
}

impl<L> Stack<L> {
    fn at(&self, level: usize) -> &[L] {
        &self.sets[level.min(self.sets.len() - 1)]
    }
}

#[derive(Debug, Clone)]
struct Encoders {
    node0: Lin,
    node_coarse: Lin,
    mesh: Lin,
    contact: Lin,
    down: Lin,
    up: Lin,
    k_code: Lin,
    level_code: Lin,
}

/// The network: configuration plus handles into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Ampn {
    pub config: AmpnConfig,
    enc: Encoders,
    pre: Stack<IntraLayer>,
    down: Stack<InterLayer>,
    solve: Stack<IntraLayer>,
    up: Stack<InterLayer>,
    post: Stack<IntraLayer>,
    decoder: Lin,
}

struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn normal(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break T::of(z * std);
                }
            })
            .collect()
    }

    fn lin(&mut self, name: &str, i: usize, o: usize) -> Result<Lin> {
        let w = self.normal(i * o, 0.02);
        Ok(Lin {
            w: self.store.add(format!("{name}.w"), Tensor::matrix(i, o, w)?)?,
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[o]))?,
        })
    }

    /// Identity plus small noise.
    fn square(&mut self, name: &str, d: usize) -> Result<ParamId> {
        let mut w = self.normal(d * d, 0.01);
        for i in 0..d {
            w[i * d + i] = w[i * d + i] + T::one();
        }
        self.store.add(name, Tensor::matrix(d, d, w)?)
    }

    fn mlp(&mut self, name: &str, i: usize, d: usize) -> Result<Mlp> {
        Ok(Mlp {
            ln_g: self.store.add(format!("{name}.ln.g"), Tensor::new(vec![i], vec![T::one(); i])?)?,
            ln_b: self.store.add(format!("{name}.ln.b"), Tensor::zeros(&[i]))?,
            l1: self.lin(&format!("{name}.l1"), i, d)?,
            l2: self.lin(&format!("{name}.l2"), d, d)?,
        })
    }

    fn intra(&mut self, name: &str, d: usize) -> Result<IntraLayer> {
        Ok(IntraLayer {
            wc: self.square(&format!("{name}.wc"), d)?,
            fc: self.mlp(&format!("{name}.fc"), 3 * d, d)?,
            wm: self.square(&format!("{name}.wm"), d)?,
            fm: self.mlp(&format!("{name}.fm"), 3 * d, d)?,
            wv: self.square(&format!("{name}.wv"), d)?,
            fv: self.mlp(&format!("{name}.fv"), 3 * d, d)?,
        })
    }

    fn inter(&mut self, name: &str, d: usize) -> Result<InterLayer> {
        Ok(InterLayer {
            we: self.square(&format!("{name}.we"), d)?,
            fe: self.mlp(&format!("{name}.fe"), 3 * d, d)?,
            wv: self.square(&format!("{name}.wv"), d)?,
            fv: self.mlp(&format!("{name}.fv"), 2 * d, d)?,
        })
    }

    fn stack<L>(
        &mut self,
        kind: &str,
        count: usize,
        groups: usize,
        mut make: impl FnMut(&mut Self, &str) -> Result<L>,
    ) -> Result<Stack<L>> {
        let mut sets = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut set = Vec::with_capacity(count);
            for i in 0..count {
                let name = if groups == 1 {
                    format!("{kind}.{i}")
                } else {
                    format!("{kind}.level{g}.{i}")
                };
                set.push(make(self, &name)?);
            }
            sets.push(set);
        }
        Ok(Stack { sets })
    }
}

impl Ampn {
    /// Registers freshly initialized parameters in `store`.
    pub fn init<T: Scalar>(config: AmpnConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let dim = config.dim;
        let f2 = 2 * config.fourier_bands;
        let mut it = Init {
            store,
            rng: keyed(&[seed, DrawKind::Params as u64]),
        };
        let enc = Encoders {
            node0: it.lin("enc.node0", config.node_in_width(), d)?,
            node_coarse: it.lin("enc.node_coarse", NodeType::COUNT, d)?,
            mesh: it.lin("enc.mesh", 2 * dim + 2, d)?,
            contact: it.lin("enc.contact", dim + 1, d)?,
            down: it.lin("enc.down", 2 * dim + 2, d)?,
            up: it.lin("enc.up", 2 * dim + 2, d)?,
            k_code: it.lin("enc.k_code", f2, d)?,
            level_code: it.lin("enc.level_code", f2, d)?,
        };
        let (levels, transitions) = match config.sharing {
            WeightSharing::Shared => (1, 1),
            WeightSharing::PerLevel => (config.levels + 1, config.levels.max(1)),
        };
        let c = config.layers;
        let pre = it.stack("pre", c.pre, levels, |s, n| s.intra(n, d))?;
        let down = it.stack("down", c.down, transitions, |s, n| s.inter(n, d))?;
        let solve = it.stack("solve", c.solve, 1, |s, n| s.intra(n, d))?;
        let up = it.stack("up", c.up, transitions, |s, n| s.inter(n, d))?;
        let post = it.stack("post", c.post, levels, |s, n| s.intra(n, d))?;
        let decoder = it.lin("decoder", d, config.out_width())?;
        Ok(Ampn {
            config,
            enc,
            pre,
            down,
            solve,
            up,
            post,
            decoder,
        })
    }

    /// Predicted velocity for every fine node of every batch member,
    /// shape `[copies * n0, out_width]`.
    pub fn forward<T: Scalar, R: Recorder<T>>(
        &self,
        rec: &mut R,
        store: &ParamStore<T>,
        inputs: &ModelInputs<T>,
    ) -> Result<R::V> {
        let idx = &inputs.index;
        let nl = idx.levels.len();
        let top = nl - 1;

        let kproj = encode(rec, store, &inputs.k_codes, &self.enc.k_code)?;
        let mut nodes = Vec::with_capacity(nl);
        let mut mesh_e = Vec::with_capacity(nl);
        let mut contact_e = Vec::with_capacity(nl);
        for l in 0..nl {
            let enc = if l == 0 { &self.enc.node0 } else { &self.enc.node_coarse };
            let mut k = encode(rec, store, &inputs.nodes[l], enc)?;
            let kc = rec.gather(&kproj, &idx.levels[l].slot)?;
            k = rec.add(&k, &kc)?;
            if self.config.level_code {
                let code = encode(rec, store, &inputs.level_codes[l], &self.enc.level_code)?;
                k = rec.add_row(&k, &code)?;
            }
            nodes.push(k);
            mesh_e.push(encode(rec, store, &inputs.mesh[l], &self.enc.mesh)?);
            contact_e.push(encode(rec, store, &inputs.contact[l], &self.enc.contact)?);
        }
        let mut down_e = Vec::with_capacity(top);
        let mut up_e = Vec::with_capacity(top);
        for l in 0..top {
            down_e.push(encode(rec, store, &inputs.down[l], &self.enc.down)?);
            up_e.push(encode(rec, store, &inputs.up[l], &self.enc.up)?);
        }

        for l in 0..=top {
            for layer in self.pre.at(l) {
                intra(rec, store, layer, &idx.levels[l], &mut nodes[l], &mut mesh_e[l], &mut contact_e[l])?;
            }
            if l < top {
                for layer in self.down.at(l) {
                    let (fine, coarse) = nodes.split_at_mut(l + 1);
                    let i = &idx.inter[l];
                    inter(rec, store, layer, &fine[l], &mut coarse[0], &mut down_e[l], &i.down_send, &i.down_recv)?;
                }
            }
        }
        for layer in self.solve.at(top) {
            intra(rec, store, layer, &idx.levels[top], &mut nodes[top], &mut mesh_e[top], &mut contact_e[top])?;
        }
        for l in (0..=top).rev() {
            if l < top {
                for layer in self.up.at(l) {
                    let (fine, coarse) = nodes.split_at_mut(l + 1);
                    let i = &idx.inter[l];
                    inter(rec, store, layer, &coarse[0], &mut fine[l], &mut up_e[l], &i.up_send, &i.up_recv)?;
                }
            }
            for layer in self.post.at(l) {
                intra(rec, store, layer, &idx.levels[l], &mut nodes[l], &mut mesh_e[l], &mut contact_e[l])?;
            }
        }
        lin(rec, store, &nodes[0], &self.decoder)
    }
}

fn encode<T: Scalar, R: Recorder<T>>(rec: &mut R, store: &ParamStore<T>, t: &Arc<Tensor<T>>, l: &Lin) -> Result<R::V> {
    let x = rec.constant_shared(t);
    lin(rec, store, &x, l)
}

fn lin<T: Scalar, R: Recorder<T>>(rec: &mut R, store: &ParamStore<T>, x: &R::V, l: &Lin) -> Result<R::V> {
    let w = rec.param(store, l.w);
    let b = rec.param(store, l.b);
    rec.linear(x, &w, &b)
}

fn mlp<T: Scalar, R: Recorder<T>>(rec: &mut R, store: &ParamStore<T>, parts: &[R::V], m: &Mlp) -> Result<R::V> {
    let x = rec.concat(parts, 1)?;
    let g = rec.param(store, m.ln_g);
    let b = rec.param(store, m.ln_b);
    let x = rec.layer_norm(&x, &g, &b)?;
    let h = lin(rec, store, &x, &m.l1)?;
    let h = rec.silu(&h);
    lin(rec, store, &h, &m.l2)
}

/// `e W + f([k_recv, k_send, e])` over one edge set.
#[allow(clippy::too_many_arguments)]
fn edge_update<T: Scalar, R: Recorder<T>>(
    rec: &mut R,
    store: &ParamStore<T>,
    w: ParamId,
    f: &Mlp,
    k_recv: &R::V,
    k_send: &R::V,
    e: &R::V,
    send: &Arc<Vec<usize>>,
    recv: &Arc<Vec<usize>>,
) -> Result<R::V> {
    let kr = rec.gather(k_recv, recv)?;
    let ks = rec.gather(k_send, send)?;
    let msg = mlp(rec, store, &[kr, ks, e.clone()], f)?;
    let wv = rec.param(store, w);
    let res = rec.matmul(e, &wv)?;
    rec.add(&res, &msg)
}

fn intra<T: Scalar, R: Recorder<T>>(
    rec: &mut R,
    store: &ParamStore<T>,
    layer: &IntraLayer,
    idx: &LevelIndex,
    k: &mut R::V,
    mesh_e: &mut R::V,
    contact_e: &mut R::V,
) -> Result<()> {
    let n = idx.num_nodes;
    *contact_e = edge_update(rec, store, layer.wc, &layer.fc, k, k, contact_e, &idx.contact_send, &idx.contact_recv)?;
    *mesh_e = edge_update(rec, store, layer.wm, &layer.fm, k, k, mesh_e, &idx.mesh_send, &idx.mesh_recv)?;
    let agg_c = rec.scatter_max(contact_e, &idx.contact_recv, n)?;
    let agg_m = rec.scatter_max(mesh_e, &idx.mesh_recv, n)?;
    let f = mlp(rec, store, &[k.clone(), agg_c, agg_m], &layer.fv)?;
    let wv = rec.param(store, layer.wv);
    let res = rec.matmul(k, &wv)?;
    *k = rec.add(&res, &f)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn inter<T: Scalar, R: Recorder<T>>(
    rec: &mut R,
    store: &ParamStore<T>,
    layer: &InterLayer,
    k_send: &R::V,
    k_recv: &mut R::V,
    e: &mut R::V,
    send: &Arc<Vec<usize>>,
    recv: &Arc<Vec<usize>>,
) -> Result<()> {
    let n = rec.value(k_recv).rows();
    *e = edge_update(rec, store, layer.we, &layer.fe, k_recv, k_send, e, send, recv)?;
    let agg = rec.scatter_max(e, recv, n)?;
    let f = mlp(rec, store, &[k_recv.clone(), agg], &layer.fv)?;
    let wv = rec.param(store, layer.wv);
    let res = rec.matmul(k_recv, &wv)?;
    *k_recv = rec.add(&res, &f)?;
    Ok(())
}

/// Index arrays of one level of a batched hierarchy.
#[derive(Debug, Clone)]
pub struct LevelIndex {
    pub num_nodes: usize,
    pub mesh_send: Arc<Vec<usize>>,
    pub mesh_recv: Arc<Vec<usize>>,
    pub contact_send: Arc<Vec<usize>>,
    pub contact_recv: Arc<Vec<usize>>,
    /// Batch member of each node.
    pub slot: Arc<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct InterIndex {
    pub down_send: Arc<Vec<usize>>,
    pub down_recv: Arc<Vec<usize>>,
    pub up_send: Arc<Vec<usize>>,
    pub up_recv: Arc<Vec<usize>>,
}

/// A hierarchy replicated `copies` times as one disjoint-union graph.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    pub copies: usize,
    pub levels: Vec<LevelIndex>,
    pub inter: Vec<InterIndex>,
}

fn split_edges(edges: &[Edge], copies: usize, n_send: usize, n_recv: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let mut s = Vec::with_capacity(edges.len() * copies);
    let mut r = Vec::with_capacity(edges.len() * copies);
    for c in 0..copies {
        for &(a, b) in edges {
            s.push(a + c * n_send);
            r.push(b + c * n_recv);
        }
    }
    (Arc::new(s), Arc::new(r))
}

impl GraphIndex {
    pub fn new(hier: &GraphHierarchy, copies: usize) -> Self {
        let levels = (0..hier.num_levels())
            .map(|l| {
                let n = hier.node_count[l];
                let (mesh_send, mesh_recv) = split_edges(&hier.mesh_edges[l], copies, n, n);
                let (contact_send, contact_recv) = split_edges(&hier.contact_edges[l], copies, n, n);
                LevelIndex {
                    num_nodes: n * copies,
                    mesh_send,
                    mesh_recv,
                    contact_send,
                    contact_recv,
                    slot: Arc::new((0..copies).flat_map(|c| std::iter::repeat_n(c, n)).collect()),
                }
            })
            .collect();
        let inter = (0..hier.num_levels() - 1)
            .map(|l| {
                let (nf, nc) = (hier.node_count[l], hier.node_count[l + 1]);
                let (down_send, down_recv) = split_edges(&hier.down_edges[l], copies, nf, nc);
                let (up_send, up_recv) = split_edges(&hier.up_edges[l], copies, nc, nf);
                InterIndex { down_send, down_recv, up_send, up_recv }
            })
            .collect();
        GraphIndex { copies, levels, inter }
    }
}

/// Encoder inputs of a batch, already standardized.
#[derive(Debug, Clone)]
pub struct ModelInputs<T> {
    pub index: Arc<GraphIndex>,
    /// Per level node inputs; level 0 is `[one-hot, noisy, cond]`, coarser
    /// levels the one-hot node type of their root.
    pub nodes: Vec<Arc<Tensor<T>>>,
    pub mesh: Vec<Arc<Tensor<T>>>,
    pub contact: Vec<Arc<Tensor<T>>>,
    pub down: Vec<Arc<Tensor<T>>>,
    pub up: Vec<Arc<Tensor<T>>>,
    /// Fourier code of each batch member's denoising step, `[copies, 2F]`.
    pub k_codes: Arc<Tensor<T>>,
    /// Fourier code of each level's normalized depth, `[1, 2F]`.
    pub level_codes: Vec<Arc<Tensor<T>>>,
}

/// One batch member: current geometry, noisy channels, raw conditioning.
#[derive(Debug, Clone, Copy)]
pub struct SlotInput<'a> {
    /// `n0 * dim` positions defining relative-position edge features.
    pub positions: &'a [f64],
    /// `n0 * out_width` noisy values in normalized space.
    pub noisy: &'a [f64],
    /// `n0 * cond_width` conditioning values in physical units.
    pub cond: &'a [f64],
    pub k: usize,
}

/// Raw `[x^t, |x^t|, x^0, |x^0|]` (or `[x^t, |x^t|]` without rest geometry)
/// rows for directed edges `(sender, receiver)`, with `x = x_recv - x_send`.
pub fn edge_features(
    dim: usize,
    positions: &[f64],
    rest: Option<&[f64]>,
    origin_send: &[usize],
    origin_recv: &[usize],
    edges: &[Edge],
) -> Vec<f64> {
    let w = if rest.is_some() { 2 * dim + 2 } else { dim + 1 };
    let mut out = Vec::with_capacity(edges.len() * w);
    let push = |p: &[f64], s: usize, r: usize, out: &mut Vec<f64>| {
        let mut n2 = 0.0;
        for c in 0..dim {
            let x = p[r * dim + c] - p[s * dim + c];
            n2 += x * x;
            out.push(x);
        }
        out.push(n2.sqrt());
    };
    for &(s, r) in edges {
        let (s, r) = (origin_send[s], origin_recv[r]);
        push(positions, s, r, &mut out);
        if let Some(x0) = rest {
            push(x0, s, r, &mut out);
        }
    }
    out
}

fn one_hot(t: NodeType) -> [f64; NodeType::COUNT] {
    let mut v = [0.0; NodeType::COUNT];
    v[t.index()] = 1.0;
    v
}

/// Raw (unstandardized) edge inputs of all kinds for one geometry.
pub struct RawEdgeInputs {
    pub mesh: Vec<Vec<f64>>,
    pub contact: Vec<Vec<f64>>,
    pub down: Vec<Vec<f64>>,
    pub up: Vec<Vec<f64>>,
}

pub fn raw_edge_inputs(hier: &GraphHierarchy, mesh: &Mesh, positions: &[f64]) -> RawEdgeInputs {
    let dim = mesh.dim;
    let x0 = Some(mesh.positions0.as_slice());
    let o = &hier.node_origin;
    let nl = hier.num_levels();
    RawEdgeInputs {
        mesh: (0..nl).map(|l| edge_features(dim, positions, x0, &o[l], &o[l], &hier.mesh_edges[l])).collect(),
        contact: (0..nl).map(|l| edge_features(dim, positions, None, &o[l], &o[l], &hier.contact_edges[l])).collect(),
        down: (0..nl - 1).map(|l| edge_features(dim, positions, x0, &o[l], &o[l + 1], &hier.down_edges[l])).collect(),
        up: (0..nl - 1).map(|l| edge_features(dim, positions, x0, &o[l + 1], &o[l], &hier.up_edges[l])).collect(),
    }
}

fn stacked<T: Scalar>(width: usize, blocks: &[Vec<f64>], stats: &ChannelStats) -> Result<Arc<Tensor<T>>> {
    let rows: usize = blocks.iter().map(|b| b.len() / width).sum();
    let mut data = Vec::with_capacity(rows * width);
    for b in blocks {
        for row in b.chunks(width) {
            for (j, &x) in row.iter().enumerate() {
                data.push(T::of((x - stats.mean[j]) / stats.std[j]));
            }
        }
    }
    Ok(Arc::new(Tensor::matrix(rows, width, data)?))
}

/// Builds standardized encoder inputs for a batch of slots sharing one
/// hierarchy. `index` must have been built for `slots.len()` copies.
pub fn build_inputs<T: Scalar>(
    cfg: &AmpnConfig,
    hier: &GraphHierarchy,
    mesh: &Mesh,
    index: &Arc<GraphIndex>,
    stats: &FeatureStats,
    slots: &[SlotInput],
) -> Result<ModelInputs<T>> {
    stats.check(cfg)?;
    if index.copies != slots.len() {
        return Err(Error::structural(format!(
            "index built for {} copies, got {} slots",
            index.copies,
            slots.len()
        )));
    }
    if mesh.dim != cfg.dim {
        return Err(Error::Config(format!("model dim {} but mesh dim {}", cfg.dim, mesh.dim)));
    }
    let n0 = mesh.num_nodes();
    let (ow, cw, dim) = (cfg.out_width(), cfg.cond_width(), cfg.dim);
    for s in slots {
        if s.positions.len() != n0 * dim || s.noisy.len() != n0 * ow || s.cond.len() != n0 * cw {
            return Err(Error::structural("slot input arrays do not match mesh and model widths"));
        }
    }
    let nl = hier.num_levels();
    let in_w = cfg.node_in_width();
    let mut node0 = Vec::with_capacity(slots.len() * n0 * in_w);
    for s in slots {
        for i in 0..n0 {
            node0.extend(one_hot(mesh.node_type[i]).iter().map(|&x| T::of(x)));
            node0.extend(s.noisy[i * ow..(i + 1) * ow].iter().map(|&x| T::of(x)));
            for j in 0..cw {
                let x = s.cond[i * cw + j];
                node0.push(T::of((x - stats.cond.mean[j]) / stats.cond.std[j]));
            }
        }
    }
    let mut nodes = vec![Arc::new(Tensor::matrix(slots.len() * n0, in_w, node0)?)];
    for l in 1..nl {
        let mut data = Vec::new();
        for _ in slots {
            for &o in &hier.node_origin[l] {
                data.extend(one_hot(mesh.node_type[o]).iter().map(|&x| T::of(x)));
            }
        }
        nodes.push(Arc::new(Tensor::matrix(slots.len() * hier.node_count[l], NodeType::COUNT, data)?));
    }

    let raws: Vec<RawEdgeInputs> = slots.iter().map(|s| raw_edge_inputs(hier, mesh, s.positions)).collect();
    let gather = |f: fn(&RawEdgeInputs) -> &Vec<Vec<f64>>, l: usize| -> Vec<Vec<f64>> {
        raws.iter().map(|r| f(r)[l].clone()).collect()
    };
    let (ew, cwid) = (2 * dim + 2, dim + 1);
    let mut mesh_t = Vec::with_capacity(nl);
    let mut contact_t = Vec::with_capacity(nl);
    for l in 0..nl {
        mesh_t.push(stacked(ew, &gather(|r| &r.mesh, l), &stats.mesh)?);
        contact_t.push(stacked(cwid, &gather(|r| &r.contact, l), &stats.contact)?);
    }
    let mut down_t = Vec::with_capacity(nl - 1);
    let mut up_t = Vec::with_capacity(nl - 1);
    for l in 0..nl - 1 {
        down_t.push(stacked(ew, &gather(|r| &r.down, l), &stats.down)?);
        up_t.push(stacked(ew, &gather(|r| &r.up, l), &stats.up)?);
    }

    let f = cfg.fourier_bands;
    let mut kc = Vec::with_capacity(slots.len() * 2 * f);
    for s in slots {
        kc.extend(fourier_encode(s.k as f64, f)?.into_iter().map(T::of));
    }
    let top = nl - 1;
    let level_codes = (0..nl)
        .map(|l| {
            let lstar = if top == 0 { 0.0 } else { l as f64 / top as f64 };
            let code = fourier_encode(lstar, f)?.into_iter().map(T::of).collect();
            Ok(Arc::new(Tensor::matrix(1, 2 * f, code)?))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ModelInputs {
        index: index.clone(),
        nodes,
        mesh: mesh_t,
        contact: contact_t,
        down: down_t,
        up: up_t,
        k_codes: Arc::new(Tensor::matrix(slots.len(), 2 * f, kc)?),
        level_codes,
    })
}

/// Random model parameters perturbed around `store`, used by tests that need
/// non-trivial weights without training.
pub fn perturb_params<T: Scalar>(store: &mut ParamStore<T>, std: f64, seed: u64) {
    let mut rng = keyed(&[seed, DrawKind::Perturb as u64]);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data.iter_mut() {
            *x = *x + T::of(rng.gen_range(-std..std));
        }
    }
}
