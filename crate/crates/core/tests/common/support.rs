use std::sync::Arc;

use robin_core::ampn::{build_inputs, perturb_params, Ampn, AmpnConfig, FeatureStats, GraphIndex, SlotInput};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robin_core::autodiff::{Eager, ParamId, ParamStore, Recorder, Scalar, Tensor};
use robin_core::hierarchy::GraphHierarchy;
use robin_core::mesh::{Mesh, NodeType};

use super::{beam, beam_config, hierarchy, path_hierarchy, path_mesh, small_layers};

pub fn init_net<T: Scalar>(cfg: AmpnConfig, seed: u64) -> (Ampn, ParamStore<T>) {
    let mut store = ParamStore::new();
    let net = Ampn::init(cfg, &mut store, seed).unwrap();
    perturb_params(&mut store, 0.05, seed + 1);
    (net, store)
}

/// Propagates 0/1 dependency flags in place of values: an output entry is
/// flagged when any input entry it is computed from is flagged.
pub struct Support;

type Flags = Arc<Tensor<f64>>;

fn flags(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Flags {
    let data = (0..rows * cols).map(|i| f(i / cols, i % cols) as u8 as f64).collect();
    Arc::new(Tensor::new(vec![rows, cols], data).unwrap())
}

fn dims(t: &Tensor<f64>) -> (usize, usize) {
    t.dims2().unwrap()
}

fn row_any(t: &Tensor<f64>, i: usize) -> bool {
    t.row(i).iter().any(|&x| x != 0.0)
}

fn col_any(t: &Tensor<f64>, j: usize) -> bool {
    (0..t.rows()).any(|i| t.row(i)[j] != 0.0)
}

fn zip(a: &Flags, b: &Flags) -> Flags {
    let (r, c) = dims(a);
    flags(r, c, |i, j| a.row(i)[j] != 0.0 || b.row(i)[j] != 0.0)
}

impl Recorder<f64> for Support {
    type V = Flags;

    fn value<'a>(&'a self, v: &'a Flags) -> &'a Tensor<f64> {
        v
    }
    fn param(&mut self, store: &ParamStore<f64>, id: ParamId) -> Flags {
        let t = store.get(id);
        Arc::new(Tensor::zeros(&t.shape))
    }
    fn constant(&mut self, t: Tensor<f64>) -> Flags {
        Arc::new(Tensor::zeros(&t.shape))
    }
    fn constant_shared(&mut self, t: &Flags) -> Flags {
        t.clone()
    }
    fn matmul(&mut self, a: &Flags, b: &Flags) -> robin_core::Result<Flags> {
        let (r, _) = dims(a);
        let (_, c) = dims(b);
        Ok(flags(r, c, |i, j| row_any(a, i) || col_any(b, j)))
    }
    fn linear(&mut self, x: &Flags, w: &Flags, b: &Flags) -> robin_core::Result<Flags> {
        let m = self.matmul(x, w)?;
        self.add_row(&m, b)
    }
    fn add(&mut self, a: &Flags, b: &Flags) -> robin_core::Result<Flags> {
        Ok(zip(a, b))
    }
    fn sub(&mut self, a: &Flags, b: &Flags) -> robin_core::Result<Flags> {
        Ok(zip(a, b))
    }
    fn mul(&mut self, a: &Flags, b: &Flags) -> robin_core::Result<Flags> {
        Ok(zip(a, b))
    }
    fn add_row(&mut self, a: &Flags, row: &Flags) -> robin_core::Result<Flags> {
        let (r, c) = dims(a);
        Ok(flags(r, c, |i, j| a.row(i)[j] != 0.0 || row.data[j] != 0.0))
    }
    fn scale(&mut self, a: &Flags, _s: f64) -> Flags {
        a.clone()
    }
    fn concat(&mut self, parts: &[Flags], axis: usize) -> robin_core::Result<Flags> {
        let mut data = Vec::new();
        if axis == 0 {
            for p in parts {
                data.extend_from_slice(&p.data);
            }
            let c = parts[0].cols();
            return Ok(Arc::new(Tensor::new(vec![data.len() / c, c], data)?));
        }
        let r = parts[0].rows();
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Arc::new(Tensor::new(vec![r, data.len() / r.max(1)], data)?))
    }
    fn gather(&mut self, a: &Flags, idx: &Arc<Vec<usize>>) -> robin_core::Result<Flags> {
        Ok(flags(idx.len(), a.cols(), |i, j| a.row(idx[i])[j] != 0.0))
    }
    fn scatter_max(&mut self, a: &Flags, seg: &Arc<Vec<usize>>, n: usize) -> robin_core::Result<Flags> {
        Ok(flags(n, a.cols(), |s, j| seg.iter().enumerate().any(|(r, &t)| t == s && a.row(r)[j] != 0.0)))
    }
    fn layer_norm(&mut self, x: &Flags, g: &Flags, b: &Flags) -> robin_core::Result<Flags> {
        let (r, c) = dims(x);
        Ok(flags(r, c, |i, j| row_any(x, i) || g.data[j] != 0.0 || b.data[j] != 0.0))
    }
    fn silu(&mut self, a: &Flags) -> Flags {
        a.clone()
    }
    fn mse(&mut self, a: &Flags, b: &Flags) -> robin_core::Result<Flags> {
        let z = zip(a, b);
        Ok(self.sum(&z))
    }
    fn sum(&mut self, a: &Flags) -> Flags {
        Arc::new(Tensor::scalar(a.data.iter().any(|&x| x != 0.0) as u8 as f64))
    }
    fn mean(&mut self, a: &Flags) -> Flags {
        self.sum(a)
    }
}

/// Which level-0 outputs of a 60-node path depend on the noisy input of node 0.
pub fn influence(levels: usize) -> Vec<bool> {
    let n = 60;
    let mesh = path_mesh(n);
    let hier = path_hierarchy(n, levels);
    assert_eq!(hier.num_levels(), levels + 1);
    let cfg = AmpnConfig { levels, ..beam_config(8) };
    let (net, params) = init_net::<f64>(cfg.clone(), 4);
    let index = Arc::new(GraphIndex::new(&hier, 1));
    let slot = SlotInput {
        positions: &mesh.positions0,
        noisy: &vec![0.0; n * cfg.out_width()],
        cond: &vec![0.0; n * cfg.cond_width()],
        k: 2,
    };
    let stats = FeatureStats::identity(2, cfg.cond_width());
    let mut inputs = build_inputs::<f64>(&cfg, &hier, &mesh, &index, &stats, &[slot]).unwrap();
    let zero = |t: &Arc<Tensor<f64>>| Arc::new(Tensor::zeros(&t.shape));
    let node0 = &inputs.nodes[0];
    let (rows, width) = dims(node0);
    // Level-0 node input layout is [one-hot type, noisy, cond].
    let noisy_cols = NodeType::COUNT..NodeType::COUNT + cfg.out_width();
    inputs.nodes[0] = flags(rows, width, |i, j| i == 0 && noisy_cols.contains(&j));
    for t in inputs.nodes.iter_mut().skip(1) {
        *t = zero(t);
    }
    for group in [&mut inputs.mesh, &mut inputs.contact, &mut inputs.down, &mut inputs.up, &mut inputs.level_codes] {
        for t in group.iter_mut() {
            *t = zero(t);
        }
    }
    inputs.k_codes = zero(&inputs.k_codes);
    let mut rec = Support;
    let out = net.forward(&mut rec, &params, &inputs).unwrap();
    (0..n).map(|i| row_any(&out, i)).collect()
}

/// Renames level-0 nodes by `perm[old] = new`; coarse numbering is kept.
pub fn relabel(h: &GraphHierarchy, perm: &[usize]) -> GraphHierarchy {
    let mut out = h.clone();
    let both = |e: &Vec<(usize, usize)>| e.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    out.mesh_edges[0] = both(&h.mesh_edges[0]);
    out.contact_edges[0] = both(&h.contact_edges[0]);
    if h.num_levels() > 1 {
        out.down_edges[0] = h.down_edges[0].iter().map(|&(f, c)| (perm[f], c)).collect();
        out.up_edges[0] = h.up_edges[0].iter().map(|&(c, f)| (c, perm[f])).collect();
        let mut assign = vec![0; perm.len()];
        for (old, &a) in h.assign[0].iter().enumerate() {
            assign[perm[old]] = a;
        }
        out.assign[0] = assign;
    }
    for l in 1..h.num_levels() {
        out.node_origin[l] = h.node_origin[l].iter().map(|&o| perm[o]).collect();
    }
    out
}

pub fn permute_rows(data: &[f64], width: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (old, &new) in perm.iter().enumerate() {
        out[new * width..(new + 1) * width].copy_from_slice(&data[old * width..(old + 1) * width]);
    }
    out
}


pub struct Case {
    pub positions: Vec<f64>,
    pub noisy: Vec<f64>,
    pub cond: Vec<f64>,
    pub k: usize,
}

pub fn random_case(mesh: &Mesh, cfg: &AmpnConfig, seed: u64) -> Case {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mesh.num_nodes();
    Case {
        positions: mesh.positions0.iter().map(|x| x + rng.gen_range(-0.02..0.02)).collect(),
        noisy: (0..n * cfg.out_width()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        cond: (0..n * cfg.cond_width()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        k: 3,
    }
}

pub fn run<T: Scalar>(
    net: &Ampn,
    params: &ParamStore<T>,
    hier: &GraphHierarchy,
    mesh: &Mesh,
    cases: &[&Case],
) -> Vec<f64> {
    let index = Arc::new(GraphIndex::new(hier, cases.len()));
    let slots: Vec<SlotInput> = cases
        .iter()
        .map(|c| SlotInput { positions: &c.positions, noisy: &c.noisy, cond: &c.cond, k: c.k })
        .collect();
    let stats = FeatureStats::identity(net.config.dim, net.config.cond_width());
    let inputs = build_inputs::<T>(&net.config, hier, mesh, &index, &stats, &slots).unwrap();
    let mut ev = Eager;
    let out = net.forward(&mut ev, params, &inputs).unwrap();
    let v = ev.value(&out);
    assert_eq!(v.shape, vec![cases.len() * mesh.num_nodes(), net.config.out_width()]);
    v.to_f64()
}

/// Max deviation between outputs on a relabeled beam and relabeled outputs,
/// in 32-bit, with the largest output magnitude for scale.
pub fn permutation_deviation(seed: u64) -> (f64, f64) {
    let traj = beam(2.4, 0.6, 2, 1e-3);
    let mesh = &traj.mesh;
    let hier = hierarchy(mesh, 2);
    assert_eq!(hier.num_levels(), 3);
    let cfg = AmpnConfig { layers: small_layers(), ..beam_config(16) };
    let (net, params) = init_net::<f32>(cfg.clone(), 5);
    let case = random_case(mesh, &cfg, 9);
    let base = run(&net, &params, &hier, mesh, &[&case]);

    let n = mesh.num_nodes();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pmesh = Mesh::new(
        2,
        permute_rows(&mesh.positions0, 2, &perm),
        Vec::new(),
        {
            let mut t = vec![NodeType::Normal; n];
            for (old, &new) in perm.iter().enumerate() {
                t[new] = mesh.node_type[old];
            }
            t
        },
        vec![0; n],
    )
    .unwrap();
    let pcase = Case {
        positions: permute_rows(&case.positions, 2, &perm),
        noisy: permute_rows(&case.noisy, cfg.out_width(), &perm),
        cond: permute_rows(&case.cond, cfg.cond_width(), &perm),
        k: case.k,
    };
    let phier = relabel(&hier, &perm);
    let out = run(&net, &params, &phier, &pmesh, &[&pcase]);
    let expect = permute_rows(&base, cfg.out_width(), &perm);
    let dev = out.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (dev, base.iter().fold(0.0, |m, v| m.max(v.abs())))
}
