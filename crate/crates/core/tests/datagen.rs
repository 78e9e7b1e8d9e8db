use robin_core::datagen::*;
use robin_core::mesh::{Mesh, NodeType, Trajectory};
use robin_core::stats::ChannelStats;

fn small_beam() -> BeamSpec {
    BeamSpec {
        length: 2.0,
        height: 0.4,
        resolution: 0.2,
        force_increment: [0.0, -2e-4],
        num_steps: 6,
        ..BeamSpec::default()
    }
}

/// Unique undirected edges straight from the triangles.
fn springs_of(mesh: &Mesh) -> Vec<(usize, usize, f64)> {
    let mut e = Vec::new();
    for t in &mesh.elements {
        for a in 0..3 {
            let (i, j) = (t[a].min(t[(a + 1) % 3]), t[a].max(t[(a + 1) % 3]));
            e.push((i, j));
        }
    }
    e.sort_unstable();
    e.dedup();
    e.into_iter()
        .map(|(i, j)| {
            let p = &mesh.positions0;
            let l = ((p[2 * i] - p[2 * j]).powi(2) + (p[2 * i + 1] - p[2 * j + 1]).powi(2)).sqrt();
            (i, j, l)
        })
        .collect()
}

/// Elastic energy `sum k/2 (|d| - l)^2` with `k = kappa / l`, minus external work.
fn energy_and_grad(springs: &[(usize, usize, f64)], kappa: f64, x: &[f64], load: &[f64]) -> (f64, Vec<f64>) {
    let mut e = 0.0;
    let mut g = vec![0.0; x.len()];
    for &(i, j, l) in springs {
        let dx = x[2 * j] - x[2 * i];
        let dy = x[2 * j + 1] - x[2 * i + 1];
        let len = (dx * dx + dy * dy).sqrt();
        let k = kappa / l;
        e += 0.5 * k * (len - l).powi(2);
        let c = k * (len - l) / len;
        g[2 * j] += c * dx;
        g[2 * j + 1] += c * dy;
        g[2 * i] -= c * dx;
        g[2 * i + 1] -= c * dy;
    }
    for (k, f) in load.iter().enumerate() {
        e -= f * x[k];
        g[k] -= f;
    }
    (e, g)
}

/// Barzilai-Borwein gradient descent with clamped nodes held fixed.
fn minimize(mesh: &Mesh, kappa: f64, load: &[f64]) -> Vec<f64> {
    let springs = springs_of(mesh);
    let free: Vec<bool> = (0..mesh.num_nodes() * 2).map(|k| mesh.node_type[k / 2] == NodeType::Normal).collect();
    let project = |g: &mut Vec<f64>| g.iter_mut().zip(&free).for_each(|(v, f)| if !f { *v = 0.0 });
    let mut x = mesh.positions0.clone();
    let (_, mut g) = energy_and_grad(&springs, kappa, &x, load);
    project(&mut g);
    let mut step = 1e-2;
    for _ in 0..2_000_000 {
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-13 {
            break;
        }
        let x_new: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let (_, mut g_new) = energy_and_grad(&springs, kappa, &x_new, load);
        project(&mut g_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { (ss / sy).min(10.0) } else { 1e-2 };
        x = x_new;
        g = g_new;
    }
    x
}

fn tip_deflection(traj: &Trajectory, nodes: &[usize], f: usize) -> f64 {
    let x = traj.positions_at(f);
    let x0 = &traj.mesh.positions0;
    nodes.iter().map(|&i| x0[2 * i + 1] - x[2 * i + 1]).sum::<f64>() / nodes.len() as f64
}

#[test]
fn beam_equilibrium_matches_energy_minimization() {
    let spec = small_beam();
    let mesh = generate_beam_mesh(&spec).unwrap();
    let traj = simulate_beam(&mesh, &spec, &SolverSettings::default()).unwrap();
    assert!(traj.meta.warnings.is_empty(), "{:?}", traj.meta.warnings);
    let loaded = beam_force_nodes(&mesh, &spec);
    let mut load = vec![0.0; mesh.num_nodes() * 2];
    for &i in &loaded {
        load[2 * i] = spec.force_increment[0] * spec.num_steps as f64;
        load[2 * i + 1] = spec.force_increment[1] * spec.num_steps as f64;
    }
    let x = minimize(&mesh, spec.stiffness, &load);
    let oracle: f64 = loaded.iter().map(|&i| mesh.positions0[2 * i + 1] - x[2 * i + 1]).sum::<f64>() / loaded.len() as f64;
    let sim = tip_deflection(&traj, &loaded, spec.num_steps);
    assert!(oracle > 0.01, "load too small to be meaningful: {oracle}");
    assert!(((sim - oracle) / oracle).abs() < 1e-4, "simulated {sim} vs oracle {oracle}");
}

#[test]
fn tip_deflection_grows_monotonically() {
    let spec = small_beam();
    let mesh = generate_beam_mesh(&spec).unwrap();
    let traj = simulate_beam(&mesh, &spec, &SolverSettings::default()).unwrap();
    let loaded = beam_force_nodes(&mesh, &spec);
    let d: Vec<f64> = (0..=spec.num_steps).map(|f| tip_deflection(&traj, &loaded, f)).collect();
    assert!(d.windows(2).all(|w| w[1] > w[0]), "{d:?}");
}

#[test]
fn zero_load_is_static_and_handles_stay_put() {
    let spec = BeamSpec { force_increment: [0.0, 0.0], ..small_beam() };
    let mesh = generate_beam_mesh(&spec).unwrap();
    let traj = simulate_beam(&mesh, &spec, &SolverSettings::default()).unwrap();
    for f in 0..traj.num_frames {
        assert_eq!(traj.positions_at(f), mesh.positions0.as_slice());
        assert!(traj.stress_at(f).iter().all(|&s| s == 0.0));
    }
    let loaded = simulate_beam(&mesh, &small_beam(), &SolverSettings::default()).unwrap();
    for i in (0..mesh.num_nodes()).filter(|&i| mesh.node_type[i] == NodeType::Handle) {
        for f in 0..loaded.num_frames {
            for c in 0..2 {
                assert!((loaded.positions_at(f)[2 * i + c] - mesh.positions0[2 * i + c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn relaxation_never_raises_total_energy() {
    let spec = small_beam();
    let mesh = generate_beam_mesh(&spec).unwrap();
    let traj = simulate_beam(&mesh, &spec, &SolverSettings::default()).unwrap();
    let springs = springs_of(&mesh);
    let loaded = beam_force_nodes(&mesh, &spec);
    for f in 1..traj.num_frames {
        let mut load = vec![0.0; mesh.num_nodes() * 2];
        for &i in &loaded {
            load[2 * i] = spec.force_increment[0] * f as f64;
            load[2 * i + 1] = spec.force_increment[1] * f as f64;
        }
        let (before, _) = energy_and_grad(&springs, spec.stiffness, traj.positions_at(f - 1), &load);
        let (after, _) = energy_and_grad(&springs, spec.stiffness, traj.positions_at(f), &load);
        assert!(after <= before, "frame {f}: {after} > {before}");
    }
}

#[test]
fn notched_beams_are_resolved_and_stress_is_nonnegative() {
    let spec = BeamSpec {
        notches: vec![Notch { x: 1.0, depth: 0.2, width: 0.2 }],
        ..small_beam()
    };
    let mesh = generate_beam_mesh(&spec).unwrap();
    let plain = generate_beam_mesh(&small_beam()).unwrap();
    assert!(mesh.num_nodes() > plain.num_nodes());
    let traj = simulate_beam(&mesh, &spec, &SolverSettings::default()).unwrap();
    assert!(traj.stress.iter().all(|&s| s >= 0.0));
    assert!(traj.stress_at(spec.num_steps).iter().any(|&s| s > 0.0));
}

fn actuator_spec() -> ActuatorSpec {
    ActuatorSpec {
        plate_width: 2.0,
        plate_height: 0.6,
        actuator_x: 1.0,
        num_steps: 10,
        path_increment: [0.0, -0.01],
        ..ActuatorSpec::default()
    }
}

#[test]
fn actuator_follows_script_and_deformation_is_local() {
    let spec = actuator_spec();
    let mesh = generate_actuator_mesh(&spec).unwrap();
    let traj = simulate_actuator(&mesh, &spec, &SolverSettings::default()).unwrap();
    let n = mesh.num_nodes();
    let act: Vec<usize> = (0..n).filter(|&i| mesh.node_type[i] == NodeType::Actuator).collect();
    assert!(!act.is_empty());
    for f in 0..traj.num_frames {
        for &i in &act {
            for c in 0..2 {
                let want = mesh.positions0[2 * i + c] + spec.path_increment[c] * f as f64;
                assert!((traj.positions_at(f)[2 * i + c] - want).abs() < 1e-15);
                if f > 0 {
                    assert_eq!(traj.bc_disp_at(f)[2 * i + c], spec.path_increment[c]);
                }
            }
        }
    }
    let last = traj.positions_at(spec.num_steps);
    let disp = |i: usize| ((last[2 * i] - mesh.positions0[2 * i]).powi(2) + (last[2 * i + 1] - mesh.positions0[2 * i + 1]).powi(2)).sqrt();
    let plate: Vec<usize> = (0..n).filter(|&i| mesh.part_id[i] == 0).collect();
    let peak = *plate.iter().max_by(|&&a, &&b| disp(a).total_cmp(&disp(b))).unwrap();
    assert!(disp(peak) > 0.0);
    let near = act.iter().any(|&a| {
        ((last[2 * a] - last[2 * peak]).powi(2) + (last[2 * a + 1] - last[2 * peak + 1]).powi(2)).sqrt() < 2.0 * spec.contact_radius
    });
    assert!(near, "largest plate displacement is far from the actuator");
    let edges = frame0_contact_edges(&traj).unwrap();
    assert!(!edges.is_empty());
    assert!(edges.iter().all(|&(a, b)| mesh.part_id[a] != mesh.part_id[b]));
}

#[test]
fn static_actuator_gives_static_trajectory() {
    let spec = ActuatorSpec { path_increment: [0.0, 0.0], ..actuator_spec() };
    let mesh = generate_actuator_mesh(&spec).unwrap();
    let traj = simulate_actuator(&mesh, &spec, &SolverSettings::default()).unwrap();
    for f in 0..traj.num_frames {
        assert_eq!(traj.positions_at(f), mesh.positions0.as_slice());
    }
}

fn tiny_ranges() -> SpecRanges {
    SpecRanges {
        length: (1.6, 2.0),
        height: (0.4, 0.5),
        max_notches: 1,
        resolution: 0.2,
        ..SpecRanges::default()
    }
}

#[test]
fn dataset_is_deterministic_and_stats_use_train_only() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ranges = tiny_ranges();
    let m1 = generate_dataset(a.path(), DatasetKind::Beam, &ranges, [3, 2, 1], 4, 11).unwrap();
    let m2 = generate_dataset(b.path(), DatasetKind::Beam, &ranges, [3, 2, 1], 4, 11).unwrap();
    assert_eq!(m1, m2);
    for f in m1.files.iter().flatten() {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    assert_eq!(
        std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );

    let train = load_split(a.path(), 0).unwrap();
    let valid = load_split(a.path(), 1).unwrap();
    assert_eq!(raw_stats(&train).unwrap(), m1.train_stats);
    assert_ne!(raw_stats(&valid).unwrap(), m1.train_stats);

    let disp: Vec<f64> = train
        .iter()
        .flat_map(|t| (1..t.num_frames).flat_map(move |f| t.displacement_increment(f)))
        .collect();
    let z = m1.train_stats.displacement.normalize(&disp);
    let refit = ChannelStats::fit(&z, 2).unwrap();
    for c in 0..2 {
        assert!(refit.mean[c].abs() < 1e-10);
        assert!((refit.std[c] - 1.0).abs() < 1e-10);
    }
}

#[test]
fn empty_split_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    assert!(generate_dataset(d.path(), DatasetKind::Beam, &tiny_ranges(), [1, 0, 1], 4, 1).is_err());
    assert!("plate".parse::<DatasetKind>().is_err());
}
