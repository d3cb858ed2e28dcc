use approx::assert_relative_eq;
use ldtail::swe::*;

const G5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
    (0.906_179_845_938_664, 0.236_926_885_056_189_08),
];

/// Two elements, walls on both sides, assembled element by element from the
/// weak form with a 5-point rule: h constant, v linear per element so every
/// integrand is a polynomial.
#[test]
fn two_elements_match_weak_form() {
    let dx = 2000.0;
    let mesh = Mesh::new(0.0, 2.0 * dx, 2).unwrap();
    let h0 = 40.0;
    let vn = [3.0, -1.5, -0.5, 2.0];
    let bv = [-45.0, -35.0, -38.0];
    let bathy = Bathymetry::new(&mesh, bv.to_vec(), bv.to_vec()).unwrap();
    let eps = 7.0;
    let op = DgOperator::new(mesh, &bathy, eps);
    let mut q = vec![h0; 4];
    q.extend_from_slice(&vn);
    let mut out = vec![0.0; 8];
    let mut ws = Workspace::new(&mesh);
    op.apply(&q, 0.0, &mut ws, &mut out).unwrap();

    let l = |xi: f64| [(1.0 - xi) / 2.0, (1.0 + xi) / 2.0];
    let dl = [-1.0 / dx, 1.0 / dx];
    let integ = |f: &dyn Fn(f64) -> f64| G5.iter().map(|&(x, w)| w * f(x)).sum::<f64>() * dx / 2.0;
    let mass = [[dx / 3.0, dx / 6.0], [dx / 6.0, dx / 3.0]];
    let solve = |r: [f64; 2]| {
        let det = mass[0][0] * mass[1][1] - mass[0][1] * mass[1][0];
        [(mass[1][1] * r[0] - mass[0][1] * r[1]) / det, (mass[0][0] * r[1] - mass[1][0] * r[0]) / det]
    };
    let u: Vec<f64> = vn.iter().map(|v| v / h0).collect();
    // û: zero on walls, average at the interior vertex
    let uhat = [0.0, 0.5 * (u[1] + u[2]), 0.0];
    // lifted gradient: ∫φℓ_i = −∫uℓ_i' + [ûℓ_i]
    let mut phi = [0.0; 4];
    for k in 0..2 {
        let ue = |xi: f64| l(xi)[0] * u[2 * k] + l(xi)[1] * u[2 * k + 1];
        let p = solve([-integ(&|x| ue(x) * dl[0]) - uhat[k], -integ(&|x| ue(x) * dl[1]) + uhat[k + 1]]);
        phi[2 * k] = p[0];
        phi[2 * k + 1] = p[1];
    }
    for i in 0..4 {
        assert!((ws.phi[i] - phi[i]).abs() <= 1e-12 * phi[i].abs().max(1e-6), "{} vs {}", ws.phi[i], phi[i]);
    }
    let c = vn.iter().map(|v| v.abs() / h0 + (GRAVITY * h0).sqrt()).fold(0.0, f64::max);
    let fnode = |i: usize| vn[i] * vn[i] / h0 + 0.5 * GRAVITY * h0 * h0 - eps * h0 * phi[i];
    // vertex fluxes: ghost (h, −v, φ) on the walls, LF in the interior
    let fh = [0.0, 0.5 * (vn[1] + vn[2]), 0.0];
    let fv = [fnode(0) - c * vn[0], 0.5 * (fnode(1) + fnode(2)) + 0.5 * c * (vn[1] - vn[2]), fnode(3) + c * vn[3]];
    for k in 0..2 {
        let (a, b) = (2 * k, 2 * k + 1);
        let v_at = |xi: f64| l(xi)[0] * vn[a] + l(xi)[1] * vn[b];
        let phi_at = |xi: f64| l(xi)[0] * phi[a] + l(xi)[1] * phi[b];
        let flux = |xi: f64| {
            let v = v_at(xi);
            v * v / h0 + 0.5 * GRAVITY * h0 * h0 - eps * h0 * phi_at(xi)
        };
        let bx = (bv[k + 1] - bv[k]) / dx;
        let dh = solve([integ(&|x| v_at(x) * dl[0]) + fh[k], integ(&|x| v_at(x) * dl[1]) - fh[k + 1]]);
        let dv = solve([
            integ(&|x| flux(x) * dl[0]) + fv[k] - integ(&|x| GRAVITY * h0 * bx * l(x)[0]),
            integ(&|x| flux(x) * dl[1]) - fv[k + 1] - integ(&|x| GRAVITY * h0 * bx * l(x)[1]),
        ]);
        let got = [out[a], out[b], out[4 + a], out[4 + b]];
        for (g, w) in got.iter().zip(dh.iter().chain(&dv)) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "element {k}: {g} vs {w}");
        }
    }
}

#[test]
fn lake_at_rest_full_run() {
    let mesh = Mesh::new(0.0, 400e3, 200).unwrap();
    let b0 = BathymetryProfile::tohoku().sample(&mesh);
    let bathy = Bathymetry::at_rest(&mesh, b0.clone()).unwrap();
    let cfg = SolverConfig::default();
    let b0n = mesh.vertex_to_nodes(&b0);
    let mut worst_h: f64 = 0.0;
    let mut worst_v: f64 = 0.0;
    let mut mass0 = None;
    let mut drift: f64 = 0.0;
    march(&mesh, &bathy, &cfg, |_, s, _| {
        for (h, b) in s.h().iter().zip(&b0n) {
            worst_h = worst_h.max((h + b).abs());
        }
        worst_v = worst_v.max(s.v().iter().fold(0.0, |a, v| a.max(v.abs())));
        let m = mesh.integrate_nodes(s.h());
        let m0 = *mass0.get_or_insert(m);
        drift = drift.max((m - m0).abs() / m0);
        Ok(())
    })
    .unwrap();
    assert!(worst_h <= 1e-8, "{worst_h}");
    assert!(worst_v <= 1e-8, "{worst_v}");
    assert!(drift <= 1e-8, "{drift}");
}

fn bump_bathymetry(mesh: &Mesh, depth: f64, center: f64, width: f64, amp: f64) -> Bathymetry {
    let b0 = vec![-depth; mesh.n_vertices()];
    let b = mesh.vertices().iter().map(|&x| -depth + amp * (-((x - center) / width).powi(2)).exp()).collect();
    Bathymetry::new(mesh, b, b0).unwrap()
}

#[test]
fn mass_conserved_with_perturbation() {
    let mesh = Mesh::new(0.0, 400e3, 200).unwrap();
    let b0 = BathymetryProfile::tohoku().sample(&mesh);
    let b: Vec<f64> = mesh
        .vertices()
        .iter()
        .zip(&b0)
        .map(|(&x, &b)| b + 2.0 * (-((x - 180e3) / 8e3).powi(2)).exp() - 1.0 * (-((x - 200e3) / 8e3).powi(2)).exp())
        .collect();
    let traj = solve_forward(&mesh, &Bathymetry::new(&mesh, b, b0).unwrap(), &SolverConfig::default()).unwrap();
    let m0 = traj.mass(0);
    let m1 = traj.mass(traj.grid.steps);
    assert!(((m1 - m0) / m0).abs() <= 1e-8);
    assert!(traj.levels.iter().all(|s| s.h().iter().all(|&h| h > 0.0)));
}

#[test]
fn mirror_symmetric_run() {
    let k = 60;
    let mesh = Mesh::new(0.0, 120e3, k).unwrap();
    let bathy = bump_bathymetry(&mesh, 100.0, 60e3, 5e3, 1.0);
    let cfg = SolverConfig { t_final: 1500.0, ..Default::default() };
    let traj = solve_forward(&mesh, &bathy, &cfg).unwrap();
    let n = mesh.n_nodes();
    let mut worst: f64 = 0.0;
    for s in &traj.levels {
        for i in 0..n {
            let j = n - 1 - i;
            worst = worst.max((s.h()[i] - s.h()[j]).abs()).max((s.v()[i] + s.v()[j]).abs());
        }
    }
    assert!(worst <= 1e-10, "{worst}");
    // the wave did move
    let last = traj.levels.last().unwrap();
    assert!(last.v().iter().any(|v| v.abs() > 1e-3));
}

fn eval_p1(mesh: &Mesh, nodal: &[f64], x: f64) -> f64 {
    let dx = mesh.dx();
    let k = (((x - mesh.a) / dx).floor() as usize).min(mesh.elements - 1);
    let t = (x - mesh.vertex(k)) / dx;
    (1.0 - t) * nodal[2 * k] + t * nodal[2 * k + 1]
}

#[test]
fn spatial_order_against_fine_reference() {
    let run = |k: usize, dt: f64| {
        let mesh = Mesh::new(0.0, 100e3, k).unwrap();
        let bathy = bump_bathymetry(&mesh, 100.0, 50e3, 8e3, 0.5);
        let cfg = SolverConfig { t_final: 240.0, dt: Some(dt), c_visc: 0.0, ..Default::default() };
        let traj = solve_forward(&mesh, &bathy, &cfg).unwrap();
        (mesh, traj.levels.last().unwrap().h().to_vec())
    };
    let dt = 0.2;
    let (fine_mesh, fine) = run(1280, dt);
    let err = |k: usize| {
        let (mesh, h) = run(k, dt);
        let mut e2 = 0.0;
        for e in 0..fine_mesh.elements {
            for &(xi, w) in &[(-0.577_350_269_189_625_8, 1.0), (0.577_350_269_189_625_8, 1.0)] {
                let x = fine_mesh.vertex(e) + (1.0 + xi) * 0.5 * fine_mesh.dx();
                let d = eval_p1(&mesh, &h, x) - eval_p1(&fine_mesh, &fine, x);
                e2 += w * 0.5 * fine_mesh.dx() * d * d;
            }
        }
        e2.sqrt()
    };
    let errs: Vec<f64> = [40, 80, 160].iter().map(|&k| err(k)).collect();
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    assert!(orders.iter().all(|&p| p >= 1.8), "errors {errs:?} orders {orders:?}");
}

#[test]
fn rk2_temporal_order_linear_advection() {
    // upwind advection on 16 periodic cells
    let n = 16;
    let dx = 1.0 / n as f64;
    let u0: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * (i as f64 + 0.5) * dx).sin()).collect();
    let rhs = |u: &[f64], out: &mut [f64]| {
        for i in 0..n {
            out[i] = -(u[i] - u[(i + n - 1) % n]) / dx;
        }
        Ok(())
    };
    let integrate = |dt: f64| {
        let steps = (0.5 / dt).round() as usize;
        let mut u = u0.clone();
        for _ in 0..steps {
            u = ssp_rk2_step(&u, dt, rhs).unwrap();
        }
        u
    };
    let reference = integrate(0.5 / 6400.0);
    let err = |dt: f64| {
        integrate(dt).iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let dts = [0.5 / 100.0, 0.5 / 200.0, 0.5 / 400.0];
    let errs: Vec<f64> = dts.iter().map(|&d| err(d)).collect();
    for w in errs.windows(2) {
        assert!((w[0] / w[1]).log2() >= 1.9, "{errs:?}");
    }
}

#[test]
fn zero_operator_leaves_state() {
    let u = vec![1.0, -2.0, 3.5];
    let out = ssp_rk2_step(&u, 0.3, |_, k| {
        k.iter_mut().for_each(|x| *x = 0.0);
        Ok(())
    })
    .unwrap();
    assert_eq!(out, u);
}

#[test]
fn flux_swap_antisymmetry() {
    for &(qm, qp, fm, fp, c) in &[(1.0, 2.0, 0.3, -4.0, 5.0), (-3.0, 7.5, 2.0, 2.5, 0.1)] {
        let a = numerical_flux(qm, qp, fm, fp, c, 1.0);
        let b = numerical_flux(qp, qm, fp, fm, c, -1.0);
        assert_eq!(a, -(-b));
        assert_relative_eq!(a, b, epsilon = 1e-15);
        assert_eq!(numerical_flux(qm, qm, fm, fm, c, 1.0), fm);
        assert_eq!(numerical_flux(qm, qp, fm, fp, 0.0, 1.0), 0.5 * (fm + fp));
    }
}

#[test]
fn observation_window_averages() {
    let mesh = Mesh::new(0.0, 10.0, 10).unwrap();
    let w = ObservationWindow::new(&mesh, 2.5, 6.25).unwrap();
    let ones = vec![1.0; mesh.n_vertices()];
    assert_relative_eq!(w.average_vertices(&mesh, &ones), 1.0, epsilon = 1e-14);
    // f(x) = 3x − 1 integrates to [1.5x² − x] / (d − c)
    let ramp: Vec<f64> = mesh.vertices().iter().map(|x| 3.0 * x - 1.0).collect();
    let exact = ((1.5 * 6.25f64.powi(2) - 6.25) - (1.5 * 2.5f64.powi(2) - 2.5)) / 3.75;
    assert_relative_eq!(w.average_vertices(&mesh, &ramp), exact, epsilon = 1e-12);
    let b0 = vec![-50.0; mesh.n_vertices()];
    let obs = Observer::new(&mesh, &w, &b0);
    assert_eq!(obs.observe(&vec![50.0; mesh.n_nodes()]), 0.0);
    assert_relative_eq!(obs.observe(&vec![51.0; mesh.n_nodes()]), 1.0, epsilon = 1e-12);
}

#[test]
fn viscosity_halves_with_refinement() {
    let cfg = SolverConfig::default();
    let a = cfg.viscosity(&Mesh::new(0.0, 400e3, 100).unwrap());
    let b = cfg.viscosity(&Mesh::new(0.0, 400e3, 200).unwrap());
    assert_relative_eq!(a, 2.0 * b, epsilon = 1e-12);
}

#[test]
fn explicit_step_beyond_stability_rejected() {
    let mesh = Mesh::new(0.0, 10e3, 10).unwrap();
    let b0 = vec![-100.0; mesh.n_vertices()];
    let cfg = SolverConfig { dt: Some(1e3), ..Default::default() };
    assert!(matches!(time_grid(&mesh, &b0, &cfg), Err(ldtail::Error::Cfl(_))));
    let cfg = SolverConfig { cfl: 0.5, ..Default::default() };
    assert!(matches!(time_grid(&mesh, &b0, &cfg), Err(ldtail::Error::Cfl(_))));
    let err = lax_friedrichs_constant(&[5.0, 1e-4], &[0.0, 0.0], 12.0).unwrap_err();
    assert!(matches!(err, ldtail::Error::Positivity { element: 0, .. }));
}
