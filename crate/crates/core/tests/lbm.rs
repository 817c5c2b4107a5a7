mod oracles;

use poredit::lbm::{channel, channel_permeability, poiseuille, run_permeability, Axis, LbmConfig, LbmState, CS2, Q};
use poredit::volume::{bernoulli, BinaryVolume};

fn channel_cfg(tau: f64, drho: f64) -> LbmConfig {
    LbmConfig {
        tau,
        axis: Axis::X,
        rho_in: 1.0 + drho / 2.0,
        rho_out: 1.0 - drho / 2.0,
        max_steps: 100_000,
        tol: 1e-9,
        ..LbmConfig::default()
    }
}

#[test]
fn single_step_matches_scalar_reference() {
    let v = bernoulli([4, 4, 4], 0.7, 3);
    let mut st = LbmState::new(&v, None, 1.0, 1.0);
    // perturb away from equilibrium
    let mut pops = st.populations();
    for (k, f) in pops.iter_mut().enumerate() {
        if *f != 0.0 {
            *f *= 1.0 + 0.05 * ((k as f64) * 0.37).sin();
        }
    }
    st.set_populations(&pops);
    let before = st.populations();
    let solid: Vec<bool> = v.voxels().iter().map(|&p| p == 0).collect();
    let want = oracles::lbm_step(&before, &solid, [4, 4, 4], 0.85);
    st.step(0.85, 1.0, 1.0).unwrap();
    for (a, b) in st.populations().iter().zip(&want) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn periodic_box_conserves_mass() {
    let v = BinaryVolume::from_fn([6, 5, 7], |_, _, _| true);
    let mut st = LbmState::new(&v, None, 1.0, 1.0);
    let mut pops = st.populations();
    for (k, f) in pops.iter_mut().enumerate() {
        *f *= 1.0 + 0.1 * ((k as f64) * 1.3).cos();
    }
    st.set_populations(&pops);
    let mut mass = st.total_mass();
    for _ in 0..50 {
        st.step(0.7, 1.0, 1.0).unwrap();
        let m = st.total_mass();
        assert!(((m - mass) / mass).abs() < 1e-12);
        mass = m;
    }
    st.set_populations(&pops);
}

#[test]
fn channel_matches_poiseuille() {
    let h = 20;
    let v = channel(h, 16, 1);
    let cfg = channel_cfg(1.0, 0.002);
    let r = run_permeability(&v, &cfg).unwrap();
    assert!(r.converged);
    let want = channel_permeability(h);
    let rel = (r.k_lattice - want).abs() / want;
    eprintln!("K = {} analytic {} rel {rel:.4} steps {}", r.k_lattice, want, r.steps);
    assert!(rel < 0.02);

    // first fluid node against the parabola half a link from the wall
    let mut st = LbmState::new(&v, Some(2), cfg.rho_in, cfg.rho_out);
    for _ in 0..r.steps {
        st.step(cfg.tau, cfg.rho_in, cfg.rho_out).unwrap();
    }
    let (rho, u) = st.macroscopic();
    let node = |y: usize, x: usize| y * 16 + x;
    let mu = rho[node(10, 8)] * cfg.viscosity();
    let g = (cfg.rho_in - cfg.rho_out) * CS2 / 15.0;
    let near = u[node(1, 8)][2];
    let want_near = poiseuille(0.5, h as f64, g, mu);
    assert!((near - want_near).abs() / want_near < 0.02, "{near} vs {want_near}");
}

#[test]
fn permeability_is_viscosity_independent() {
    let v = channel(20, 16, 1);
    let ks: Vec<f64> = [0.8, 1.0, 1.2]
        .iter()
        .map(|&tau| run_permeability(&v, &channel_cfg(tau, 0.002)).unwrap().k_lattice)
        .collect();
    eprintln!("{ks:?}");
    for k in &ks {
        assert!((k - ks[1]).abs() / ks[1] < 0.01);
    }
}

#[test]
fn darcy_linearity() {
    let v = channel(20, 16, 1);
    let a = run_permeability(&v, &channel_cfg(1.0, 0.001)).unwrap();
    let b = run_permeability(&v, &channel_cfg(1.0, 0.002)).unwrap();
    let ratio = b.mean_velocity / a.mean_velocity;
    eprintln!("ratio {ratio}");
    assert!((ratio - 2.0).abs() / 2.0 < 0.01);
}

#[test]
fn reversed_gradient_mirrors_flow() {
    let v = BinaryVolume::from_fn([3, 9, 10], |z, y, x| !(y == 0 || (z == 1 && y == 4 && (x == 4 || x == 5))));
    let run = |rho_a: f64, rho_b: f64| {
        let mut st = LbmState::new(&v, Some(2), rho_a, rho_b);
        for _ in 0..6000 {
            st.step(1.0, rho_a, rho_b).unwrap();
        }
        st.macroscopic().1
    };
    let fwd = run(1.001, 0.999);
    let rev = run(0.999, 1.001);
    for z in 0..3 {
        for y in 0..9 {
            for x in 0..10 {
                let a = fwd[(z * 9 + y) * 10 + x][2];
                let b = rev[(z * 9 + y) * 10 + (9 - x)][2];
                assert!((a + b).abs() < 1e-8, "({z},{y},{x}) {a} {b}");
            }
        }
    }
}

#[test]
fn no_driving_force_no_flow() {
    let v = bernoulli([8, 8, 8], 0.8, 5);
    let cfg = LbmConfig {
        axis: Axis::Z,
        rho_in: 1.0,
        rho_out: 1.0,
        max_steps: 500,
        ..LbmConfig::default()
    };
    match run_permeability(&v, &cfg) {
        Ok(r) => assert!(r.mean_velocity.abs() < 1e-10),
        Err(e) => panic!("{e}"),
    }
    let _ = Q;
}
