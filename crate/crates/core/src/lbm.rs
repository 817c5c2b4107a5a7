//! D3Q19 BGK lattice-Boltzmann solver for absolute permeability.
//!
//! Pore voxels are fluid nodes, solid voxels are walls with half-way
//! bounce-back. Flow is driven by prescribed densities on the two faces
//! normal to the flow axis (non-equilibrium bounce-back closure); the
//! transverse directions are periodic.
//!
//! For an inlet face with inward normal `n` along axis `a`, density `rho` and
//! zero tangential velocity, the unknown populations are those with
//! `e_a = n`:
//!
//! ```text
//! rho u_a = n (rho - S_0 - 2 S_out)
//! f_i     = f_opp(i) + 6 w_i rho (e_i . u) - sum_t e_it N_t
//! N_t     = 1/2 sum_{j: e_ja = 0} f_j e_jt
//! ```
//!
//! where `S_0` sums the populations tangential to the face and `S_out` the
//! known populations leaving the domain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::label_pores;
use crate::volume::{BinaryVolume, Dims};

pub const Q: usize = 19;
pub const CS2: f64 = 1.0 / 3.0;

/// Lattice velocities as `[dz, dy, dx]`.
pub const E: [[i32; 3]; Q] = [
    [0, 0, 0],
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
    [1, 1, 0],
    [-1, -1, 0],
    [1, -1, 0],
    [-1, 1, 0],
    [1, 0, 1],
    [-1, 0, -1],
    [1, 0, -1],
    [-1, 0, 1],
    [0, 1, 1],
    [0, -1, -1],
    [0, 1, -1],
    [0, -1, 1],
];

pub const W: [f64; Q] = [
    1.0 / 3.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
];

pub const OPP: [usize; Q] = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15, 18, 17];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(Axis::Z),
            "y" => Ok(Axis::Y),
            "x" => Ok(Axis::X),
            _ => Err(invalid(format!("axis must be z, y or x, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbmConfig {
    pub tau: f64,
    pub axis: Axis,
    pub rho_in: f64,
    pub rho_out: f64,
    pub max_steps: usize,
    pub tol: f64,
    pub check_interval: usize,
    /// Voxel edge for converting K to physical units.
    pub voxel_size: Option<f64>,
}

impl Default for LbmConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            axis: Axis::Z,
            rho_in: 1.001,
            rho_out: 0.999,
            max_steps: 200_000,
            tol: 1e-5,
            check_interval: 100,
            voxel_size: None,
        }
    }
}

impl LbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.5) {
            return Err(invalid(format!("tau must exceed 0.5, got {}", self.tau)));
        }
        if !(self.rho_out > 0.0 && self.rho_in >= self.rho_out) {
            return Err(invalid(format!(
                "need rho_in >= rho_out > 0, got {} and {}",
                self.rho_in, self.rho_out
            )));
        }
        if !(self.tol > 0.0) || self.check_interval == 0 {
            return Err(invalid("tol and check_interval must be positive"));
        }
        Ok(())
    }

    pub fn viscosity(&self) -> f64 {
        (self.tau - 0.5) / 3.0
    }
}

/// Equilibrium population `i`.
#[inline]
pub fn equilibrium(i: usize, rho: f64, u: [f64; 3]) -> f64 {
    let eu = E[i][0] as f64 * u[0] + E[i][1] as f64 * u[1] + E[i][2] as f64 * u[2];
    let uu = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    W[i] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * uu)
}

/// Density and velocity of one node.
#[inline]
pub fn moments(f: &[f64]) -> (f64, [f64; 3]) {
    let mut rho = 0.0;
    let mut m = [0.0; 3];
    for i in 0..Q {
        rho += f[i];
        for a in 0..3 {
            m[a] += f[i] * E[i][a] as f64;
        }
    }
    (rho, m.map(|v| v / rho))
}

/// Distributions on the fluid nodes only, node-major
/// (`f[fluid_index * 19 + i]`).
#[derive(Debug, Clone)]
pub struct LbmState {
    dims: Dims,
    solid: Vec<bool>,
    /// Lattice index of every fluid node.
    fluid: Vec<usize>,
    f: Vec<f64>,
    buf: Vec<f64>,
    /// Axis with pressure faces; `None` is fully periodic.
    flow_axis: Option<usize>,
    /// Streaming source slot of every population.
    pull: Vec<u32>,
    /// Fluid indices on the inlet and outlet slab.
    faces: [Vec<usize>; 2],
}

impl LbmState {
    /// Equilibrium at rest with density interpolated linearly from `rho_a`
    /// at the first slab to `rho_b` at the last slab of `axis` (or uniform
    /// `rho_a` when periodic).
    pub fn new(v: &BinaryVolume, flow_axis: Option<usize>, rho_a: f64, rho_b: f64) -> Self {
        let dims = v.dims();
        let solid: Vec<bool> = v.voxels().iter().map(|&p| p == 0).collect();
        let fluid: Vec<usize> = (0..solid.len()).filter(|&k| !solid[k]).collect();
        assert!(fluid.len() * Q <= u32::MAX as usize, "lattice too large");
        let mut f = vec![0.0; fluid.len() * Q];
        for (j, &node) in fluid.iter().enumerate() {
            let rho = match flow_axis {
                Some(a) if dims[a] > 1 => {
                    let c = coord(node, dims)[a] as f64 / (dims[a] - 1) as f64;
                    rho_a + (rho_b - rho_a) * c
                }
                _ => rho_a,
            };
            for i in 0..Q {
                f[j * Q + i] = equilibrium(i, rho, [0.0; 3]);
            }
        }
        let pull = pull_table(&solid, &fluid, dims, flow_axis);
        let faces = match flow_axis {
            Some(a) => {
                let on = |slab: usize| (0..fluid.len()).filter(|&j| coord(fluid[j], dims)[a] == slab).collect();
                [on(0), on(dims[a] - 1)]
            }
            None => [Vec::new(), Vec::new()],
        };
        Self {
            dims,
            solid,
            fluid,
            buf: f.clone(),
            f,
            flow_axis,
            pull,
            faces,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// All populations in lattice layout (`f[node * 19 + i]`), zero on
    /// solids.
    pub fn populations(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.solid.len() * Q];
        for (j, &node) in self.fluid.iter().enumerate() {
            out[node * Q..(node + 1) * Q].copy_from_slice(&self.f[j * Q..(j + 1) * Q]);
        }
        out
    }

    /// Overwrite the fluid populations from lattice layout; solid entries
    /// are ignored.
    pub fn set_populations(&mut self, full: &[f64]) {
        assert_eq!(full.len(), self.solid.len() * Q, "population layout");
        for (j, &node) in self.fluid.iter().enumerate() {
            self.f[j * Q..(j + 1) * Q].copy_from_slice(&full[node * Q..(node + 1) * Q]);
        }
    }

    pub fn is_solid(&self, node: usize) -> bool {
        self.solid[node]
    }

    /// Density and velocity per node; solids report `(0, 0)`.
    pub fn macroscopic(&self) -> (Vec<f64>, Vec<[f64; 3]>) {
        let n = self.solid.len();
        let mut rho = vec![0.0; n];
        let mut u = vec![[0.0; 3]; n];
        for (j, &node) in self.fluid.iter().enumerate() {
            let (r, v) = moments(&self.f[j * Q..(j + 1) * Q]);
            rho[node] = r;
            u[node] = v;
        }
        (rho, u)
    }

    pub fn total_mass(&self) -> f64 {
        self.f.iter().sum()
    }

    /// BGK relaxation on every fluid node. Returns false when a node's
    /// density or velocity is not finite.
    pub fn collide(&mut self, tau: f64) -> bool {
        let omega = 1.0 / tau;
        self.f
            .par_chunks_mut(Q)
            .map(|f| {
                let (rho, u) = moments(f);
                for (i, fi) in f.iter_mut().enumerate() {
                    *fi -= omega * (*fi - equilibrium(i, rho, u));
                }
                rho.is_finite() && u.iter().all(|x| x.is_finite())
            })
            .reduce(|| true, |a, b| a && b)
    }

    /// Pull streaming with half-way bounce-back. Populations entering through
    /// a pressure face are left for [`LbmState::apply_pressure_bc`].
    pub fn stream(&mut self) {
        let src = &self.f;
        self.buf
            .par_chunks_mut(Q)
            .zip(self.pull.par_chunks(Q))
            .for_each(|(out, from)| {
                for (o, &k) in out.iter_mut().zip(from) {
                    *o = src[k as usize];
                }
            });
        std::mem::swap(&mut self.f, &mut self.buf);
    }

    /// Prescribed density on the first (`rho_in`) and last (`rho_out`) slab
    /// of the flow axis.
    pub fn apply_pressure_bc(&mut self, rho_in: f64, rho_out: f64) {
        let Some(a) = self.flow_axis else { return };
        for (nodes, normal, rho) in [(&self.faces[0], 1i32, rho_in), (&self.faces[1], -1i32, rho_out)] {
            for &j in nodes {
                close_face(&mut self.f[j * Q..(j + 1) * Q], a, normal, rho);
            }
        }
    }

    /// One full update: collide, stream, boundary closure.
    pub fn step(&mut self, tau: f64, rho_in: f64, rho_out: f64) -> Result<()> {
        if !self.collide(tau) {
            return Err(Error::Numerical("non-finite distribution".into()));
        }
        self.stream();
        self.apply_pressure_bc(rho_in, rho_out);
        Ok(())
    }
}

/// Source slot of each fluid population after streaming: the upstream
/// node, the node's own opposite population when the upstream node is
/// solid, or the slot itself when it enters through a pressure face.
fn pull_table(solid: &[bool], fluid: &[usize], dims: Dims, flow: Option<usize>) -> Vec<u32> {
    let mut index = vec![u32::MAX; solid.len()];
    for (j, &node) in fluid.iter().enumerate() {
        index[node] = j as u32;
    }
    let mut pull = vec![0u32; fluid.len() * Q];
    pull.par_chunks_mut(Q).enumerate().for_each(|(j, out)| {
        let c = coord(fluid[j], dims);
        for i in 0..Q {
            let mut s = [0usize; 3];
            let mut outside = false;
            for a in 0..3 {
                let p = c[a] as i64 - E[i][a] as i64;
                let d = dims[a] as i64;
                if Some(a) == flow && (p < 0 || p >= d) {
                    outside = true;
                }
                s[a] = p.rem_euclid(d) as usize;
            }
            let from = (s[0] * dims[1] + s[1]) * dims[2] + s[2];
            out[i] = if outside {
                (j * Q + i) as u32
            } else if solid[from] {
                (j * Q + OPP[i]) as u32
            } else {
                index[from] * Q as u32 + i as u32
            };
        }
    });
    pull
}

fn coord(node: usize, dims: Dims) -> [usize; 3] {
    [node / (dims[1] * dims[2]), (node / dims[2]) % dims[1], node % dims[2]]
}

fn close_face(f: &mut [f64], a: usize, normal: i32, rho: f64) {
    let mut s0 = 0.0;
    let mut s_out = 0.0;
    let mut nt = [0.0; 3];
    for i in 0..Q {
        if E[i][a] == 0 {
            s0 += f[i];
            for (t, v) in nt.iter_mut().enumerate() {
                *v += 0.5 * f[i] * E[i][t] as f64;
            }
        } else if E[i][a] == -normal {
            s_out += f[i];
        }
    }
    let ua = normal as f64 * (rho - s0 - 2.0 * s_out) / rho;
    for i in 0..Q {
        if E[i][a] != normal {
            continue;
        }
        let mut v = f[OPP[i]] + 6.0 * W[i] * rho * E[i][a] as f64 * ua;
        for t in (0..3).filter(|&t| t != a) {
            v -= E[i][t] as f64 * nt[t];
        }
        f[i] = v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermeabilityResult {
    pub k_lattice: f64,
    pub k_physical: Option<f64>,
    /// Superficial axial velocity: averaged over all nodes, solids included.
    pub mean_velocity: f64,
    pub mean_density: f64,
    pub steps: usize,
    pub converged: bool,
    /// `(step, relative velocity change)` at every check.
    pub history: Vec<(usize, f64)>,
}

/// Pore phase connects the first and last slab of `axis`.
pub fn percolates(v: &BinaryVolume, axis: usize) -> bool {
    let dims = v.dims();
    let (labels, _) = label_pores(v);
    let last = dims[axis] - 1;
    let mut at_inlet = std::collections::HashSet::new();
    let mut at_outlet = std::collections::HashSet::new();
    for (node, &l) in labels.iter().enumerate() {
        if l == usize::MAX {
            continue;
        }
        let c = coord(node, dims)[axis];
        if c == 0 {
            at_inlet.insert(l);
        }
        if c == last {
            at_outlet.insert(l);
        }
    }
    at_inlet.intersection(&at_outlet).next().is_some()
}

fn check_flow_path(v: &BinaryVolume, axis: usize) -> Result<()> {
    if v.pore_count() == 0 {
        return Err(Error::NonPercolating("volume has no pore voxels".into()));
    }
    let dims = v.dims();
    let inlet_open = (0..v.len()).any(|n| coord(n, dims)[axis] == 0 && v.voxels()[n] == 1);
    if !inlet_open {
        return Err(Error::NoInletFlowPath);
    }
    if !percolates(v, axis) {
        return Err(Error::NonPercolating(format!("no pore path along axis {axis}")));
    }
    Ok(())
}

fn axial_field(u: &[[f64; 3]], a: usize) -> Vec<f64> {
    u.iter().map(|v| v[a]).collect()
}

/// Steady-state permeability along `cfg.axis` by Darcy's law.
///
/// The pressure difference acts across `dims[axis] - 1` links, the distance
/// between the two prescribed-density slabs, which is used as the length.
pub fn run_permeability(v: &BinaryVolume, cfg: &LbmConfig) -> Result<PermeabilityResult> {
    cfg.validate()?;
    let a = cfg.axis.index();
    let dims = v.dims();
    if dims[a] < 3 {
        return Err(invalid(format!("need at least 3 slabs along the flow axis, got {}", dims[a])));
    }
    check_flow_path(v, a)?;
    let mut st = LbmState::new(v, Some(a), cfg.rho_in, cfg.rho_out);
    let mut prev: Vec<[f64; 3]> = st.macroscopic().1;
    let mut history = Vec::new();
    let mut converged = false;
    let mut steps = 0;
    while steps < cfg.max_steps {
        st.step(cfg.tau, cfg.rho_in, cfg.rho_out)?;
        steps += 1;
        if steps % cfg.check_interval == 0 {
            let (_, u) = st.macroscopic();
            let (mut diff, mut norm) = (0.0, 0.0);
            for (p, q) in u.iter().zip(&prev) {
                for k in 0..3 {
                    diff += (p[k] - q[k]).powi(2);
                    norm += p[k] * p[k];
                }
            }
            let rel = if norm > 0.0 { (diff / norm).sqrt() } else { diff.sqrt() };
            history.push((steps, rel));
            log::debug!("lbm step {steps}: rel change {rel:.3e}");
            prev = u;
            if rel < cfg.tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!("lbm did not converge within {} steps", cfg.max_steps);
    }
    let (rho, u) = st.macroscopic();
    let n = rho.len() as f64;
    let mean_velocity = axial_field(&u, a).iter().sum::<f64>() / n;
    let fluid_rho: Vec<f64> = rho.iter().zip(&st.solid).filter(|(_, &s)| !s).map(|(&r, _)| r).collect();
    let mean_density = fluid_rho.iter().sum::<f64>() / fluid_rho.len() as f64;
    let mu = mean_density * cfg.viscosity();
    let dp = (cfg.rho_in - cfg.rho_out) * CS2;
    let length = (dims[a] - 1) as f64;
    let k_lattice = if dp > 0.0 { mu * mean_velocity * length / dp } else { 0.0 };
    Ok(PermeabilityResult {
        k_lattice,
        k_physical: cfg.voxel_size.map(|dx| k_lattice * dx * dx),
        mean_velocity,
        mean_density,
        steps,
        converged,
        history,
    })
}

/// Plane channel of `aperture` fluid layers along `y`, one solid layer
/// closing it (periodic in `y`), flow along `x`.
pub fn channel(aperture: usize, length: usize, depth: usize) -> BinaryVolume {
    BinaryVolume::from_fn([depth, aperture + 1, length], |_, y, _| y >= 1)
}

/// Darcy permeability of [`channel`] from the exact Poiseuille profile with
/// walls half a link outside the outermost fluid nodes.
pub fn channel_permeability(aperture: usize) -> f64 {
    let h = aperture as f64;
    h.powi(3) / (12.0 * (h + 1.0))
}

/// Poiseuille velocity at distance `s` from the wall for gradient `g`.
pub fn poiseuille(s: f64, h: f64, g: f64, mu: f64) -> f64 {
    g / (2.0 * mu) * s * (h - s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_is_consistent() {
        assert!((W.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..Q {
            assert_eq!(E[OPP[i]], E[i].map(|v| -v));
            assert_eq!(W[OPP[i]], W[i]);
        }
        for a in 0..3 {
            for b in 0..3 {
                let m: f64 = (0..Q).map(|i| W[i] * (E[i][a] * E[i][b]) as f64).sum();
                let want = if a == b { CS2 } else { 0.0 };
                assert!((m - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rest_state_is_fixed_point() {
        let v = BinaryVolume::from_fn([4, 5, 3], |_, _, _| true);
        let mut st = LbmState::new(&v, None, 1.0, 1.0);
        let before = st.populations();
        for _ in 0..5 {
            st.step(0.9, 1.0, 1.0).unwrap();
        }
        for (a, b) in before.iter().zip(st.populations()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn face_closure_hits_density() {
        let v = BinaryVolume::from_fn([6, 5, 5], |z, y, _| !(z == 0 && y == 0));
        let mut st = LbmState::new(&v, Some(0), 1.01, 0.99);
        for _ in 0..20 {
            st.step(1.0, 1.01, 0.99).unwrap();
        }
        let (rho, u) = st.macroscopic();
        for node in 0..rho.len() {
            let z = coord(node, [6, 5, 5])[0];
            if st.is_solid(node) {
                continue;
            }
            if z == 0 {
                assert!((rho[node] - 1.01).abs() < 1e-12);
                assert!(u[node][1].abs() < 1e-12 && u[node][2].abs() < 1e-12);
            }
            if z == 5 {
                assert!((rho[node] - 0.99).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flow_path_errors() {
        let cfg = LbmConfig {
            axis: Axis::X,
            ..LbmConfig::default()
        };
        let solid = BinaryVolume::zeros([4, 4, 4]);
        assert!(matches!(run_permeability(&solid, &cfg), Err(Error::NonPercolating(_))));
        let blocked_inlet = BinaryVolume::from_fn([4, 4, 4], |_, _, x| x > 0);
        assert!(matches!(run_permeability(&blocked_inlet, &cfg), Err(Error::NoInletFlowPath)));
        let wall = BinaryVolume::from_fn([4, 4, 4], |_, _, x| x != 2);
        assert!(matches!(run_permeability(&wall, &cfg), Err(Error::NonPercolating(_))));
        assert!(percolates(&channel(4, 6, 1), 2));
        assert!(!percolates(&channel(4, 6, 1), 1));
    }
}
