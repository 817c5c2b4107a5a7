//! Sliding-window sampling of volumes larger than the model input.
//!
//! Every reverse step denoises all tiles from the same global state, then
//! fuses them with Hann weights. A voxel covered by a single tile takes that
//! tile's value unchanged.
//!
//! In coherent mode the deterministic part of each tile update is fused and
//! the stochastic term `sigma * z` is added afterwards from one global field,
//! so the injected noise is exactly the global field at every voxel. In
//! independent mode each tile draws its own noise before fusion, which shrinks
//! the noise variance wherever tiles overlap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{finish, predict_x0, step_parts, Denoiser, GuidanceSpec, NoiseSchedule, SampleMode, SampleOutput, TAG_INIT, TAG_STEP};
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::volume::{voxel_count, Dims, SignedVolume};

pub const HANN_FLOOR: f64 = 1e-3;
const TAG_TILE: &str = "tile-z";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub dims: Dims,
    pub tile: usize,
    pub overlap: usize,
    pub starts: [Vec<usize>; 3],
}

fn axis_starts(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut s = 0;
    while s + tile < dim {
        s = (s + stride).min(dim - tile);
        out.push(s);
    }
    out
}

pub fn plan_tiles(dims: Dims, tile: usize, overlap: usize) -> Result<TilePlan> {
    if tile == 0 {
        return Err(invalid("tile size must be positive"));
    }
    if overlap >= tile {
        return Err(invalid(format!("overlap {overlap} must be below tile size {tile}")));
    }
    if let Some(&d) = dims.iter().find(|&&d| d < tile) {
        return Err(invalid(format!("tile size {tile} exceeds volume extent {d}")));
    }
    let stride = tile - overlap;
    Ok(TilePlan {
        dims,
        tile,
        overlap,
        starts: dims.map(|d| axis_starts(d, tile, stride)),
    })
}

impl TilePlan {
    /// Tile origins in z-major order.
    pub fn origins(&self) -> Vec<Dims> {
        let mut out = Vec::new();
        for &z in &self.starts[0] {
            for &y in &self.starts[1] {
                for &x in &self.starts[2] {
                    out.push([z, y, x]);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.starts.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of tiles covering each voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let [_, h, w] = self.dims;
        let mut c = vec![0u32; voxel_count(self.dims)];
        let s = self.tile;
        for o in self.origins() {
            for z in o[0]..o[0] + s {
                for y in o[1]..o[1] + s {
                    let row = (z * h + y) * w;
                    c[row + o[2]..row + o[2] + s].iter_mut().for_each(|v| *v += 1);
                }
            }
        }
        c
    }

    /// Separable weights of the tile at `origin`, `S³` values z-major.
    pub fn weights(&self, origin: Dims) -> Vec<f64> {
        let s = self.tile;
        let base = hann(s);
        let axes: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                let mut h = base.clone();
                if origin[a] == 0 {
                    h[..self.overlap].fill(1.0);
                }
                if origin[a] + s == self.dims[a] {
                    h[s - self.overlap..].fill(1.0);
                }
                h
            })
            .collect();
        let mut out = Vec::with_capacity(s * s * s);
        for &wz in &axes[0] {
            for &wy in &axes[1] {
                for &wx in &axes[2] {
                    out.push(wz * wy * wx);
                }
            }
        }
        out
    }
}

/// `h(n) = 0.5 - 0.5 cos(2π(n + 0.5)/S)`, floored at [`HANN_FLOOR`].
pub fn hann(s: usize) -> Vec<f64> {
    (0..s)
        .map(|n| {
            let v = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (n as f64 + 0.5) / s as f64).cos();
            v.max(HANN_FLOOR)
        })
        .collect()
}

/// Weighted fusion of per-tile values. `tile_values[i]` belongs to
/// `plan.origins()[i]`.
pub fn fuse(plan: &TilePlan, tile_values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let origins = plan.origins();
    if tile_values.len() != origins.len() {
        return Err(invalid(format!(
            "{} tile results for {} tiles",
            tile_values.len(),
            origins.len()
        )));
    }
    let [_, h, w] = plan.dims;
    let n = voxel_count(plan.dims);
    let s = plan.tile;
    let mut v_acc = vec![0.0; n];
    let mut w_acc = vec![0.0; n];
    let mut count = vec![0u32; n];
    let mut single = vec![0.0; n];
    for (o, vals) in origins.iter().zip(tile_values) {
        let wts = plan.weights(*o);
        let mut i = 0;
        for z in 0..s {
            for y in 0..s {
                let row = ((o[0] + z) * h + o[1] + y) * w + o[2];
                for x in 0..s {
                    let g = row + x;
                    v_acc[g] += wts[i] * vals[i];
                    w_acc[g] += wts[i];
                    count[g] += 1;
                    single[g] = vals[i];
                    i += 1;
                }
            }
        }
    }
    if let Some(bad) = w_acc.iter().position(|&x| x <= 0.0) {
        return Err(Error::CoverageViolated(bad));
    }
    Ok((0..n)
        .map(|i| if count[i] == 1 { single[i] } else { v_acc[i] / w_acc[i] })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Coherent,
    Independent,
}

/// Source of the stochastic term of every reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseField {
    pub mode: NoiseMode,
    pub seed: u64,
    pub dims: Dims,
}

impl NoiseField {
    /// Global field for step `k`; a pure function of `(seed, k)`.
    pub fn global(&self, k: usize) -> Vec<f64> {
        rng::normal_field(self.seed, TAG_STEP, k as u64, voxel_count(self.dims))
    }

    /// Region of the global field.
    pub fn slice(&self, k: usize, origin: Dims, size: Dims) -> Vec<f64> {
        let field = SignedVolume::new(self.dims, self.global(k)).expect("field matches dims");
        field.extract(origin, size).into_values()
    }

    /// Fresh draw for tile `tile` at step `k` (independent mode).
    pub fn tile_draw(&self, k: usize, tile: usize, n: usize) -> Vec<f64> {
        let key = (k as u64) << 32 | tile as u64;
        rng::normal_field(self.seed, TAG_TILE, key, n)
    }
}

/// One reverse step over the whole volume.
#[allow(clippy::too_many_arguments)]
pub fn tiled_step(
    x: &SignedVolume,
    k: usize,
    model: &(dyn Denoiser + Sync),
    plan: &TilePlan,
    noise: &NoiseField,
    sched: &NoiseSchedule,
    mode: SampleMode,
    g: &GuidanceSpec,
) -> Result<SignedVolume> {
    let s = plan.tile;
    if model.dims() != [s; 3] {
        return Err(invalid(format!(
            "tile size {s} differs from model input {:?}",
            model.dims()
        )));
    }
    let origins = plan.origins();
    let timestep = sched.timestep(k);
    let parts: Vec<Result<(Vec<f64>, f64)>> = origins
        .par_iter()
        .map(|&o| {
            let tile = x.extract(o, [s; 3]);
            let x0 = predict_x0(model, &tile, timestep, g)?;
            let p = step_parts(tile.values(), &x0, k, mode, sched)?;
            Ok((p.mean, p.sigma))
        })
        .collect();
    let mut means = Vec::with_capacity(parts.len());
    let mut sigma = 0.0;
    for p in parts {
        let (m, sg) = p?;
        means.push(m);
        sigma = sg;
    }
    let values = match noise.mode {
        NoiseMode::Coherent => {
            let mut fused = fuse(plan, &means)?;
            if sigma != 0.0 {
                for (v, z) in fused.iter_mut().zip(noise.global(k)) {
                    *v += sigma * z;
                }
            }
            fused
        }
        NoiseMode::Independent => {
            if sigma != 0.0 {
                for (i, m) in means.iter_mut().enumerate() {
                    let z = noise.tile_draw(k, i, m.len());
                    for (v, zi) in m.iter_mut().zip(z) {
                        *v += sigma * zi;
                    }
                }
            }
            fuse(plan, &means)?
        }
    };
    SignedVolume::new(plan.dims, values)
}

/// Full reverse loop over a volume of `plan.dims`, then Otsu binarisation.
pub fn sample_tiled(
    model: &(dyn Denoiser + Sync),
    plan: &TilePlan,
    noise_mode: NoiseMode,
    sched: &NoiseSchedule,
    mode: SampleMode,
    g: &GuidanceSpec,
    seed: u64,
) -> Result<SampleOutput> {
    let coverage = plan.coverage();
    if let Some(bad) = coverage.iter().position(|&c| c == 0) {
        return Err(Error::CoverageViolated(bad));
    }
    let noise = NoiseField {
        mode: noise_mode,
        seed,
        dims: plan.dims,
    };
    let n = voxel_count(plan.dims);
    let mut x = SignedVolume::new(plan.dims, rng::normal_field(seed, TAG_INIT, 0, n))?;
    for k in (1..=sched.len()).rev() {
        x = tiled_step(&x, k, model, plan, &noise, sched, mode, g)?;
    }
    finish(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_examples() {
        let p = plan_tiles([512, 512, 512], 256, 64).unwrap();
        assert_eq!(p.starts[0], vec![0, 192, 256]);
        assert!(p.coverage().iter().all(|&c| c >= 1));
        assert_eq!(plan_tiles([8, 8, 8], 8, 3).unwrap().starts[1], vec![0]);
        assert_eq!(plan_tiles([24, 16, 8], 8, 0).unwrap().starts[0], vec![0, 8, 16]);
        assert!(plan_tiles([8, 8, 7], 8, 0).is_err());
        assert!(plan_tiles([8, 8, 8], 8, 8).is_err());
    }

    #[test]
    fn coverage_brute_force() {
        for (dims, s, o) in [([13, 20, 9], 8, 3), ([30, 17, 12], 12, 5), ([16, 16, 16], 8, 0)] {
            let p = plan_tiles(dims, s, o).unwrap();
            let c = p.coverage();
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let inside = |st: &Vec<usize>, v: usize| st.iter().filter(|&&a| a <= v && v < a + s).count();
                        let n = inside(&p.starts[0], z) * inside(&p.starts[1], y) * inside(&p.starts[2], x);
                        assert_eq!(c[(z * dims[1] + y) * dims[2] + x] as usize, n);
                        assert!(n >= 1);
                    }
                }
            }
        }
    }

    #[test]
    fn hann_shape() {
        for s in [2, 7, 8, 64] {
            let h = hann(s);
            for n in 0..s {
                assert!((h[n] - h[s - 1 - n]).abs() < 1e-15);
                assert!(h[n] >= HANN_FLOOR && h[n] <= 1.0);
            }
        }
        let h = hann(8);
        assert!((h[3] - h[4]).abs() < 1e-15 && h[3] > 0.9);
        assert!(h[0].powi(3) >= 1e-9);
    }

    #[test]
    fn fusion_of_equal_values_is_that_value() {
        let p = plan_tiles([13, 13, 13], 8, 3).unwrap();
        let vals: Vec<Vec<f64>> = p.origins().iter().map(|_| vec![0.75; 512]).collect();
        let fused = fuse(&p, &vals).unwrap();
        assert!(fused.iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }
}
