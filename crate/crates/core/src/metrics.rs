//! Morphological statistics of binary volumes.
//!
//! Two S2 estimators exist on purpose. [`s2_map`] and the curves built on it
//! are periodic and FFT-based; [`s2_shift`] is the non-wrapping shift form
//! averaged over the valid overlap, the same estimator the training loss
//! differentiates. Connectivity is 6-neighbour everywhere.

use std::collections::VecDeque;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::{voxel_count, BinaryVolume, Dims};

pub const CLEAN_MIN_VOXELS: usize = 34;
pub const OTSU_BINS: usize = 256;

pub fn porosity(v: &BinaryVolume) -> f64 {
    v.porosity()
}

fn fft_axis(data: &mut [Complex<f64>], dims: Dims, axis: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let n = dims[axis];
    if n == 1 {
        return;
    }
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = data[base + i * stride];
            }
            fft.process(&mut buf);
            for (i, b) in buf.iter().enumerate() {
                data[base + i * stride] = *b;
            }
        }
    }
}

/// Periodic autocorrelation of the pore indicator for every displacement,
/// laid out like the volume: entry `(dz, dy, dx)` is the fraction of voxels
/// `x` with both `x` and `x + d` (wrapped) in pore.
pub fn s2_map(v: &BinaryVolume) -> Vec<f64> {
    let dims = v.dims();
    let n = voxel_count(dims);
    let mut data: Vec<Complex<f64>> = v.voxels().iter().map(|&b| Complex::new(f64::from(b), 0.0)).collect();
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        fft_axis(&mut data, dims, axis, false, &mut planner);
    }
    for c in &mut data {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    for axis in 0..3 {
        fft_axis(&mut data, dims, axis, true, &mut planner);
    }
    // The inverse transform is unnormalised, so each entry is n times an
    // integer pair count; rounding removes the floating-point residue.
    data.iter().map(|c| (c.re / n as f64).round() / n as f64).collect()
}

fn min_image(d: usize, n: usize) -> f64 {
    let d = d as f64;
    let n = n as f64;
    if d > n / 2.0 {
        d - n
    } else {
        d
    }
}

/// Radially binned periodic S2 for `r = 0..=min(dims)/2` (bin width one
/// voxel, displacement lengths rounded to the nearest integer).
pub fn s2_radial(v: &BinaryVolume) -> Vec<f64> {
    let dims = v.dims();
    let map = s2_map(v);
    let rmax = dims.iter().min().copied().unwrap_or(1) / 2;
    let mut sum = vec![0.0; rmax + 1];
    let mut count = vec![0usize; rmax + 1];
    let mut i = 0;
    for z in 0..dims[0] {
        let dz = min_image(z, dims[0]);
        for y in 0..dims[1] {
            let dy = min_image(y, dims[1]);
            for x in 0..dims[2] {
                let dx = min_image(x, dims[2]);
                let r = (dz * dz + dy * dy + dx * dx).sqrt().round() as usize;
                if r <= rmax {
                    sum[r] += map[i];
                    count[r] += 1;
                }
                i += 1;
            }
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}

/// Periodic S2 along the three axes, averaged, for `r = 0..=min(dims)/2`.
pub fn s2_axes(v: &BinaryVolume) -> Vec<f64> {
    let dims = v.dims();
    let map = s2_map(v);
    let rmax = dims.iter().min().copied().unwrap_or(1) / 2;
    (0..=rmax)
        .map(|r| (map[r * dims[1] * dims[2]] + map[r * dims[2]] + map[r]) / 3.0)
        .collect()
}

/// Non-wrapping S2 at lag `r` along `axis` of a real field: the mean of
/// `p(x) p(x + r e_axis)` over positions where both lie inside the volume.
pub fn s2_shift_axis(p: &[f64], dims: Dims, r: usize, axis: usize) -> Result<f64> {
    if p.len() != voxel_count(dims) {
        return Err(Error::DimMismatch(format!("{} values for dims {dims:?}", p.len())));
    }
    if r >= dims[axis] {
        return Err(invalid(format!("lag {r} not below extent {} of axis {axis}", dims[axis])));
    }
    let stride: usize = dims[axis + 1..].iter().product();
    let n = dims[axis];
    let outer: usize = dims[..axis].iter().product();
    let mut sum = 0.0;
    for o in 0..outer {
        for i in 0..n - r {
            let a = (o * n + i) * stride;
            let b = a + r * stride;
            for s in 0..stride {
                sum += p[a + s] * p[b + s];
            }
        }
    }
    Ok(sum / (outer * (n - r) * stride) as f64)
}

/// [`s2_shift_axis`] averaged over the three axes.
pub fn s2_shift(p: &[f64], dims: Dims, r: usize) -> Result<f64> {
    let mut total = 0.0;
    for axis in 0..3 {
        total += s2_shift_axis(p, dims, r, axis)?;
    }
    Ok(total / 3.0)
}

/// Pore/solid interface faces, counted with periodic wrap.
pub fn interface_faces(v: &BinaryVolume) -> usize {
    let [d, h, w] = v.dims();
    let mut faces = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let a = v.get(z, y, x);
                faces += usize::from(a != v.get((z + 1) % d, y, x));
                faces += usize::from(a != v.get(z, (y + 1) % h, x));
                faces += usize::from(a != v.get(z, y, (x + 1) % w));
            }
        }
    }
    faces
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceEstimate {
    /// `-4 (S2(1) - S2(0))` from the radial curve, per voxel.
    pub from_slope: f64,
    /// Interface faces per voxel.
    pub from_faces: f64,
}

pub fn s2_slope_surface(v: &BinaryVolume) -> SurfaceEstimate {
    let s2 = s2_radial(v);
    let from_slope = if s2.len() > 1 { -4.0 * (s2[1] - s2[0]) } else { 0.0 };
    SurfaceEstimate {
        from_slope,
        from_faces: interface_faces(v) as f64 / v.len() as f64,
    }
}

/// Lineal path along `axis` for `r = 0..dims[axis]`: the fraction of valid
/// segment positions whose `r + 1` voxels are all pore.
pub fn lineal_path(v: &BinaryVolume, axis: usize) -> Result<Vec<f64>> {
    if axis > 2 {
        return Err(invalid(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    let dims = v.dims();
    let n = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    // runs[k] = number of maximal pore runs of length k
    let mut runs = vec![0usize; n + 1];
    let vox = v.voxels();
    for o in 0..outer {
        for s in 0..stride {
            let mut len = 0;
            for i in 0..n {
                if vox[(o * n + i) * stride + s] == 1 {
                    len += 1;
                } else if len > 0 {
                    runs[len] += 1;
                    len = 0;
                }
            }
            if len > 0 {
                runs[len] += 1;
            }
        }
    }
    let lines = outer * stride;
    Ok((0..n)
        .map(|r| {
            let segments: usize = (r + 1..=n).map(|k| runs[k] * (k - r)).sum();
            segments as f64 / (lines * (n - r)) as f64
        })
        .collect())
}

/// 6-connected labelling of the pore phase. Returns per-voxel labels
/// (`usize::MAX` for solid) and component sizes, labels in scan order.
pub fn label_pores(v: &BinaryVolume) -> (Vec<usize>, Vec<usize>) {
    let [d, h, w] = v.dims();
    let vox = v.voxels();
    let mut labels = vec![usize::MAX; vox.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..vox.len() {
        if vox[start] == 0 || labels[start] != usize::MAX {
            continue;
        }
        let label = sizes.len();
        let mut size = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if vox[j] == 1 && labels[j] == usize::MAX {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Remove pore clusters smaller than `min_volume` voxels. Returns the cleaned
/// volume and the number of voxels switched to solid.
pub fn clean_isolated(v: &BinaryVolume, min_volume: usize) -> (BinaryVolume, usize) {
    let (labels, sizes) = label_pores(v);
    let mut voxels = v.voxels().to_vec();
    let mut removed = 0;
    for (vox, &l) in voxels.iter_mut().zip(&labels) {
        if l != usize::MAX && sizes[l] < min_volume {
            *vox = 0;
            removed += 1;
        }
    }
    let cleaned = BinaryVolume::new(v.dims(), voxels).expect("same dims, binary values");
    (cleaned, removed)
}

/// Euler characteristic `V - E + F - C` of the union of closed unit cubes
/// occupied by pore voxels.
pub fn euler_characteristic(v: &BinaryVolume) -> i64 {
    let [d, h, w] = v.dims();
    let pore = |z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && v.get(z as usize, y as usize, x as usize)
    };
    let (mut verts, mut edges, mut faces) = (0i64, 0i64, 0i64);
    // Lattice points (z, y, x) in [0, d] x [0, h] x [0, w]. A vertex touches
    // the 8 voxels with corners at it; an edge starting at the point along an
    // axis touches 4 voxels; a face touches 2.
    for z in 0..=d as isize {
        for y in 0..=h as isize {
            for x in 0..=w as isize {
                let mut any = false;
                'v: for dz in -1..=0 {
                    for dy in -1..=0 {
                        for dx in -1..=0 {
                            if pore(z + dz, y + dy, x + dx) {
                                any = true;
                                break 'v;
                            }
                        }
                    }
                }
                verts += i64::from(any);
                // edges along z, y, x
                edges += i64::from((-1..=0).any(|a| (-1..=0).any(|b| pore(z, y + a, x + b))));
                edges += i64::from((-1..=0).any(|a| (-1..=0).any(|b| pore(z + a, y, x + b))));
                edges += i64::from((-1..=0).any(|a| (-1..=0).any(|b| pore(z + a, y + b, x))));
                // faces normal to z, y, x
                faces += i64::from(pore(z, y, x) || pore(z - 1, y, x));
                faces += i64::from(pore(z, y, x) || pore(z, y - 1, x));
                faces += i64::from(pore(z, y, x) || pore(z, y, x - 1));
            }
        }
    }
    // Edges and faces anchored at the far lattice boundary only exist when
    // the element lies inside the box; the pore() guard handles that because
    // an out-of-range anchor has no occupied neighbour on its outer side.
    verts - edges + faces - v.pore_count() as i64
}

/// Share of pore voxels in the largest 6-connected pore cluster.
pub fn connectivity_fraction(v: &BinaryVolume) -> f64 {
    let (_, sizes) = label_pores(v);
    let total: usize = sizes.iter().sum();
    if total == 0 {
        log::warn!("connectivity of a volume without pore voxels is reported as 0");
        return 0.0;
    }
    *sizes.iter().max().unwrap() as f64 / total as f64
}

/// Otsu binarisation over a 256-bin histogram spanning `[min, max]`.
///
/// Voxels in bins above the selected bin become pore. Returns the volume and
/// the threshold value (upper edge of the selected bin).
pub fn otsu(field: &[f64], dims: Dims) -> Result<(BinaryVolume, f64)> {
    if field.len() != voxel_count(dims) {
        return Err(Error::DimMismatch(format!("{} values for dims {dims:?}", field.len())));
    }
    if let Some(i) = field.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite value at voxel {i}")));
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        log::warn!("constant field, Otsu threshold undefined; returning all solid");
        return Ok((BinaryVolume::zeros(dims), lo));
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let bins: Vec<usize> = field.iter().map(|&v| otsu_bin(v, lo, width)).collect();
    let mut hist = [0usize; OTSU_BINS];
    for &b in &bins {
        hist[b] += 1;
    }
    let k = otsu_select(&hist, lo, width);
    let voxels = bins.iter().map(|&b| u8::from(b > k)).collect();
    Ok((BinaryVolume::new(dims, voxels)?, lo + (k + 1) as f64 * width))
}

pub(crate) fn otsu_bin(v: f64, lo: f64, width: f64) -> usize {
    (((v - lo) / width) as usize).min(OTSU_BINS - 1)
}

fn otsu_select(hist: &[usize; OTSU_BINS], lo: f64, width: f64) -> usize {
    let center = |i: usize| lo + (i as f64 + 0.5) * width;
    let total: usize = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| c as f64 * center(i)).sum();
    let (mut n0, mut s0) = (0usize, 0.0);
    let (mut best, mut best_k) = (f64::NEG_INFINITY, 0);
    for k in 0..OTSU_BINS - 1 {
        n0 += hist[k];
        s0 += hist[k] as f64 * center(k);
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / total as f64, n1 as f64 / total as f64);
        let (m0, m1) = (s0 / n0 as f64, (sum_all - s0) / n1 as f64);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best {
            best = var;
            best_k = k;
        }
    }
    best_k
}

/// Mean absolute voxel difference to the nearest volume in `reference`.
pub fn novelty_dmin(g: &BinaryVolume, reference: &[BinaryVolume]) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid("novelty needs at least one reference volume"));
    }
    let mut best = f64::INFINITY;
    for r in reference {
        if r.dims() != g.dims() {
            return Err(Error::DimMismatch(format!(
                "generated {:?} vs reference {:?}",
                g.dims(),
                r.dims()
            )));
        }
        let diff = g.voxels().iter().zip(r.voxels()).filter(|(a, b)| a != b).count();
        best = best.min(diff as f64 / g.len() as f64);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dims: Dims,
    pub porosity: f64,
    pub s2_radial: Vec<f64>,
    pub s2_axes: Vec<f64>,
    /// Lineal path along z, y and x.
    pub lineal_path: [Vec<f64>; 3],
    pub surface: SurfaceEstimate,
    pub euler_chi: i64,
    pub largest_cluster_fraction: f64,
    pub cleaned_voxel_count: usize,
}

/// All metrics of one volume. With `clean`, small pore clusters are removed
/// first and every statistic refers to the cleaned volume.
pub fn analyze(v: &BinaryVolume, clean: bool) -> MetricsReport {
    let (vol, removed) = if clean {
        clean_isolated(v, CLEAN_MIN_VOXELS)
    } else {
        (v.clone(), 0)
    };
    let lp = |axis| lineal_path(&vol, axis).expect("axis in range");
    MetricsReport {
        dims: vol.dims(),
        porosity: vol.porosity(),
        s2_radial: s2_radial(&vol),
        s2_axes: s2_axes(&vol),
        lineal_path: [lp(0), lp(1), lp(2)],
        surface: s2_slope_surface(&vol),
        euler_chi: euler_characteristic(&vol),
        largest_cluster_fraction: connectivity_fraction(&vol),
        cleaned_voxel_count: removed,
    }
}
