//! Brute-force reference implementations shared by the integration tests
//! and the acceptance suite. Each one is written from the defining formula
//! with plain loops and no code from the library under test.

#![allow(dead_code)]

use std::collections::HashSet;

/// Global multi-head attention over `n = grid³` tokens with a per-head bias
/// looked up by relative grid offset.
#[allow(clippy::too_many_arguments)]
pub fn dense_attention(
    h: &[f64],
    grid: usize,
    c: usize,
    heads: usize,
    qkv_w: &[f64],
    qkv_b: &[f64],
    proj_w: &[f64],
    proj_b: &[f64],
    rel_bias: &[f64],
) -> Vec<f64> {
    let n = grid * grid * grid;
    let d = c / heads;
    let side = 2 * grid - 1;
    let lin = |x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize| -> Vec<f64> {
        let rows = x.len() / cin;
        let mut out = vec![0.0; rows * cout];
        for r in 0..rows {
            for o in 0..cout {
                let mut s = b[o];
                for i in 0..cin {
                    s += x[r * cin + i] * w[i * cout + o];
                }
                out[r * cout + o] = s;
            }
        }
        out
    };
    let qkv = lin(h, qkv_w, qkv_b, c, 3 * c);
    let coord = |i: usize| [i / (grid * grid), (i / grid) % grid, i % grid];
    let mut cat = vec![0.0; n * c];
    for hd in 0..heads {
        for i in 0..n {
            let ci = coord(i);
            let mut scores = vec![0.0; n];
            for (j, s) in scores.iter_mut().enumerate() {
                let cj = coord(j);
                let mut dot = 0.0;
                for e in 0..d {
                    dot += qkv[i * 3 * c + hd * d + e] * qkv[j * 3 * c + c + hd * d + e];
                }
                let row = ((ci[0] + grid - 1 - cj[0]) * side + (ci[1] + grid - 1 - cj[1])) * side
                    + (ci[2] + grid - 1 - cj[2]);
                *s = dot / (d as f64).sqrt() + rel_bias[row * heads + hd];
            }
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in 0..d {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / z * qkv[j * 3 * c + 2 * c + hd * d + e];
                }
                cat[i * c + hd * d + e] = acc;
            }
        }
    }
    lin(&cat, proj_w, proj_b, c, c)
}

/// Periodic pair-count S2 for one displacement.
pub fn s2_periodic(v: &[u8], dims: [usize; 3], d: [usize; 3]) -> f64 {
    let [nz, ny, nx] = dims;
    let mut hits = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let a = v[(z * ny + y) * nx + x];
                let b = v[(((z + d[0]) % nz) * ny + (y + d[1]) % ny) * nx + (x + d[2]) % nx];
                hits += usize::from(a == 1 && b == 1);
            }
        }
    }
    hits as f64 / (nz * ny * nx) as f64
}

/// Lineal path by testing every segment position along `axis`.
pub fn lineal_path(v: &[u8], dims: [usize; 3], axis: usize, r: usize) -> f64 {
    let mut ok = 0usize;
    let mut total = 0usize;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let start = [z, y, x];
                if start[axis] + r >= dims[axis] {
                    continue;
                }
                total += 1;
                let all = (0..=r).all(|k| {
                    let mut p = start;
                    p[axis] += k;
                    v[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] == 1
                });
                ok += usize::from(all);
            }
        }
    }
    ok as f64 / total as f64
}

/// Euler characteristic by enumerating every cell of every occupied cube in
/// doubled coordinates and counting distinct cells by dimension.
pub fn euler_cubes(v: &[u8], dims: [usize; 3]) -> i64 {
    let mut cells: HashSet<[usize; 3]> = HashSet::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if v[(z * dims[1] + y) * dims[2] + x] == 0 {
                    continue;
                }
                for a in 0..3 {
                    for b in 0..3 {
                        for c in 0..3 {
                            cells.insert([2 * z + a, 2 * y + b, 2 * x + c]);
                        }
                    }
                }
            }
        }
    }
    cells
        .iter()
        .map(|p| {
            let dim = p.iter().filter(|&&q| q % 2 == 1).count();
            if dim % 2 == 0 {
                1
            } else {
                -1
            }
        })
        .sum()
}

/// Otsu threshold by scanning all 255 split points and computing the
/// between-class variance from the voxels directly.
pub fn otsu_scan(field: &[f64]) -> (usize, Vec<u8>) {
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = (hi - lo) / 256.0;
    let bin = |v: f64| (((v - lo) / w) as usize).min(255);
    let centre = |b: usize| lo + (b as f64 + 0.5) * w;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for k in 0..255 {
        let (mut n0, mut n1, mut s0, mut s1) = (0.0, 0.0, 0.0, 0.0);
        for &v in field {
            let b = bin(v);
            if b <= k {
                n0 += 1.0;
                s0 += centre(b);
            } else {
                n1 += 1.0;
                s1 += centre(b);
            }
        }
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let n = n0 + n1;
        let var = (n0 / n) * (n1 / n) * (s0 / n0 - s1 / n1).powi(2);
        if var > best.0 * (1.0 + 1e-12) {
            best = (var, k);
        }
    }
    let k = best.1;
    (k, field.iter().map(|&v| u8::from(bin(v) > k)).collect())
}

/// One BGK collide-and-stream step on a fully periodic lattice with
/// bounce-back at solid neighbours, written as straight loops over
/// `f[((z * ny + y) * nx + x) * 19 + i]`.
pub fn lbm_step(f: &[f64], solid: &[bool], dims: [usize; 3], tau: f64) -> Vec<f64> {
    let e: [[i64; 3]; 19] = [
        [0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
        [1, 1, 0], [-1, -1, 0], [1, -1, 0], [-1, 1, 0], [1, 0, 1], [-1, 0, -1],
        [1, 0, -1], [-1, 0, 1], [0, 1, 1], [0, -1, -1], [0, 1, -1], [0, -1, 1],
    ];
    let w = |i: usize| match i {
        0 => 1.0 / 3.0,
        1..=6 => 1.0 / 18.0,
        _ => 1.0 / 36.0,
    };
    let opp = |i: usize| (0..19).find(|&j| (0..3).all(|a| e[j][a] == -e[i][a])).unwrap();
    let n = dims[0] * dims[1] * dims[2];
    let mut post = f.to_vec();
    for node in 0..n {
        if solid[node] {
            continue;
        }
        let cell = &f[node * 19..node * 19 + 19];
        let rho: f64 = cell.iter().sum();
        let mut u = [0.0; 3];
        for a in 0..3 {
            for i in 0..19 {
                u[a] += cell[i] * e[i][a] as f64;
            }
            u[a] /= rho;
        }
        for i in 0..19 {
            let eu: f64 = (0..3).map(|a| e[i][a] as f64 * u[a]).sum();
            let uu: f64 = u.iter().map(|v| v * v).sum();
            let feq = w(i) * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * uu);
            post[node * 19 + i] = cell[i] - (cell[i] - feq) / tau;
        }
    }
    let mut out = vec![0.0; f.len()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let node = (z * dims[1] + y) * dims[2] + x;
                if solid[node] {
                    continue;
                }
                for i in 0..19 {
                    let sz = (z as i64 - e[i][0]).rem_euclid(dims[0] as i64) as usize;
                    let sy = (y as i64 - e[i][1]).rem_euclid(dims[1] as i64) as usize;
                    let sx = (x as i64 - e[i][2]).rem_euclid(dims[2] as i64) as usize;
                    let src = (sz * dims[1] + sy) * dims[2] + sx;
                    out[node * 19 + i] = if solid[src] {
                        post[node * 19 + opp(i)]
                    } else {
                        post[src * 19 + i]
                    };
                }
            }
        }
    }
    out
}
