use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub(crate) struct AttnWeights {
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub rel_bias: Var,
}

/// Additive mask value for pairs that must not attend.
pub const MASK_VALUE: f64 = -1e9;

/// Row of the `(2M-1)³` bias table for every ordered token pair of a window,
/// flattened `[i * M³ + j]`.
pub fn relative_index(m: usize) -> Vec<usize> {
    let t = m * m * m;
    let side = 2 * m - 1;
    let coord = |i: usize| [i / (m * m), (i / m) % m, i % m];
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t {
        let a = coord(i);
        for j in 0..t {
            let b = coord(j);
            let d: Vec<usize> = (0..3).map(|k| a[k] + m - 1 - b[k]).collect();
            out.push((d[0] * side + d[1]) * side + d[2]);
        }
    }
    out
}

/// Mask `[W, M³, M³]` for attention on the cyclically shifted grid: tokens
/// that came from different regions of the unshifted grid get [`MASK_VALUE`].
pub fn shift_mask(grid: usize, m: usize) -> Tensor {
    let s = m / 2;
    let nw = grid / m;
    let t = m * m * m;
    let region = |c: usize| {
        if c + m < grid {
            0
        } else if c + s < grid {
            1
        } else {
            2
        }
    };
    let mut data = Vec::with_capacity(nw * nw * nw * t * t);
    for wz in 0..nw {
        for wy in 0..nw {
            for wx in 0..nw {
                let labels: Vec<usize> = (0..t)
                    .map(|i| {
                        let (z, y, x) = (wz * m + i / (m * m), wy * m + (i / m) % m, wx * m + i % m);
                        region(z) * 9 + region(y) * 3 + region(x)
                    })
                    .collect();
                for &a in &labels {
                    for &b in &labels {
                        data.push(if a == b { 0.0 } else { MASK_VALUE });
                    }
                }
            }
        }
    }
    Tensor::new(vec![nw * nw * nw, t, t], data).expect("consistent mask shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowGeometry {
    grid: usize,
    m: usize,
    rel_index: Vec<usize>,
    mask: Tensor,
}

impl WindowGeometry {
    pub fn new(grid: usize, m: usize) -> Self {
        Self {
            grid,
            m,
            rel_index: relative_index(m),
            mask: shift_mask(grid, m),
        }
    }

    pub fn shift(&self) -> usize {
        self.m / 2
    }

    pub fn windows(&self) -> usize {
        (self.grid / self.m).pow(3)
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// `[g, g, g, C]` grid to `[W, M³, C]` windows.
    pub fn partition(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.shape(x)[3];
        let (nw, m) = (self.grid / self.m, self.m);
        let v = g.reshape(x, &[nw, m, nw, m, nw, m, c])?;
        let v = g.permute(v, &[0, 2, 4, 1, 3, 5, 6])?;
        Ok(g.reshape(v, &[nw * nw * nw, m * m * m, c])?)
    }

    /// Inverse of [`WindowGeometry::partition`].
    pub fn merge(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.shape(x)[2];
        let (nw, m) = (self.grid / self.m, self.m);
        let v = g.reshape(x, &[nw, nw, nw, m, m, m, c])?;
        let v = g.permute(v, &[0, 3, 1, 4, 2, 5, 6])?;
        Ok(g.reshape(v, &[self.grid, self.grid, self.grid, c])?)
    }

    fn roll3(&self, g: &mut Graph, mut x: Var, shift: isize) -> Result<Var> {
        for axis in 0..3 {
            x = g.roll(x, axis, shift)?;
        }
        Ok(x)
    }

    /// Attention output `[N, C]` and the post-softmax weights `[W, heads, M³, M³]`.
    pub(crate) fn attention(&self, g: &mut Graph, h: Var, w: AttnWeights, heads: usize, shifted: bool) -> Result<(Var, Var)> {
        let c = g.shape(h)[1];
        let grid = self.grid;
        let (t, d) = (self.m.pow(3), c / heads);
        let nwin = self.windows();
        let shifted = shifted && self.shift() > 0;

        let mut x = g.reshape(h, &[grid, grid, grid, c])?;
        if shifted {
            x = self.roll3(g, x, -(self.shift() as isize))?;
        }
        let x = self.partition(g, x)?;

        let qkv = g.linear(x, w.qkv_w, w.qkv_b)?;
        let qkv = g.reshape(qkv, &[nwin, t, 3, heads, d])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let q = g.narrow(qkv, 0, 0, 1)?;
        let q = g.reshape(q, &[nwin, heads, t, d])?;
        let k = g.narrow(qkv, 0, 1, 1)?;
        let k = g.reshape(k, &[nwin, heads, t, d])?;
        let k = g.permute(k, &[0, 1, 3, 2])?;
        let v = g.narrow(qkv, 0, 2, 1)?;
        let v = g.reshape(v, &[nwin, heads, t, d])?;

        let scores = g.matmul(q, k)?;
        let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let bias = g.gather(w.rel_bias, &self.rel_index)?;
        let bias = g.permute(bias, &[1, 0])?;
        let bias = g.reshape(bias, &[heads, t, t])?;
        scores = g.add(scores, bias)?;
        if shifted {
            scores = g.masked_add(scores, &self.mask)?;
        }
        let attn = g.softmax(scores)?;
        let o = g.matmul(attn, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[nwin, t, c])?;
        let o = g.linear(o, w.proj_w, w.proj_b)?;

        let mut o = self.merge(g, o)?;
        if shifted {
            o = self.roll3(g, o, self.shift() as isize)?;
        }
        Ok((g.reshape(o, &[grid * grid * grid, c])?, attn))
    }
}
