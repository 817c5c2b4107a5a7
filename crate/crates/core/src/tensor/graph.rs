use std::cell::Cell;

use super::kernels::{self, Layout};
use super::{ShapeError, Tensor};

thread_local! {
    static FORWARD_MULS: Cell<u64> = const { Cell::new(0) };
}

/// Scalar multiplications performed by forward `matmul` calls on this thread
/// since the last reset.
pub fn forward_mul_count() -> u64 {
    FORWARD_MULS.with(Cell::get)
}

pub fn reset_forward_mul_count() {
    FORWARD_MULS.with(|c| c.set(0));
}

fn count_muls(n: u64) {
    FORWARD_MULS.with(|c| c.set(c.get() + n));
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, kind: MatMulKind },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Sin { a: Var },
    Cos { a: Var },
    Ln { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Sum { a: Var },
    Mean { a: Var },
    MaskedAdd { a: Var },
    Gather { table: Var, rows: Vec<usize> },
}

#[derive(Debug, Clone, Copy)]
enum MatMulKind {
    /// `[.., m, k] · [k, n]`, leading axes folded into rows.
    Shared { m: usize, k: usize, n: usize },
    /// `[B.., m, k] · [B.., k, n]`.
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order of the
/// computation; [`Graph::backward`] walks it once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` is a leaf that
    /// requires gradients and the root depends on it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Move the gradient out, leaving `None`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let g = self.grads.get_mut(v.0)?.take()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data: g,
        })
    }
}

/// Result of a suffix-broadcast check: how many times `b` repeats over `a`.
fn suffix_repeat(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize, ShapeError> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(ShapeError::new(
            op,
            format!("rhs shape {b:?} is not a trailing sub-shape of lhs {a:?}"),
        ));
    }
    Ok(a[..a.len() - b.len()].iter().product())
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044715;
    let u = C * (x + K * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that accumulates gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `b` is either rank 2 (shared across all leading axes of `a`) or has
    /// the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(ShapeError::new(
                "matmul",
                format!("operands must be at least rank 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(ShapeError::new(
                "matmul",
                format!("inner dims differ: {sa:?} · {sb:?} ({k} vs {kb})"),
            ));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let kind = if sb.len() == 2 {
            let rows = sa[..sa.len() - 1].iter().product();
            MatMulKind::Shared { m: rows, k, n }
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(ShapeError::new(
                    "matmul",
                    format!("batch dims differ: {sa:?} · {sb:?}"),
                ));
            }
            let batch = sa[..sa.len() - 2].iter().product();
            MatMulKind::Batched { batch, m, k, n }
        };
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let data = match kind {
            MatMulKind::Shared { m, k, n } => {
                count_muls((m * k * n) as u64);
                let mut c = vec![0.0; m * n];
                kernels::gemm(m, k, n, av, Layout::Normal, bv, Layout::Normal, &mut c);
                c
            }
            MatMulKind::Batched { batch, m, k, n } => {
                count_muls((batch * m * k * n) as u64);
                let mut c = vec![0.0; batch * m * n];
                for (i, ci) in c.chunks_mut(m * n).enumerate() {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        Layout::Normal,
                        &bv[i * k * n..(i + 1) * k * n],
                        Layout::Normal,
                        ci,
                    );
                }
                c
            }
        };
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(value, Op::MatMul { a, b, kind }, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, ShapeError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        suffix_repeat(op, sa, sb)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value.data;
        let data = av
            .data
            .chunks(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor {
            shape: av.shape.clone(),
            data,
        })
    }

    /// `a + b`, with `b` broadcast over leading axes when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// `a ∘ b`, with the same suffix broadcast as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// `a / b`, with the same suffix broadcast as [`Graph::add`].
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let value = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(value, Op::Div { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.map_value(a, |x| x * s);
        self.push(value, Op::Scale { a, s }, &[a])
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = &self.nodes[a.0].value;
        Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// GELU, tanh approximation with cubic coefficient 0.044715.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.map_value(a, |x| gelu_parts(x).0);
        self.push(value, Op::Gelu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map_value(a, sigmoid);
        self.push(value, Op::Sigmoid { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map_value(a, f64::tanh);
        self.push(value, Op::Tanh { a }, &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.map_value(a, f64::sin);
        self.push(value, Op::Sin { a }, &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.map_value(a, f64::cos);
        self.push(value, Op::Cos { a }, &[a])
    }

    /// Natural logarithm (loss terms only).
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.map_value(a, f64::ln);
        self.push(value, Op::Ln { a }, &[a])
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.map_value(a, |x| x.clamp(lo, hi));
        self.push(value, Op::Clamp { a, lo, hi }, &[a])
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, ShapeError> {
        let value = self.nodes[a.0].value.permuted(axes)?;
        Ok(self.push(
            value,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, ShapeError> {
        let first = parts
            .first()
            .ok_or_else(|| ShapeError::new("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(ShapeError::new("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(ShapeError::new(
                    "concat",
                    format!("part shape {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let len = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// One piece of a split: the sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, ShapeError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(ShapeError::new(
                "split",
                format!("range {start}..{} along axis {axis} out of bounds for {s:?}", start + len),
            ));
        }
        let data = kernels::narrow(&s, &self.nodes[a.0].value.data, axis, start, len);
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Narrow { a, axis, start }, &[a]))
    }

    /// Cyclic shift by `shift` positions along `axis` (positive moves
    /// elements towards higher indices). Built from split + concatenate.
    pub fn roll(&mut self, a: Var, axis: usize, shift: isize) -> Result<Var, ShapeError> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| ShapeError::new("roll", format!("axis {axis} out of range")))? as isize;
        let s = shift.rem_euclid(n) as usize;
        if s == 0 {
            return Ok(a);
        }
        let n = n as usize;
        let tail = self.narrow(a, axis, n - s, s)?;
        let head = self.narrow(a, axis, 0, n - s)?;
        self.concat(&[tail, head], axis)
    }

    // ---- normalisation / reductions -------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, ShapeError> {
        let av = &self.nodes[a.0].value;
        let w = *av
            .shape
            .last()
            .ok_or_else(|| ShapeError::new("softmax", "scalar input"))?;
        let mut data = av.data.clone();
        for row in data.chunks_mut(w) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Layer normalisation over the last axis with per-channel `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, ShapeError> {
        let xs = self.shape(x).to_vec();
        let c = *xs
            .last()
            .ok_or_else(|| ShapeError::new("layer_norm", "scalar input"))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(ShapeError::new(
                    "layer_norm",
                    format!("{name} shape {:?} must be [{c}]", self.shape(v)),
                ));
            }
        }
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let rows = xv.len() / c;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor { shape: xs, data };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = &self.nodes[a.0].value.data;
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    // ---- attention helpers ----------------------------------------------

    /// Add a constant additive mask of shape `[W, Q, K]` to scores of shape
    /// `[W, H, Q, K]`, repeating it over the head axis.
    pub fn masked_add(&mut self, a: Var, mask: &Tensor) -> Result<Var, ShapeError> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || mask.shape != [s[0], s[2], s[3]] {
            return Err(ShapeError::new(
                "masked_add",
                format!("mask {:?} does not fit scores {s:?}", mask.shape),
            ));
        }
        let block = s[2] * s[3];
        let mut data = self.nodes[a.0].value.data.clone();
        for (i, chunk) in data.chunks_mut(block).enumerate() {
            let w = i / s[1];
            for (v, m) in chunk.iter_mut().zip(&mask.data[w * block..(w + 1) * block]) {
                *v += m;
            }
        }
        let value = Tensor { shape: s, data };
        Ok(self.push(value, Op::MaskedAdd { a }, &[a]))
    }

    /// Select rows of a `[R, C]` table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var, ShapeError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(ShapeError::new("gather", format!("table must be rank 2, got {s:?}")));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(ShapeError::new("gather", format!("row {bad} out of range for {s:?}")));
        }
        let c = s[1];
        let tv = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&tv[r * c..(r + 1) * c]);
        }
        let value = Tensor {
            shape: vec![rows.len(), c],
            data,
        };
        Ok(self.push(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    // ---- composites -----------------------------------------------------

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("identical shapes")
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s).expect("identical shapes")
    }

    /// `x · w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k).expect("scalar broadcasts")
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, ShapeError> {
        let rv = &self.nodes[root.0].value;
        if rv.data.len() != 1 {
            return Err(ShapeError::new(
                "backward",
                format!("root must be scalar, has shape {:?}", rv.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
        }
        let shapes = self.nodes[..=root.0]
            .iter()
            .map(|n| n.value.shape.clone())
            .collect();
        // Only leaves that asked for gradients keep them.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, kind } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                match *kind {
                    MatMulKind::Shared { m, k, n } => {
                        if self.wants(*a) {
                            let mut ga = vec![0.0; m * k];
                            kernels::gemm(m, n, k, gy, Layout::Normal, bv, Layout::Transposed, &mut ga);
                            self.accumulate(grads, *a, ga);
                        }
                        if self.wants(*b) {
                            let mut gb = vec![0.0; k * n];
                            kernels::gemm(k, m, n, av, Layout::Transposed, gy, Layout::Normal, &mut gb);
                            self.accumulate(grads, *b, gb);
                        }
                    }
                    MatMulKind::Batched { batch, m, k, n } => {
                        if self.wants(*a) {
                            let mut ga = vec![0.0; batch * m * k];
                            for (i, gai) in ga.chunks_mut(m * k).enumerate() {
                                kernels::gemm(
                                    m,
                                    n,
                                    k,
                                    &gy[i * m * n..(i + 1) * m * n],
                                    Layout::Normal,
                                    &bv[i * k * n..(i + 1) * k * n],
                                    Layout::Transposed,
                                    gai,
                                );
                            }
                            self.accumulate(grads, *a, ga);
                        }
                        if self.wants(*b) {
                            let mut gb = vec![0.0; batch * k * n];
                            for (i, gbi) in gb.chunks_mut(k * n).enumerate() {
                                kernels::gemm(
                                    k,
                                    m,
                                    n,
                                    &av[i * m * k..(i + 1) * m * k],
                                    Layout::Transposed,
                                    &gy[i * m * n..(i + 1) * m * n],
                                    Layout::Normal,
                                    gbi,
                                );
                            }
                            self.accumulate(grads, *b, gb);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, gy.to_vec());
                }
                if self.wants(*b) {
                    let nb = self.val(*b).len();
                    let mut gb = vec![0.0; nb];
                    for chunk in gy.chunks(nb) {
                        for (g, x) in gb.iter_mut().zip(chunk) {
                            *g += x;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let nb = bv.len();
                if self.wants(*a) {
                    let ga = gy
                        .chunks(nb)
                        .flat_map(|c| c.iter().zip(bv).map(|(g, y)| g * y))
                        .collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; nb];
                    for (gc, ac) in gy.chunks(nb).zip(av.chunks(nb)) {
                        for ((g, x), acc) in gc.iter().zip(ac).zip(gb.iter_mut()) {
                            *acc += g * x;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let nb = bv.len();
                if self.wants(*a) {
                    let ga = gy
                        .chunks(nb)
                        .flat_map(|c| c.iter().zip(bv).map(|(g, y)| g / y))
                        .collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; nb];
                    for (gc, ac) in gy.chunks(nb).zip(av.chunks(nb)) {
                        for (((g, x), acc), y) in gc.iter().zip(ac).zip(gb.iter_mut()).zip(bv) {
                            *acc -= g * x / (y * y);
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale { a, s } => {
                self.accumulate(grads, *a, gy.iter().map(|g| g * s).collect());
            }
            Op::Reshape { a } => self.accumulate(grads, *a, gy.to_vec()),
            Op::Permute { a, axes } => {
                let inv = kernels::inverse_axes(axes);
                let (_, g) = kernels::permute(&node.value.shape, gy, &inv);
                self.accumulate(grads, *a, g);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape[*axis];
                    if self.wants(*p) {
                        let g = kernels::narrow(&node.value.shape, gy, *axis, start, len);
                        self.accumulate(grads, *p, g);
                    }
                    start += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let src = &self.nodes[a.0].value;
                let mut g = vec![0.0; src.data.len()];
                let len = node.value.shape[*axis];
                kernels::narrow_accumulate(&src.shape, &mut g, *axis, *start, len, gy);
                self.accumulate(grads, *a, g);
            }
            Op::Softmax { a } => {
                let y = &node.value.data;
                let w = *node.value.shape.last().unwrap();
                let mut g = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(w).zip(gy.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    g.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *node.value.shape.last().unwrap();
                let gam = self.val(*gamma);
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(gy.len());
                    for ((gr, hr), r) in gy.chunks(c).zip(xhat.chunks(c)).zip(rstd) {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            m1 += d;
                            m2 += d * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        gx.extend((0..c).map(|j| r * (gr[j] * gam[j] - m1 - hr[j] * m2)));
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; c];
                    for (gr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    let mut gb = vec![0.0; c];
                    for gr in gy.chunks(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *beta, gb);
                }
            }
            Op::Gelu { a } => {
                let g = self
                    .val(*a)
                    .iter()
                    .zip(gy)
                    .map(|(&x, g)| g * gelu_parts(x).1)
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Sigmoid { a } => {
                let g = node
                    .value
                    .data
                    .iter()
                    .zip(gy)
                    .map(|(y, g)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Tanh { a } => {
                let g = node
                    .value
                    .data
                    .iter()
                    .zip(gy)
                    .map(|(y, g)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Sin { a } => {
                let g = self.val(*a).iter().zip(gy).map(|(x, g)| g * x.cos()).collect();
                self.accumulate(grads, *a, g);
            }
            Op::Cos { a } => {
                let g = self.val(*a).iter().zip(gy).map(|(x, g)| -g * x.sin()).collect();
                self.accumulate(grads, *a, g);
            }
            Op::Ln { a } => {
                let g = self.val(*a).iter().zip(gy).map(|(x, g)| g / x).collect();
                self.accumulate(grads, *a, g);
            }
            Op::Clamp { a, lo, hi } => {
                let g = self
                    .val(*a)
                    .iter()
                    .zip(gy)
                    .map(|(x, g)| if x < lo || x > hi { 0.0 } else { *g })
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Sum { a } => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![gy[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![gy[0] / n as f64; n]);
            }
            Op::MaskedAdd { a } => self.accumulate(grads, *a, gy.to_vec()),
            Op::Gather { table, rows } => {
                let s = &self.nodes[table.0].value.shape;
                let c = s[1];
                let mut g = vec![0.0; s[0] * c];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        g[r * c + j] += gy[i * c + j];
                    }
                }
                self.accumulate(grads, *table, g);
            }
        }
    }
}
