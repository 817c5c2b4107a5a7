//! Diffusion transformer over 3D patches with shifted-window attention.
//!
//! Tokens are the non-overlapping `p³` patches of the input cube in z-major
//! order; voxels inside a patch are flattened z-major as well. Blocks alternate
//! plain windows (even index) and cyclically shifted windows (odd index). The
//! condition vector is added to every token after the positional embedding
//! and also drives the adaptive layer norm of the output layer.

mod checkpoint;
mod window;

pub use checkpoint::{Checkpoint, CheckpointMeta, CondStats};
pub use window::{relative_index, shift_mask, WindowGeometry, MASK_VALUE};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{invalid, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};
use crate::volume::{Dims, SignedVolume};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: f64,
    pub cond_dropout: f64,
    /// Length of the optional S2 feature vector; 0 disables that branch.
    pub s2_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            patch: 8,
            embed_dim: 96,
            depth: 4,
            heads: 4,
            window: 4,
            mlp_ratio: 4.0,
            cond_dropout: 0.1,
            s2_features: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(invalid(m));
        if self.patch == 0 || self.input_size == 0 || self.input_size % self.patch != 0 {
            return fail(format!(
                "input_size {} must be a positive multiple of patch {}",
                self.input_size, self.patch
            ));
        }
        if self.window == 0 || self.grid() % self.window != 0 {
            return fail(format!(
                "latent edge {} must be a multiple of window {}",
                self.grid(),
                self.window
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.embed_dim % 2 != 0 {
            return fail(format!("embed_dim {} must be even", self.embed_dim));
        }
        if self.depth == 0 || self.depth % 2 != 0 {
            return fail(format!("depth {} must be a positive even number", self.depth));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return fail(format!("cond_dropout {} outside [0, 1)", self.cond_dropout));
        }
        Ok(())
    }

    /// Latent grid edge `input_size / patch`.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch.max(1)
    }

    pub fn tokens(&self) -> usize {
        self.grid().pow(3)
    }

    pub fn patch_volume(&self) -> usize {
        self.patch.pow(3)
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.input_size; 3]
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let c = self.embed_dim;
        let pv = self.patch_volume();
        let hid = self.mlp_hidden();
        let bias_rows = (2 * self.window - 1).pow(3);
        let embed_mlp = 2 * c * c + 2 * c;
        let s2 = if self.s2_features > 0 {
            self.s2_features * c + c + c * c + c
        } else {
            0
        };
        let block = 2 * c + (3 * c * c + 3 * c) + (c * c + c) + bias_rows * self.heads + 2 * c + (c * hid + hid) + (hid * c + c);
        (pv * c + c) + self.tokens() * c + c + 2 * embed_mlp + s2 + self.depth * block + (2 * c * c + 2 * c) + (c * pv + pv)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }
}

/// Named slots of one block, resolved once per bind.
#[derive(Debug, Clone, Copy)]
struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    rel_bias: Var,
    ln2_g: Var,
    ln2_b: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
}

#[derive(Debug, Clone, Copy)]
struct Mlp2 {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Parameters of a model placed on a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    patch_w: Var,
    patch_b: Var,
    pos: Var,
    null_emb: Var,
    t_mlp: Mlp2,
    phi_mlp: Mlp2,
    s2_mlp: Option<Mlp2>,
    blocks: Vec<BlockVars>,
    ada_w: Var,
    ada_b: Var,
    out_w: Var,
    out_b: Var,
}

impl Bound {
    /// Vars in parameter order, for collecting gradients.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn null_embedding(&self) -> Var {
        self.null_emb
    }
}

/// Condition presented to the network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Condition {
    /// Training-schedule timestep.
    pub t: usize,
    /// z-score normalised target porosity.
    pub phi_norm: f64,
    pub s2: Option<Vec<f64>>,
}

/// Sinusoidal embedding: component `2i` is `sin(s / 10000^(2i/d))`,
/// component `2i + 1` the matching cosine.
pub fn embed_scalar(s: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = (s / freq).sin();
        out[2 * i + 1] = (s / freq).cos();
    }
    out
}

/// Draw the condition-dropout flag.
pub fn sample_drop<R: Rng>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoreDiT {
    config: ModelConfig,
    params: Params,
    geometry: WindowGeometry,
}

impl PoreDiT {
    /// Fresh model with seeded initialisation, stored at `f32` precision.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init", 0);
        let mut normal = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    INIT_STD * z
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("positive extents")
        };
        let c = config.embed_dim;
        let pv = config.patch_volume();
        let hid = config.mlp_hidden();
        let rows = (2 * config.window - 1).pow(3);
        let mut p = Params {
            names: Vec::new(),
            tensors: Vec::new(),
        };
        p.push("patch_w", normal(&[pv, c]));
        p.push("patch_b", Tensor::zeros(&[c]));
        p.push("pos", normal(&[config.tokens(), c]));
        p.push("null_emb", normal(&[c]));
        let mut branches = vec![("t_mlp", c), ("phi_mlp", c)];
        if config.s2_features > 0 {
            branches.push(("s2_mlp", config.s2_features));
        }
        for (name, fan_in) in branches {
            p.push(format!("{name}.w1"), normal(&[fan_in, c]));
            p.push(format!("{name}.b1"), Tensor::zeros(&[c]));
            p.push(format!("{name}.w2"), normal(&[c, c]));
            p.push(format!("{name}.b2"), Tensor::zeros(&[c]));
        }
        for l in 0..config.depth {
            let b = |s: &str| format!("blocks.{l}.{s}");
            p.push(b("ln1_g"), Tensor::full(&[c], 1.0));
            p.push(b("ln1_b"), Tensor::zeros(&[c]));
            p.push(b("qkv_w"), normal(&[c, 3 * c]));
            p.push(b("qkv_b"), Tensor::zeros(&[3 * c]));
            p.push(b("proj_w"), normal(&[c, c]));
            p.push(b("proj_b"), Tensor::zeros(&[c]));
            p.push(b("rel_bias"), normal(&[rows, config.heads]));
            p.push(b("ln2_g"), Tensor::full(&[c], 1.0));
            p.push(b("ln2_b"), Tensor::zeros(&[c]));
            p.push(b("fc1_w"), normal(&[c, hid]));
            p.push(b("fc1_b"), Tensor::zeros(&[hid]));
            p.push(b("fc2_w"), normal(&[hid, c]));
            p.push(b("fc2_b"), Tensor::zeros(&[c]));
        }
        p.push("final.ada_w", normal(&[c, 2 * c]));
        let mut ada_b = vec![0.0; 2 * c];
        ada_b[..c].fill(1.0);
        p.push("final.ada_b", Tensor::from_vec(ada_b));
        p.push("final.out_w", normal(&[c, pv]));
        p.push("final.out_b", Tensor::zeros(&[pv]));
        p.round_to_f32();
        Self::from_params(config, p)
    }

    /// Assemble a model from named tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let reference = Self::layout(&config);
        if reference.len() != params.len() {
            return Err(crate::Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for ((name, shape), (have, t)) in reference.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "tensor {have} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let geometry = WindowGeometry::new(config.grid(), config.window);
        Ok(Self {
            config,
            params,
            geometry,
        })
    }

    /// Names and shapes of all parameters for `config`, in order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let c = config.embed_dim;
        let pv = config.patch_volume();
        let hid = config.mlp_hidden();
        let rows = (2 * config.window - 1).pow(3);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("patch_w".into(), vec![pv, c]),
            ("patch_b".into(), vec![c]),
            ("pos".into(), vec![config.tokens(), c]),
            ("null_emb".into(), vec![c]),
        ];
        let mut branches = vec![("t_mlp", c), ("phi_mlp", c)];
        if config.s2_features > 0 {
            branches.push(("s2_mlp", config.s2_features));
        }
        for (name, fan_in) in branches {
            out.push((format!("{name}.w1"), vec![fan_in, c]));
            out.push((format!("{name}.b1"), vec![c]));
            out.push((format!("{name}.w2"), vec![c, c]));
            out.push((format!("{name}.b2"), vec![c]));
        }
        for l in 0..config.depth {
            for (s, shape) in [
                ("ln1_g", vec![c]),
                ("ln1_b", vec![c]),
                ("qkv_w", vec![c, 3 * c]),
                ("qkv_b", vec![3 * c]),
                ("proj_w", vec![c, c]),
                ("proj_b", vec![c]),
                ("rel_bias", vec![rows, config.heads]),
                ("ln2_g", vec![c]),
                ("ln2_b", vec![c]),
                ("fc1_w", vec![c, hid]),
                ("fc1_b", vec![hid]),
                ("fc2_w", vec![hid, c]),
                ("fc2_b", vec![c]),
            ] {
                out.push((format!("blocks.{l}.{s}"), shape));
            }
        }
        out.push(("final.ada_w".into(), vec![c, 2 * c]));
        out.push(("final.ada_b".into(), vec![2 * c]));
        out.push(("final.out_w".into(), vec![c, pv]));
        out.push(("final.out_b".into(), vec![pv]));
        out
    }

    pub fn geometry(&self) -> &WindowGeometry {
        &self.geometry
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Place all parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        self.bind_vars(&vars)
    }

    /// Use already-placed leaves, one per parameter in order.
    pub fn bind_vars(&self, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), self.params.len(), "one var per parameter");
        let vars = vars.to_vec();
        let at = |name: &str| vars[self.params.position(name).expect("known parameter")];
        let mlp = |name: &str| Mlp2 {
            w1: at(&format!("{name}.w1")),
            b1: at(&format!("{name}.b1")),
            w2: at(&format!("{name}.w2")),
            b2: at(&format!("{name}.b2")),
        };
        let blocks = (0..self.config.depth)
            .map(|l| {
                let b = |s: &str| at(&format!("blocks.{l}.{s}"));
                BlockVars {
                    ln1_g: b("ln1_g"),
                    ln1_b: b("ln1_b"),
                    qkv_w: b("qkv_w"),
                    qkv_b: b("qkv_b"),
                    proj_w: b("proj_w"),
                    proj_b: b("proj_b"),
                    rel_bias: b("rel_bias"),
                    ln2_g: b("ln2_g"),
                    ln2_b: b("ln2_b"),
                    fc1_w: b("fc1_w"),
                    fc1_b: b("fc1_b"),
                    fc2_w: b("fc2_w"),
                    fc2_b: b("fc2_b"),
                }
            })
            .collect();
        Bound {
            patch_w: at("patch_w"),
            patch_b: at("patch_b"),
            pos: at("pos"),
            null_emb: at("null_emb"),
            t_mlp: mlp("t_mlp"),
            phi_mlp: mlp("phi_mlp"),
            s2_mlp: (self.config.s2_features > 0).then(|| mlp("s2_mlp")),
            blocks,
            ada_w: at("final.ada_w"),
            ada_b: at("final.ada_b"),
            out_w: at("final.out_w"),
            out_b: at("final.out_b"),
            vars,
        }
    }

    fn mlp2(g: &mut Graph, m: Mlp2, x: Var) -> Result<Var> {
        let x = g.reshape(x, &[1, g.shape(x)[0]])?;
        let h = g.linear(x, m.w1, m.b1)?;
        let h = g.silu(h);
        let y = g.linear(h, m.w2, m.b2)?;
        Ok(g.reshape(y, &[g.shape(y)[1]])?)
    }

    /// Condition vector `[C]`. When `drop` is set the porosity and S2 part is
    /// replaced by the null embedding; the timestep part is always kept.
    pub fn condition_vector(&self, g: &mut Graph, b: &Bound, cond: &Condition, drop: bool) -> Result<Var> {
        let c = self.config.embed_dim;
        let te = g.constant(Tensor::from_vec(embed_scalar(cond.t as f64, c)));
        let ct = Self::mlp2(g, b.t_mlp, te)?;
        let physical = if drop {
            b.null_emb
        } else {
            let pe = g.constant(Tensor::from_vec(embed_scalar(cond.phi_norm, c)));
            let mut phys = Self::mlp2(g, b.phi_mlp, pe)?;
            if let Some(m) = b.s2_mlp {
                let feats = cond.s2.as_ref().ok_or_else(|| invalid("model expects S2 condition features"))?;
                if feats.len() != self.config.s2_features {
                    return Err(invalid(format!(
                        "expected {} S2 features, got {}",
                        self.config.s2_features,
                        feats.len()
                    )));
                }
                let fe = g.constant(Tensor::from_vec(feats.clone()));
                let cs = Self::mlp2(g, m, fe)?;
                phys = g.add(phys, cs)?;
            }
            phys
        };
        Ok(g.add(ct, physical)?)
    }

    /// `[D, H, W]` volume to `[N, p³]` patch rows.
    pub fn patchify(g: &mut Graph, x: Var, grid: usize, p: usize) -> Result<Var> {
        let v = g.reshape(x, &[grid, p, grid, p, grid, p])?;
        let v = g.permute(v, &[0, 2, 4, 1, 3, 5])?;
        Ok(g.reshape(v, &[grid * grid * grid, p * p * p])?)
    }

    /// Inverse of [`PoreDiT::patchify`].
    pub fn unpatchify(g: &mut Graph, x: Var, grid: usize, p: usize) -> Result<Var> {
        let v = g.reshape(x, &[grid, grid, grid, p, p, p])?;
        let v = g.permute(v, &[0, 3, 1, 4, 2, 5])?;
        Ok(g.reshape(v, &[grid * p, grid * p, grid * p])?)
    }

    /// Window attention of block `l` on tokens `[N, C]` (already normalised).
    pub fn attention(&self, g: &mut Graph, b: &Bound, l: usize, h: Var) -> Result<Var> {
        Ok(self.attention_with_weights(g, b, l, h)?.0)
    }

    /// [`PoreDiT::attention`] plus the post-softmax weights
    /// `[windows, heads, M³, M³]`.
    pub fn attention_with_weights(&self, g: &mut Graph, b: &Bound, l: usize, h: Var) -> Result<(Var, Var)> {
        let bv = b.blocks[l];
        let shifted = l % 2 == 1;
        self.geometry.attention(
            g,
            h,
            window::AttnWeights {
                qkv_w: bv.qkv_w,
                qkv_b: bv.qkv_b,
                proj_w: bv.proj_w,
                proj_b: bv.proj_b,
                rel_bias: bv.rel_bias,
            },
            self.config.heads,
            shifted,
        )
    }

    /// Residual attention and MLP sub-layers of block `l`.
    pub fn block(&self, g: &mut Graph, b: &Bound, l: usize, z: Var) -> Result<Var> {
        let bv = b.blocks[l];
        let h = g.layer_norm(z, bv.ln1_g, bv.ln1_b, LN_EPS)?;
        let a = self.attention(g, b, l, h)?;
        let z = g.add(z, a)?;
        let h = g.layer_norm(z, bv.ln2_g, bv.ln2_b, LN_EPS)?;
        let h = g.linear(h, bv.fc1_w, bv.fc1_b)?;
        let h = g.gelu(h);
        let h = g.linear(h, bv.fc2_w, bv.fc2_b)?;
        Ok(g.add(z, h)?)
    }

    /// Adaptive-norm output projection to per-patch logits `[N, p³]`.
    pub fn final_layer(&self, g: &mut Graph, b: &Bound, z: Var, c: Var) -> Result<Var> {
        let cdim = self.config.embed_dim;
        let ones = g.constant(Tensor::full(&[cdim], 1.0));
        let zeros = g.constant(Tensor::zeros(&[cdim]));
        let n = g.layer_norm(z, ones, zeros, LN_EPS)?;
        let cs = g.silu(c);
        let cs = g.reshape(cs, &[1, cdim])?;
        let ada = g.linear(cs, b.ada_w, b.ada_b)?;
        let ada = g.reshape(ada, &[2 * cdim])?;
        let gamma = g.narrow(ada, 0, 0, cdim)?;
        let beta = g.narrow(ada, 0, cdim, cdim)?;
        let n = g.mul(n, gamma)?;
        let n = g.add(n, beta)?;
        let n = g.gelu(n);
        Ok(g.linear(n, b.out_w, b.out_b)?)
    }

    /// Logits volume `[D, H, W]` for a noisy input.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x_t: &[f64], cond: &Condition, drop: bool) -> Result<Var> {
        let cfg = &self.config;
        let (grid, p) = (cfg.grid(), cfg.patch);
        let x = Tensor::new(cfg.dims().to_vec(), x_t.to_vec())?;
        let x = g.constant(x);
        let patches = Self::patchify(g, x, grid, p)?;
        let z = g.linear(patches, b.patch_w, b.patch_b)?;
        let z = g.add(z, b.pos)?;
        let c = self.condition_vector(g, b, cond, drop)?;
        let mut z = g.add(z, c)?;
        for l in 0..cfg.depth {
            z = self.block(g, b, l, z)?;
        }
        let out = self.final_layer(g, b, z, c)?;
        Self::unpatchify(g, out, grid, p)
    }

    /// Inference-only forward returning logits.
    pub fn predict(&self, x_t: &[f64], cond: &Condition, drop: bool) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = self.forward(&mut g, &b, x_t, cond, drop)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// A model bound to one porosity target, usable by the samplers.
#[derive(Debug, Clone, Copy)]
pub struct Conditioned<'a> {
    pub model: &'a PoreDiT,
    pub phi_norm: f64,
    pub s2: Option<&'a [f64]>,
}

impl<'a> Conditioned<'a> {
    pub fn new(model: &'a PoreDiT, phi_norm: f64) -> Self {
        Self {
            model,
            phi_norm,
            s2: None,
        }
    }
}

impl Denoiser for Conditioned<'_> {
    fn dims(&self) -> Dims {
        self.model.config().dims()
    }

    fn logits(&self, x_t: &SignedVolume, timestep: usize, uncond: bool) -> Result<Vec<f64>> {
        let cond = Condition {
            t: timestep,
            phi_norm: self.phi_norm,
            s2: self.s2.map(<[f64]>::to_vec),
        };
        self.model.predict(x_t.values(), &cond, uncond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            patch: 2,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            window: 2,
            mlp_ratio: 2.0,
            cond_dropout: 0.1,
            s2_features: 0,
        }
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig { input_size: 30, ..ModelConfig::default() },
            ModelConfig { window: 3, ..ModelConfig::default() },
            ModelConfig { heads: 5, ..ModelConfig::default() },
            ModelConfig { depth: 3, ..ModelConfig::default() },
            ModelConfig { cond_dropout: 1.0, ..ModelConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn token_counts() {
        let c = ModelConfig { input_size: 32, patch: 8, ..ModelConfig::default() };
        assert_eq!(c.tokens(), 64);
        assert_eq!(ModelConfig { patch: 16, ..ModelConfig::default() }.patch_volume(), 4096);
    }

    #[test]
    fn embedding_components() {
        let e = embed_scalar(0.0, 6);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(embed_scalar(1.3, 8)[0], 1.3f64.sin());
    }

    #[test]
    fn runtime_count_matches_formula() {
        for cfg in [toy(), ModelConfig::default(), ModelConfig { s2_features: 3, ..toy() }] {
            let m = PoreDiT::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn patchify_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 4, 4], (0..64).map(f64::from).collect()).unwrap());
        let p = PoreDiT::patchify(&mut g, x, 2, 2).unwrap();
        // first patch holds the 2x2x2 corner block, z-major
        assert_eq!(&g.value(p).data()[..8], &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
        let back = PoreDiT::unpatchify(&mut g, p, 2, 2).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn dropped_condition_uses_null_embedding() {
        let m = PoreDiT::new(toy(), 1).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let cond = Condition { t: 17, phi_norm: 0.4, s2: None };
        let c = m.condition_vector(&mut g, &b, &cond, true).unwrap();
        let te = g.constant(Tensor::from_vec(embed_scalar(17.0, 8)));
        let ct = PoreDiT::mlp2(&mut g, b.t_mlp, te).unwrap();
        let expect = g.add(ct, b.null_emb).unwrap();
        assert_eq!(g.value(c), g.value(expect));
        let a1 = m.condition_vector(&mut g, &b, &cond, false).unwrap();
        let a2 = m.condition_vector(&mut g, &b, &cond, false).unwrap();
        assert_eq!(g.value(a1), g.value(a2));
    }

    #[test]
    fn zero_branches_make_block_identity() {
        let mut m = PoreDiT::new(toy(), 2).unwrap();
        for s in ["qkv_w", "qkv_b", "proj_w", "proj_b", "fc2_w", "fc2_b"] {
            let t = m.params_mut().get_mut(&format!("blocks.0.{s}")).unwrap();
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let z = g.constant(Tensor::new(vec![64, 8], (0..512).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let out = m.block(&mut g, &b, 0, z).unwrap();
        assert_eq!(g.value(out), g.value(z));
    }

    #[test]
    fn forward_shape_and_position_sensitivity() {
        let m = PoreDiT::new(toy(), 3).unwrap();
        let x: Vec<f64> = (0..512).map(|i| ((i * 7 % 13) as f64 / 6.0) - 1.0).collect();
        let cond = Condition { t: 100, phi_norm: 0.0, s2: None };
        let a = m.predict(&x, &cond, false).unwrap();
        assert_eq!(a.len(), 512);
        let mut swapped = m.clone();
        let pos = swapped.params_mut().get_mut("pos").unwrap();
        let (r0, r1) = pos.data_mut().split_at_mut(8);
        r0.swap_with_slice(&mut r1[..8]);
        assert_ne!(swapped.predict(&x, &cond, false).unwrap(), a);
    }

    #[test]
    fn drop_frequency_matches_probability() {
        let mut r = rng::stream(0, "drop-test", 0);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_drop(&mut r, 0.1)).count();
        assert!((hits as f64 / n as f64 - 0.1).abs() < 0.005);
    }
}
