//! Flow matching over latent token grids.
//!
//! The velocity network embeds tokens, adds a learned position table and the
//! projected layout map, and runs residual blocks modulated by the timestep
//! (shift, scale and gate per sub-block, zero-initialized). Attention blocks
//! use rotary position codes over the three grid axes. A control branch is a
//! trainable copy of the network that feeds the base blocks through
//! zero-initialized bottlenecks.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layout::{drop_condition, LayoutMap};
use crate::par;
use crate::tensor::{adamw_step, lr_at, write_checkpoint, AdamConfig, Bound, Checkpoint, Graph, ParamSet, Real, Tensor, Var};
use crate::vae::{batch_indices, mean_grads};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Indices of blocks that include self-attention.
    pub attention_blocks: Vec<usize>,
    pub mlp_ratio: usize,
    pub layout_dim: usize,
    pub control_rank: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { hidden: 64, blocks: 4, heads: 4, attention_blocks: vec![2], mlp_ratio: 4, layout_dim: 32, control_rank: 8 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.blocks == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.control_rank == 0 {
            return Err(Error::Config("flow sizes must be positive".into()));
        }
        if self.hidden % (2 * self.heads) != 0 {
            return Err(Error::Config(format!(
                "flow.hidden {} must be divisible by 2 * heads ({})",
                self.hidden,
                2 * self.heads
            )));
        }
        if let Some(b) = self.attention_blocks.iter().find(|&&b| b >= self.blocks) {
            return Err(Error::Config(format!("attention block index {b} >= blocks {}", self.blocks)));
        }
        Ok(())
    }

    fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let attn: Vec<String> = self.attention_blocks.iter().map(|b| b.to_string()).collect();
        meta.insert("flow.hidden".into(), self.hidden.to_string());
        meta.insert("flow.blocks".into(), self.blocks.to_string());
        meta.insert("flow.heads".into(), self.heads.to_string());
        meta.insert("flow.attention_blocks".into(), attn.join(","));
        meta.insert("flow.mlp_ratio".into(), self.mlp_ratio.to_string());
        meta.insert("flow.layout_dim".into(), self.layout_dim.to_string());
        meta.insert("flow.control_rank".into(), self.control_rank.to_string());
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{k}`; not a flow checkpoint?")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("malformed `{k}`")))
        };
        let attn = meta.get("flow.attention_blocks").ok_or_else(|| Error::Checkpoint("missing `flow.attention_blocks`".into()))?;
        let attention_blocks = if attn.is_empty() {
            vec![]
        } else {
            attn.split(',')
                .map(|b| b.parse().map_err(|_| Error::Checkpoint("malformed `flow.attention_blocks`".into())))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            hidden: num("flow.hidden")?,
            blocks: num("flow.blocks")?,
            heads: num("flow.heads")?,
            attention_blocks,
            mlp_ratio: num("flow.mlp_ratio")?,
            layout_dim: num("flow.layout_dim")?,
            control_rank: num("flow.control_rank")?,
        })
    }
}

/// `(1 - t) * z0 + t * z1`.
pub fn interpolate(z0: &[f32], z1: &[f32], t: f64) -> Result<Vec<f32>> {
    if z0.len() != z1.len() {
        return Err(Error::InvalidArgument(format!("length mismatch {} vs {}", z0.len(), z1.len())));
    }
    Ok(z0.iter().zip(z1).map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32).collect())
}

pub fn gaussian_noise(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn euler_update(z: &[f32], v: &[f32], dt: f64) -> Vec<f32> {
    let dt = dt as f32;
    z.iter().zip(v).map(|(&a, &b)| a + dt * b).collect()
}

/// Velocity evaluated on one chunk of tokens (`cells * channels` values).
pub trait VelocityField: Sync {
    fn velocity(&self, z: &[f32], shape: [usize; 3], t: f64, origin: [usize; 3]) -> Result<Vec<f32>>;
}

/// Left-endpoint Euler on `t_i = i / steps` from seeded Gaussian noise.
pub fn euler_sample(field: &dyn VelocityField, shape: [usize; 3], channels: usize, steps: usize, seed: u64) -> Result<Vec<f32>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let mut z = gaussian_noise(shape.iter().product::<usize>() * channels, seed);
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let v = field.velocity(&z, shape, i as f64 * dt, [0; 3])?;
        z = euler_update(&z, &v, dt);
    }
    Ok(z)
}

/// Velocity network bound to a latent grid shape.
pub struct VelocityModel {
    pub config: FlowConfig,
    pub shape: [usize; 3],
    pub channels: usize,
    rope_cos: Vec<f64>,
    rope_sin: Vec<f64>,
    rotate: Vec<f64>,
}

/// Control inputs: the branch parameters bound in the graph and the partial
/// scan latent.
pub struct ControlInput {
    pub bound: Bound,
    pub zp: Var,
}

const LN_EPS: f64 = 1e-6;

fn pairs_per_axis(pairs: usize) -> [usize; 3] {
    let base = pairs / 3;
    let rem = pairs % 3;
    [base + (rem > 0) as usize, base + (rem > 1) as usize, base]
}

impl VelocityModel {
    pub fn new(config: FlowConfig, shape: [usize; 3], channels: usize) -> Result<Self> {
        config.validate()?;
        if shape.contains(&0) || channels == 0 {
            return Err(Error::InvalidArgument(format!("degenerate latent shape {shape:?} x {channels}")));
        }
        let h = config.hidden;
        let d = h / config.heads;
        let split = pairs_per_axis(d / 2);
        let n: usize = shape.iter().product();
        let mut cos = vec![0.0; n * h];
        let mut sin = vec![0.0; n * h];
        let mut cell = 0;
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    let pos = [x as f64, y as f64, z as f64];
                    for head in 0..config.heads {
                        let mut pair = 0;
                        for axis in 0..3 {
                            for j in 0..split[axis] {
                                let freq = 1.0 / 100f64.powf(j as f64 / split[axis] as f64);
                                let angle = pos[axis] * freq;
                                for k in 0..2 {
                                    let col = head * d + 2 * pair + k;
                                    cos[cell * h + col] = angle.cos();
                                    sin[cell * h + col] = angle.sin();
                                }
                                pair += 1;
                            }
                        }
                    }
                    cell += 1;
                }
            }
        }
        // (q @ rotate)[2i] = -q[2i+1], (q @ rotate)[2i+1] = q[2i]
        let mut rotate = vec![0.0; h * h];
        for i in 0..h / 2 {
            rotate[(2 * i + 1) * h + 2 * i] = -1.0;
            rotate[(2 * i) * h + 2 * i + 1] = 1.0;
        }
        Ok(Self { config, shape, channels, rope_cos: cos, rope_sin: sin, rotate })
    }

    pub fn cells(&self) -> usize {
        self.shape.iter().product()
    }

    fn has_attention(&self, block: usize) -> bool {
        self.config.attention_blocks.contains(&block)
    }

    /// Base network parameters.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, c, n) = (self.config.hidden, self.channels, self.cells());
        let m = self.config.mlp_ratio * h;
        let mut p = ParamSet::new();
        let mut normal = |p: &mut ParamSet<T>, name: String, shape: &[usize], std: f64| {
            p.insert_normal(name, shape, std, &mut rng);
        };
        normal(&mut p, "in.w".into(), &[c, h], 1.0 / (c as f64).sqrt());
        p.insert_zeros("in.b", &[h]);
        normal(&mut p, "pos".into(), &[n, h], 0.5);
        normal(&mut p, "layout.w".into(), &[self.config.layout_dim, h], 1.0 / (self.config.layout_dim as f64).sqrt());
        normal(&mut p, "time.w1".into(), &[h, h], 1.0 / (h as f64).sqrt());
        p.insert_zeros("time.b1", &[h]);
        normal(&mut p, "time.w2".into(), &[h, h], 1.0 / (h as f64).sqrt());
        p.insert_zeros("time.b2", &[h]);
        for b in 0..self.config.blocks {
            let mods = if self.has_attention(b) { 6 } else { 3 };
            p.insert_zeros(format!("blk{b}.ada.w"), &[h, mods * h]);
            p.insert_zeros(format!("blk{b}.ada.b"), &[mods * h]);
            normal(&mut p, format!("blk{b}.mlp1.w"), &[h, m], 1.0 / (h as f64).sqrt());
            p.insert_zeros(format!("blk{b}.mlp1.b"), &[m]);
            normal(&mut p, format!("blk{b}.mlp2.w"), &[m, h], 1.0 / (m as f64).sqrt());
            p.insert_zeros(format!("blk{b}.mlp2.b"), &[h]);
            if self.has_attention(b) {
                normal(&mut p, format!("blk{b}.qkv.w"), &[h, 3 * h], 1.0 / (h as f64).sqrt());
                p.insert_zeros(format!("blk{b}.qkv.b"), &[3 * h]);
                normal(&mut p, format!("blk{b}.proj.w"), &[h, h], 1.0 / (h as f64).sqrt());
                p.insert_zeros(format!("blk{b}.proj.b"), &[h]);
            }
        }
        p.insert_zeros("final.ada.w", &[h, 2 * h]);
        p.insert_zeros("final.ada.b", &[2 * h]);
        p.insert_zeros("final.out.w", &[h, c]);
        p.insert_zeros("final.out.b", &[c]);
        p
    }

    /// Control branch: every base tensor copied under `branch.` plus the
    /// zero input projection and per-block bottlenecks.
    pub fn init_control(&self, base: &ParamSet<f32>, seed: u64) -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, c, r) = (self.config.hidden, self.channels, self.config.control_rank);
        let mut p = ParamSet::new();
        for (name, t) in base.iter() {
            p.insert(format!("branch.{name}"), t.clone());
        }
        p.insert_zeros("ctrl.zin.w", &[c, h]);
        for b in 0..self.config.blocks {
            p.insert_normal(format!("ctrl.down{b}.w"), &[h, r], 1.0 / (h as f64).sqrt(), &mut rng);
            p.insert_zeros(format!("ctrl.up{b}.w"), &[r, h]);
        }
        p
    }

    fn time_embedding<T: Real>(&self, t: f64) -> Tensor<T> {
        let h = self.config.hidden;
        let half = h / 2;
        Tensor::from_fn([1, h], |i| {
            let k = i % half;
            let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
            let a = 1000.0 * t * freq;
            T::c(if i < half { a.cos() } else { a.sin() })
        })
    }

    fn lin<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, bias: bool) -> Result<Var> {
        let w = p.get(&format!("{name}.w"))?;
        let b = if bias { Some(p.get(&format!("{name}.b"))?) } else { None };
        Ok(g.linear(x, w, b)?)
    }

    /// Timestep conditioning vector, shape `[hidden]`.
    fn conditioning<T: Real>(&self, g: &mut Graph<T>, p: &Bound, pre: &str, t: f64) -> Result<Var> {
        let e = g.constant(self.time_embedding(t));
        let w1 = p.get(&format!("{pre}time.w1"))?;
        let b1 = p.get(&format!("{pre}time.b1"))?;
        let w2 = p.get(&format!("{pre}time.w2"))?;
        let b2 = p.get(&format!("{pre}time.b2"))?;
        let x = g.linear(e, w1, Some(b1))?;
        let x = g.silu(x);
        let x = g.linear(x, w2, Some(b2))?;
        let x = g.silu(x);
        Ok(g.reshape(x, [self.config.hidden])?)
    }

    fn embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, pre: &str, z: Var, layout: Option<Var>) -> Result<Var> {
        let mut h = Self::lin(g, p, &format!("{pre}in"), z, true)?;
        let pos = p.get(&format!("{pre}pos"))?;
        h = g.add(h, pos)?;
        if let Some(l) = layout {
            let w = p.get(&format!("{pre}layout.w"))?;
            let lp = g.matmul(l, w)?;
            h = g.add(h, lp)?;
        }
        Ok(h)
    }

    /// `LN(h) * (1 + scale) + shift` with rows taken from the modulation vector.
    fn modulate<T: Real>(&self, g: &mut Graph<T>, h: Var, ada: Var, shift_at: usize) -> Result<Var> {
        let hd = self.config.hidden;
        let n = g.layer_norm(h, T::c(LN_EPS))?;
        let shift = g.narrow(ada, 0, shift_at * hd, hd)?;
        let scale = g.narrow(ada, 0, (shift_at + 1) * hd, hd)?;
        let scale = g.add_scalar(scale, T::one());
        let x = g.mul_row(n, scale)?;
        Ok(g.add_row(x, shift)?)
    }

    fn attention<T: Real>(&self, g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let (hd, heads, n) = (self.config.hidden, self.config.heads, self.cells());
        let d = hd / heads;
        let qkv = Self::lin(g, p, &format!("{name}.qkv"), x, true)?;
        let cos = g.constant(Tensor::new([n, hd], self.rope_cos.iter().map(|&v| T::c(v)).collect())?);
        let sin = g.constant(Tensor::new([n, hd], self.rope_sin.iter().map(|&v| T::c(v)).collect())?);
        let rot = g.constant(Tensor::new([hd, hd], self.rotate.iter().map(|&v| T::c(v)).collect())?);
        let rope = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let a = g.mul(v, cos)?;
            let r = g.matmul(v, rot)?;
            let b = g.mul(r, sin)?;
            Ok(g.add(a, b)?)
        };
        let q = g.narrow(qkv, 1, 0, hd)?;
        let q = rope(g, q)?;
        let k = g.narrow(qkv, 1, hd, hd)?;
        let k = rope(g, k)?;
        let v = g.narrow(qkv, 1, 2 * hd, hd)?;
        let inv = T::c(1.0 / (d as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = g.narrow(q, 1, head * d, d)?;
            let kh = g.narrow(k, 1, head * d, d)?;
            let vh = g.narrow(v, 1, head * d, d)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, inv);
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        let o = g.concat(&outs, 1)?;
        Self::lin(g, p, &format!("{name}.proj"), o, true)
    }

    fn block<T: Real>(&self, g: &mut Graph<T>, p: &Bound, pre: &str, b: usize, h: Var, cond: Var) -> Result<Var> {
        let name = format!("{pre}blk{b}");
        let c = g_reshape_row(g, cond)?;
        let ada = Self::lin(g, p, &format!("{name}.ada"), c, true)?;
        let width = g.shape(ada)[1];
        let ada = g.reshape(ada, [width])?;
        let hd = self.config.hidden;
        let mut h = h;
        let mut slot = 0;
        if self.has_attention(b) {
            let x = self.modulate(g, h, ada, 0)?;
            let a = self.attention(g, p, &name, x)?;
            let gate = g.narrow(ada, 0, 2 * hd, hd)?;
            let a = g.mul_row(a, gate)?;
            h = g.add(h, a)?;
            slot = 3;
        }
        let x = self.modulate(g, h, ada, slot)?;
        let m = Self::lin(g, p, &format!("{name}.mlp1"), x, true)?;
        let m = g.silu(m);
        let m = Self::lin(g, p, &format!("{name}.mlp2"), m, true)?;
        let gate = g.narrow(ada, 0, (slot + 2) * hd, hd)?;
        let m = g.mul_row(m, gate)?;
        Ok(g.add(h, m)?)
    }

    /// Velocity graph, `[cells, channels]`. `layout` is `None` for the null
    /// condition.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        t: f64,
        layout: Option<Var>,
        control: Option<&ControlInput>,
    ) -> Result<Var> {
        let cond = self.conditioning(g, p, "", t)?;
        let mut h = self.embed(g, p, "", z, layout)?;
        let branch = match control {
            Some(c) => {
                let bcond = self.conditioning(g, &c.bound, "branch.", t)?;
                let mut hc = self.embed(g, &c.bound, "branch.", z, layout)?;
                let zin = Self::lin(g, &c.bound, "ctrl.zin", c.zp, false)?;
                hc = g.add(hc, zin)?;
                Some((c, bcond, hc))
            }
            None => None,
        };
        let mut branch = branch;
        for b in 0..self.config.blocks {
            h = self.block(g, p, "", b, h, cond)?;
            if let Some((c, bcond, hc)) = branch.as_mut() {
                *hc = self.block(g, &c.bound, "branch.", b, *hc, *bcond)?;
                let down = Self::lin(g, &c.bound, &format!("ctrl.down{b}"), *hc, false)?;
                let up = Self::lin(g, &c.bound, &format!("ctrl.up{b}"), down, false)?;
                h = g.add(h, up)?;
            }
        }
        let c = g_reshape_row(g, cond)?;
        let ada = Self::lin(g, p, "final.ada", c, true)?;
        let width = g.shape(ada)[1];
        let ada = g.reshape(ada, [width])?;
        let x = self.modulate(g, h, ada, 0)?;
        Self::lin(g, p, "final.out", x, true)
    }

    fn layout_var<T: Real>(&self, g: &mut Graph<T>, layout: Option<&LayoutMap>) -> Result<Option<Var>> {
        match layout {
            Some(l) if !l.null => {
                if l.cells() != self.cells() || l.channels != self.config.layout_dim {
                    return Err(Error::InvalidArgument(format!(
                        "layout map {:?}x{} does not match latent grid {:?}x{}",
                        l.shape,
                        l.channels,
                        self.shape,
                        self.config.layout_dim
                    )));
                }
                let t = Tensor::new([l.cells(), l.channels], l.values.iter().map(|&v| T::c(v as f64)).collect())?;
                Ok(Some(g.constant(t)))
            }
            _ => Ok(None),
        }
    }

    /// Latent values as a constant `[cells, channels]` token matrix.
    pub fn tokens<T: Real>(&self, g: &mut Graph<T>, z: &[f32]) -> Result<Var> {
        if z.len() != self.cells() * self.channels {
            return Err(Error::InvalidArgument(format!(
                "latent has {} values, expected {}",
                z.len(),
                self.cells() * self.channels
            )));
        }
        Ok(g.constant(Tensor::new([self.cells(), self.channels], z.iter().map(|&v| T::c(v as f64)).collect())?))
    }

    /// Inference velocity, optionally with a control branch and partial-scan latent.
    pub fn velocity(
        &self,
        params: &ParamSet<f32>,
        z: &[f32],
        t: f64,
        layout: Option<&LayoutMap>,
        control: Option<(&ParamSet<f32>, &[f32])>,
    ) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let p = g.bind(params, false);
        let zv = self.tokens(&mut g, z)?;
        let lv = self.layout_var(&mut g, layout)?;
        let ctrl = match control {
            Some((cp, zp)) => {
                let bound = g.bind(cp, false);
                let zp = self.tokens(&mut g, zp)?;
                Some(ControlInput { bound, zp })
            }
            None => None,
        };
        let v = self.forward_graph(&mut g, &p, zv, t, lv, ctrl.as_ref())?;
        Ok(g.value(v).data().to_vec())
    }

    /// `v_null + scale * (v_layout - v_null)`.
    pub fn cfg_velocity(
        &self,
        params: &ParamSet<f32>,
        z: &[f32],
        t: f64,
        layout: &LayoutMap,
        scale: f64,
        control: Option<(&ParamSet<f32>, &[f32])>,
    ) -> Result<Vec<f32>> {
        if !(scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("guidance scale must be nonnegative, got {scale}")));
        }
        if layout.null || scale == 0.0 {
            return self.velocity(params, z, t, None, control);
        }
        let cond = self.velocity(params, z, t, Some(layout), control)?;
        if scale == 1.0 {
            return Ok(cond);
        }
        let null = self.velocity(params, z, t, None, control)?;
        let s = scale as f32;
        Ok(null.iter().zip(&cond).map(|(&n, &c)| n + s * (c - n)).collect())
    }

    /// Masked flow-matching loss graph for given noise and time. Unknown
    /// tokens of `z1` are replaced by zero before interpolation and excluded
    /// from the loss. Returns `None` when no token is known.
    #[allow(clippy::too_many_arguments)]
    pub fn fm_loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z1: &[f32],
        token_mask: &[bool],
        layout: Option<&LayoutMap>,
        z0: &[f32],
        t: f64,
        control: Option<&ControlInput>,
    ) -> Result<Option<Var>> {
        let c = self.channels;
        if token_mask.len() != self.cells() || z0.len() != z1.len() {
            return Err(Error::InvalidArgument("token mask or noise does not match the latent grid".into()));
        }
        let known: Vec<u32> = (0..self.cells() as u32).filter(|&i| token_mask[i as usize]).collect();
        if known.is_empty() {
            return Ok(None);
        }
        let x1: Vec<f64> = z1
            .iter()
            .enumerate()
            .map(|(i, &v)| if token_mask[i / c] { v as f64 } else { 0.0 })
            .collect();
        let zt: Vec<f32> = x1.iter().zip(z0).map(|(&a, &b)| ((1.0 - t) * b as f64 + t * a) as f32).collect();
        let target: Vec<T> = x1.iter().zip(z0).map(|(&a, &b)| T::c(a - b as f64)).collect();
        let zv = self.tokens(g, &zt)?;
        let lv = self.layout_var(g, layout)?;
        let v = self.forward_graph(g, p, zv, t, lv, control)?;
        let tgt = g.constant(Tensor::new([self.cells(), c], target)?);
        let d = g.sub(v, tgt)?;
        let d = g.gather_rows(d, Arc::new(known))?;
        let sq = g.square(d);
        Ok(Some(g.mean_all(sq)))
    }
}

fn g_reshape_row<T: Real>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let n = g.shape(v)[0];
    Ok(g.reshape(v, [1, n])?)
}

/// Draws `(z0, t, dropped layout)` for one training sample.
pub fn draw_fm_sample(
    cells: usize,
    channels: usize,
    layout: &LayoutMap,
    drop_prob: f64,
    seed: u64,
) -> Result<(Vec<f32>, f64, LayoutMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0: Vec<f32> = (0..cells * channels).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let t: f64 = rng.random();
    let drop_seed: u64 = rng.random();
    Ok((z0, t, drop_condition(layout.clone(), drop_prob, drop_seed)?))
}

/// Seeded masked flow-matching loss of one sample (no gradients).
pub fn fm_loss(
    model: &VelocityModel,
    params: &ParamSet<f32>,
    z1: &[f32],
    token_mask: &[bool],
    layout: &LayoutMap,
    drop_prob: f64,
    seed: u64,
) -> Result<Option<f64>> {
    let (z0, t, layout) = draw_fm_sample(model.cells(), model.channels, layout, drop_prob, seed)?;
    let mut g = Graph::<f32>::new();
    let p = g.bind(params, false);
    let loss = model.fm_loss_graph(&mut g, &p, z1, token_mask, Some(&layout), &z0, t, None)?;
    Ok(loss.map(|l| g.value(l).item() as f64))
}

/// Training example for the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub z1: Vec<f32>,
    pub token_mask: Vec<bool>,
    pub layout: LayoutMap,
}

/// Training example for the control branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSample {
    pub z1: Vec<f32>,
    /// Visibility of the full scan chunk.
    pub token_mask: Vec<bool>,
    /// Latent of the degraded scan chunk.
    pub zp: Vec<f32>,
    pub layout: LayoutMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowStepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub samples: usize,
}

type SampleGrads = Option<(f64, BTreeMap<String, Tensor<f32>>)>;

fn train_loop(
    params: &mut ParamSet<f32>,
    n_data: usize,
    train: &TrainConfig,
    sample_grads: impl Fn(&ParamSet<f32>, usize, u64) -> Result<SampleGrads> + Sync,
    mut on_diverge: impl FnMut(&ParamSet<f32>, usize) -> Error,
    mut on_step: impl FnMut(&FlowStepLog),
) -> Result<()> {
    if n_data == 0 {
        return Err(Error::Empty("flow training set".into()));
    }
    let adam = AdamConfig { weight_decay: train.weight_decay, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    for step in 0..train.steps {
        let picks = batch_indices(&mut rng, n_data, train.batch);
        let jobs: Vec<(usize, u64)> = picks.into_iter().map(|i| (i, rng.random())).collect();
        let current: &ParamSet<f32> = params;
        let results = par::map_slice(&jobs, |&(i, seed)| sample_grads(current, i, seed));
        let mut loss = 0.0;
        let mut grads = Vec::new();
        for r in results {
            if let Some((l, g)) = r? {
                loss += l;
                grads.push(g);
            }
        }
        if grads.is_empty() {
            continue;
        }
        let samples = grads.len();
        loss /= samples as f64;
        if !loss.is_finite() {
            return Err(on_diverge(params, step));
        }
        let lr = lr_at(step, train.steps, train.warmup, train.lr);
        adamw_step(params, &mean_grads(grads), lr, &adam)?;
        params.update_ema(train.ema_decay);
        on_step(&FlowStepLog { step, lr, loss, samples });
    }
    Ok(())
}

fn save_last_good(path: Option<&Path>, ckpt: Checkpoint<f32>, step: usize) -> Error {
    match path {
        Some(path) => match write_checkpoint(path, &ckpt) {
            Ok(()) => Error::Diverged { step, saved: path.to_path_buf() },
            Err(e) => e,
        },
        None => Error::Diverged { step, saved: Default::default() },
    }
}

/// Trains the base velocity model with layout dropout.
pub fn train_flow(
    model: &VelocityModel,
    data: &[FlowSample],
    train: &TrainConfig,
    drop_prob: f64,
    checkpoint: Option<&Path>,
    on_step: impl FnMut(&FlowStepLog),
) -> Result<ParamSet<f32>> {
    let mut params = model.init_params::<f32>(train.seed);
    let grads = |current: &ParamSet<f32>, i: usize, seed: u64| -> Result<SampleGrads> {
        let s = &data[i];
        let (z0, t, layout) = draw_fm_sample(model.cells(), model.channels, &s.layout, drop_prob, seed)?;
        let mut g = Graph::<f32>::new();
        let p = g.bind(current, true);
        let Some(loss) = model.fm_loss_graph(&mut g, &p, &s.z1, &s.token_mask, Some(&layout), &z0, t, None)? else {
            return Ok(None);
        };
        Ok(Some((g.value(loss).item() as f64, g.backward(loss)?.collect(&p))))
    };
    let diverge =
        |p: &ParamSet<f32>, step| save_last_good(checkpoint, flow_checkpoint(model, p.clone(), BTreeMap::new()), step);
    train_loop(&mut params, data.len(), train, grads, diverge, on_step)?;
    Ok(params)
}

/// Fine-tunes the control branch with the base parameters held fixed.
pub fn finetune_control(
    model: &VelocityModel,
    base: &ParamSet<f32>,
    data: &[ControlSample],
    train: &TrainConfig,
    drop_prob: f64,
    checkpoint: Option<&Path>,
    on_step: impl FnMut(&FlowStepLog),
) -> Result<ParamSet<f32>> {
    let mut control = model.init_control(base, train.seed);
    let grads = |current: &ParamSet<f32>, i: usize, seed: u64| -> Result<SampleGrads> {
        let s = &data[i];
        let (z0, t, layout) = draw_fm_sample(model.cells(), model.channels, &s.layout, drop_prob, seed)?;
        let mut g = Graph::<f32>::new();
        let p = g.bind(base, false);
        let bound = g.bind(current, true);
        let zp = model.tokens(&mut g, &s.zp)?;
        let ctrl = ControlInput { bound, zp };
        let Some(loss) = model.fm_loss_graph(&mut g, &p, &s.z1, &s.token_mask, Some(&layout), &z0, t, Some(&ctrl))?
        else {
            return Ok(None);
        };
        Ok(Some((g.value(loss).item() as f64, g.backward(loss)?.collect(&ctrl.bound))))
    };
    let diverge =
        |p: &ParamSet<f32>, step| save_last_good(checkpoint, control_checkpoint(model, p.clone()), step);
    train_loop(&mut control, data.len(), train, grads, diverge, on_step)?;
    Ok(control)
}

/// Checkpoint of the base model; `extra` carries pipeline metadata such as
/// latent normalization statistics.
pub fn flow_checkpoint(model: &VelocityModel, params: ParamSet<f32>, extra: BTreeMap<String, String>) -> Checkpoint<f32> {
    let mut meta = extra;
    meta.insert("kind".into(), "flow".into());
    model.write_meta(&mut meta);
    Checkpoint { meta, params }
}

pub fn control_checkpoint(model: &VelocityModel, params: ParamSet<f32>) -> Checkpoint<f32> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "control".into());
    model.write_meta(&mut meta);
    Checkpoint { meta, params }
}

impl VelocityModel {
    fn write_meta(&self, meta: &mut BTreeMap<String, String>) {
        self.config.to_meta(meta);
        meta.insert("flow.shape".into(), self.shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        meta.insert("flow.channels".into(), self.channels.to_string());
    }

    /// Rebuilds the architecture recorded in a flow or control checkpoint and
    /// checks every parameter shape.
    pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Self> {
        let kind = ckpt.meta.get("kind").map(String::as_str);
        if kind != Some("flow") && kind != Some("control") {
            return Err(Error::Checkpoint(format!("expected a flow checkpoint, found kind {kind:?}")));
        }
        let config = FlowConfig::from_meta(&ckpt.meta)?;
        let shape: Vec<usize> = ckpt
            .meta
            .get("flow.shape")
            .ok_or_else(|| Error::Checkpoint("missing `flow.shape`".into()))?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Checkpoint("malformed `flow.shape`".into())))
            .collect::<Result<_>>()?;
        let shape: [usize; 3] = shape.try_into().map_err(|_| Error::Checkpoint("`flow.shape` needs 3 entries".into()))?;
        let channels = ckpt
            .meta
            .get("flow.channels")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing or malformed `flow.channels`".into()))?;
        let model = Self::new(config, shape, channels)?;
        let base = model.init_params::<f32>(0);
        let expected = if kind == Some("flow") { base } else { model.init_control(&base, 0) };
        if expected.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, architecture expects {}",
                ckpt.params.len(),
                expected.len()
            )));
        }
        for (name, t) in expected.iter() {
            let got = ckpt.params.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, architecture expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(model)
    }
}

/// Guided velocity with per-chunk conditions, for plain and tiled sampling.
pub struct GuidedField<'a> {
    pub model: &'a VelocityModel,
    pub params: &'a ParamSet<f32>,
    pub control: Option<&'a ParamSet<f32>>,
    pub scale: f64,
    pub conditions: BTreeMap<[usize; 3], ChunkCondition>,
}

/// Layout and optional partial-scan latent of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkCondition {
    pub layout: LayoutMap,
    pub zp: Option<Vec<f32>>,
}

impl VelocityField for GuidedField<'_> {
    fn velocity(&self, z: &[f32], shape: [usize; 3], t: f64, origin: [usize; 3]) -> Result<Vec<f32>> {
        if shape != self.model.shape {
            return Err(Error::InvalidArgument(format!("chunk shape {shape:?} != model grid {:?}", self.model.shape)));
        }
        let cond = self
            .conditions
            .get(&origin)
            .ok_or_else(|| Error::InvalidArgument(format!("no condition for chunk origin {origin:?}")))?;
        let control = match (self.control, &cond.zp) {
            (Some(c), Some(zp)) => Some((c, zp.as_slice())),
            (None, None) => None,
            _ => return Err(Error::InvalidArgument("control parameters and partial latents must be given together".into())),
        };
        self.model.cfg_velocity(self.params, z, t, &cond.layout, self.scale, control)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VelocityModel {
        let cfg = FlowConfig { hidden: 12, blocks: 2, heads: 2, attention_blocks: vec![1], layout_dim: 4, control_rank: 2, ..Default::default() };
        VelocityModel::new(cfg, [2, 2, 2], 3).unwrap()
    }

    fn randomized(model: &VelocityModel, seed: u64) -> ParamSet<f32> {
        // perturb every tensor so zero-initialized paths are active
        let mut p = model.init_params::<f32>(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let names: Vec<String> = p.iter().map(|(k, _)| k.clone()).collect();
        for n in names {
            for x in p.get_mut(&n).unwrap().data_mut() {
                *x += 0.2 * rng.sample::<f32, _>(StandardNormal);
            }
        }
        p
    }

    #[test]
    fn interpolation_endpoints() {
        let z0 = vec![0.0, 1.0];
        let z1 = vec![2.0, 3.0];
        assert_eq!(interpolate(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(interpolate(&z0, &z1, 1.0).unwrap(), z1);
        assert_eq!(interpolate(&[0.0; 2], &[2.0; 2], 0.5).unwrap(), vec![1.0; 2]);
    }

    #[test]
    fn fresh_model_outputs_zero() {
        let m = tiny();
        let p = m.init_params::<f32>(0);
        let v = m.velocity(&p, &gaussian_noise(24, 1), 0.3, None, None).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn control_starts_as_identity() {
        let m = tiny();
        let p = randomized(&m, 3);
        let c = m.init_control(&p, 4);
        assert_eq!(c.len(), p.len() + 1 + 2 * m.config.blocks);
        let z = gaussian_noise(24, 5);
        let zp = gaussian_noise(24, 6);
        let base = m.velocity(&p, &z, 0.4, None, None).unwrap();
        let ctrl = m.velocity(&p, &z, 0.4, None, Some((&c, &zp))).unwrap();
        assert!(base.iter().any(|&x| x != 0.0));
        assert_eq!(base, ctrl);
    }

    #[test]
    fn cfg_special_scales() {
        let m = tiny();
        let p = randomized(&m, 8);
        let z = gaussian_noise(24, 9);
        let layout = LayoutMap { values: gaussian_noise(32, 10), ..LayoutMap::zeros([2, 2, 2], 4) };
        let cond = m.velocity(&p, &z, 0.5, Some(&layout), None).unwrap();
        let null = m.velocity(&p, &z, 0.5, None, None).unwrap();
        assert_ne!(cond, null);
        assert_eq!(m.cfg_velocity(&p, &z, 0.5, &layout, 1.0, None).unwrap(), cond);
        assert_eq!(m.cfg_velocity(&p, &z, 0.5, &layout, 0.0, None).unwrap(), null);
        let nl = LayoutMap::null([2, 2, 2], 4);
        assert_eq!(m.cfg_velocity(&p, &z, 0.5, &nl, 3.0, None).unwrap(), null);
    }

    struct Constant(f32);

    impl VelocityField for Constant {
        fn velocity(&self, z: &[f32], _: [usize; 3], _: f64, _: [usize; 3]) -> Result<Vec<f32>> {
            Ok(vec![self.0; z.len()])
        }
    }

    #[test]
    fn euler_on_constant_field() {
        let z = euler_sample(&Constant(0.5), [1, 1, 4], 1, 4, 11).unwrap();
        let z0 = gaussian_noise(4, 11);
        for (a, b) in z.iter().zip(&z0) {
            assert!((a - (b + 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_loss_ignores_unknown_tokens() {
        let m = tiny();
        let p = randomized(&m, 12);
        let mask = vec![true, false, true, true, false, false, true, true];
        let layout = LayoutMap::zeros([2, 2, 2], 4);
        let z1 = gaussian_noise(24, 13);
        let mut z1b = z1.clone();
        for cell in 0..8 {
            if !mask[cell] {
                z1b[cell * 3..cell * 3 + 3].copy_from_slice(&[9.0, -9.0, 4.0]);
            }
        }
        let a = fm_loss(&m, &p, &z1, &mask, &layout, 0.1, 14).unwrap().unwrap();
        let b = fm_loss(&m, &p, &z1b, &mask, &layout, 0.1, 14).unwrap().unwrap();
        assert_eq!(a, b);
        assert!(fm_loss(&m, &p, &z1, &[false; 8], &layout, 0.1, 14).unwrap().is_none());
    }

    #[test]
    fn checkpoint_meta_roundtrip() {
        let m = tiny();
        let p = m.init_params::<f32>(0);
        let back = VelocityModel::from_checkpoint(&flow_checkpoint(&m, p.clone(), BTreeMap::new())).unwrap();
        assert_eq!(back.config, m.config);
        let c = m.init_control(&p, 1);
        assert!(VelocityModel::from_checkpoint(&control_checkpoint(&m, c)).is_ok());
        assert!(VelocityModel::from_checkpoint(&flow_checkpoint(&m, ParamSet::new(), BTreeMap::new())).is_err());
    }
}
