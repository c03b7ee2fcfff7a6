//! Masked VAE compressing dense TSDF chunks into latent token grids.
//!
//! Voxel rows are laid out as `(x * ny + y) * nz + z` and carry channels on
//! the trailing axis. Each downsampling stage folds 2×2×2 children into one
//! row, projects, and applies a residual 3×3×3 neighborhood mix with clamped
//! borders. The decoder mirrors this with nearest upsampling plus a one-hot
//! sub-position code.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{
    adamw_step, lr_at, write_checkpoint, AdamConfig, Bound, Checkpoint, Graph, ParamSet, Real, Tensor, TensorError, Var,
};
use crate::voxgrid::{DenseTsdfBlock, VoxelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Channel width per resolution level, finest first. The number of
    /// downsampling stages is `widths.len() - 1`, each halving every axis.
    pub widths: Vec<usize>,
    pub latent_channels: usize,
    /// When false, Unknown voxels are fed and supervised as sentinel surface
    /// voxels (the unmasked ablation).
    pub masked: bool,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { widths: vec![8, 16, 32], latent_channels: 8, masked: true, kl_weight: 1e-6 }
    }
}

impl VaeConfig {
    pub fn stages(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn downsample(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) || self.latent_channels == 0 {
            return Err(Error::Config("vae.widths needs at least two positive entries and latent_channels > 0".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("vae.kl_weight must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let w: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        meta.insert("vae.widths".into(), w.join(","));
        meta.insert("vae.latent_channels".into(), self.latent_channels.to_string());
        meta.insert("vae.masked".into(), self.masked.to_string());
        meta.insert("vae.kl_weight".into(), self.kl_weight.to_string());
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`; not a VAE checkpoint?")));
        let bad = |k: &str| Error::Checkpoint(format!("malformed `{k}`"));
        let widths = get("vae.widths")?
            .split(',')
            .map(|w| w.parse().map_err(|_| bad("vae.widths")))
            .collect::<Result<Vec<usize>>>()?;
        Ok(Self {
            widths,
            latent_channels: get("vae.latent_channels")?.parse().map_err(|_| bad("vae.latent_channels"))?,
            masked: get("vae.masked")?.parse().map_err(|_| bad("vae.masked"))?,
            kl_weight: get("vae.kl_weight")?.parse().map_err(|_| bad("vae.kl_weight"))?,
        })
    }
}

/// Latent cells of one chunk, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub shape: [usize; 3],
    pub channels: usize,
    pub mean: Vec<f32>,
    pub logvar: Vec<f32>,
    pub token_mask: Vec<bool>,
}

impl LatentGrid {
    pub fn cells(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Per-voxel decoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct VaePrediction {
    pub shape: [usize; 3],
    pub truncation: f32,
    /// Surface-vs-empty logits.
    pub logits: Vec<f32>,
    pub tsdf: Vec<f32>,
}

impl VaePrediction {
    /// Fully known block: Surface where the logit is positive, else Empty.
    pub fn to_block(&self, origin: [i32; 3]) -> DenseTsdfBlock {
        let mut b = DenseTsdfBlock::unknown(origin, self.shape, self.truncation);
        for i in 0..b.len() {
            let class = if self.logits[i] > 0.0 { VoxelMask::Surface } else { VoxelMask::Empty };
            b.set(i, class, self.tsdf[i]);
        }
        b
    }
}

/// Marks latent cells with at least one known voxel in their receptive cell.
pub fn token_mask(block: &DenseTsdfBlock, downsample: usize) -> Result<Vec<bool>> {
    let s = block.shape;
    if s.iter().any(|&n| n % downsample != 0) {
        return Err(Error::InvalidArgument(format!("chunk shape {s:?} not divisible by {downsample}")));
    }
    let l = [s[0] / downsample, s[1] / downsample, s[2] / downsample];
    let mut mask = vec![false; l.iter().product()];
    for x in 0..s[0] {
        for y in 0..s[1] {
            for z in 0..s[2] {
                if block.mask[block.index(x, y, z)].is_known() {
                    mask[((x / downsample) * l[1] + y / downsample) * l[2] + z / downsample] = true;
                }
            }
        }
    }
    Ok(mask)
}

/// `z = mean + exp(logvar / 2) * eps` with seeded standard normal `eps`.
pub fn sample_latent(grid: &LatentGrid, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid.mean
        .iter()
        .zip(&grid.logvar)
        .map(|(&m, &lv)| {
            let e: f64 = rng.sample(StandardNormal);
            (m as f64 + (0.5 * lv as f64).exp() * e) as f32
        })
        .collect()
}

struct Level {
    shape: [usize; 3],
    /// Fine row for each (coarse cell, child) pair, children contiguous.
    fold: Option<Arc<Vec<u32>>>,
    /// 27 clamped neighbors per cell.
    neighbors: Arc<Vec<u32>>,
    /// Parent row at the next coarser level for each cell.
    parent: Option<Arc<Vec<u32>>>,
    /// Child code `dx * 4 + dy * 2 + dz` for each cell.
    child: Vec<usize>,
}

fn flat(s: [usize; 3], x: usize, y: usize, z: usize) -> u32 {
    ((x * s[1] + y) * s[2] + z) as u32
}

impl Level {
    fn new(shape: [usize; 3], has_coarser: bool) -> Self {
        let mut neighbors = Vec::with_capacity(shape.iter().product::<usize>() * 27);
        let mut child = Vec::new();
        let mut parent = Vec::new();
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let coarse = [shape[0] / 2, shape[1] / 2, shape[2] / 2];
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    for dx in -1..=1isize {
                        for dy in -1..=1isize {
                            for dz in -1..=1isize {
                                neighbors.push(flat(
                                    shape,
                                    clamp(x as isize + dx, shape[0]),
                                    clamp(y as isize + dy, shape[1]),
                                    clamp(z as isize + dz, shape[2]),
                                ));
                            }
                        }
                    }
                    child.push((x % 2) * 4 + (y % 2) * 2 + z % 2);
                    if has_coarser {
                        parent.push(flat(coarse, x / 2, y / 2, z / 2));
                    }
                }
            }
        }
        let fold = has_coarser.then(|| {
            let mut f = Vec::with_capacity(shape.iter().product());
            for cx in 0..coarse[0] {
                for cy in 0..coarse[1] {
                    for cz in 0..coarse[2] {
                        for c in 0..8 {
                            f.push(flat(shape, 2 * cx + c / 4, 2 * cy + (c / 2) % 2, 2 * cz + c % 2));
                        }
                    }
                }
            }
            Arc::new(f)
        });
        Self {
            shape,
            fold,
            neighbors: Arc::new(neighbors),
            parent: has_coarser.then(|| Arc::new(parent)),
            child,
        }
    }

    fn cells(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Architecture bound to a chunk shape.
pub struct Vae {
    pub config: VaeConfig,
    pub chunk: [usize; 3],
    levels: Vec<Level>,
}

/// Graph handles produced by [`Vae::loss_graph`].
#[derive(Debug, Clone, Copy)]
pub struct VaeLossVars {
    pub total: Var,
    pub tsdf: Var,
    pub cat: Var,
    pub kl: Var,
}

/// Scalar loss values of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct VaeLosses {
    pub total: f64,
    pub tsdf: f64,
    pub cat: f64,
    pub kl: f64,
}

type Res<T> = std::result::Result<T, TensorError>;

impl Vae {
    pub fn new(config: VaeConfig, chunk: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let ds = config.downsample();
        if chunk.iter().any(|&n| n == 0 || n % ds != 0) {
            return Err(Error::InvalidArgument(format!("chunk shape {chunk:?} not divisible by downsample factor {ds}")));
        }
        let stages = config.stages();
        let levels = (0..=stages)
            .map(|s| Level::new([chunk[0] >> s, chunk[1] >> s, chunk[2] >> s], s < stages))
            .collect();
        Ok(Self { config, chunk, levels })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.levels.last().expect("at least one level").shape
    }

    pub fn latent_cells(&self) -> usize {
        self.levels.last().expect("at least one level").cells()
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = &self.config.widths;
        let c = self.config.latent_channels;
        let mut p = ParamSet::new();
        let mut lin = |p: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize, gain: f64| {
            p.insert_normal(format!("{name}.w"), &[fan_in, fan_out], gain / (fan_in as f64).sqrt(), &mut rng);
            p.insert_zeros(format!("{name}.b"), &[fan_out]);
        };
        lin(&mut p, "enc.in", 3, w[0], 1.0);
        lin(&mut p, "enc.stem", w[0], w[0], 1.0);
        for s in 0..self.config.stages() {
            lin(&mut p, &format!("enc.down{s}"), 8 * w[s], w[s + 1], 1.0);
            lin(&mut p, &format!("enc.mix{s}"), 27 * w[s + 1], w[s + 1], 0.5);
        }
        let top = *w.last().expect("validated");
        lin(&mut p, "enc.head", top, 2 * c, 0.5);
        lin(&mut p, "dec.in", c, top, 1.0);
        lin(&mut p, "dec.mix_in", 27 * top, top, 0.5);
        for s in (0..self.config.stages()).rev() {
            lin(&mut p, &format!("dec.up{s}"), w[s + 1] + 8, w[s], 1.0);
            lin(&mut p, &format!("dec.mix{s}"), 27 * w[s], w[s], 0.5);
        }
        lin(&mut p, "dec.out", w[0], w[0], 1.0);
        lin(&mut p, "dec.head", w[0], 2, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        p.insert_normal("enc.empty", &[w[0]], 0.5, &mut rng);
        p
    }

    fn lin<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Res<Var> {
        let w = p.get(&format!("{name}.w"))?;
        let b = p.get(&format!("{name}.b"))?;
        g.linear(x, w, Some(b))
    }

    fn mix<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, level: &Level, h: Var) -> Res<Var> {
        let width = g.shape(h)[1];
        let n = g.gather_rows(h, level.neighbors.clone())?;
        let n = g.reshape(n, [level.cells(), 27 * width])?;
        let m = Self::lin(g, p, name, n)?;
        let m = g.silu(m);
        g.add(h, m)
    }

    fn input_features(&self, block: &DenseTsdfBlock) -> Result<(Vec<f64>, Vec<bool>)> {
        if block.shape != self.chunk {
            return Err(Error::InvalidArgument(format!("block shape {:?} != chunk shape {:?}", block.shape, self.chunk)));
        }
        let trunc = block.truncation as f64;
        let mut feats = Vec::with_capacity(block.len() * 3);
        let mut known = Vec::with_capacity(block.len());
        for (m, &t) in block.mask.iter().zip(&block.tsdf) {
            let f = match (m, self.config.masked) {
                (VoxelMask::Surface, _) => [t as f64 / trunc, 1.0, 0.0],
                (VoxelMask::Empty, _) => [1.0, 0.0, 1.0],
                (VoxelMask::Unknown, true) => [0.0, 0.0, 0.0],
                (VoxelMask::Unknown, false) => [-1.0, 0.0, 0.0],
            };
            feats.extend_from_slice(&f);
            known.push(m.is_known() || !self.config.masked);
        }
        Ok((feats, known))
    }

    /// Encoder graph; returns `(mean, logvar)` rows over latent cells.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, block: &DenseTsdfBlock) -> Result<(Var, Var)> {
        let (feats, known) = self.input_features(block)?;
        let x = g.constant(Tensor::new([block.len(), 3], feats.into_iter().map(T::c).collect())?);
        let mut h = Self::lin(g, p, "enc.in", x)?;
        if self.config.masked {
            let empty = p.get("enc.empty")?;
            h = g.select_rows(h, empty, Arc::new(known))?;
        }
        h = g.silu(h);
        h = Self::lin(g, p, "enc.stem", h)?;
        h = g.silu(h);
        for s in 0..self.config.stages() {
            let width = g.shape(h)[1];
            let fold = self.levels[s].fold.clone().expect("coarser level exists");
            h = g.gather_rows(h, fold)?;
            h = g.reshape(h, [self.levels[s + 1].cells(), 8 * width])?;
            h = Self::lin(g, p, &format!("enc.down{s}"), h)?;
            h = g.silu(h);
            h = Self::mix(g, p, &format!("enc.mix{s}"), &self.levels[s + 1], h)?;
        }
        let out = Self::lin(g, p, "enc.head", h)?;
        let c = self.config.latent_channels;
        Ok((g.narrow(out, 1, 0, c)?, g.narrow(out, 1, c, c)?))
    }

    /// Decoder graph; returns `(logits, tsdf)` columns over voxels.
    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: Var, truncation: f64) -> Result<(Var, Var)> {
        let stages = self.config.stages();
        let mut h = Self::lin(g, p, "dec.in", z)?;
        h = g.silu(h);
        h = Self::mix(g, p, "dec.mix_in", &self.levels[stages], h)?;
        for s in (0..stages).rev() {
            let level = &self.levels[s];
            h = g.gather_rows(h, level.parent.clone().expect("coarser level exists"))?;
            let code = g.constant(Tensor::from_fn([level.cells(), 8], |i| {
                if level.child[i / 8] == i % 8 {
                    T::one()
                } else {
                    T::zero()
                }
            }));
            h = g.concat(&[h, code], 1)?;
            h = Self::lin(g, p, &format!("dec.up{s}"), h)?;
            h = g.silu(h);
            h = Self::mix(g, p, &format!("dec.mix{s}"), level, h)?;
        }
        h = Self::lin(g, p, "dec.out", h)?;
        h = g.silu(h);
        let out = Self::lin(g, p, "dec.head", h)?;
        let logits = g.narrow(out, 1, 0, 1)?;
        let raw = g.narrow(out, 1, 1, 1)?;
        let t = g.tanh(raw);
        Ok((logits, g.scale(t, T::c(truncation))))
    }

    /// Full training loss. `eps` holds reparameterization noise (one value
    /// per latent entry); `None` decodes the mean. Returns `None` when the
    /// block has no supervised voxels.
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        block: &DenseTsdfBlock,
        eps: Option<&[f64]>,
    ) -> Result<Option<VaeLossVars>> {
        let masked = self.config.masked;
        let trunc = block.truncation as f64;
        let mut known = Vec::new();
        let mut labels = Vec::new();
        let mut surface = Vec::new();
        let mut targets = Vec::new();
        for (i, (m, &t)) in block.mask.iter().zip(&block.tsdf).enumerate() {
            let (is_known, is_surface, target) = match m {
                VoxelMask::Surface => (true, true, t as f64),
                VoxelMask::Empty => (true, false, trunc),
                VoxelMask::Unknown => (!masked, true, -trunc),
            };
            if !is_known {
                continue;
            }
            known.push(i as u32);
            labels.push(if is_surface { 1.0 } else { 0.0 });
            if is_surface {
                surface.push(i as u32);
                targets.push(target);
            }
        }
        if known.is_empty() {
            return Ok(None);
        }
        let tokens: Vec<u32> = if masked {
            token_mask(block, self.config.downsample())?
                .iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(i, _)| i as u32)
                .collect()
        } else {
            (0..self.latent_cells() as u32).collect()
        };

        let (mean, logvar) = self.encode_graph(g, p, block)?;
        let z = match eps {
            Some(eps) => {
                let e = g.constant(Tensor::new(g.shape(mean).to_vec(), eps.iter().map(|&x| T::c(x)).collect())?);
                let half = g.scale(logvar, T::c(0.5));
                let std = g.exp(half);
                let noise = g.mul(std, e)?;
                g.add(mean, noise)?
            }
            None => mean,
        };
        let (logits, tsdf) = self.decode_graph(g, p, z, trunc)?;

        let n_surface = surface.len();
        let l_tsdf = if n_surface > 0 {
            let pred = g.gather_rows(tsdf, Arc::new(surface))?;
            let tgt = g.constant(Tensor::new([n_surface, 1], targets.into_iter().map(T::c).collect())?);
            let d = g.sub(pred, tgt)?;
            let a = g.abs(d);
            g.mean_all(a)
        } else {
            g.constant(Tensor::scalar(T::zero()))
        };

        let n_known = known.len();
        let x = g.gather_rows(logits, Arc::new(known))?;
        let y = g.constant(Tensor::new([n_known, 1], labels.into_iter().map(T::c).collect())?);
        let sp = g.softplus(x);
        let xy = g.mul(x, y)?;
        let bce = g.sub(sp, xy)?;
        let l_cat = g.mean_all(bce);

        let idx = Arc::new(tokens);
        let mu = g.gather_rows(mean, idx.clone())?;
        let lv = g.gather_rows(logvar, idx)?;
        let mu2 = g.square(mu);
        let elv = g.exp(lv);
        let s = g.add(mu2, elv)?;
        let s = g.sub(s, lv)?;
        let s = g.add_scalar(s, T::c(-1.0));
        let per_token = g.sum(s, 1)?;
        let kl_mean = g.mean_all(per_token);
        let l_kl = g.scale(kl_mean, T::c(0.5));

        let rec = g.add(l_tsdf, l_cat)?;
        let kl_term = g.scale(l_kl, T::c(self.config.kl_weight));
        let total = g.add(rec, kl_term)?;
        Ok(Some(VaeLossVars { total, tsdf: l_tsdf, cat: l_cat, kl: l_kl }))
    }

    /// Posterior parameters for one block.
    pub fn encode(&self, params: &ParamSet<f32>, block: &DenseTsdfBlock) -> Result<LatentGrid> {
        let mut g = Graph::new();
        let p = g.bind(params, false);
        let (mean, logvar) = self.encode_graph(&mut g, &p, block)?;
        Ok(LatentGrid {
            shape: self.latent_shape(),
            channels: self.config.latent_channels,
            mean: g.value(mean).data().to_vec(),
            logvar: g.value(logvar).data().to_vec(),
            token_mask: token_mask(block, self.config.downsample())?,
        })
    }

    pub fn decode(&self, params: &ParamSet<f32>, z: &[f32], truncation: f32) -> Result<VaePrediction> {
        let c = self.config.latent_channels;
        if z.len() != self.latent_cells() * c {
            return Err(Error::InvalidArgument(format!("latent has {} values, expected {}", z.len(), self.latent_cells() * c)));
        }
        let mut g = Graph::new();
        let p = g.bind(params, false);
        let zv = g.constant(Tensor::new([self.latent_cells(), c], z.to_vec())?);
        let (logits, tsdf) = self.decode_graph(&mut g, &p, zv, truncation as f64)?;
        Ok(VaePrediction {
            shape: self.chunk,
            truncation,
            logits: g.value(logits).data().to_vec(),
            tsdf: g.value(tsdf).data().to_vec(),
        })
    }

    /// Loss values and parameter gradients of one sample.
    pub fn loss_and_grads<T: Real>(
        &self,
        params: &ParamSet<T>,
        block: &DenseTsdfBlock,
        eps: Option<&[f64]>,
    ) -> Result<Option<(VaeLosses, BTreeMap<String, Tensor<T>>)>> {
        let mut g = Graph::new();
        let p = g.bind(params, true);
        let Some(l) = self.loss_graph(&mut g, &p, block, eps)? else {
            return Ok(None);
        };
        let grads = g.backward(l.total)?.collect(&p);
        let v = |x: Var| g.value(x).item().f64();
        Ok(Some((VaeLosses { total: v(l.total), tsdf: v(l.tsdf), cat: v(l.cat), kl: v(l.kl) }, grads)))
    }
}

/// Mean absolute error over known target voxels, reading predicted Empty
/// voxels as `+truncation`.
pub fn observed_l1(pred: &VaePrediction, target: &DenseTsdfBlock) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..target.len() {
        if !target.mask[i].is_known() {
            continue;
        }
        let eff = if pred.logits[i] > 0.0 { pred.tsdf[i] } else { pred.truncation };
        sum += (eff as f64 - target.tsdf[i] as f64).abs();
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub losses: VaeLosses,
    pub samples: usize,
}

/// Averages per-sample gradient maps in a fixed order.
pub(crate) fn mean_grads<T: Real>(parts: Vec<BTreeMap<String, Tensor<T>>>) -> BTreeMap<String, Tensor<T>> {
    let n = parts.len();
    let mut it = parts.into_iter();
    let Some(mut acc) = it.next() else {
        return BTreeMap::new();
    };
    for part in it {
        for (k, g) in part {
            let a = acc.get_mut(&k).expect("same parameter set");
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x = *x + *y;
            }
        }
    }
    let inv = T::c(1.0 / n as f64);
    for t in acc.values_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = *x * inv);
    }
    acc
}

pub(crate) fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Trains on a set of chunks; NaN losses abort after saving the last finite
/// parameters to `checkpoint`.
pub fn train_vae(
    vae: &Vae,
    chunks: &[DenseTsdfBlock],
    train: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<ParamSet<f32>> {
    if chunks.is_empty() {
        return Err(Error::Empty("VAE training set".into()));
    }
    let mut params = vae.init_params::<f32>(train.seed);
    let adam = AdamConfig { weight_decay: train.weight_decay, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let noise_len = vae.latent_cells() * vae.config.latent_channels;
    for step in 0..train.steps {
        let picks = batch_indices(&mut rng, chunks.len(), train.batch);
        let noise: Vec<Vec<f64>> =
            picks.iter().map(|_| (0..noise_len).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let jobs: Vec<(usize, &Vec<f64>)> = picks.iter().copied().zip(&noise).collect();
        let results = par::map_slice(&jobs, |&(i, eps)| vae.loss_and_grads(&params, &chunks[i], Some(eps)));
        let mut losses = VaeLosses::default();
        let mut grads = Vec::new();
        for r in results {
            if let Some((l, gr)) = r? {
                losses.total += l.total;
                losses.tsdf += l.tsdf;
                losses.cat += l.cat;
                losses.kl += l.kl;
                grads.push(gr);
            }
        }
        let samples = grads.len();
        if samples == 0 {
            continue;
        }
        let k = samples as f64;
        losses = VaeLosses { total: losses.total / k, tsdf: losses.tsdf / k, cat: losses.cat / k, kl: losses.kl / k };
        if !losses.total.is_finite() {
            return Err(save_diverged(vae, &params, checkpoint, step));
        }
        let lr = lr_at(step, train.steps, train.warmup, train.lr);
        adamw_step(&mut params, &mean_grads(grads), lr, &adam)?;
        params.update_ema(train.ema_decay);
        on_step(&StepLog { step, lr, losses, samples });
    }
    Ok(params)
}

fn save_diverged(vae: &Vae, params: &ParamSet<f32>, checkpoint: Option<&Path>, step: usize) -> Error {
    let saved = checkpoint.map(Path::to_path_buf).unwrap_or_default();
    if let Some(path) = checkpoint {
        if let Err(e) = write_checkpoint(path, &vae_checkpoint(vae, params.clone())) {
            return e;
        }
    }
    Error::Diverged { step, saved }
}

/// Checkpoint with the architecture recorded in the metadata.
pub fn vae_checkpoint(vae: &Vae, params: ParamSet<f32>) -> Checkpoint<f32> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "vae".into());
    meta.insert("vae.chunk".into(), vae.chunk.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
    vae.config.to_meta(&mut meta);
    Checkpoint { meta, params }
}

/// Rebuilds the architecture recorded in a checkpoint.
pub fn vae_from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Vae> {
    if ckpt.meta.get("kind").map(String::as_str) != Some("vae") {
        return Err(Error::Checkpoint("not a VAE checkpoint".into()));
    }
    let config = VaeConfig::from_meta(&ckpt.meta)?;
    let chunk: Vec<usize> = ckpt
        .meta
        .get("vae.chunk")
        .ok_or_else(|| Error::Checkpoint("missing `vae.chunk`".into()))?
        .split(',')
        .map(|c| c.parse().map_err(|_| Error::Checkpoint("malformed `vae.chunk`".into())))
        .collect::<Result<_>>()?;
    let chunk: [usize; 3] = chunk.try_into().map_err(|_| Error::Checkpoint("`vae.chunk` needs 3 entries".into()))?;
    let vae = Vae::new(config, chunk)?;
    let expected = vae.init_params::<f32>(0);
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
    Ok(vae)
}
