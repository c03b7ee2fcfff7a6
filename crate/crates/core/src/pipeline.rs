//! End-to-end orchestration behind the command line: dataset synthesis,
//! fusion, the three training stages, tiled completion and generation, and
//! evaluation.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! scenes/scene_NNN/{scene.json, layout.json, frames/FFF.dpth}
//! volumes/scene_NNN_kKKK.stsd        fused scans, KKK = kept frame percentage
//! ckpt/{vae, vae_unmasked, flow, control}.ckpt
//! complete/scene_NNN_kKKK_sSEED.{stsd, obj, ply}
//! generate/scene_NNN_sSEED.{stsd, obj, ply}
//! metrics.jsonl
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{self, MetricRecord, VoxelRegion};
use crate::flow::{
    control_checkpoint, finetune_control, flow_checkpoint, train_flow, ChunkCondition, ControlSample, FlowSample,
    GuidedField, VelocityModel,
};
use crate::fusion::{capture_frames, degrade_scan, fuse_frames, make_scene, DepthFrame, ProceduralScene};
use crate::layout::{boxes_for_chunk, paint_layout, GridFrame, HashEmbedding, LayoutBox, LayoutMap};
use crate::par;
use crate::surface::{extract_scene_mesh, write_mesh, Mesh, MeshFormat};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamSet};
use crate::tiling::{plan_tiles, tiled_euler_sample, TilePlan};
use crate::vae::{observed_l1, train_vae, vae_checkpoint, vae_from_checkpoint, Vae, VaeConfig};
use crate::voxgrid::{DenseTsdfBlock, SparseTsdfVolume, VoxelCoord};

/// Points sampled per mesh for Chamfer and TMD.
pub const EVAL_POINTS: usize = 10_000;

/// File naming under the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputDirs {
    pub root: PathBuf,
}

fn keep_tag(keep: f64) -> String {
    format!("k{:03}", (keep * 100.0).round() as u32)
}

impl OutputDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn scene_dir(&self, scene: usize) -> PathBuf {
        self.root.join("scenes").join(format!("scene_{scene:03}"))
    }

    pub fn scene_file(&self, scene: usize) -> PathBuf {
        self.scene_dir(scene).join("scene.json")
    }

    pub fn layout_file(&self, scene: usize) -> PathBuf {
        self.scene_dir(scene).join("layout.json")
    }

    pub fn frame_file(&self, scene: usize, frame: usize) -> PathBuf {
        self.scene_dir(scene).join("frames").join(format!("{frame:03}.dpth"))
    }

    pub fn volume_file(&self, scene: usize, keep: f64) -> PathBuf {
        self.root.join("volumes").join(format!("scene_{scene:03}_{}.stsd", keep_tag(keep)))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("ckpt").join(format!("{name}.ckpt"))
    }

    pub fn completion_stem(&self, scene: usize, keep: f64, seed: u64) -> PathBuf {
        self.root.join("complete").join(format!("scene_{scene:03}_{}_s{seed}", keep_tag(keep)))
    }

    pub fn generation_stem(&self, scene: usize, seed: u64) -> PathBuf {
        self.root.join("generate").join(format!("scene_{scene:03}_s{seed}"))
    }

    pub fn metrics_file(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("json", format!("{}: {e}", path.display())))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{} does not exist; {hint}", path.display())))
    }
}

/// Per-channel affine normalization of encoder means, estimated over known
/// tokens. The flow model works in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn estimate(latents: &[(Vec<f32>, Vec<bool>)], channels: usize) -> Self {
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut n = 0usize;
        for (z, mask) in latents {
            for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                for c in 0..channels {
                    let v = z[cell * channels + c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(channels);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt().max(1e-4)) as f32).collect();
        Self { mean: mean.iter().map(|&m| m as f32).collect(), std }
    }

    pub fn normalize(&self, z: &mut [f32]) {
        let c = self.mean.len();
        for (i, v) in z.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
    }

    pub fn denormalize(&self, z: &mut [f32]) {
        let c = self.mean.len();
        for (i, v) in z.iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
    }

    pub fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let join = |v: &[f32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        meta.insert("latent.mean".into(), join(&self.mean));
        meta.insert("latent.std".into(), join(&self.std));
    }

    pub fn from_meta(meta: &BTreeMap<String, String>, channels: usize) -> Result<Self> {
        let parse = |key: &str| -> Result<Vec<f32>> {
            let v: Vec<f32> = meta
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("flow checkpoint lacks `{key}`")))?
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::Checkpoint(format!("malformed `{key}`"))))
                .collect::<Result<_>>()?;
            if v.len() != channels {
                return Err(Error::Checkpoint(format!("`{key}` has {} entries, expected {channels}", v.len())));
            }
            Ok(v)
        };
        Ok(Self { mean: parse("latent.mean")?, std: parse("latent.std")? })
    }
}

/// Sampler settings for one completion or generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub use_layout: bool,
    /// Tile overlap ratio in latent cells.
    pub overlap: f64,
}

/// Trained networks needed at inference time (EMA weights).
pub struct Models {
    pub vae: Vae,
    pub vae_params: ParamSet<f32>,
    pub flow: VelocityModel,
    pub flow_params: ParamSet<f32>,
    pub stats: LatentStats,
    pub control: Option<ParamSet<f32>>,
}

/// Training chunk cut from a fused volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneChunk {
    pub scene: usize,
    pub block: DenseTsdfBlock,
}

/// Inclusive voxel box enclosing the room of a procedural scene plus
/// `margin` voxels on every side.
pub fn room_region(scene: &ProceduralScene, voxel_size: f64, margin: i32) -> VoxelRegion {
    let lo = scene.room_min.map(|m| (m / voxel_size).floor() as i32 - margin);
    let hi = scene.room_max.map(|m| (m / voxel_size).ceil() as i32 + margin);
    VoxelRegion { lo, hi }
}

/// Voxels strictly inside the room, away from the walls by `margin` voxels.
pub fn room_interior(scene: &ProceduralScene, voxel_size: f64, margin: i32) -> VoxelRegion {
    let lo = scene.room_min.map(|m| (m / voxel_size).ceil() as i32 + margin);
    let hi = scene.room_max.map(|m| (m / voxel_size).floor() as i32 - margin);
    VoxelRegion { lo, hi }
}

/// Chunk origins tiling `region` with the configured chunk shape and overlap.
pub fn chunk_origins(region: VoxelRegion, chunk: [usize; 3], overlap: f64) -> Result<Vec<VoxelCoord>> {
    let extent: [usize; 3] = std::array::from_fn(|a| (region.hi[a] - region.lo[a] + 1).max(1) as usize);
    let ext: [usize; 3] = std::array::from_fn(|a| extent[a].max(chunk[a]));
    let plan = plan_tiles(ext, chunk, overlap)?;
    Ok(plan.origins.iter().map(|o| std::array::from_fn(|a| region.lo[a] + o[a] as i32)).collect())
}

/// Layout condition for the latent grid whose voxel origin is `origin`.
pub fn chunk_layout(
    boxes: &[LayoutBox],
    origin: VoxelCoord,
    latent_shape: [usize; 3],
    voxel_size: f64,
    downsample: usize,
    channels: usize,
) -> Result<LayoutMap> {
    let frame = GridFrame { origin: origin.map(|o| o as f64 * voxel_size), voxel_size, downsample };
    let hi: [f64; 3] = std::array::from_fn(|a| frame.origin[a] + (latent_shape[a] * downsample) as f64 * voxel_size);
    let local = boxes_for_chunk(boxes, frame.origin, hi);
    paint_layout(&local, &frame, latent_shape, &HashEmbedding { dim: channels }, channels)
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub dirs: OutputDirs,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dirs = OutputDirs::new(&config.paths.out);
        Ok(Self { config, dirs })
    }

    fn scene_seed(&self, scene: usize) -> u64 {
        self.config.data.seed.wrapping_mul(1_000_003).wrapping_add(scene as u64)
    }

    pub fn load_scene(&self, scene: usize) -> Result<ProceduralScene> {
        let path = self.dirs.scene_file(scene);
        require(&path, "run `synth` first")?;
        read_json(&path)
    }

    pub fn load_layout(&self, scene: usize) -> Result<Vec<LayoutBox>> {
        let path = self.dirs.layout_file(scene);
        require(&path, "run `synth` first")?;
        read_json(&path)
    }

    /// Generates the procedural scenes, their depth frames and layouts.
    pub fn synth(&self) -> Result<usize> {
        let d = &self.config.data;
        for i in 0..d.scenes {
            let seed = self.scene_seed(i);
            let scene = make_scene(seed, &self.config.scene)?;
            let frames = capture_frames(&scene, d.frames_per_scene, seed, &self.config.capture)?;
            write_json(&self.dirs.scene_file(i), &scene)?;
            write_json(&self.dirs.layout_file(i), &scene.layout_boxes())?;
            for (k, f) in frames.iter().enumerate() {
                let path = self.dirs.frame_file(i, k);
                create_parent(&path)?;
                f.write(&path)?;
            }
            info!("scene {i}: {} objects, {} frames", scene.objects.len(), frames.len());
        }
        Ok(d.scenes)
    }

    fn load_frames(&self, scene: usize) -> Result<Vec<DepthFrame>> {
        let n = self.config.data.frames_per_scene;
        (0..n)
            .map(|k| {
                let path = self.dirs.frame_file(scene, k);
                require(&path, "run `synth` first")?;
                DepthFrame::read(&path)
            })
            .collect()
    }

    /// Fuses every scene at each keep fraction.
    pub fn fuse(&self, keep_fractions: &[f64]) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for i in 0..self.config.data.scenes {
            let frames = self.load_frames(i)?;
            for &keep in keep_fractions {
                let kept = degrade_scan(&frames, keep, self.scene_seed(i) ^ 0x5eed)?;
                let vol = fuse_frames(&kept, &self.config.grid)?;
                let path = self.dirs.volume_file(i, keep);
                create_parent(&path)?;
                vol.write(&path)?;
                info!("scene {i} keep {keep}: {} frames, {} known voxels", kept.len(), vol.known_count());
                written.push(path);
            }
        }
        Ok(written)
    }

    pub fn load_volume(&self, scene: usize, keep: f64) -> Result<SparseTsdfVolume> {
        let path = self.dirs.volume_file(scene, keep);
        require(&path, &format!("run `fuse` with keep fraction {keep} first"))?;
        SparseTsdfVolume::read(&path)
    }

    /// Room box padded by the truncation band, so the observed band behind
    /// the walls is part of every chunk grid and completion.
    fn region(&self, scene: usize) -> Result<VoxelRegion> {
        let g = &self.config.grid;
        let margin = (g.truncation() / g.voxel_size).ceil() as i32 + 1;
        Ok(room_region(&self.load_scene(scene)?, g.voxel_size, margin))
    }

    fn chunk_grid(&self, scene: usize) -> Result<Vec<VoxelCoord>> {
        let region = self.region(scene)?;
        chunk_origins(region, self.config.chunk.shape, self.config.chunk.overlap)
    }

    fn min_known(&self) -> usize {
        let n: usize = self.config.chunk.shape.iter().product();
        (self.config.data.min_known_fraction * n as f64).ceil() as usize
    }

    /// Chunks of the fused scans at `keep`, on the per-scene chunk grid,
    /// keeping those with enough known voxels.
    pub fn chunks(&self, keep: f64) -> Result<Vec<SceneChunk>> {
        let mut out = Vec::new();
        for scene in 0..self.config.data.scenes {
            let vol = self.load_volume(scene, keep)?;
            for origin in self.chunk_grid(scene)? {
                let block = vol.extract_dense(origin, self.config.chunk.shape)?;
                if block.known_count() >= self.min_known().max(1) {
                    out.push(SceneChunk { scene, block });
                }
            }
        }
        Ok(out)
    }

    fn vae_training_chunks(&self) -> Result<Vec<DenseTsdfBlock>> {
        let mut chunks = Vec::new();
        for &keep in &self.config.data.keep_fractions {
            chunks.extend(self.chunks(keep)?.into_iter().map(|c| c.block));
        }
        Ok(chunks)
    }

    /// Trains the VAE (or its unmasked ablation) and writes its checkpoint.
    pub fn train_vae(&self, masked: bool) -> Result<PathBuf> {
        let chunks = self.vae_training_chunks()?;
        let config = VaeConfig { masked, ..self.config.vae.clone() };
        let vae = Vae::new(config, self.config.chunk.shape)?;
        let path = self.dirs.checkpoint(if masked { "vae" } else { "vae_unmasked" });
        create_parent(&path)?;
        let every = self.config.train.vae.log_every.max(1);
        info!("training VAE (masked={masked}) on {} chunks", chunks.len());
        let params = train_vae(&vae, &chunks, &self.config.train.vae, Some(&path), |s| {
            if s.step % every == 0 {
                info!(
                    "vae step {} lr {:.2e} total {:.4} tsdf {:.4} cat {:.4} kl {:.1}",
                    s.step, s.lr, s.losses.total, s.losses.tsdf, s.losses.cat, s.losses.kl
                );
            }
        })?;
        write_checkpoint(&path, &vae_checkpoint(&vae, params))?;
        Ok(path)
    }

    pub fn load_vae(&self, name: &str) -> Result<(Vae, ParamSet<f32>)> {
        let path = self.dirs.checkpoint(name);
        require(&path, "run `train-vae` first")?;
        let ckpt = read_checkpoint::<f32>(&path)?;
        let vae = vae_from_checkpoint(&ckpt)?;
        if vae.chunk != self.config.chunk.shape {
            return Err(Error::Checkpoint(format!(
                "{}: VAE was trained on chunks {:?} but chunk.shape is {:?}",
                path.display(),
                vae.chunk,
                self.config.chunk.shape
            )));
        }
        Ok((vae, ckpt.params.with_ema_weights()))
    }

    fn layout_channels(&self) -> usize {
        self.config.flow.layout_dim
    }

    fn encode_chunks(&self, vae: &Vae, params: &ParamSet<f32>, chunks: &[SceneChunk]) -> Result<Vec<(Vec<f32>, Vec<bool>)>> {
        par::map_slice(chunks, |c| vae.encode(params, &c.block).map(|g| (g.mean, g.token_mask))).into_iter().collect()
    }

    fn layouts_for(&self, vae: &Vae, chunks: &[SceneChunk]) -> Result<Vec<LayoutMap>> {
        let mut boxes = BTreeMap::new();
        for c in chunks {
            if let std::collections::btree_map::Entry::Vacant(e) = boxes.entry(c.scene) {
                e.insert(self.load_layout(c.scene)?);
            }
        }
        let ds = vae.config.downsample();
        let (vs, ch) = (self.config.grid.voxel_size, self.layout_channels());
        par::map_slice(chunks, |c| chunk_layout(&boxes[&c.scene], c.block.origin, vae.latent_shape(), vs, ds, ch))
            .into_iter()
            .collect()
    }

    /// Trains the base velocity model on latents of the full scans.
    pub fn train_flow(&self) -> Result<PathBuf> {
        let (vae, vae_params) = self.load_vae("vae")?;
        let chunks = self.chunks(1.0)?;
        let latents = self.encode_chunks(&vae, &vae_params, &chunks)?;
        let channels = vae.config.latent_channels;
        let stats = LatentStats::estimate(&latents, channels);
        let layouts = self.layouts_for(&vae, &chunks)?;
        let data: Vec<FlowSample> = latents
            .into_iter()
            .zip(layouts)
            .map(|((mut z1, token_mask), layout)| {
                stats.normalize(&mut z1);
                FlowSample { z1, token_mask, layout }
            })
            .collect();
        let model = VelocityModel::new(self.config.flow.clone(), vae.latent_shape(), channels)?;
        let path = self.dirs.checkpoint("flow");
        create_parent(&path)?;
        let mut meta = BTreeMap::new();
        stats.to_meta(&mut meta);
        let every = self.config.train.flow.log_every.max(1);
        info!("training flow on {} latent chunks", data.len());
        let params = train_flow(&model, &data, &self.config.train.flow, self.config.train.drop_prob, Some(&path), |s| {
            if s.step % every == 0 {
                info!("flow step {} lr {:.2e} loss {:.4}", s.step, s.lr, s.loss);
            }
        })?;
        write_checkpoint(&path, &flow_checkpoint(&model, params, meta))?;
        Ok(path)
    }

    /// Fine-tunes the control branch on (degraded scan, full scan) chunk
    /// pairs. The base checkpoint is only read.
    pub fn train_control(&self, keep: f64) -> Result<PathBuf> {
        let (vae, vae_params) = self.load_vae("vae")?;
        let (model, base, stats) = self.load_flow()?;
        let full = self.chunks(1.0)?;
        let mut partial = Vec::with_capacity(full.len());
        let mut cache: BTreeMap<usize, SparseTsdfVolume> = BTreeMap::new();
        for c in &full {
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(c.scene) {
                e.insert(self.load_volume(c.scene, keep)?);
            }
            let block = cache[&c.scene].extract_dense(c.block.origin, self.config.chunk.shape)?;
            partial.push(SceneChunk { scene: c.scene, block });
        }
        let targets = self.encode_chunks(&vae, &vae_params, &full)?;
        let conds = self.encode_chunks(&vae, &vae_params, &partial)?;
        let layouts = self.layouts_for(&vae, &full)?;
        let data: Vec<ControlSample> = targets
            .into_iter()
            .zip(conds)
            .zip(layouts)
            .map(|(((mut z1, token_mask), (mut zp, _)), layout)| {
                stats.normalize(&mut z1);
                stats.normalize(&mut zp);
                ControlSample { z1, token_mask, zp, layout }
            })
            .collect();
        let path = self.dirs.checkpoint("control");
        create_parent(&path)?;
        let every = self.config.train.control.log_every.max(1);
        info!("fine-tuning control on {} chunk pairs (keep {keep})", data.len());
        let params =
            finetune_control(&model, &base, &data, &self.config.train.control, self.config.train.drop_prob, Some(&path), |s| {
                if s.step % every == 0 {
                    info!("control step {} lr {:.2e} loss {:.4}", s.step, s.lr, s.loss);
                }
            })?;
        write_checkpoint(&path, &control_checkpoint(&model, params))?;
        Ok(path)
    }

    pub fn load_flow(&self) -> Result<(VelocityModel, ParamSet<f32>, LatentStats)> {
        let path = self.dirs.checkpoint("flow");
        require(&path, "run `train-flow` first")?;
        let ckpt = read_checkpoint::<f32>(&path)?;
        let model = VelocityModel::from_checkpoint(&ckpt)?;
        let stats = LatentStats::from_meta(&ckpt.meta, model.channels)?;
        Ok((model, ckpt.params.with_ema_weights(), stats))
    }

    pub fn load_models(&self, with_control: bool) -> Result<Models> {
        let (vae, vae_params) = self.load_vae("vae")?;
        let (flow, flow_params, stats) = self.load_flow()?;
        if flow.shape != vae.latent_shape() || flow.channels != vae.config.latent_channels {
            return Err(Error::Checkpoint(format!(
                "flow grid {:?}x{} does not match the VAE latent grid {:?}x{}",
                flow.shape,
                flow.channels,
                vae.latent_shape(),
                vae.config.latent_channels
            )));
        }
        let control = if with_control {
            let path = self.dirs.checkpoint("control");
            require(&path, "run `train-control` first")?;
            let ckpt = read_checkpoint::<f32>(&path)?;
            let m = VelocityModel::from_checkpoint(&ckpt)?;
            if m.shape != flow.shape || m.config != flow.config {
                return Err(Error::Checkpoint("control checkpoint was trained for a different flow model".into()));
            }
            Some(ckpt.params.with_ema_weights())
        } else {
            None
        };
        Ok(Models { vae, vae_params, flow, flow_params, stats, control })
    }

    pub fn sample_options(&self) -> SampleOptions {
        let s = &self.config.sampler;
        SampleOptions { steps: s.steps, cfg_scale: s.cfg_scale, seed: s.seed, use_layout: true, overlap: self.config.chunk.overlap }
    }

    /// Completes scene `scene` from its scan at `keep` and writes the
    /// volume and meshes.
    pub fn complete(&self, scene: usize, keep: f64, opts: &SampleOptions) -> Result<(SparseTsdfVolume, Mesh)> {
        let models = self.load_models(true)?;
        let input = self.load_volume(scene, keep)?;
        let region = self.region(scene)?;
        let boxes = if opts.use_layout { Some(self.load_layout(scene)?) } else { None };
        let vol = complete_volume(&models, &input, region, boxes.as_deref(), opts)?;
        let mesh = extract_scene_mesh(&vol);
        self.write_result(&self.dirs.completion_stem(scene, keep, opts.seed), &vol, &mesh)?;
        Ok((vol, mesh))
    }

    /// Generates the room of scene `scene` from its layout alone.
    pub fn generate(&self, scene: usize, opts: &SampleOptions) -> Result<(SparseTsdfVolume, Mesh, usize)> {
        let models = self.load_models(false)?;
        let region = self.region(scene)?;
        let boxes = if opts.use_layout { Some(self.load_layout(scene)?) } else { None };
        let g = &self.config.grid;
        let (vol, tiles) = generate_volume(&models, region, g.voxel_size, g.truncation(), boxes.as_deref(), opts)?;
        let mesh = extract_scene_mesh(&vol);
        self.write_result(&self.dirs.generation_stem(scene, opts.seed), &vol, &mesh)?;
        Ok((vol, mesh, tiles))
    }

    fn write_result(&self, stem: &Path, vol: &SparseTsdfVolume, mesh: &Mesh) -> Result<()> {
        create_parent(stem)?;
        vol.write(&stem.with_extension("stsd"))?;
        write_mesh(mesh, &stem.with_extension("obj"), MeshFormat::Obj)?;
        write_mesh(mesh, &stem.with_extension("ply"), MeshFormat::Ply)
    }

    /// Metrics for the completions of `scene` at `keep` with the given
    /// sampler seeds, appended to `metrics.jsonl`.
    pub fn eval(&self, scene: usize, keep: f64, seeds: &[u64]) -> Result<Vec<MetricRecord>> {
        let input = self.load_volume(scene, keep)?;
        let target = self.load_volume(scene, 1.0)?;
        let scene_def = self.load_scene(scene)?;
        let vs = self.config.grid.voxel_size;
        let interior = room_interior(&scene_def, vs, 1);
        let target_mesh = extract_scene_mesh(&target);
        let input_mesh = extract_scene_mesh(&input);
        let mut records = Vec::new();
        let mut meshes = Vec::new();
        for &seed in seeds {
            let path = self.dirs.completion_stem(scene, keep, seed).with_extension("stsd");
            require(&path, "run `complete` with this seed first")?;
            let vol = SparseTsdfVolume::read(&path)?;
            let mesh = extract_scene_mesh(&vol);
            let tagged = |r: MetricRecord| r.tag("scene", scene).tag("keep", keep).tag("method", "completion");
            records.push(tagged(MetricRecord::new(
                "surface_iou_observed",
                eval::surface_iou(&vol, &input, None)?,
                "iou:surface,input-known",
                &[seed],
            )));
            records.push(tagged(MetricRecord::new(
                "unknown_interior",
                Some(eval::unknown_count(&vol, interior) as f64),
                "count:unknown,room-interior",
                &[seed],
            )));
            records.push(tagged(MetricRecord::new("l2", eval::masked_l2(&vol, &target, None)?, eval::L2_CONVENTION, &[seed])));
            let cd = match (eval::sample_points(&mesh, EVAL_POINTS, seed), eval::sample_points(&target_mesh, EVAL_POINTS, seed)) {
                (Ok(a), Ok(b)) => Some(eval::chamfer(&a, &b)?),
                _ => None,
            };
            records.push(tagged(MetricRecord::new("cd_vs_full_scan", cd, eval::CHAMFER_CONVENTION, &[seed])));
            meshes.push(mesh);
        }
        if meshes.len() >= 2 {
            let v = eval::tmd(&meshes[0], &meshes[1], EVAL_POINTS, 0).ok();
            records.push(
                MetricRecord::new("tmd", v, eval::CHAMFER_CONVENTION, &seeds[..2])
                    .tag("scene", scene)
                    .tag("keep", keep)
                    .tag("method", "completion"),
            );
        }
        // The copy-input baseline returns the scan itself for every seed.
        let base = eval::tmd(&input_mesh, &input_mesh, EVAL_POINTS, 0).ok();
        records.push(
            MetricRecord::new("tmd", base, eval::CHAMFER_CONVENTION, seeds)
                .tag("scene", scene)
                .tag("keep", keep)
                .tag("method", "copy-input"),
        );
        records.push(
            MetricRecord::new("l2", eval::masked_l2(&input, &target, None)?, eval::L2_CONVENTION, &[])
                .tag("scene", scene)
                .tag("keep", keep)
                .tag("method", "copy-input"),
        );
        for name in ["vae", "vae_unmasked"] {
            if self.dirs.checkpoint(name).exists() {
                let (vae, params) = self.load_vae(name)?;
                let l1 = observed_reconstruction_l1(&vae, &params, &self.chunks(keep)?)?;
                records.push(MetricRecord::new("observed_l1", l1, "l1:mean-abs-tsdf,input-known", &[]).tag("model", name));
            }
        }
        let path = self.dirs.metrics_file();
        create_parent(&path)?;
        eval::append_metrics(&path, &records)?;
        Ok(records)
    }
}

/// Mean over chunks of the reconstruction L1 on known voxels.
pub fn observed_reconstruction_l1(vae: &Vae, params: &ParamSet<f32>, chunks: &[SceneChunk]) -> Result<Option<f64>> {
    let per: Vec<Result<Option<f64>>> = par::map_slice(chunks, |c| {
        let z = vae.encode(params, &c.block)?;
        let pred = vae.decode(params, &z.mean, c.block.truncation)?;
        Ok(observed_l1(&pred, &c.block))
    });
    let mut sum = 0.0;
    let mut n = 0;
    for v in per {
        if let Some(x) = v? {
            sum += x;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Latent tiling of a voxel region; the region is padded so that it covers
/// whole latent cells and at least one model chunk.
fn latent_plan(models: &Models, region: VoxelRegion, overlap: f64) -> Result<(TilePlan, VoxelCoord)> {
    let ds = models.vae.config.downsample();
    let extent: [usize; 3] = std::array::from_fn(|a| {
        let voxels = (region.hi[a] - region.lo[a] + 1).max(1) as usize;
        voxels.div_ceil(ds).max(models.flow.shape[a])
    });
    Ok((plan_tiles(extent, models.flow.shape, overlap)?, region.lo))
}

struct GridSpec {
    voxel_size: f64,
    truncation: f32,
}

fn sample_region(
    models: &Models,
    region: VoxelRegion,
    grid: GridSpec,
    boxes: Option<&[LayoutBox]>,
    scan: Option<&SparseTsdfVolume>,
    opts: &SampleOptions,
) -> Result<(SparseTsdfVolume, usize)> {
    let vae = &models.vae;
    let ds = vae.config.downsample();
    let channels = models.flow.channels;
    let (plan, lo) = latent_plan(models, region, opts.overlap)?;
    let layout_dim = models.flow.config.layout_dim;
    let voxel_origin = |o: &[usize; 3]| -> VoxelCoord { std::array::from_fn(|a| lo[a] + (o[a] * ds) as i32) };
    let vs = grid.voxel_size;
    let conditions: Vec<Result<([usize; 3], ChunkCondition)>> = par::map_slice(&plan.origins, |o| {
        let origin = voxel_origin(o);
        let layout = match boxes {
            Some(b) => chunk_layout(b, origin, plan.chunk, vs, ds, layout_dim)?,
            None => LayoutMap::null(plan.chunk, layout_dim),
        };
        let zp = match scan {
            Some(s) => {
                let block = s.extract_dense(origin, vae.chunk)?;
                let mut z = vae.encode(&models.vae_params, &block)?.mean;
                models.stats.normalize(&mut z);
                Some(z)
            }
            None => None,
        };
        Ok((*o, ChunkCondition { layout, zp }))
    });
    let conditions = conditions.into_iter().collect::<Result<BTreeMap<_, _>>>()?;
    let field = GuidedField {
        model: &models.flow,
        params: &models.flow_params,
        control: if scan.is_some() { models.control.as_ref() } else { None },
        scale: opts.cfg_scale,
        conditions,
    };
    if scan.is_some() && field.control.is_none() {
        return Err(Error::InvalidArgument("completion needs a control checkpoint".into()));
    }
    let z = tiled_euler_sample(&plan, channels, opts.steps, opts.seed, &field)?;
    let vol = decode_tiles(models, &plan, &z, lo, vs, grid.truncation)?;
    Ok((vol, plan.origins.len()))
}

/// Decodes every tile of a global latent and averages tsdf and logits where
/// tiles overlap, in origin order.
fn decode_tiles(models: &Models, plan: &TilePlan, z: &[f32], lo: VoxelCoord, voxel_size: f64, trunc: f32) -> Result<SparseTsdfVolume> {
    let vae = &models.vae;
    let ds = vae.config.downsample();
    let channels = models.flow.channels;
    let decoded: Vec<Result<(Vec<f32>, Vec<f32>)>> = par::map_slice(&plan.origins, |o| {
        let mut zc = plan.slice(z, channels, *o)?;
        models.stats.denormalize(&mut zc);
        let pred = vae.decode(&models.vae_params, &zc, trunc)?;
        Ok((pred.tsdf, pred.logits))
    });
    let vox: [usize; 3] = std::array::from_fn(|a| plan.extent[a] * ds);
    let n = vox.iter().product::<usize>();
    let (mut tsdf, mut logit, mut count) = (vec![0.0f64; n], vec![0.0f64; n], vec![0u32; n]);
    let c = vae.chunk;
    for (o, d) in plan.origins.iter().zip(decoded) {
        let (t, l) = d?;
        for x in 0..c[0] {
            for y in 0..c[1] {
                for zz in 0..c[2] {
                    let g = ((o[0] * ds + x) * vox[1] + o[1] * ds + y) * vox[2] + o[2] * ds + zz;
                    let i = (x * c[1] + y) * c[2] + zz;
                    tsdf[g] += t[i] as f64;
                    logit[g] += l[i] as f64;
                    count[g] += 1;
                }
            }
        }
    }
    let mut vol = SparseTsdfVolume::new(voxel_size, trunc as f64, crate::voxgrid::DEFAULT_BLOCK_EDGE)?;
    // Predicted surface voxels stay strictly inside the band so that they
    // classify as Surface.
    let band = trunc * (1.0 - 1e-3);
    for x in 0..vox[0] {
        for y in 0..vox[1] {
            for zz in 0..vox[2] {
                let g = (x * vox[1] + y) * vox[2] + zz;
                let k = count[g].max(1) as f64;
                let value = if logit[g] / k > 0.0 { ((tsdf[g] / k) as f32).clamp(-band, band) } else { trunc };
                vol.set_voxel([lo[0] + x as i32, lo[1] + y as i32, lo[2] + zz as i32], value, 1.0);
            }
        }
    }
    Ok(vol)
}

/// Control-conditioned tiled completion of `input` over `region`.
pub fn complete_volume(
    models: &Models,
    input: &SparseTsdfVolume,
    region: VoxelRegion,
    boxes: Option<&[LayoutBox]>,
    opts: &SampleOptions,
) -> Result<SparseTsdfVolume> {
    let grid = GridSpec { voxel_size: input.voxel_size(), truncation: input.truncation() as f32 };
    sample_region(models, region, grid, boxes, Some(input), opts).map(|(v, _)| v)
}

/// Layout-only generation over `region`; also returns the tile count.
pub fn generate_volume(
    models: &Models,
    region: VoxelRegion,
    voxel_size: f64,
    truncation: f64,
    boxes: Option<&[LayoutBox]>,
    opts: &SampleOptions,
) -> Result<(SparseTsdfVolume, usize)> {
    sample_region(models, region, GridSpec { voxel_size, truncation: truncation as f32 }, boxes, None, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_roundtrip_and_normalize() {
        let latents = vec![(vec![1.0, 10.0, 3.0, 30.0, 100.0, -5.0], vec![true, true, false])];
        let s = LatentStats::estimate(&latents, 2);
        assert_eq!(s.mean, vec![2.0, 20.0]);
        assert_eq!(s.std, vec![1.0, 10.0]);
        let mut z = vec![3.0, 30.0];
        s.normalize(&mut z);
        assert_eq!(z, vec![1.0, 1.0]);
        s.denormalize(&mut z);
        assert_eq!(z, vec![3.0, 30.0]);
        let mut meta = BTreeMap::new();
        s.to_meta(&mut meta);
        assert_eq!(LatentStats::from_meta(&meta, 2).unwrap(), s);
        assert!(LatentStats::from_meta(&meta, 3).is_err());
    }

    #[test]
    fn chunk_grid_covers_region() {
        let region = VoxelRegion { lo: [-1, -1, -1], hi: [70, 40, 20] };
        let origins = chunk_origins(region, [32; 3], 0.2).unwrap();
        for v in region.voxels() {
            assert!(origins.iter().any(|o| (0..3).all(|a| v[a] >= o[a] && v[a] < o[a] + 32)), "{v:?}");
        }
    }

    #[test]
    fn keep_tags() {
        let d = OutputDirs::new("o");
        assert_eq!(d.volume_file(3, 0.5), Path::new("o/volumes/scene_003_k050.stsd"));
        assert_eq!(d.completion_stem(0, 1.0, 7), Path::new("o/complete/scene_000_k100_s7"));
    }
}
