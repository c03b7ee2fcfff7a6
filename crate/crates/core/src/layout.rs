//! Labeled box layouts painted into latent-aligned conditioning maps.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use byteorder::{LittleEndian, ReadBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutBox {
    pub centroid: [f64; 3],
    pub size: [f64; 3],
    pub label: String,
}

impl LayoutBox {
    pub fn new(centroid: [f64; 3], size: [f64; 3], label: impl Into<String>) -> Result<Self> {
        if !size.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!("box size must be positive, got {size:?}")));
        }
        Ok(Self { centroid, size, label: label.into() })
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.centroid[a] - 0.5 * self.size[a])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.centroid[a] + 0.5 * self.size[a])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }
}

/// Source of label embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, label: &str) -> Result<Vec<f64>>;
}

fn normalize_label(label: &str) -> Result<String> {
    let l = label.trim().to_lowercase();
    if l.is_empty() {
        return Err(Error::InvalidArgument("empty label".into()));
    }
    Ok(l)
}

/// Unit vectors seeded by a hash of the normalized label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedding {
    pub dim: usize,
}

impl Default for HashEmbedding {
    fn default() -> Self {
        Self { dim: 32 }
    }
}

impl EmbeddingProvider for HashEmbedding {
    fn embed(&self, label: &str) -> Result<Vec<f64>> {
        let label = normalize_label(label)?;
        let digest = Sha256::digest(label.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Provider speaking the line protocol: the request is the label followed by
/// a newline, the response a little-endian u32 dimension followed by that
/// many f32 values. Responses are memoized per normalized label.
pub struct StreamEmbedding<R, W> {
    inner: Mutex<StreamState<R, W>>,
}

struct StreamState<R, W> {
    reader: R,
    writer: W,
    cache: HashMap<String, Vec<f64>>,
}

impl<R: Read + Send, W: Write + Send> StreamEmbedding<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { inner: Mutex::new(StreamState { reader, writer, cache: HashMap::new() }) }
    }
}

impl<R: Read + Send, W: Write + Send> EmbeddingProvider for StreamEmbedding<R, W> {
    fn embed(&self, label: &str) -> Result<Vec<f64>> {
        let label = normalize_label(label)?;
        // holding the lock across the round trip makes each label single-flight
        let mut state = self.inner.lock().map_err(|_| Error::format("embedding provider", "poisoned lock"))?;
        if let Some(v) = state.cache.get(&label) {
            return Ok(v.clone());
        }
        let io = |e: std::io::Error| Error::format("embedding provider", e.to_string());
        state.writer.write_all(label.as_bytes()).map_err(io)?;
        state.writer.write_all(b"\n").map_err(io)?;
        state.writer.flush().map_err(io)?;
        let dim = state.reader.read_u32::<LittleEndian>().map_err(io)? as usize;
        if dim == 0 {
            return Err(Error::format("embedding provider", "zero-dimensional embedding"));
        }
        let mut raw = vec![0f32; dim];
        state.reader.read_f32_into::<LittleEndian>(&mut raw).map_err(io)?;
        let v: Vec<f64> = raw.into_iter().map(f64::from).collect();
        state.cache.insert(label, v.clone());
        Ok(v)
    }
}

#[cfg(unix)]
impl StreamEmbedding<std::os::unix::net::UnixStream, std::os::unix::net::UnixStream> {
    /// Connects to a provider listening on a local socket.
    pub fn connect(path: &std::path::Path) -> Result<Self> {
        let s = std::os::unix::net::UnixStream::connect(path).map_err(|e| Error::io(path, e))?;
        let r = s.try_clone().map_err(|e| Error::io(path, e))?;
        Ok(Self::new(r, s))
    }
}

/// Provider running as a child process over stdin/stdout.
pub struct SubprocessEmbedding {
    stream: StreamEmbedding<BufReader<ChildStdout>, BufWriter<ChildStdin>>,
    child: Mutex<Child>,
}

impl SubprocessEmbedding {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().ok_or_else(|| Error::format("embedding provider", "no stdin"))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::format("embedding provider", "no stdout"))?;
        Ok(Self { stream: StreamEmbedding::new(BufReader::new(stdout), BufWriter::new(stdin)), child: Mutex::new(child) })
    }
}

impl EmbeddingProvider for SubprocessEmbedding {
    fn embed(&self, label: &str) -> Result<Vec<f64>> {
        self.stream.embed(label)
    }
}

impl Drop for SubprocessEmbedding {
    fn drop(&mut self) {
        if let Ok(mut c) = self.child.lock() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

pub fn embed_label(label: &str, provider: &dyn EmbeddingProvider) -> Result<Vec<f64>> {
    provider.embed(label)
}

/// World placement of a latent grid: voxel `(0,0,0)` of the underlying
/// voxel grid sits at `origin`, and each latent cell spans `downsample`
/// voxels per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFrame {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub downsample: usize,
}

impl GridFrame {
    pub fn cell_center(&self, cell: [usize; 3]) -> [f64; 3] {
        let ds = self.downsample as f64;
        std::array::from_fn(|a| self.origin[a] + (cell[a] as f64 * ds + 0.5 * (ds - 1.0)) * self.voxel_size)
    }
}

/// Dense per-cell embeddings, cell-major (`values[cell * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutMap {
    pub shape: [usize; 3],
    pub channels: usize,
    pub values: Vec<f32>,
    pub null: bool,
}

impl LayoutMap {
    pub fn zeros(shape: [usize; 3], channels: usize) -> Self {
        Self { shape, channels, values: vec![0.0; shape.iter().product::<usize>() * channels], null: false }
    }

    pub fn null(shape: [usize; 3], channels: usize) -> Self {
        Self { null: true, ..Self::zeros(shape, channels) }
    }

    pub fn cells(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cell(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }
}

/// Paints the mean embedding of all boxes containing each cell center.
pub fn paint_layout(
    boxes: &[LayoutBox],
    frame: &GridFrame,
    shape: [usize; 3],
    provider: &dyn EmbeddingProvider,
    channels: usize,
) -> Result<LayoutMap> {
    let embeddings: Vec<Vec<f64>> = boxes.iter().map(|b| provider.embed(&b.label)).collect::<Result<_>>()?;
    if let Some(e) = embeddings.iter().find(|e| e.len() != channels) {
        return Err(Error::InvalidArgument(format!("embedding dim {} does not match {channels} channels", e.len())));
    }
    let mut map = LayoutMap::zeros(shape, channels);
    let mut acc = vec![0f64; channels];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let p = frame.cell_center([i, j, k]);
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut n = 0usize;
                for (b, e) in boxes.iter().zip(&embeddings) {
                    if b.contains(p) {
                        n += 1;
                        acc.iter_mut().zip(e).for_each(|(a, x)| *a += x);
                    }
                }
                if n > 0 {
                    let cell = (i * shape[1] + j) * shape[2] + k;
                    for c in 0..channels {
                        map.values[cell * channels + c] = (acc[c] / n as f64) as f32;
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Boxes whose AABB meets the closed box `[lo, hi]`.
pub fn boxes_for_chunk(boxes: &[LayoutBox], lo: [f64; 3], hi: [f64; 3]) -> Vec<LayoutBox> {
    boxes
        .iter()
        .filter(|b| {
            let (bl, bh) = (b.min(), b.max());
            (0..3).all(|a| bl[a] <= hi[a] && bh[a] >= lo[a])
        })
        .cloned()
        .collect()
}

/// Replaces the map by the null condition with probability `p`.
pub fn drop_condition(map: LayoutMap, p: f64, seed: u64) -> Result<LayoutMap> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("drop probability {p} outside [0, 1]")));
    }
    let u: f64 = ChaCha8Rng::seed_from_u64(seed).random();
    Ok(if u < p { LayoutMap::null(map.shape, map.channels) } else { map })
}
