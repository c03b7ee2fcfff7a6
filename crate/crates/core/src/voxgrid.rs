//! Block-sparse TSDF volumes with three-way voxel semantics.
//!
//! Every voxel is Unknown (never observed), Empty (observed free space) or
//! Surface (observed, inside the truncation band). Unknown is encoded as zero
//! fusion weight together with the sentinel value `-truncation`; blocks that
//! were never allocated are Unknown throughout. Voxel `(i, j, k)` sits at the
//! world position `(i, j, k) * voxel_size`.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::par;

pub type VoxelCoord = [i32; 3];
pub type BlockCoord = [i32; 3];

pub const DEFAULT_BLOCK_EDGE: usize = 8;
/// Relative tolerance (times truncation) for classifying a voxel as Empty.
pub const DEFAULT_CLASS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VoxelState {
    Unknown,
    Empty,
    Surface(f32),
}

impl VoxelState {
    pub fn is_known(self) -> bool {
        !matches!(self, VoxelState::Unknown)
    }

    pub fn mask(self) -> VoxelMask {
        match self {
            VoxelState::Unknown => VoxelMask::Unknown,
            VoxelState::Empty => VoxelMask::Empty,
            VoxelState::Surface(_) => VoxelMask::Surface,
        }
    }
}

/// Per-voxel visibility class stored in dense blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum VoxelMask {
    Unknown = 0,
    Empty = 1,
    Surface = 2,
}

impl VoxelMask {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Unknown),
            1 => Some(Self::Empty),
            2 => Some(Self::Surface),
            _ => None,
        }
    }

    pub fn is_known(self) -> bool {
        self != VoxelMask::Unknown
    }
}

/// Dense `edge³` storage of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub tsdf: Vec<f32>,
    pub weight: Vec<f32>,
}

impl Block {
    fn unknown(edge: usize, truncation: f32) -> Self {
        let n = edge * edge * edge;
        Self { tsdf: vec![-truncation; n], weight: vec![0.0; n] }
    }
}

#[derive(Debug, Clone)]
pub struct SparseTsdfVolume {
    voxel_size: f64,
    truncation: f64,
    block_edge: usize,
    class_eps: f64,
    blocks: HashMap<BlockCoord, Block>,
}

impl PartialEq for SparseTsdfVolume {
    fn eq(&self, other: &Self) -> bool {
        self.voxel_size == other.voxel_size
            && self.truncation == other.truncation
            && self.block_edge == other.block_edge
            && self.blocks == other.blocks
    }
}

impl SparseTsdfVolume {
    pub fn new(voxel_size: f64, truncation: f64, block_edge: usize) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("voxel_size must be positive, got {voxel_size}")));
        }
        if !(truncation > 0.0 && truncation.is_finite()) {
            return Err(Error::InvalidArgument(format!("truncation must be positive, got {truncation}")));
        }
        if block_edge == 0 {
            return Err(Error::InvalidArgument("block_edge must be positive".into()));
        }
        Ok(Self { voxel_size, truncation, block_edge, class_eps: DEFAULT_CLASS_EPS, blocks: HashMap::new() })
    }

    /// Volume with truncation `3 × voxel_size` and 8³ blocks.
    pub fn with_voxel_size(voxel_size: f64) -> Result<Self> {
        Self::new(voxel_size, 3.0 * voxel_size, DEFAULT_BLOCK_EDGE)
    }

    /// Same grid parameters, no blocks.
    pub fn empty_like(&self) -> Self {
        Self { blocks: HashMap::new(), ..self.clone() }
    }

    pub fn set_class_eps(&mut self, relative: f64) {
        self.class_eps = relative;
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn block_edge(&self) -> usize {
        self.block_edge
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, coord: &BlockCoord) -> Option<&Block> {
        self.blocks.get(coord)
    }

    /// Block coordinates in lexicographic order.
    pub fn block_coords(&self) -> Vec<BlockCoord> {
        let mut v: Vec<_> = self.blocks.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub(crate) fn insert_block(&mut self, coord: BlockCoord, block: Block) {
        self.blocks.insert(coord, block);
    }

    pub fn world_position(&self, v: VoxelCoord) -> [f64; 3] {
        [v[0] as f64 * self.voxel_size, v[1] as f64 * self.voxel_size, v[2] as f64 * self.voxel_size]
    }

    /// Splits a voxel coordinate into its block and the index inside it.
    pub fn locate(&self, v: VoxelCoord) -> (BlockCoord, usize) {
        let e = self.block_edge as i32;
        let b = [v[0].div_euclid(e), v[1].div_euclid(e), v[2].div_euclid(e)];
        let l = [v[0].rem_euclid(e) as usize, v[1].rem_euclid(e) as usize, v[2].rem_euclid(e) as usize];
        (b, (l[0] * self.block_edge + l[1]) * self.block_edge + l[2])
    }

    /// Voxel coordinate of local index `idx` in block `b`.
    pub fn voxel_of(&self, b: BlockCoord, idx: usize) -> VoxelCoord {
        let e = self.block_edge;
        let (x, y, z) = (idx / (e * e), (idx / e) % e, idx % e);
        let e = e as i32;
        [b[0] * e + x as i32, b[1] * e + y as i32, b[2] * e + z as i32]
    }

    /// Raw `(tsdf, weight)`; absent blocks read as the Unknown sentinel.
    pub fn voxel(&self, v: VoxelCoord) -> (f32, f32) {
        let (b, i) = self.locate(v);
        match self.blocks.get(&b) {
            Some(block) => (block.tsdf[i], block.weight[i]),
            None => (-(self.truncation as f32), 0.0),
        }
    }

    fn classify_raw(&self, tsdf: f32, weight: f32) -> VoxelState {
        if weight <= 0.0 {
            VoxelState::Unknown
        } else if tsdf as f64 >= self.truncation - self.class_eps * self.truncation {
            VoxelState::Empty
        } else {
            VoxelState::Surface(tsdf)
        }
    }

    pub fn classify_voxel(&self, v: VoxelCoord) -> VoxelState {
        let (t, w) = self.voxel(v);
        self.classify_raw(t, w)
    }

    /// Writes one voxel. Zero weight stores the Unknown sentinel; tsdf is
    /// clamped to the truncation band.
    pub fn set_voxel(&mut self, v: VoxelCoord, tsdf: f32, weight: f32) {
        let trunc = self.truncation as f32;
        let (b, i) = self.locate(v);
        let edge = self.block_edge;
        let block = self.blocks.entry(b).or_insert_with(|| Block::unknown(edge, trunc));
        if weight > 0.0 {
            block.tsdf[i] = tsdf.clamp(-trunc, trunc);
            block.weight[i] = weight;
        } else {
            block.tsdf[i] = -trunc;
            block.weight[i] = 0.0;
        }
    }

    /// Number of voxels with positive weight.
    pub fn known_count(&self) -> usize {
        self.blocks.values().map(|b| b.weight.iter().filter(|&&w| w > 0.0).count()).sum()
    }

    /// Coordinates of every known voxel, sorted.
    pub fn known_voxels(&self) -> Vec<VoxelCoord> {
        let mut out = Vec::new();
        for b in self.block_coords() {
            let block = &self.blocks[&b];
            for (i, &w) in block.weight.iter().enumerate() {
                if w > 0.0 {
                    out.push(self.voxel_of(b, i));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Dense crop with visibility classes. Regions outside any block are Unknown.
    pub fn extract_dense(&self, origin: VoxelCoord, shape: [usize; 3]) -> Result<DenseTsdfBlock> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("dense shape must be positive, got {shape:?}")));
        }
        let trunc = self.truncation as f32;
        let slab = shape[1] * shape[2];
        let slabs: Vec<(Vec<f32>, Vec<VoxelMask>)> = par::map_range(shape[0], |x| {
            let mut tsdf = Vec::with_capacity(slab);
            let mut mask = Vec::with_capacity(slab);
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    let v = [origin[0] + x as i32, origin[1] + y as i32, origin[2] + z as i32];
                    let (t, w) = self.voxel(v);
                    let state = self.classify_raw(t, w);
                    tsdf.push(if state.is_known() { t } else { -trunc });
                    mask.push(state.mask());
                }
            }
            (tsdf, mask)
        });
        let mut tsdf = Vec::with_capacity(slab * shape[0]);
        let mut mask = Vec::with_capacity(slab * shape[0]);
        for (t, m) in slabs {
            tsdf.extend(t);
            mask.extend(m);
        }
        Ok(DenseTsdfBlock { origin, shape, truncation: trunc, tsdf, mask })
    }

    /// Writes a dense block back. Known voxels get `weight`; Unknown voxels
    /// are reset to the sentinel where a block already exists.
    pub fn insert_dense(&mut self, block: &DenseTsdfBlock, weight: f32) {
        for x in 0..block.shape[0] {
            for y in 0..block.shape[1] {
                for z in 0..block.shape[2] {
                    let i = block.index(x, y, z);
                    let v = [block.origin[0] + x as i32, block.origin[1] + y as i32, block.origin[2] + z as i32];
                    if block.mask[i].is_known() {
                        self.set_voxel(v, block.tsdf[i], weight);
                    } else if self.blocks.contains_key(&self.locate(v).0) {
                        self.set_voxel(v, 0.0, 0.0);
                    }
                }
            }
        }
    }

    /// Inclusive voxel bounds of all allocated blocks.
    pub fn block_bounds(&self) -> Option<(VoxelCoord, VoxelCoord)> {
        let e = self.block_edge as i32;
        let mut it = self.blocks.keys();
        let first = it.next()?;
        let (mut lo, mut hi) = (*first, *first);
        for b in it {
            for a in 0..3 {
                lo[a] = lo[a].min(b[a]);
                hi[a] = hi[a].max(b[a]);
            }
        }
        Some(([lo[0] * e, lo[1] * e, lo[2] * e], [hi[0] * e + e - 1, hi[1] * e + e - 1, hi[2] * e + e - 1]))
    }

    /// Serializes in the `STSD` little-endian format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"STSD");
        out.write_u32::<LittleEndian>(1).expect("vec write");
        out.write_f64::<LittleEndian>(self.voxel_size).expect("vec write");
        out.write_f64::<LittleEndian>(self.truncation).expect("vec write");
        out.write_u32::<LittleEndian>(self.block_edge as u32).expect("vec write");
        out.write_u64::<LittleEndian>(self.blocks.len() as u64).expect("vec write");
        for b in self.block_coords() {
            for c in b {
                out.write_i32::<LittleEndian>(c).expect("vec write");
            }
            let block = &self.blocks[&b];
            for (t, w) in block.tsdf.iter().zip(&block.weight) {
                out.write_f32::<LittleEndian>(*t).expect("vec write");
                out.write_f32::<LittleEndian>(*w).expect("vec write");
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("volume", d.to_string());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != b"STSD" {
            return Err(bad("bad magic"));
        }
        let io = |e: std::io::Error| Error::format("volume", e.to_string());
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != 1 {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let voxel_size = r.read_f64::<LittleEndian>().map_err(io)?;
        let truncation = r.read_f64::<LittleEndian>().map_err(io)?;
        let edge = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(io)?;
        let mut vol = Self::new(voxel_size, truncation, edge)?;
        let n = edge * edge * edge;
        for _ in 0..count {
            let coord = [
                r.read_i32::<LittleEndian>().map_err(io)?,
                r.read_i32::<LittleEndian>().map_err(io)?,
                r.read_i32::<LittleEndian>().map_err(io)?,
            ];
            let mut block = Block { tsdf: Vec::with_capacity(n), weight: Vec::with_capacity(n) };
            for _ in 0..n {
                block.tsdf.push(r.read_f32::<LittleEndian>().map_err(io)?);
                block.weight.push(r.read_f32::<LittleEndian>().map_err(io)?);
            }
            vol.blocks.insert(coord, block);
        }
        Ok(vol)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Dense cubic crop of a volume: the unit of encoding and sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTsdfBlock {
    pub origin: VoxelCoord,
    pub shape: [usize; 3],
    pub truncation: f32,
    pub tsdf: Vec<f32>,
    pub mask: Vec<VoxelMask>,
}

impl DenseTsdfBlock {
    /// All-Unknown block.
    pub fn unknown(origin: VoxelCoord, shape: [usize; 3], truncation: f32) -> Self {
        let n = shape.iter().product();
        Self { origin, shape, truncation, tsdf: vec![-truncation; n], mask: vec![VoxelMask::Unknown; n] }
    }

    pub fn len(&self) -> usize {
        self.tsdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tsdf.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    pub fn known_count(&self) -> usize {
        self.mask.iter().filter(|m| m.is_known()).count()
    }

    pub fn count(&self, class: VoxelMask) -> usize {
        self.mask.iter().filter(|&&m| m == class).count()
    }

    /// Sets a voxel and keeps the sentinel invariant.
    pub fn set(&mut self, i: usize, class: VoxelMask, tsdf: f32) {
        self.mask[i] = class;
        self.tsdf[i] = match class {
            VoxelMask::Unknown => -self.truncation,
            VoxelMask::Empty => self.truncation,
            VoxelMask::Surface => tsdf.clamp(-self.truncation, self.truncation),
        };
    }

    /// `CHNK` file: magic, origin 3×i32, shape 3×u32, tsdf f32 array, mask u8 array.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.len() * 5);
        out.extend_from_slice(b"CHNK");
        for c in self.origin {
            out.write_i32::<LittleEndian>(c).expect("vec write");
        }
        for s in self.shape {
            out.write_u32::<LittleEndian>(s as u32).expect("vec write");
        }
        for &t in &self.tsdf {
            out.write_f32::<LittleEndian>(t).expect("vec write");
        }
        out.extend(self.mask.iter().map(|&m| m as u8));
        out
    }

    /// Parses a `CHNK` file. The format does not carry the truncation, so the
    /// caller supplies it.
    pub fn from_bytes(bytes: &[u8], truncation: f32) -> Result<Self> {
        let io = |e: std::io::Error| Error::format("chunk", e.to_string());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != b"CHNK" {
            return Err(Error::format("chunk", "bad magic"));
        }
        let mut origin = [0i32; 3];
        for o in &mut origin {
            *o = r.read_i32::<LittleEndian>().map_err(io)?;
        }
        let mut shape = [0usize; 3];
        for s in &mut shape {
            *s = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        }
        let n: usize = shape.iter().product();
        let mut tsdf = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut tsdf).map_err(io)?;
        let mut raw = vec![0u8; n];
        r.read_exact(&mut raw).map_err(io)?;
        let mask = raw
            .into_iter()
            .map(|m| VoxelMask::from_u8(m).ok_or_else(|| Error::format("chunk", format!("mask value {m}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { origin, shape, truncation, tsdf, mask })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, truncation: f32) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, truncation)
    }
}

/// `true` where the voxel was observed.
pub fn visibility_mask(block: &DenseTsdfBlock) -> Vec<bool> {
    block.mask.iter().map(|m| m.is_known()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol() -> SparseTsdfVolume {
        SparseTsdfVolume::with_voxel_size(0.02).unwrap()
    }

    #[test]
    fn untouched_voxel_is_unknown() {
        assert_eq!(vol().classify_voxel([3, -7, 100]), VoxelState::Unknown);
    }

    #[test]
    fn classification_boundaries() {
        let mut v = vol();
        let t = v.truncation() as f32;
        v.set_voxel([0, 0, 0], t, 2.0);
        v.set_voxel([1, 0, 0], 0.5 * 0.02, 1.0);
        v.set_voxel([2, 0, 0], 0.01, 0.0);
        assert_eq!(v.classify_voxel([0, 0, 0]), VoxelState::Empty);
        assert_eq!(v.classify_voxel([1, 0, 0]), VoxelState::Surface(0.01));
        assert_eq!(v.classify_voxel([2, 0, 0]), VoxelState::Unknown);
        assert_eq!(v.voxel([2, 0, 0]).0, -t);
    }

    #[test]
    fn negative_coordinates_locate_correctly() {
        let v = vol();
        let (b, i) = v.locate([-1, -8, -9]);
        assert_eq!(b, [-1, -1, -2]);
        assert_eq!(v.voxel_of(b, i), [-1, -8, -9]);
    }

    #[test]
    fn empty_volume_extracts_all_unknown() {
        let v = vol();
        let d = v.extract_dense([5, 5, 5], [8, 8, 8]).unwrap();
        assert_eq!(d.count(VoxelMask::Unknown), 512);
        assert!(d.tsdf.iter().all(|&t| t == -(v.truncation() as f32)));
        assert!(visibility_mask(&d).iter().all(|&k| !k));
        assert!(v.extract_dense([0, 0, 0], [0, 4, 4]).is_err());
    }

    #[test]
    fn visibility_mask_counts_unknowns() {
        let mut v = vol();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    if (x + y + z) % 3 != 0 {
                        v.set_voxel([x, y, z], 0.0, 1.0);
                    }
                }
            }
        }
        let d = v.extract_dense([0, 0, 0], [4, 4, 4]).unwrap();
        let unknown = (0..64).filter(|i| (i / 16 + (i / 4) % 4 + i % 4) % 3 == 0).count();
        assert_eq!(visibility_mask(&d).iter().filter(|&&k| !k).count(), unknown);
    }

    #[test]
    fn volume_bytes_roundtrip_bit_exact() {
        let mut v = vol();
        v.set_voxel([0, 0, 0], 0.013, 3.0);
        v.set_voxel([-20, 9, 40], -0.0421, 1.0);
        let back = SparseTsdfVolume::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(back, v);
        assert!(SparseTsdfVolume::from_bytes(b"STSX").is_err());
    }

    #[test]
    fn chunk_bytes_roundtrip() {
        let mut v = vol();
        v.set_voxel([1, 2, 3], 0.01, 1.0);
        v.set_voxel([1, 2, 4], 0.06, 1.0);
        let d = v.extract_dense([0, 0, 0], [4, 4, 6]).unwrap();
        let back = DenseTsdfBlock::from_bytes(&d.to_bytes(), d.truncation).unwrap();
        assert_eq!(back, d);
    }
}
