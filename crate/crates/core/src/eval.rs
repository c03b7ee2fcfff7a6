//! Geometric metrics: Chamfer distance, observed-region TSDF error, diversity
//! between completions, and simple volume comparisons.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::surface::Mesh;
use crate::voxgrid::{SparseTsdfVolume, VoxelCoord, VoxelState};

/// Convention tag for [`chamfer`]: mean squared nearest-neighbour distance,
/// summed over both directions.
pub const CHAMFER_CONVENTION: &str = "chamfer:squared,mean-a2b+mean-b2a";
pub const L2_CONVENTION: &str = "l2:mean-squared-tsdf,target-known,pred-unknown=sentinel";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

/// Area-weighted uniform samples on the surface of `mesh`.
pub fn sample_points(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample_points needs n >= 1".into()));
    }
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t)).collect();
    let dist = WeightedIndex::new(&areas).map_err(|_| Error::Empty("mesh has no triangles with positive area".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let [a, b, c] = mesh.triangle(rng.sample(&dist));
            let s = rng.random::<f64>().sqrt();
            let r: f64 = rng.random();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r), s * r);
            [0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k])
        })
        .collect();
    Ok(PointCloud { points })
}

#[inline]
pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Read-only nearest-neighbour index over a point cloud.
pub struct NearestIndex<'a> {
    points: &'a [[f64; 3]],
    tree: ImmutableKdTree<f64, 3>,
}

impl<'a> NearestIndex<'a> {
    pub fn new(cloud: &'a PointCloud) -> Result<Self> {
        if cloud.points.is_empty() {
            return Err(Error::Empty("point cloud is empty".into()));
        }
        Ok(Self { points: &cloud.points, tree: ImmutableKdTree::new_from_slice(&cloud.points) })
    }

    /// Squared distance from `q` to its nearest indexed point.
    pub fn nearest_squared(&self, q: &[f64; 3]) -> f64 {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(q);
        // Recomputed so the value matches a brute-force scan bit for bit.
        squared_distance(q, &self.points[nn.item as usize])
    }
}

fn mean_nearest(from: &PointCloud, to: &NearestIndex) -> f64 {
    let d = par::map_slice(&from.points, |p| to.nearest_squared(p));
    d.iter().sum::<f64>() / d.len() as f64
}

/// Squared-distance Chamfer: mean over `a` of the squared distance to the
/// nearest point of `b`, plus the same from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let ia = NearestIndex::new(a)?;
    let ib = NearestIndex::new(b)?;
    Ok(mean_nearest(a, &ib) + mean_nearest(b, &ia))
}

/// Axis-aligned voxel box, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelRegion {
    pub lo: VoxelCoord,
    pub hi: VoxelCoord,
}

impl VoxelRegion {
    pub fn contains(&self, v: VoxelCoord) -> bool {
        (0..3).all(|a| v[a] >= self.lo[a] && v[a] <= self.hi[a])
    }

    pub fn voxels(&self) -> impl Iterator<Item = VoxelCoord> + '_ {
        let (lo, hi) = (self.lo, self.hi);
        (lo[0]..=hi[0]).flat_map(move |x| (lo[1]..=hi[1]).flat_map(move |y| (lo[2]..=hi[2]).map(move |z| [x, y, z])))
    }

    pub fn len(&self) -> usize {
        (0..3).map(|a| (self.hi[a] - self.lo[a] + 1).max(0) as usize).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_aligned(a: &SparseTsdfVolume, b: &SparseTsdfVolume) -> Result<()> {
    if a.voxel_size() != b.voxel_size() {
        return Err(Error::InvalidArgument(format!(
            "volumes are not aligned: voxel sizes {} and {}",
            a.voxel_size(),
            b.voxel_size()
        )));
    }
    Ok(())
}

fn target_known<'a>(target: &'a SparseTsdfVolume, region: Option<VoxelRegion>) -> impl Iterator<Item = VoxelCoord> + 'a {
    target.known_voxels().into_iter().filter(move |v| region.is_none_or(|r| r.contains(*v)))
}

/// Mean squared tsdf difference over voxels known in `target` (inside
/// `region` when given). Voxels Unknown in `pred` contribute its sentinel.
/// `None` when no target voxel qualifies.
pub fn masked_l2(pred: &SparseTsdfVolume, target: &SparseTsdfVolume, region: Option<VoxelRegion>) -> Result<Option<f64>> {
    check_aligned(pred, target)?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for v in target_known(target, region) {
        let d = pred.voxel(v).0 as f64 - target.voxel(v).0 as f64;
        sum += d * d;
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Surface IoU restricted to voxels known in `reference`: a voxel counts as
/// surface in `pred` when `pred` classifies it as Surface.
pub fn surface_iou(pred: &SparseTsdfVolume, reference: &SparseTsdfVolume, region: Option<VoxelRegion>) -> Result<Option<f64>> {
    check_aligned(pred, reference)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for v in target_known(reference, region) {
        let a = matches!(reference.classify_voxel(v), VoxelState::Surface(_));
        let b = matches!(pred.classify_voxel(v), VoxelState::Surface(_));
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Number of Unknown voxels inside `region`.
pub fn unknown_count(volume: &SparseTsdfVolume, region: VoxelRegion) -> usize {
    region.voxels().filter(|&v| !volume.classify_voxel(v).is_known()).count()
}

/// Total mutual difference between two completions of the same input:
/// Chamfer between equally seeded point samples of both meshes.
pub fn tmd(a: &Mesh, b: &Mesh, n: usize, seed: u64) -> Result<f64> {
    chamfer(&sample_points(a, n, seed)?, &sample_points(b, n, seed)?)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    /// `None` when the metric is undefined (for example no known voxels).
    pub value: Option<f64>,
    pub convention: String,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

impl MetricRecord {
    pub fn new(metric: &str, value: Option<f64>, convention: &str, seeds: &[u64]) -> Self {
        Self { metric: metric.into(), value, convention: convention.into(), seeds: seeds.to_vec(), tags: BTreeMap::new() }
    }

    pub fn tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.into(), value.to_string());
        self
    }
}

/// Appends records as JSON lines.
pub fn append_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::format("metrics", e.to_string()))?;
        buf.push(b'\n');
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("metrics", format!("{}: {e}", path.display()))))
        .collect()
}
