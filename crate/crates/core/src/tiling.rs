//! Overlapping chunk plans and average blending for tiled sampling.
//!
//! Dense fields are stored cell-major with channels innermost:
//! `values[((x * ny + y) * nz + z) * channels + c]`.

use crate::error::{Error, Result};
use crate::flow::{euler_update, gaussian_noise, VelocityField};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct TilePlan {
    pub extent: [usize; 3],
    pub chunk: [usize; 3],
    pub overlap: f64,
    /// Lexicographically sorted chunk origins.
    pub origins: Vec<[usize; 3]>,
    /// Number of chunks covering each cell.
    pub weights: Vec<f64>,
}

fn axis_origins(extent: usize, chunk: usize, overlap: f64) -> Vec<usize> {
    let stride = ((chunk as f64 * (1.0 - overlap)) - 1e-9).ceil().max(1.0) as usize;
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        let o = pos.min(extent - chunk);
        if out.last() != Some(&o) {
            out.push(o);
        }
        if pos + chunk >= extent {
            break;
        }
        pos += stride;
    }
    out
}

/// Covers `extent` with chunks of `chunk` cells (clipped to the extent)
/// at stride `ceil(chunk * (1 - overlap))`; the last chunk per axis sits
/// flush against the far boundary.
pub fn plan_tiles(extent: [usize; 3], chunk: [usize; 3], overlap: f64) -> Result<TilePlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap ratio must be in [0, 1), got {overlap}")));
    }
    if extent.contains(&0) || chunk.contains(&0) {
        return Err(Error::InvalidArgument(format!("degenerate extent {extent:?} or chunk {chunk:?}")));
    }
    let chunk: [usize; 3] = std::array::from_fn(|a| chunk[a].min(extent[a]));
    let axes: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(extent[a], chunk[a], overlap)).collect();
    let mut origins = Vec::new();
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                origins.push([x, y, z]);
            }
        }
    }
    let mut weights = vec![0.0; extent.iter().product()];
    for o in &origins {
        for_each_cell(extent, chunk, *o, |_, g| weights[g] += 1.0);
    }
    Ok(TilePlan { extent, chunk, overlap, origins, weights })
}

/// Calls `f(local_index, global_index)` for every cell of the chunk at `origin`.
fn for_each_cell(extent: [usize; 3], chunk: [usize; 3], origin: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let mut local = 0;
    for x in 0..chunk[0] {
        for y in 0..chunk[1] {
            let row = ((origin[0] + x) * extent[1] + origin[1] + y) * extent[2] + origin[2];
            for z in 0..chunk[2] {
                f(local, row + z);
                local += 1;
            }
        }
    }
}

impl TilePlan {
    pub fn cells(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn chunk_cells(&self) -> usize {
        self.chunk.iter().product()
    }

    /// Copies one chunk out of a global field.
    pub fn slice(&self, global: &[f32], channels: usize, origin: [usize; 3]) -> Result<Vec<f32>> {
        if global.len() != self.cells() * channels {
            return Err(Error::InvalidArgument(format!(
                "field has {} values, expected {}",
                global.len(),
                self.cells() * channels
            )));
        }
        let mut out = vec![0.0; self.chunk_cells() * channels];
        for_each_cell(self.extent, self.chunk, origin, |l, g| {
            out[l * channels..(l + 1) * channels].copy_from_slice(&global[g * channels..(g + 1) * channels]);
        });
        Ok(out)
    }

    /// Per-cell average over covering chunks, summed in origin order.
    pub fn blend(&self, chunks: &[Vec<f32>], channels: usize) -> Result<Vec<f32>> {
        if chunks.len() != self.origins.len() {
            return Err(Error::InvalidArgument(format!(
                "{} chunk values for {} planned chunks",
                chunks.len(),
                self.origins.len()
            )));
        }
        let n = self.chunk_cells() * channels;
        if let Some(bad) = chunks.iter().find(|c| c.len() != n) {
            return Err(Error::InvalidArgument(format!("chunk has {} values, expected {n}", bad.len())));
        }
        let mut acc = vec![0f64; self.cells() * channels];
        for (o, values) in self.origins.iter().zip(chunks) {
            for_each_cell(self.extent, self.chunk, *o, |l, g| {
                for c in 0..channels {
                    acc[g * channels + c] += values[l * channels + c] as f64;
                }
            });
        }
        Ok(acc.iter().enumerate().map(|(i, s)| (s / self.weights[i / channels]) as f32).collect())
    }
}

/// One Euler step taken on every chunk, followed by blending into a single
/// globally consistent field.
pub fn tiled_sample_step(
    plan: &TilePlan,
    global: &[f32],
    channels: usize,
    t: f64,
    dt: f64,
    field: &dyn VelocityField,
) -> Result<Vec<f32>> {
    let stepped: Vec<Result<Vec<f32>>> = par::map_slice(&plan.origins, |&o| {
        let z = plan.slice(global, channels, o)?;
        let v = field.velocity(&z, plan.chunk, t, o)?;
        Ok(euler_update(&z, &v, dt))
    });
    let stepped: Vec<Vec<f32>> = stepped.into_iter().collect::<Result<_>>()?;
    plan.blend(&stepped, channels)
}

/// Euler integration from seeded Gaussian noise over the whole extent.
pub fn tiled_euler_sample(
    plan: &TilePlan,
    channels: usize,
    steps: usize,
    seed: u64,
    field: &dyn VelocityField,
) -> Result<Vec<f32>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let mut z = gaussian_noise(plan.cells() * channels, seed);
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        z = tiled_sample_step(plan, &z, channels, i as f64 * dt, dt, field)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_chunk_plan() {
        let p = plan_tiles([32; 3], [32; 3], 0.2).unwrap();
        assert_eq!(p.origins, vec![[0, 0, 0]]);
        assert!(p.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn stride_and_clamp_on_long_axis() {
        let p = plan_tiles([64, 32, 32], [32; 3], 0.2).unwrap();
        let xs: Vec<usize> = p.origins.iter().map(|o| o[0]).collect();
        assert_eq!(xs, vec![0, 26, 32]);
    }

    #[test]
    fn zero_overlap_partitions() {
        let p = plan_tiles([16, 8, 8], [8; 3], 0.0).unwrap();
        assert_eq!(p.origins.len(), 2);
        assert!(p.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn rejects_full_overlap() {
        assert!(plan_tiles([8; 3], [4; 3], 1.0).is_err());
    }

    #[test]
    fn oversized_chunk_is_clipped() {
        let p = plan_tiles([5, 6, 7], [8; 3], 0.2).unwrap();
        assert_eq!(p.chunk, [5, 6, 7]);
        assert_eq!(p.origins.len(), 1);
    }

    #[test]
    fn two_chunk_overlap_averages() {
        let p = plan_tiles([12, 1, 1], [8, 1, 1], 0.5).unwrap();
        assert_eq!(p.origins, vec![[0, 0, 0], [4, 0, 0]]);
        let out = p.blend(&[vec![1.0; 8], vec![3.0; 8]], 1).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn blend_rejects_bad_shapes() {
        let p = plan_tiles([8, 1, 1], [8, 1, 1], 0.2).unwrap();
        assert!(p.blend(&[vec![0.0; 7]], 1).is_err());
    }
}
