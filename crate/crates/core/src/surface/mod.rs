//! Marching-cubes isosurface extraction and mesh export.
//!
//! Cells with any Unknown corner produce no geometry, so meshes never invent
//! surfaces at the boundary of observed space.

mod tables;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::par;
use crate::voxgrid::{DenseTsdfBlock, SparseTsdfVolume};

use tables::{CORNERS, EDGES, TRIANGLES};

/// Triangles below this area (m²) are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;
/// Vertices closer than this (per coordinate, m) are merged.
pub const DEDUP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [[f64; 3]; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Builds an indexed mesh from a triangle soup, merging vertices within
    /// [`DEDUP_TOLERANCE`] and dropping degenerate triangles. Vertex order is
    /// first-appearance order, so the result is deterministic.
    pub fn from_soup(soup: &[[[f64; 3]; 3]]) -> Self {
        let mut mesh = Mesh::default();
        let mut index: HashMap<[i64; 3], u32> = HashMap::new();
        for tri in soup {
            let ids = tri.map(|p| {
                let key = p.map(|c| (c / DEDUP_TOLERANCE).round() as i64);
                *index.entry(key).or_insert_with(|| {
                    mesh.vertices.push(p);
                    (mesh.vertices.len() - 1) as u32
                })
            });
            if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                continue;
            }
            let [a, b, c] = ids.map(|i| mesh.vertices[i as usize]);
            if 0.5 * norm(cross(sub(b, a), sub(c, a))) <= MIN_TRIANGLE_AREA {
                continue;
            }
            mesh.triangles.push(ids);
        }
        // Vertices referenced only by dropped triangles are removed.
        let mut used = vec![u32::MAX; mesh.vertices.len()];
        let mut vertices = Vec::new();
        for t in &mut mesh.triangles {
            for i in t.iter_mut() {
                if used[*i as usize] == u32::MAX {
                    used[*i as usize] = vertices.len() as u32;
                    vertices.push(mesh.vertices[*i as usize]);
                }
                *i = used[*i as usize];
            }
        }
        mesh.vertices = vertices;
        mesh
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Zero crossing on the segment from `pa` to `pb`. The endpoints are always
/// passed in ascending grid order so that neighbouring cells (and blocks)
/// compute bit-identical vertices for a shared edge.
fn edge_vertex(pa: [f64; 3], va: f64, pb: [f64; 3], vb: f64) -> [f64; 3] {
    let lambda = va / (va - vb);
    [pa[0] + lambda * (pb[0] - pa[0]), pa[1] + lambda * (pb[1] - pa[1]), pa[2] + lambda * (pb[2] - pa[2])]
}

/// Appends the triangles of every cell whose lower corner lies in `cells`
/// (per-axis cell counts) to `soup`.
fn polygonize(block: &DenseTsdfBlock, voxel_size: f64, cells: [usize; 3], iso: f64, soup: &mut Vec<[[f64; 3]; 3]>) {
    let [sx, sy, sz] = block.shape;
    if sx < 2 || sy < 2 || sz < 2 {
        return;
    }
    let cells = [cells[0].min(sx - 1), cells[1].min(sy - 1), cells[2].min(sz - 1)];
    let o = block.origin;
    for x in 0..cells[0] {
        for y in 0..cells[1] {
            for z in 0..cells[2] {
                let mut vals = [0.0f64; 8];
                let mut known = true;
                let mut config = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    let i = block.index(x + off[0], y + off[1], z + off[2]);
                    if !block.mask[i].is_known() {
                        known = false;
                        break;
                    }
                    vals[c] = block.tsdf[i] as f64 - iso;
                    if vals[c] <= 0.0 {
                        config |= 1 << c;
                    }
                }
                if !known || config == 0 || config == 255 {
                    continue;
                }
                let corner = |c: usize| {
                    let off = CORNERS[c];
                    [
                        (o[0] as i64 + (x + off[0]) as i64) as f64 * voxel_size,
                        (o[1] as i64 + (y + off[1]) as i64) as f64 * voxel_size,
                        (o[2] as i64 + (z + off[2]) as i64) as f64 * voxel_size,
                    ]
                };
                let mut verts = [[0.0; 3]; 12];
                for (e, &[a, b]) in EDGES.iter().enumerate() {
                    if (config >> a & 1) != (config >> b & 1) {
                        let (a, b) = if CORNERS[a] < CORNERS[b] { (a, b) } else { (b, a) };
                        verts[e] = edge_vertex(corner(a), vals[a], corner(b), vals[b]);
                    }
                }
                for tri in TRIANGLES[config].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    // The table winds triangles with normals toward the low side;
                    // swapping two indices makes them face positive tsdf.
                    soup.push([verts[tri[0] as usize], verts[tri[2] as usize], verts[tri[1] as usize]]);
                }
            }
        }
    }
}

/// Extracts the `iso` level set of a dense block. Vertex positions are world
/// coordinates `(origin + index) · voxel_size`.
pub fn marching_cubes(block: &DenseTsdfBlock, voxel_size: f64, iso: f64) -> Mesh {
    let mut soup = Vec::new();
    polygonize(block, voxel_size, block.shape, iso, &mut soup);
    Mesh::from_soup(&soup)
}

/// Zero level set of a whole sparse volume, extracted block by block with a
/// one-voxel apron so that cells straddling block faces are not lost.
pub fn extract_scene_mesh(volume: &SparseTsdfVolume) -> Mesh {
    let edge = volume.block_edge();
    let coords = volume.block_coords();
    let soups = par::map_slice(&coords, |b| {
        let origin = [b[0] * edge as i32, b[1] * edge as i32, b[2] * edge as i32];
        let mut soup = Vec::new();
        if let Ok(dense) = volume.extract_dense(origin, [edge + 1; 3]) {
            polygonize(&dense, volume.voxel_size(), [edge; 3], 0.0, &mut soup);
        }
        soup
    });
    Mesh::from_soup(&soups.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("obj") => Ok(Self::Obj),
            Some("ply") => Ok(Self::Ply),
            _ => Err(Error::InvalidArgument(format!("{}: mesh path must end in .obj or .ply", path.display()))),
        }
    }
}

/// ASCII OBJ with 1-based indices.
pub fn obj_bytes(mesh: &Mesh) -> Vec<u8> {
    let mut out = Vec::new();
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    out
}

/// Binary little-endian PLY with float vertices and int index lists.
pub fn ply_bytes(mesh: &Mesh) -> Vec<u8> {
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )
    .unwrap();
    for v in &mesh.vertices {
        for c in v {
            out.write_f32::<LittleEndian>(*c as f32).unwrap();
        }
    }
    for t in &mesh.triangles {
        out.push(3);
        for i in t {
            out.write_i32::<LittleEndian>(*i as i32).unwrap();
        }
    }
    out
}

pub fn write_mesh(mesh: &Mesh, path: &Path, format: MeshFormat) -> Result<()> {
    let bytes = match format {
        MeshFormat::Obj => obj_bytes(mesh),
        MeshFormat::Ply => ply_bytes(mesh),
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Reads meshes in the two formats written by [`write_mesh`].
pub fn read_mesh(path: &Path) -> Result<Mesh> {
    let format = MeshFormat::from_path(path)?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    match format {
        MeshFormat::Obj => parse_obj(&mut r, path),
        MeshFormat::Ply => parse_ply(&mut r, path),
    }
}

fn parse_obj(r: &mut impl BufRead, path: &Path) -> Result<Mesh> {
    let bad = |line: usize, what: &str| Error::format("OBJ", format!("{} line {line}: {what}", path.display()));
    let mut mesh = Mesh::default();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad(n + 1, "bad vertex"))?;
                if c.len() != 3 {
                    return Err(bad(n + 1, "vertex needs 3 coordinates"));
                }
                mesh.vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let ids: Vec<u32> = it
                    .map(|s| s.split('/').next().unwrap_or("").parse::<u32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(n + 1, "bad face"))?;
                if ids.len() != 3 || ids.iter().any(|&i| i == 0) {
                    return Err(bad(n + 1, "faces must be triangles with 1-based indices"));
                }
                mesh.triangles.push([ids[0] - 1, ids[1] - 1, ids[2] - 1]);
            }
            _ => {}
        }
    }
    check_indices(&mesh, "OBJ", path)?;
    Ok(mesh)
}

fn parse_ply(r: &mut impl BufRead, path: &Path) -> Result<Mesh> {
    let bad = |what: String| Error::format("PLY", format!("{}: {what}", path.display()));
    let io = |e| Error::io(path, e);
    let (mut nv, mut nf) = (None, None);
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(io)? == 0 {
            return Err(bad("missing end_header".into()));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", f, _] if *f != "binary_little_endian" => return Err(bad(format!("unsupported format {f}"))),
            ["element", "vertex", n] => nv = n.parse::<usize>().ok(),
            ["element", "face", n] => nf = n.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (nv, nf) = nv.zip(nf).ok_or_else(|| bad("missing vertex or face element".into()))?;
    let mut mesh = Mesh::default();
    for _ in 0..nv {
        let mut v = [0.0; 3];
        for c in &mut v {
            *c = r.read_f32::<LittleEndian>().map_err(io)? as f64;
        }
        mesh.vertices.push(v);
    }
    for _ in 0..nf {
        if r.read_u8().map_err(io)? != 3 {
            return Err(bad("only triangle faces are supported".into()));
        }
        let mut t = [0u32; 3];
        for i in &mut t {
            *i = u32::try_from(r.read_i32::<LittleEndian>().map_err(io)?).map_err(|_| bad("negative index".into()))?;
        }
        mesh.triangles.push(t);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    check_indices(&mesh, "PLY", path)?;
    Ok(mesh)
}

fn check_indices(mesh: &Mesh, what: &'static str, path: &Path) -> Result<()> {
    let n = mesh.vertices.len() as u32;
    if mesh.triangles.iter().flatten().any(|&i| i >= n) {
        return Err(Error::format(what, format!("{}: vertex index out of range", path.display())));
    }
    Ok(())
}
