//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CKPT" | version u32
//! meta_count u32   | meta_count × (len u32, UTF-8 "key=value")
//! record_count u32 | record_count × (len u32, UTF-8 "name\tdtype\tdims\toffset")
//! payload_len u64  | payload bytes
//! ```
//!
//! `dims` is a comma-separated list (empty for scalars) and `offset` is the
//! byte offset of the tensor inside the payload. Tensor names carry a section
//! prefix: `param/`, `adam_m/`, `adam_v/` or `ema/`. The optimizer step count
//! is stored under the meta key `optimizer_step`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;
const SECTIONS: [&str; 4] = ["param/", "adam_m/", "adam_v/", "ema/"];

/// Parameters plus free-form metadata describing the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub params: ParamSet<T>,
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

pub fn write_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut meta = ckpt.meta.clone();
    meta.insert("optimizer_step".into(), ckpt.params.step().to_string());
    let (m1, m2) = ckpt.params.moments();
    let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
    for (name, t) in ckpt.params.iter() {
        tensors.push((format!("param/{name}"), t));
    }
    for (prefix, map) in [("adam_m/", m1), ("adam_v/", m2), ("ema/", ckpt.params.ema())] {
        for (name, t) in map {
            tensors.push((format!("{prefix}{name}"), t));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).expect("vec write");
    out.write_u32::<LittleEndian>(meta.len() as u32).expect("vec write");
    for (k, v) in &meta {
        if k.contains('=') {
            return Err(Error::format("checkpoint", format!("meta key `{k}` contains '='")));
        }
        write_str(&mut out, &format!("{k}={v}"));
    }
    out.write_u32::<LittleEndian>(tensors.len() as u32).expect("vec write");
    let mut offset = 0usize;
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        write_str(&mut out, &format!("{name}\t{}\t{}\t{offset}", T::DTYPE, dims.join(",")));
        offset += t.numel() * T::BYTES;
    }
    out.write_u64::<LittleEndian>(offset as u64).expect("vec write");
    for (_, t) in &tensors {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(|e| Error::format("checkpoint", e.to_string()))? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    String::from_utf8(buf).map_err(|e| Error::format("checkpoint", e.to_string()))
}

fn decode<T: Real>(dtype: &str, bytes: &[u8]) -> Result<Vec<T>> {
    match dtype {
        "f32" => Ok(bytes.chunks_exact(4).map(|c| T::c(f32::read_le(c) as f64)).collect()),
        "f64" => Ok(bytes.chunks_exact(8).map(|c| T::c(f64::read_le(c))).collect()),
        other => Err(Error::format("checkpoint", format!("unsupported dtype `{other}`"))),
    }
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: String| Error::format("checkpoint", format!("{}: {d}", path.display()));
    let mut r = std::io::Cursor::new(&bytes[..]);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n_meta = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let rec = read_str(&mut r)?;
        let (k, v) = rec.split_once('=').ok_or_else(|| bad(format!("meta record `{rec}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let n_rec = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
    let mut records = Vec::with_capacity(n_rec as usize);
    for _ in 0..n_rec {
        let rec = read_str(&mut r)?;
        let fields: Vec<&str> = rec.split('\t').collect();
        let [name, dtype, dims, offset] = fields[..] else {
            return Err(bad(format!("manifest record `{rec}`")));
        };
        let shape: Vec<usize> = if dims.is_empty() {
            vec![]
        } else {
            dims.split(',').map(|d| d.parse().map_err(|_| bad(format!("dims `{dims}`")))).collect::<Result<_>>()?
        };
        let offset: usize = offset.parse().map_err(|_| bad(format!("offset `{offset}`")))?;
        records.push((name.to_string(), dtype.to_string(), shape, offset));
    }
    let payload_len = r.read_u64::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    let start = r.position() as usize;
    let payload = bytes.get(start..start + payload_len).ok_or_else(|| bad("truncated payload".into()))?;

    let mut sections: [BTreeMap<String, Tensor<T>>; 4] = Default::default();
    for (name, dtype, shape, offset) in records {
        let width = match dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            d => return Err(bad(format!("unsupported dtype `{d}`"))),
        };
        let n: usize = shape.iter().product();
        let raw = payload.get(offset..offset + n * width).ok_or_else(|| bad(format!("tensor `{name}` out of range")))?;
        let t = Tensor::new(shape, decode::<T>(&dtype, raw)?)?;
        let (si, rest) = SECTIONS
            .iter()
            .enumerate()
            .find_map(|(i, p)| name.strip_prefix(p).map(|rest| (i, rest.to_string())))
            .ok_or_else(|| bad(format!("tensor `{name}` has no section prefix")))?;
        sections[si].insert(rest, t);
    }
    let step: u64 = meta.remove("optimizer_step").and_then(|s| s.parse().ok()).unwrap_or(0);
    let [params, m1, m2, ema] = sections;
    let params = ParamSet::from_parts(params, m1, m2, ema, step).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint { meta, params })
}
