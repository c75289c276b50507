//! Self-describing tensor container used for parameter checkpoints and
//! training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"FDTENSR1"          (format version in the last byte)
//! u32     metadata entry count
//!   per entry: u32 key len, key utf8, u32 value len, value utf8
//! u32     tensor entry count
//!   per entry: u32 name len, name utf8, u8 dtype (0 = f32, 1 = f64),
//!              u32 ndim, u64 * ndim extents, payload
//! ```
//!
//! Parameter checkpoints store f32 payloads; training state stores f64 so a
//! resumed run continues bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::autodiff::optim::Optimizer;
use crate::autodiff::params::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FDTENSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Values widened to f64 regardless of on-disk dtype.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: IndexMap<String, String>,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, container.meta.len() as u32)?;
    for (k, v) in &container.meta {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }
    write_u32(&mut w, container.entries.len() as u32)?;
    for e in &container.entries {
        write_str(&mut w, &e.name)?;
        w.write_all(&[match e.dtype {
            Dtype::F32 => 0u8,
            Dtype::F64 => 1u8,
        }])?;
        write_u32(&mut w, e.shape.len() as u32)?;
        for &d in &e.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match e.dtype {
            Dtype::F32 => {
                for &x in &e.data {
                    w.write_all(&(x as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &x in &e.data {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    r: BufReader<File>,
    file: &'a str,
}

impl Reader<'_> {
    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::format(self.file, reason)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.r
            .read_exact(&mut b)
            .map_err(|_| self.bad("truncated file"))?;
        Ok(u32::from_le_bytes(b))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(self.bad(format!("implausible string length {len}")));
        }
        let mut buf = vec![0u8; len];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| self.bad("truncated file"))?;
        String::from_utf8(buf).map_err(|_| self.bad("invalid utf8"))
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let file = path.display().to_string();
    let mut rd = Reader {
        r: BufReader::new(File::open(path)?),
        file: &file,
    };
    let mut magic = [0u8; 8];
    rd.r
        .read_exact(&mut magic)
        .map_err(|_| rd.bad("truncated header"))?;
    if &magic[..7] != &MAGIC[..7] {
        return Err(rd.bad("not a tensor container"));
    }
    if magic[7] != MAGIC[7] {
        return Err(rd.bad(format!(
            "unsupported container version `{}` (expected `{}`)",
            magic[7] as char, MAGIC[7] as char
        )));
    }
    let mut meta = IndexMap::new();
    let meta_count = rd.u32()?;
    for _ in 0..meta_count {
        let k = rd.string()?;
        let v = rd.string()?;
        meta.insert(k, v);
    }
    let mut entries = Vec::new();
    let entry_count = rd.u32()?;
    for _ in 0..entry_count {
        let name = rd.string()?;
        let mut dt = [0u8; 1];
        rd.r
            .read_exact(&mut dt)
            .map_err(|_| rd.bad("truncated file"))?;
        let dtype = match dt[0] {
            0 => Dtype::F32,
            1 => Dtype::F64,
            x => return Err(rd.bad(format!("unknown dtype code {x}"))),
        };
        let ndim = rd.u32()? as usize;
        if ndim > 16 {
            return Err(rd.bad(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            rd.r
                .read_exact(&mut b)
                .map_err(|_| rd.bad("truncated file"))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(rd.bad(format!("implausible tensor size {n}")));
        }
        let mut data = Vec::with_capacity(n);
        match dtype {
            Dtype::F32 => {
                let mut buf = vec![0u8; n * 4];
                rd.r
                    .read_exact(&mut buf)
                    .map_err(|_| rd.bad(format!("truncated payload for `{name}`")))?;
                for c in buf.chunks_exact(4) {
                    data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                }
            }
            Dtype::F64 => {
                let mut buf = vec![0u8; n * 8];
                rd.r
                    .read_exact(&mut buf)
                    .map_err(|_| rd.bad(format!("truncated payload for `{name}`")))?;
                for c in buf.chunks_exact(8) {
                    data.push(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
        }
        entries.push(Entry {
            name,
            shape,
            dtype,
            data,
        });
    }
    Ok(Container { meta, entries })
}

/// Write the model parameters with f32 payloads (the interchange format).
pub fn save_params(path: &Path, store: &ParamStore, meta: &[(&str, String)]) -> Result<()> {
    let mut container = Container::default();
    container.meta.insert("kind".into(), "params".into());
    for (k, v) in meta {
        container.meta.insert((*k).into(), v.clone());
    }
    for (name, p) in store.iter() {
        container.entries.push(Entry {
            name: name.clone(),
            shape: p.shape.clone(),
            dtype: Dtype::F32,
            data: p.data.clone(),
        });
    }
    write_container(path, &container)
}

/// Load parameters into an already-built store. Every entry must match an
/// existing parameter name and shape; missing parameters are an error.
pub fn load_params(path: &Path, store: &mut ParamStore) -> Result<Container> {
    let container = read_container(path)?;
    let file = path.display().to_string();
    let mut loaded = 0usize;
    for e in &container.entries {
        let p = store.get_mut(&e.name).map_err(|_| {
            Error::format(&file, format!("checkpoint parameter `{}` not in model", e.name))
        })?;
        if p.shape != e.shape {
            return Err(Error::format(
                &file,
                format!(
                    "shape mismatch for `{}`: checkpoint {:?} vs model {:?}",
                    e.name, e.shape, p.shape
                ),
            ));
        }
        p.data.copy_from_slice(&e.data);
        loaded += 1;
    }
    if loaded != store.len() {
        return Err(Error::format(
            &file,
            format!("checkpoint has {loaded} of {} model parameters", store.len()),
        ));
    }
    Ok(container)
}

/// Full-precision training state: parameters, moments, and the step counter.
pub fn save_train_state(path: &Path, store: &ParamStore, opt: &Optimizer) -> Result<()> {
    let mut container = Container::default();
    container.meta.insert("kind".into(), "train_state".into());
    container.meta.insert("step".into(), opt.step.to_string());
    for (name, p) in store.iter() {
        container.entries.push(Entry {
            name: format!("p/{name}"),
            shape: p.shape.clone(),
            dtype: Dtype::F64,
            data: p.data.clone(),
        });
    }
    for (name, (m, v)) in opt.moments() {
        let shape = vec![m.len()];
        container.entries.push(Entry {
            name: format!("m/{name}"),
            shape: shape.clone(),
            dtype: Dtype::F64,
            data: m.clone(),
        });
        container.entries.push(Entry {
            name: format!("v/{name}"),
            shape,
            dtype: Dtype::F64,
            data: v.clone(),
        });
    }
    write_container(path, &container)
}

/// Restore training state saved by [`save_train_state`].
pub fn load_train_state(path: &Path, store: &mut ParamStore, opt: &mut Optimizer) -> Result<()> {
    let container = read_container(path)?;
    let file = path.display().to_string();
    let step: u64 = container
        .meta
        .get("step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(&file, "missing or invalid `step` metadata"))?;
    for e in &container.entries {
        if let Some(name) = e.name.strip_prefix("p/") {
            let p = store.get_mut(name).map_err(|_| {
                Error::format(&file, format!("state parameter `{name}` not in model"))
            })?;
            if p.shape != e.shape {
                return Err(Error::format(
                    &file,
                    format!("shape mismatch for `{name}`"),
                ));
            }
            p.data.copy_from_slice(&e.data);
        }
    }
    for e in &container.entries {
        if let Some(name) = e.name.strip_prefix("m/") {
            let v_entry = container
                .entry(&format!("v/{name}"))
                .ok_or_else(|| Error::format(&file, format!("missing v/{name}")))?;
            opt.set_moments(name, e.data.clone(), v_entry.data.clone());
        }
    }
    opt.step = step;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::optim::OptimConfig;

    #[test]
    fn params_round_trip_is_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.insert("a.w", vec![0.1, -0.25, 1.0 / 3.0], vec![3]);
        save_params(&path, &store, &[("note", "t".into())]).unwrap();

        let mut restored = ParamStore::new();
        restored.insert("a.w", vec![0.0; 3], vec![3]);
        let c = load_params(&path, &mut restored).unwrap();
        assert_eq!(c.meta.get("kind").unwrap(), "params");
        let got = &restored.get("a.w").unwrap().data;
        assert_eq!(got[0], 0.1f32 as f64);
        assert_eq!(got[2], (1.0f32 / 3.0) as f64);
    }

    #[test]
    fn train_state_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0 / 3.0, 2.0 / 7.0], vec![2]);
        let mut opt = Optimizer::new(OptimConfig::default());
        store.get_mut("w").unwrap().grad = vec![0.5, -0.5];
        opt.step(&mut store).unwrap();
        save_train_state(&path, &store, &opt).unwrap();

        let mut store2 = ParamStore::new();
        store2.insert("w", vec![0.0, 0.0], vec![2]);
        let mut opt2 = Optimizer::new(OptimConfig::default());
        load_train_state(&path, &mut store2, &mut opt2).unwrap();
        assert_eq!(store2.get("w").unwrap().data, store.get("w").unwrap().data);
        assert_eq!(opt2.step, 1);
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"FDTENSR9\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = read_container(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ckpt");
        std::fs::write(&path, b"FDTENSR1\x01").unwrap();
        assert!(read_container(&path).is_err());
    }
}
