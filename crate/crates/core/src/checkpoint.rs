//! Single-file model archive.
//!
//! Layout: the 8-byte magic `DARCCKPT`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header (config, iteration, tensor table),
//! then every tensor as little-endian `f32` in table order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use darc_tensor::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, DarcError, Result};
use crate::network::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DARCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Param,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    shape: [usize; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    crate_version: String,
    iteration: u64,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

pub struct Loaded<T: Scalar> {
    pub model: Model<T>,
    pub iteration: u64,
}

fn stores<T: Scalar>(model: &Model<T>) -> [(Kind, &ParamStore<T>); 2] {
    [(Kind::Param, &model.params), (Kind::Buffer, &model.buffers)]
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, iteration: u64) -> Result<()> {
    let mut tensors = Vec::new();
    for (kind, store) in stores(model) {
        for (_, name, t) in store.iter() {
            tensors.push(Entry {
                name: name.to_string(),
                kind,
                shape: t.shape(),
            });
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        iteration,
        config: model.config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    write(MAGIC)?;
    write(&FORMAT_VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for (_, store) in stores(model) {
        for (_, _, t) in store.iter() {
            for &v in t.data() {
                write(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Loaded<T>> {
    let bad = |reason: String| DarcError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| bad(format!("truncated: {e}")));
    let mut magic = [0u8; 8];
    read(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let mut u32b = [0u8; 4];
    read(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut u64b = [0u8; 8];
    read(&mut u64b)?;
    let len = u64::from_le_bytes(u64b) as usize;
    if len > 1 << 30 {
        return Err(bad(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    read(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    let mut model = Model::<T>::new(header.config).map_err(|e| bad(e.to_string()))?;
    let expected = model.params.len() + model.buffers.len();
    if header.tensors.len() != expected {
        return Err(bad(format!(
            "{} tensors stored, model has {expected}",
            header.tensors.len()
        )));
    }
    for e in &header.tensors {
        let store = match e.kind {
            Kind::Param => &mut model.params,
            Kind::Buffer => &mut model.buffers,
        };
        let id = store
            .id(&e.name)
            .ok_or_else(|| bad(format!("unknown tensor {}", e.name)))?;
        if store.get(id).shape() != e.shape {
            return Err(bad(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                store.get(id).shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        read(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        *store.get_mut(id) = Tensor::from_vec(e.shape, data);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err(path))? != 0 {
        return Err(bad("trailing bytes after payload".into()));
    }
    Ok(Loaded {
        model,
        iteration: header.iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            variant: Variant::DarcEnc,
            width: 4,
            depth: 2,
            seed: 7,
            ..ModelConfig::default()
        };
        let mut m = Model::<f32>::new(cfg).unwrap();
        let id = m.buffers.ids().next().unwrap();
        m.buffers.get_mut(id).data_mut()[0] = 0.25;
        save(&path, &m, 42).unwrap();
        let l = load::<f32>(&path).unwrap();
        assert_eq!(l.iteration, 42);
        assert_eq!(l.model.config, m.config);
        for (a, b) in [(&l.model.params, &m.params), (&l.model.buffers, &m.buffers)] {
            for ((_, na, ta), (_, nb, tb)) in a.iter().zip(b.iter()) {
                assert_eq!(na, nb);
                assert_eq!(ta, tb);
            }
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT\x01\0\0\0").unwrap();
        assert!(matches!(load::<f32>(&path), Err(DarcError::Checkpoint { .. })));
        let m = Model::<f32>::new(ModelConfig {
            width: 2,
            depth: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        save(&path, &m, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load::<f32>(&path), Err(DarcError::Checkpoint { .. })));
    }
}
