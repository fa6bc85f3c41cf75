//! Binary checkpoints: the decomposer config, every named network
//! parameter, and any optimizer state, stored as raw little-endian f64
//! payloads behind a JSON index. Saves go through a temp file and rename so
//! a crash never leaves a half-written checkpoint at the target path.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::nets::{Decomposer, DecomposerConfig, ParamStore};
use crate::{Error, Result};

pub const MAGIC: &[u8; 12] = b"LEMUL-CKPT-1";

/// Arrays whose names start with this prefix carry optimizer state rather
/// than network parameters.
pub const OPT_PREFIX: &str = "opt.";

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DecomposerConfig,
    arrays: Vec<ArrayMeta>,
}

pub struct Checkpoint {
    pub config: DecomposerConfig,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    /// Bundle a decomposer with optimizer arrays (which must use the
    /// reserved prefix so loading can tell the two apart).
    pub fn from_decomposer(
        d: &Decomposer,
        opt_state: &[(String, ArrayD<f64>)],
    ) -> Result<Checkpoint> {
        let mut arrays: Vec<(String, ArrayD<f64>)> = d
            .params()
            .iter()
            .map(|(_, name, value)| (name.to_string(), value.as_ref().clone()))
            .collect();
        for (name, a) in opt_state {
            if !name.starts_with(OPT_PREFIX) {
                return Err(Error::Checkpoint(format!(
                    "optimizer array {name} must be stored under the {OPT_PREFIX} prefix"
                )));
            }
            arrays.push((name.clone(), a.clone()));
        }
        Ok(Checkpoint { config: *d.config(), arrays })
    }

    /// Rebuild the decomposer and hand back the optimizer arrays.
    pub fn split(self) -> Result<(Decomposer, Vec<(String, ArrayD<f64>)>)> {
        let mut store = ParamStore::new();
        let mut opt = Vec::new();
        for (name, a) in self.arrays {
            if name.starts_with(OPT_PREFIX) {
                opt.push((name, a));
            } else {
                store.insert(&name, a);
            }
        }
        let d = Decomposer::from_parts(self.config, store)?;
        Ok((d, opt))
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, _) in &self.arrays {
            if name.is_empty() || !seen.insert(name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate or empty array name {name:?}")));
            }
        }
        let header = Header {
            config: self.config,
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayMeta { name: name.clone(), shape: a.shape().to_vec() })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            let io = |e| Error::io(&tmp, e);
            w.write_all(MAGIC).map_err(io)?;
            w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&header_bytes).map_err(io)?;
            for (_, a) in &self.arrays {
                let mut buf = Vec::with_capacity(a.len() * 8);
                for &v in a.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf).map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

        let mut magic = [0u8; 12];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
        let header_len = u64::from_le_bytes(len8) as usize;
        if header_len == 0 || header_len > 64 << 20 {
            return Err(bad(format!("implausible header length {header_len}")));
        }
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| bad(format!("corrupt header: {e}")))?;

        let mut seen = HashSet::new();
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for meta in &header.arrays {
            if meta.name.is_empty() || !seen.insert(meta.name.as_str()) {
                return Err(bad(format!("duplicate or empty array name {:?}", meta.name)));
            }
            let count: usize = meta.shape.iter().product();
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            let data: Vec<f64> =
                buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let a = ArrayD::from_shape_vec(IxDyn(&meta.shape), data)
                .map_err(|e| bad(format!("array {}: {e}", meta.name)))?;
            arrays.push((meta.name.clone(), a));
        }
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(bad("trailing bytes after the last array".into())),
            Err(e) => return Err(Error::io(path, e)),
        }
        Ok(Checkpoint { config: header.config, arrays })
    }
}
