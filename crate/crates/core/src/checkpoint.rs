//! Named parameter storage and the checkpoint file format.
//!
//! A [`ParamStore`] maps parameter names to tensors (ordered by name, so
//! iteration — and therefore every downstream file and hash — is
//! deterministic). Checkpoints are a small binary format:
//!
//! ```text
//! magic  b"GLPC"
//! u32    format version (1)
//! u32    entry count
//! entry* u32 name_len | name bytes | u32 ndim | u64 dim...
//! f32*   payloads, little endian, concatenated in entry order
//! ```
//!
//! Loading validates magic, version, and — via [`ParamStore::load_into`] —
//! that names and shapes match what the model expects; a mismatched shape is
//! rejected with both shapes named.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::graph::{Grads, Graph, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GLPC";
const VERSION: u32 = 1;

#[derive(Default, Clone)]
#[derive(Debug)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

/// Graph handles for every parameter in a store, for one training step.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Handle for a parameter; panics on a name that was never registered
    /// (that is a programming error, not a runtime condition).
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Collect adjoints by parameter name (parameters without a gradient in
    /// this graph are omitted).
    pub fn grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        assert!(self.map.contains_key(name), "unknown parameter `{name}`");
        self.map.insert(name.to_string(), t);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Register every parameter as a trainable graph leaf.
    pub fn attach(&self, g: &mut Graph) -> ParamVars {
        let vars = self
            .map
            .iter()
            .map(|(n, t)| (n.clone(), g.param(t.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Register every parameter as a frozen input (no gradients).
    pub fn attach_frozen(&self, g: &mut Graph) -> ParamVars {
        let vars = self
            .map
            .iter()
            .map(|(n, t)| (n.clone(), g.input(t.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Register only the listed parameters as trainable; the rest are
    /// frozen inputs. Useful for stage-wise training over one store.
    pub fn attach_selected(&self, g: &mut Graph, trainable: &[String]) -> ParamVars {
        let vars = self
            .map
            .iter()
            .map(|(n, t)| {
                let v = if trainable.iter().any(|s| s == n) {
                    g.param(t.clone())
                } else {
                    g.input(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    // ── file format ─────────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.map.len() as u32).to_le_bytes());
        for (name, t) in &self.map {
            header.extend_from_slice(&(name.len() as u32).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                header.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        f.write_all(&header)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut payload = Vec::new();
        for t in self.map.values() {
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        f.write_all(&payload)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let pstr = path.display().to_string();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CoreError::io(&pstr, e))?;
        let mut cur = Cursor::new(&bytes, &pstr);
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(CoreError::corrupt(&pstr, "bad magic (not a checkpoint)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(CoreError::corrupt(
                &pstr,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| CoreError::corrupt(&pstr, "non-utf8 parameter name"))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            entries.push((name, shape));
        }
        let mut map = BTreeMap::new();
        for (name, shape) in entries {
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| CoreError::corrupt(&pstr, format!("parameter `{name}`: {e}")))?;
            map.insert(name, t);
        }
        if cur.remaining() != 0 {
            return Err(CoreError::corrupt(&pstr, "trailing bytes after payload"));
        }
        Ok(ParamStore { map })
    }

    /// Copy values from `loaded` into `self`, requiring the exact same name
    /// set and shapes. This is how models consume checkpoints: initialize,
    /// then fill — any architectural drift is caught here.
    pub fn load_into(&mut self, loaded: &ParamStore, path: &str) -> Result<()> {
        for name in loaded.map.keys() {
            if !self.map.contains_key(name) {
                return Err(CoreError::corrupt(
                    path,
                    format!("unexpected parameter `{name}` in checkpoint"),
                ));
            }
        }
        for (name, current) in &self.map {
            let Some(new) = loaded.map.get(name) else {
                return Err(CoreError::corrupt(
                    path,
                    format!("missing parameter `{name}` in checkpoint"),
                ));
            };
            if new.shape() != current.shape() {
                return Err(CoreError::corrupt(
                    path,
                    format!(
                        "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                        new.shape(),
                        current.shape()
                    ),
                ));
            }
        }
        for (name, new) in &loaded.map {
            self.map.insert(name.clone(), new.clone());
        }
        Ok(())
    }
}

/// Hex SHA-256 of a file, used for provenance lines in reports.
pub fn file_sha256(path: &Path) -> Result<String> {
    let pstr = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| CoreError::io(&pstr, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(|e| CoreError::io(&pstr, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// Hex SHA-256 of a byte slice.
pub fn bytes_sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a str) -> Self {
        Cursor { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::corrupt(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
