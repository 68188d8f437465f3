//! Checkpoint container.
//!
//! ```text
//! CLABCKPT 1
//! meta <key> <value>          (any number, value runs to end of line)
//! tensor <name> <offset> <d0,d1,...>
//! payload <bytes>
//! end
//! <payload: little-endian f32, tensors at their byte offsets>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &str = "CLABCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn push<T: Real>(&mut self, name: String, t: &Tensor<T>) {
        self.entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }

    /// Adds every tensor of `store` under `prefix/name`.
    pub fn push_store<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (n, t) in store.names().iter().zip(store.tensors()) {
            self.push(format!("{prefix}/{n}"), t);
        }
    }

    /// Adds tensors that mirror `store`'s names, e.g. optimizer moments.
    pub fn push_like<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>, tensors: &[Tensor<T>]) {
        for (n, t) in store.names().iter().zip(tensors) {
            self.push(format!("{prefix}/{n}"), t);
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.entries.iter().any(|e| e.name.starts_with(&p))
    }

    /// Reads `prefix/*` into tensors shaped like `store`. On any mismatch the
    /// error lists every differing manifest line.
    pub fn read_like<T: Real>(&self, prefix: &str, store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
        let p = format!("{prefix}/");
        let mine: BTreeMap<&str, &Entry> = self
            .entries
            .iter()
            .filter_map(|e| e.name.strip_prefix(&p).map(|n| (n, e)))
            .collect();
        let mut diff = String::new();
        for (n, t) in store.names().iter().zip(store.tensors()) {
            match mine.get(n.as_str()) {
                None => {
                    let _ = writeln!(diff, "- {n} {:?} (missing from checkpoint)", t.shape());
                }
                Some(e) if e.shape != t.shape() => {
                    let _ = writeln!(diff, "~ {n} checkpoint {:?} vs model {:?}", e.shape, t.shape());
                }
                _ => {}
            }
        }
        for (n, e) in &mine {
            if store.find(n).is_none() {
                let _ = writeln!(diff, "+ {n} {:?} (not in model)", e.shape);
            }
        }
        if !diff.is_empty() {
            return Err(Error::CheckpointMismatch(format!("{prefix}:\n{}", diff.trim_end())));
        }
        store
            .names()
            .iter()
            .map(|n| {
                let e = mine[n.as_str()];
                Tensor::from_vec(&e.shape, e.data.iter().map(|&v| T::of(v as f64)).collect())
            })
            .collect()
    }

    /// Overwrites `store` with `prefix/*`.
    pub fn load_store<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let tensors = self.read_like(prefix, store)?;
        for (dst, src) in store.tensors_mut().iter_mut().zip(tensors) {
            *dst = src;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(head, "meta {k} {v}");
        }
        let mut offset = 0usize;
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(head, "tensor {} {offset} {}", e.name, dims.join(","));
            offset += 4 * e.data.len();
        }
        let _ = writeln!(head, "payload {offset}");
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let end = find_header_end(bytes).ok_or_else(|| bad("no manifest terminator".into()))?;
        let head = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let payload = &bytes[end..];
        let mut lines = head.lines();
        match lines.next().map(|l| l.split_whitespace().collect::<Vec<_>>()) {
            Some(v) if v.len() == 2 && v[0] == MAGIC => {
                if v[1] != VERSION.to_string() {
                    return Err(bad(format!("unsupported version {}", v[1])));
                }
            }
            _ => return Err(bad("not a checkpoint (bad magic)".into())),
        }
        let mut ck = Checkpoint::new();
        let mut declared = None;
        for line in lines {
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad(format!("bad tensor line {line:?}")));
                    }
                    let offset: usize = f[1].parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
                    let shape = f[2]
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape in {line:?}")))?;
                    let n: usize = shape.iter().product();
                    let raw = payload
                        .get(offset..offset + 4 * n)
                        .ok_or_else(|| bad(format!("tensor {} runs past payload", f[0])))?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    ck.entries.push(Entry {
                        name: f[0].to_string(),
                        shape,
                        data,
                    });
                }
                "payload" => {
                    declared = Some(rest.parse::<usize>().map_err(|_| bad("bad payload size".into()))?);
                }
                "end" => {}
                other => return Err(bad(format!("unknown manifest record {other:?}"))),
            }
        }
        if declared != Some(payload.len()) {
            return Err(bad(format!(
                "payload is {} bytes, manifest declares {declared:?}",
                payload.len()
            )));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let pat = b"\nend\n";
    bytes.windows(pat.len()).position(|w| w == pat).map(|p| p + pat.len())
}
