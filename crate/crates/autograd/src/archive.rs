//! Named-tensor archive.
//!
//! Layout (UTF-8 header, then binary payload):
//!
//! ```text
//! GENVIT-CKPT 1
//! config <n>
//! key=value            (n lines)
//! tensors <m>
//! name\tf32\t16x64\t<byte-offset>\t<frozen 0|1>   (m lines)
//! <little-endian f32 payload>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

const MAGIC: &str = "GENVIT-CKPT 1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed archive: {0}")]
    Format(String),
}

fn bad(msg: impl Into<String>) -> ArchiveError {
    ArchiveError::Format(msg.into())
}

/// A parameter store plus its config block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub config: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>, ArchiveError> {
    if s == "scalar" {
        return Ok(vec![]);
    }
    s.split('x').map(|d| d.parse().map_err(|_| bad(format!("bad shape `{s}`")))).collect()
}

impl Archive {
    pub fn new(config: BTreeMap<String, String>, params: ParamStore<f32>) -> Self {
        Self { config, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        header.push_str(&format!("config {}\n", self.config.len()));
        for (k, v) in &self.config {
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str(&format!("tensors {}\n", self.params.len()));
        let mut payload = Vec::new();
        for (name, e) in self.params.iter() {
            header.push_str(&format!(
                "{name}\tf32\t{}\t{}\t{}\n",
                shape_str(e.tensor.shape()),
                payload.len(),
                u8::from(e.frozen)
            ));
            for v in e.tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str, ArchiveError> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("missing magic line"));
        }
        let count = |line: &str, key: &str| -> Result<usize, ArchiveError> {
            line.strip_prefix(key)
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| bad(format!("expected `{key} <n>`, got `{line}`")))
        };
        let n_cfg = count(next_line()?, "config")?;
        let mut config = BTreeMap::new();
        for _ in 0..n_cfg {
            let line = next_line()?;
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line `{line}`")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let n_tensors = count(next_line()?, "tensors")?;
        let mut specs = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let line = next_line()?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 || f[1] != "f32" {
                return Err(bad(format!("bad tensor line `{line}`")));
            }
            let offset: usize = f[3].parse().map_err(|_| bad("bad offset"))?;
            let frozen = match f[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("bad frozen flag")),
            };
            specs.push((f[0].to_string(), parse_shape(f[2])?, offset, frozen));
        }
        let payload = &bytes[pos..];
        let mut params = ParamStore::new();
        for (name, shape, offset, frozen) in specs {
            let n = numel(&shape);
            let end = offset + 4 * n;
            if end > payload.len() {
                return Err(bad(format!("payload too short for `{name}`")));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::new(&shape, data), frozen);
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

impl<S: Scalar> From<&ParamStore<S>> for Archive {
    fn from(store: &ParamStore<S>) -> Self {
        Self { config: BTreeMap::new(), params: store.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut p = ParamStore::new();
        p.insert("lm/wte", Tensor::from_f32(&[2, 3], &[1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]), false);
        p.insert("vae/scale", Tensor::scalar(0.18), true);
        let mut cfg = BTreeMap::new();
        cfg.insert("d_lm".to_string(), "128".to_string());
        let a = Archive::new(cfg, p);
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Archive::from_bytes(b"hello\n").is_err());
        assert!(Archive::from_bytes(b"GENVIT-CKPT 1\nconfig 0\ntensors 1\nx\tf32\t4\t0\t0\n").is_err());
    }
}
