//! Binary checkpoint format.
//!
//! ```text
//! SPNKPT1\n
//! key=value\n ...          model config, then optional meta.* entries
//! \n
//! name\n shape\n <f32 LE>  per tensor, canonical order
//! <u32 LE CRC32 of every float payload byte>
//! ```

use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"SPNKPT1\n";
const META_PREFIX: &str = "meta.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Free-form annotations such as the epoch or validation score.
    pub meta: Vec<(String, String)>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn truncated() -> Error {
    Error::Checksum("file is truncated".into())
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams) -> Self {
        Self {
            config,
            params,
            meta: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_shapes(&self.config)?;
        let mut out = MAGIC.to_vec();
        for (k, v) in self.config.to_pairs() {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(format_err(format!("meta entry `{k}` is not representable")));
            }
            out.extend_from_slice(format!("{META_PREFIX}{k}={v}\n").as_bytes());
        }
        out.push(b'\n');
        let mut crc = crc32fast::Hasher::new();
        let names = self.params.names();
        for (name, t) in names.iter().zip(self.params.leaves()) {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.extend_from_slice(format!("{name}\n{}\n", shape.join(" ")).as_bytes());
            let start = out.len();
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            crc.update(&out[start..]);
        }
        out.extend_from_slice(&crc.finalize().to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint. When `expected` is given, every config key in
    /// the header must match it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let mut pairs = Vec::new();
        let mut meta = Vec::new();
        loop {
            let line = r.line()?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(format!("header line `{line}` lacks `=`")))?;
            match k.strip_prefix(META_PREFIX) {
                Some(key) => meta.push((key.to_string(), v.to_string())),
                None => pairs.push((k.to_string(), v.to_string())),
            }
        }
        if let Some(exp) = expected {
            for (key, want) in exp.to_pairs() {
                let found = pairs
                    .iter()
                    .find(|(k, _)| k == key)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_else(|| "<missing>".into());
                if found != want {
                    return Err(Error::ConfigMismatch {
                        key: key.to_string(),
                        found,
                        expected: want,
                    });
                }
            }
        }
        let config = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;

        let template = ModelParams::init(
            &config,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        );
        let names = template.names();
        let body: usize = names
            .iter()
            .zip(template.leaves())
            .map(|(n, t)| {
                let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                n.len() + shape.join(" ").len() + 2 + 4 * t.len()
            })
            .sum::<usize>()
            + 4;
        if bytes.len() - r.pos < body {
            return Err(truncated());
        }
        let mut crc = crc32fast::Hasher::new();
        let mut tensors = Vec::with_capacity(names.len());
        for (name, t) in names.iter().zip(template.leaves()) {
            let found = r.line()?;
            if found != *name {
                return Err(format_err(format!("expected tensor `{name}`, found `{found}`")));
            }
            let shape_line = r.line()?;
            let shape: Vec<usize> = shape_line
                .split(' ')
                .map(|s| s.parse().map_err(|_| format_err(format!("bad shape `{shape_line}`"))))
                .collect::<Result<_>>()?;
            if shape != t.shape() {
                return Err(format_err(format!(
                    "{name}: shape {shape:?}, config implies {:?}",
                    t.shape()
                )));
            }
            let payload = r.take(t.len() * 4)?;
            crc.update(payload);
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        let stored = r.take(4)?;
        let stored = u32::from_le_bytes([stored[0], stored[1], stored[2], stored[3]]);
        let actual = crc.finalize();
        if stored != actual {
            return Err(Error::Checksum(format!(
                "stored CRC {stored:08x}, computed {actual:08x}"
            )));
        }
        if r.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = template.with_leaves(tensors)?;
        Ok(Self { config, params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let n = rest.iter().position(|&b| b == b'\n').ok_or_else(truncated)?;
        let line = std::str::from_utf8(&rest[..n]).map_err(|_| format_err("header is not UTF-8"))?;
        self.pos += n + 1;
        Ok(line)
    }
}
