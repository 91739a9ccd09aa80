//! Versioned checkpoint container.
//!
//! ```text
//! labelsync-checkpoint 1
//! kind transducer
//! config <n>
//! <key> = <value>        (n lines)
//! tensors <m>
//! <name> <rows> <cols>   (m lines)
//! payload
//! <little-endian f64 values of every tensor, in manifest order>
//! ```

use std::path::Path;

use crate::config::KeyValues;
use crate::error::{bail, Error, Result};
use crate::numcore::{Matrix, ParamStore};

pub const CHECKPOINT_MAGIC: &str = "labelsync-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: KeyValues,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: KeyValues, store: &ParamStore) -> Self {
        let tensors = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        Self { kind: kind.to_string(), config, tensors }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            bail!(Format, "expected a {} checkpoint, found {}", kind, self.kind);
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Overwrites every parameter of `store`; names and shapes must match one-to-one.
    pub fn fill_store(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            bail!(Format, "checkpoint holds {} tensors, model has {}", self.tensors.len(), store.len());
        }
        for (name, m) in &self.tensors {
            let Some(id) = store.find(name) else {
                bail!(Format, "unexpected tensor {}", name);
            };
            let p = store.get_mut(id);
            if p.value.shape() != m.shape() {
                bail!(Format, "tensor {} has shape {:?}, expected {:?}", name, m.shape(), p.value.shape());
            }
            p.value = m.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nkind {}\n", self.kind);
        let config: Vec<(&str, &str)> = self.config.iter().collect();
        head += &format!("config {}\n", config.len());
        for (k, v) in config {
            head += &format!("{k} = {v}\n");
        }
        head += &format!("tensors {}\n", self.tensors.len());
        for (name, m) in &self.tensors {
            head += &format!("{name} {} {}\n", m.rows(), m.cols());
        }
        head += "payload\n";
        let mut out = head.into_bytes();
        for (_, m) in &self.tensors {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = Lines { bytes, pos: 0 };
        let magic = reader.line()?;
        match magic.split_once(' ') {
            Some((m, v)) if m == CHECKPOINT_MAGIC => {
                if v.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
                    bail!(Format, "unsupported checkpoint version {:?}", v);
                }
            }
            _ => bail!(Format, "not a checkpoint (header {:?})", magic),
        }
        let kind = reader.field("kind")?.to_string();
        let n: usize = parse_count(reader.field("config")?)?;
        let mut text = String::new();
        for _ in 0..n {
            text += reader.line()?;
            text.push('\n');
        }
        let config = KeyValues::parse(&text)?;
        let m: usize = parse_count(reader.field("tensors")?)?;
        let mut shapes = Vec::with_capacity(m);
        for _ in 0..m {
            let line = reader.line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 3 {
                bail!(Format, "bad tensor line {:?}", line);
            }
            shapes.push((parts[0].to_string(), parse_count(parts[1])?, parse_count(parts[2])?));
        }
        if reader.line()? != "payload" {
            bail!(Format, "missing payload marker");
        }
        let mut payload = &bytes[reader.pos..];
        let expected: usize = shapes.iter().map(|(_, r, c)| r * c * 8).sum();
        if payload.len() != expected {
            bail!(Format, "payload has {} bytes, manifest needs {}", payload.len(), expected);
        }
        let mut tensors = Vec::with_capacity(m);
        for (name, r, c) in shapes {
            let (chunk, rest) = payload.split_at(r * c * 8);
            payload = rest;
            let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.push((name, Matrix::from_vec(r, c, data)?));
        }
        Ok(Self { kind, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse_count(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format(format!("expected a count, found {s:?}")))
}

struct Lines<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lines<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            bail!(Format, "truncated checkpoint manifest");
        };
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("manifest is not UTF-8".into()))
    }

    fn field(&mut self, name: &str) -> Result<&'a str> {
        let line = self.line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == name => Ok(v),
            _ => bail!(Format, "expected `{} …`, found {:?}", name, line),
        }
    }
}
