//! Binary checkpoints: parameters, optimizer state and the run configuration.
//!
//! Layout (little-endian): magic `REMCKPT\0`, u32 version, u64 length +
//! UTF-8 `key=value` metadata, u32 array count, then per array u32 name
//! length + name, u32 rank, u64 dims, f64 values. A SHA-256 of everything
//! before it closes the file.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelPair, ParamSet};
use crate::optim::AdamState;

const MAGIC: &[u8; 8] = b"REMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: ModelPair,
    pub adam_theta: AdamState,
    pub adam_eta: AdamState,
    pub epochs_completed: usize,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_array(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    push_u32(out, t.rank() as u32);
    for &d in t.shape() {
        push_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }
}

fn arch_lines(arch: &Architecture) -> String {
    format!(
        "arch.data-dim={}\narch.latent-dim={}\narch.hidden={}\narch.decoder={}\narch.encoder={}\n",
        arch.data_dim, arch.latent_dim, arch.hidden, arch.decoder, arch.encoder
    )
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.config.to_text();
        meta.push_str(&arch_lines(&self.model.arch));
        meta.push_str(&format!("epochs-completed={}\n", self.epochs_completed));
        meta.push_str(&format!("adam.theta.t={}\nadam.eta.t={}\n", self.adam_theta.t, self.adam_eta.t));

        let mut arrays: Vec<(String, &Tensor)> = Vec::new();
        let groups: [(&str, &ParamSet); 6] = [
            ("theta", &self.model.theta),
            ("eta", &self.model.eta),
            ("adam.theta.m", &self.adam_theta.m),
            ("adam.theta.v", &self.adam_theta.v),
            ("adam.eta.m", &self.adam_eta.m),
            ("adam.eta.v", &self.adam_eta.v),
        ];
        for (prefix, set) in groups {
            for (name, t) in set.iter() {
                arrays.push((format!("{prefix}/{name}"), t));
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, VERSION);
        push_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(meta.as_bytes());
        push_u32(&mut out, arrays.len() as u32);
        for (name, t) in arrays {
            push_array(&mut out, &name, t);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (this build reads version {VERSION})"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let meta_len = r.usize()?;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;

        let mut config = RunConfig::default();
        let mut field = std::collections::BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line {line:?}")))?;
            if RunConfig::KEYS.contains(&k) {
                config.set(k, v)?;
            } else {
                field.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<&str> {
            field
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata value for {k}")))
        };
        let arch = Architecture {
            data_dim: num("arch.data-dim")? as usize,
            latent_dim: num("arch.latent-dim")? as usize,
            hidden: num("arch.hidden")? as usize,
            decoder: get("arch.decoder")?.parse()?,
            encoder: get("arch.encoder")?.parse()?,
        };

        let mut sets: [ParamSet; 6] = Default::default();
        let prefixes = ["theta", "eta", "adam.theta.m", "adam.theta.v", "adam.eta.m", "adam.eta.v"];
        let count = r.u32()?;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let (prefix, param) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad array name {name:?}")))?;
            let slot = prefixes
                .iter()
                .position(|p| *p == prefix)
                .ok_or_else(|| Error::Checkpoint(format!("unknown array group {prefix:?}")))?;
            sets[slot].insert(param, Tensor::new(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let [theta, eta, tm, tv, em, ev] = sets;
        Ok(Checkpoint {
            config,
            model: ModelPair { arch, theta, eta },
            adam_theta: AdamState {
                m: tm,
                v: tv,
                t: num("adam.theta.t")?,
            },
            adam_eta: AdamState {
                m: em,
                v: ev,
                t: num("adam.eta.t")?,
            },
            epochs_completed: num("epochs-completed")? as usize,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
