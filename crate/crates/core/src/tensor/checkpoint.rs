//! Checkpoint files: one line of JSON header, a newline, then the raw
//! little-endian f64 payload in header order.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub section: String,
    pub dtype: String,
    pub seed: u64,
    pub config_hash: String,
    pub entries: Vec<Entry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_store(section: &str, seed: u64, config_hash: &str, meta: serde_json::Value, store: &ParamStore) -> Self {
        Self::from_named(
            section,
            seed,
            config_hash,
            meta,
            store.names().iter().cloned().zip(store.tensors().iter().cloned()).collect(),
        )
    }

    pub fn from_named(section: &str, seed: u64, config_hash: &str, meta: serde_json::Value, named: Vec<(String, Tensor)>) -> Self {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            entries.push(Entry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * 8;
            let mut t = t;
            t.zero_grad();
            t.set_requires_grad(false);
            tensors.push(t);
        }
        Checkpoint {
            header: Header {
                section: section.to_string(),
                dtype: "f64".into(),
                seed,
                config_hash: config_hash.to_string(),
                entries,
                meta,
            },
            tensors,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn payload_sha256(&self) -> String {
        sha256_hex(&self.payload())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.extend(self.payload());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BufReader::new(bytes);
        Self::read_from(&mut r)
    }

    fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Parse("checkpoint header is not newline-terminated".into()));
        }
        let header: Header = serde_json::from_slice(&line[..line.len() - 1])?;
        if header.dtype != "f64" {
            return Err(Error::Parse(format!("unsupported dtype {}", header.dtype)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > payload.len() {
                return Err(Error::Parse(format!("payload truncated at {}", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(&e.shape, data)?);
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f = std::fs::File::open(path)?;
        Self::read_from(&mut BufReader::new(f))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.header
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Copy values into a store of the same layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<&str> = self.header.entries.iter().map(|e| e.name.as_str()).collect();
        if names != store.names().iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::contract(format!(
                "checkpoint section `{}` does not match the model layout",
                self.header.section
            )));
        }
        for (dst, src) in store.tensors_mut().iter_mut().zip(&self.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("restore", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
