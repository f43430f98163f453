//! `IDU1` tensor archive.
//!
//! Layout: the magic bytes `IDU1`, then parameter records, then state
//! records (optimizer moments, spectral-norm vectors, metadata) in the same
//! format. A record is the name length (u64 LE), the UTF-8 name, four
//! extents (u64 LE each) and the payload as f32 LE values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"IDU1";

/// Name prefixes of state records.
pub const ADAM_M: &str = "adam.m:";
pub const ADAM_V: &str = "adam.v:";
pub const SN_STATE: &str = "sn:";
pub const META: &str = "meta:";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub params: Vec<Record>,
    pub state: Vec<Record>,
}

fn write_record(out: &mut impl Write, r: &Record) -> io::Result<()> {
    let name = r.name.as_bytes();
    out.write_all(&(name.len() as u64).to_le_bytes())?;
    out.write_all(name)?;
    for e in r.tensor.shape().0 {
        out.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(r.tensor.numel() * 4);
    for v in r.tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

fn read_u64(input: &mut &[u8]) -> Option<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b).ok()?;
    Some(u64::from_le_bytes(b))
}

fn read_record(input: &mut &[u8]) -> std::result::Result<Record, String> {
    let len = read_u64(input).ok_or("truncated name length")? as usize;
    if len > input.len() {
        return Err("name length exceeds file".into());
    }
    let (name, rest) = input.split_at(len);
    let name = String::from_utf8(name.to_vec()).map_err(|_| "record name is not UTF-8")?;
    *input = rest;
    let mut ext = [0usize; 4];
    for e in &mut ext {
        *e = read_u64(input).ok_or_else(|| format!("{name}: truncated extents"))? as usize;
    }
    let shape = Shape(ext);
    let n = shape.numel();
    if n.checked_mul(4).is_none_or(|b| b > input.len()) {
        return Err(format!("{name}: truncated payload for {shape}"));
    }
    let (payload, rest) = input.split_at(n * 4);
    *input = rest;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Record {
        name,
        tensor: Tensor::from_vec(shape, data).map_err(|e| e.to_string())?,
    })
}

fn is_state(name: &str) -> bool {
    [ADAM_M, ADAM_V, SN_STATE, META].iter().any(|p| name.starts_with(p))
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for r in self.params.iter().chain(&self.state) {
            write_record(&mut out, r).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let Some(mut rest) = bytes.strip_prefix(MAGIC.as_slice()) else {
            return Err("missing IDU1 magic".into());
        };
        let mut archive = Archive::default();
        while !rest.is_empty() {
            let r = read_record(&mut rest)?;
            if is_state(&r.name) {
                archive.state.push(r);
            } else if !archive.state.is_empty() {
                return Err(format!("parameter record {} after state records", r.name));
            } else {
                archive.params.push(r);
            }
        }
        Ok(archive)
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|r| r.name == name).map(|r| &r.tensor)
    }

    pub fn state(&self, name: &str) -> Option<&Tensor<f32>> {
        self.state.iter().find(|r| r.name == name).map(|r| &r.tensor)
    }

    /// Adds every parameter of `store` (named `group/param`) with its Adam
    /// moments and spectral-norm state.
    pub fn push_store<F: Real>(&mut self, store: &ParamStore<F>) {
        for p in store.iter() {
            let full = format!("{}/{}", store.group(), p.name);
            self.params.push(Record {
                name: full.clone(),
                tensor: p.value().cast(),
            });
            self.state.push(Record {
                name: format!("{ADAM_M}{full}"),
                tensor: p.m.cast(),
            });
            self.state.push(Record {
                name: format!("{ADAM_V}{full}"),
                tensor: p.v.cast(),
            });
            if let Some(u) = &p.sn_state {
                let data: Vec<f32> = u.iter().map(|x| x.as_f64() as f32).collect();
                self.state.push(Record {
                    name: format!("{SN_STATE}{full}"),
                    tensor: Tensor::from_vec(Shape::new(1, 1, 1, data.len()), data).expect("shape"),
                });
            }
        }
    }

    /// Restores every parameter of `store` from the archive.
    pub fn restore_store<F: Real>(&self, store: &mut ParamStore<F>) -> Result<()> {
        let group = store.group().to_string();
        for p in store.iter_mut() {
            let full = format!("{group}/{}", p.name);
            let t = self
                .param(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {full}: checkpoint has {}, model expects {}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p.value_mut() = t.cast();
            if let Some(m) = self.state(&format!("{ADAM_M}{full}")) {
                p.m = m.cast();
            }
            if let Some(v) = self.state(&format!("{ADAM_V}{full}")) {
                p.v = v.cast();
            }
            if let Some(u) = self.state(&format!("{SN_STATE}{full}")) {
                p.sn_state = Some(u.data().iter().map(|&x| F::lit(x as f64)).collect());
            }
        }
        Ok(())
    }

    /// Stores raw bytes (e.g. a config file) as an f32 record, one byte per value.
    pub fn push_meta_bytes(&mut self, key: &str, bytes: &[u8]) {
        let data: Vec<f32> = bytes.iter().map(|&b| b as f32).collect();
        self.state.push(Record {
            name: format!("{META}{key}"),
            tensor: Tensor::from_vec(Shape::new(1, 1, 1, data.len()), data).expect("shape"),
        });
    }

    pub fn meta_bytes(&self, key: &str) -> Option<Vec<u8>> {
        self.state(&format!("{META}{key}"))
            .map(|t| t.data().iter().map(|&v| v as u8).collect())
    }

    pub fn push_meta_u64(&mut self, key: &str, value: u64) {
        self.push_meta_bytes(key, &value.to_le_bytes());
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        let b = self.meta_bytes(key)?;
        Some(u64::from_le_bytes(b.try_into().ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0f32, -2.5]).unwrap();
        let a = Archive {
            params: vec![Record { name: "w".into(), tensor: t }],
            state: vec![],
        };
        let bytes = a.to_bytes();
        let mut expect = b"IDU1".to_vec();
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.push(b'w');
        for e in [1u64, 1, 1, 2] {
            expect.extend_from_slice(&e.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(Archive::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Archive::from_bytes(b"IDU0").is_err());
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0f32, 2.0]).unwrap();
        let a = Archive {
            params: vec![Record { name: "w".into(), tensor: t }],
            state: vec![],
        };
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn meta_roundtrip() {
        let mut a = Archive::default();
        a.push_meta_u64("step", 123_456_789);
        a.push_meta_bytes("config", b"seed=7\n");
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(b.meta_u64("step"), Some(123_456_789));
        assert_eq!(b.meta_bytes("config").unwrap(), b"seed=7\n");
    }
}
