//! Checkpoint files: a plain-text manifest followed by little-endian `f32`
//! tensor data.
//!
//! ```text
//! mixmask-checkpoint 1
//! arch in=3 size=32 widths=32,64,128,256 groups=8 hidden=256 embed=128 act=silu
//! seed 0
//! step 120
//! meta queue_cursor 512
//! tensor online.block0.conv.weight 32x3x3x3 0 3456 9f0c11aa
//! ...
//! end
//! <binary payload>
//! ```
//!
//! Each `tensor` line carries name, shape, byte offset into the payload, byte
//! length and a CRC-32 of its bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::{ArchConfig, EncoderParams, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &str = "mixmask-checkpoint";
pub const VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub seed: u64,
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(arch: ArchConfig, seed: u64, step: u64) -> Self {
        Self {
            arch,
            seed,
            step,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds every tensor of `params` under `prefix.`.
    pub fn add_encoder(&mut self, prefix: &str, params: &EncoderParams<f32>) {
        for t in params.tensors() {
            self.tensors.push(Tensor {
                name: format!("{prefix}.{}", t.name),
                shape: t.shape.clone(),
                data: t.data.clone(),
            });
        }
    }

    pub fn add_tensor(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("checkpoint lacks numeric meta '{key}'")))
    }

    /// Encoder stored under `prefix.`; fails on any architecture difference.
    pub fn encoder(&self, prefix: &str, expected: &ArchConfig) -> Result<EncoderParams<f32>> {
        if &self.arch != expected {
            return Err(Error::ArchitectureMismatch {
                found: self.arch.describe(),
                expected: expected.describe(),
            });
        }
        let lead = format!("{prefix}.");
        let tensors: Vec<Tensor<f32>> = self
            .tensors
            .iter()
            .filter_map(|t| {
                t.name.strip_prefix(&lead).map(|n| Tensor {
                    name: n.to_string(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
            })
            .collect();
        EncoderParams::from_tensors(expected, tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("{MAGIC} {VERSION}\narch {}\nseed {}\nstep {}\n", self.arch.describe(), self.seed, self.step);
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload = Vec::new();
        for t in &self.tensors {
            let start = payload.len();
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let bytes = &payload[start..];
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "tensor {} {} {} {} {:08x}\n",
                t.name,
                shape.join("x"),
                start,
                bytes.len(),
                crc32fast::hash(bytes)
            ));
        }
        manifest.push_str("end\n");
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let end = find_manifest_end(bytes).ok_or_else(|| corrupt("manifest terminator not found".into()))?;
        let manifest = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("manifest is not UTF-8".into()))?;
        let payload = &bytes[end..];
        let mut lines = manifest.lines();

        let header = lines.next().unwrap_or_default();
        match header.split_once(' ') {
            Some((MAGIC, VERSION)) => {}
            Some((MAGIC, v)) => {
                return Err(Error::VersionMismatch {
                    found: v.to_string(),
                    expected: VERSION.to_string(),
                })
            }
            _ => return Err(corrupt(format!("bad header '{header}'"))),
        }

        let mut arch = None;
        let mut seed = None;
        let mut step = None;
        let mut meta = BTreeMap::new();
        let mut tensors = Vec::new();
        let mut covered = 0usize;
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "arch" => arch = Some(ArchConfig::parse(rest)?),
                "seed" => seed = rest.parse().ok(),
                "step" => step = rest.parse().ok(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| corrupt(format!("bad meta line '{line}'")))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let t = parse_tensor(rest, payload).map_err(corrupt)?;
                    covered += t.data.len() * 4;
                    tensors.push(t);
                }
                "end" => {}
                _ => return Err(corrupt(format!("unknown manifest line '{line}'"))),
            }
        }
        if covered != payload.len() {
            return Err(corrupt(format!(
                "payload has {} bytes, manifest describes {covered}",
                payload.len()
            )));
        }
        Ok(Self {
            arch: arch.ok_or_else(|| corrupt("missing arch line".into()))?,
            seed: seed.ok_or_else(|| corrupt("missing seed line".into()))?,
            step: step.ok_or_else(|| corrupt("missing step line".into()))?,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn find_manifest_end(bytes: &[u8]) -> Option<usize> {
    const END: &[u8] = b"\nend\n";
    bytes.windows(END.len()).position(|w| w == END).map(|p| p + END.len())
}

fn parse_tensor(rest: &str, payload: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let fields: Vec<&str> = rest.split(' ').collect();
    let [name, shape, offset, len, crc] = fields.as_slice() else {
        return Err(format!("bad tensor line '{rest}'"));
    };
    let shape: Vec<usize> = shape
        .split('x')
        .map(|d| d.parse().map_err(|_| format!("bad shape in '{rest}'")))
        .collect::<std::result::Result<_, _>>()?;
    let offset: usize = offset.parse().map_err(|_| format!("bad offset in '{rest}'"))?;
    let len: usize = len.parse().map_err(|_| format!("bad length in '{rest}'"))?;
    let crc = u32::from_str_radix(crc, 16).map_err(|_| format!("bad checksum in '{rest}'"))?;
    if len != shape.iter().product::<usize>() * 4 {
        return Err(format!("tensor {name}: length {len} disagrees with shape"));
    }
    let bytes = payload
        .get(offset..offset + len)
        .ok_or_else(|| format!("tensor {name} runs past the end of the file"))?;
    if crc32fast::hash(bytes) != crc {
        return Err(format!("checksum mismatch in tensor {name}"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor {
        name: name.to_string(),
        shape,
        data,
    })
}

/// Saves a single encoder as `online.*`.
pub fn save_params(params: &EncoderParams<f32>, path: impl AsRef<Path>, seed: u64, step: u64) -> Result<()> {
    let mut ck = Checkpoint::new(params.arch().clone(), seed, step);
    ck.add_encoder("online", params);
    ck.save(path)
}

/// Loads the `online.*` encoder, requiring the architecture to match exactly.
pub fn load_params(path: impl AsRef<Path>, expected: &ArchConfig) -> Result<EncoderParams<f32>> {
    Checkpoint::load(path)?.encoder("online", expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::params::Activation;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let arch = ArchConfig::tiny(8);
        let mut p = EncoderParams::<f32>::init(&arch, 9).unwrap();
        p.flat_set(3, -0.0);
        p.flat_set(4, f32::MIN_POSITIVE / 2.0);
        save_params(&p, &path, 9, 17).unwrap();
        let q = load_params(&path, &arch).unwrap();
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!((ck.seed, ck.step), (9, 17));
    }

    #[test]
    fn wrong_architecture_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let arch = ArchConfig::tiny(8);
        save_params(&EncoderParams::init(&arch, 1).unwrap(), &path, 1, 0).unwrap();
        let other = ArchConfig {
            activation: Activation::Relu,
            ..arch.clone()
        };
        assert!(matches!(load_params(&path, &other), Err(Error::ArchitectureMismatch { .. })));
        let wider = ArchConfig {
            widths: vec![4, 6, 10],
            ..arch
        };
        assert!(matches!(load_params(&path, &wider), Err(Error::ArchitectureMismatch { .. })));
    }

    #[test]
    fn flipped_payload_byte_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let arch = ArchConfig::tiny(8);
        save_params(&EncoderParams::init(&arch, 1).unwrap(), &path, 1, 0).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 10;
        bytes[last] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn truncated_and_versioned_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let arch = ArchConfig::tiny(8);
        save_params(&EncoderParams::init(&arch, 1).unwrap(), &path, 1, 0).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt { .. })));
        let mut versioned = bytes.clone();
        versioned[MAGIC.len() + 1] = b'9';
        fs::write(&path, &versioned).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::VersionMismatch { .. })));
    }
}
