//! Checkpoint container: the magic `PTUNIF01`, a little-endian `u32`
//! header length, a JSON header, then raw little-endian tensor bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"PTUNIF01";
pub const VERSION: u64 = 1;

/// Position of a generator: seed, stream, and word position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since it does not fit a JSON number.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("invalid rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// From the start of the data section.
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u64,
    config: serde_json::Value,
    rng_state: RngState,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

fn dtype_bytes(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub rng_state: RngState,
    pub step: u64,
    pub tensors: BTreeMap<String, RawTensor>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, rng_state: RngState, step: u64) -> Self {
        Self {
            config,
            rng_state,
            step,
            tensors: BTreeMap::new(),
        }
    }

    pub fn put<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
        self.tensors.insert(
            name.to_string(),
            RawTensor {
                dtype: T::DTYPE.into(),
                shape: t.shape().to_vec(),
                bytes,
            },
        );
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let raw = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        if raw.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor `{name}` is {}, expected {}",
                raw.dtype,
                T::DTYPE
            )));
        }
        let data = raw.bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(data, &raw.shape)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.dtype.clone(),
                shape: t.shape.clone(),
                offset,
                byte_len: t.bytes.len() as u64,
            });
            offset += t.bytes.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            config: self.config.clone(),
            rng_state: self.rng_state.clone(),
            step: self.step,
            tensors: entries,
        })?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated("checkpoint header length".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let data_start = 12 + header_len;
        if bytes.len() < data_start {
            return Err(Error::Truncated(format!(
                "header declares {header_len} bytes, {} present",
                bytes.len() - 12
            )));
        }
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..data_start])
            .map_err(|e| Error::Format(format!("header is not JSON: {e}")))?;
        match header.get("version").and_then(serde_json::Value::as_u64) {
            Some(VERSION) => {}
            Some(v) => return Err(Error::Version(v)),
            None => return Err(Error::Format("header lacks a version".into())),
        }
        let header: Header =
            serde_json::from_value(header).map_err(|e| Error::Format(format!("malformed header: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in header.tensors {
            let width = dtype_bytes(&e.dtype)
                .ok_or_else(|| Error::Format(format!("tensor `{}` has unknown dtype {}", e.name, e.dtype)))?;
            let numel: usize = e.shape.iter().product();
            if e.byte_len != (numel * width) as u64 {
                return Err(Error::Format(format!(
                    "tensor `{}` of shape {:?} declares {} bytes",
                    e.name, e.shape, e.byte_len
                )));
            }
            if e.offset != expected_offset {
                return Err(Error::Format(format!("tensor `{}` at unexpected offset {}", e.name, e.offset)));
            }
            let end = e.offset + e.byte_len;
            if end > data.len() as u64 {
                return Err(Error::Truncated(format!(
                    "tensor `{}` needs bytes up to {end}, data section has {}",
                    e.name,
                    data.len()
                )));
            }
            expected_offset = end;
            let raw = RawTensor {
                dtype: e.dtype,
                shape: e.shape,
                bytes: data[e.offset as usize..end as usize].to_vec(),
            };
            if tensors.insert(e.name.clone(), raw).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
            }
        }
        if expected_offset != data.len() as u64 {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                data.len() as u64 - expected_offset
            )));
        }
        Ok(Self {
            config: header.config,
            rng_state: header.rng_state,
            step: header.step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.next_u64();
        let mut c = Checkpoint::new(serde_json::json!({"total_steps": 5}), RngState::capture(&rng), 3);
        c.put("b", &Tensor::<f32>::new(vec![1.0, -2.5], &[2]).unwrap());
        c.put("a", &Tensor::<f64>::new(vec![0.25; 6], &[2, 3]).unwrap());
        c
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.get::<f32>("b").unwrap().data(), &[1.0, -2.5]);
        assert!(back.get::<f64>("b").is_err());
        assert!(back.get::<f64>("zz").is_err());
        // Records are sorted by name.
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        let names: Vec<&str> = header["tensors"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }

    #[test]
    fn corruption_gives_distinct_errors() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::Truncated(_))));

        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        header["version"] = 2.into();
        let h = serde_json::to_vec(&header).unwrap();
        let mut v2 = MAGIC.to_vec();
        v2.extend_from_slice(&(h.len() as u32).to_le_bytes());
        v2.extend_from_slice(&h);
        v2.extend_from_slice(&bytes[12 + header_len..]);
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version(2))));
    }
}
