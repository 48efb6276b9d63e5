//! Binary checkpoints.
//!
//! Layout: the 8 magic bytes `TRLMCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, then every tensor's
//! values as little-endian f32 in header order. The header stores the model
//! config, a directory of named tensors (shape, offset in values), optional
//! optimiser moments and the sampler state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, Module, Moments};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TRLMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the tensors belong to, e.g. `lm` or `decision`.
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamW>,
    pub rng: Option<ChaCha8Rng>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    requires_grad: bool,
}

#[derive(Serialize, Deserialize)]
struct OptEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    config: AdamWConfig,
    step: u64,
    moments: Vec<OptEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    config: serde_json::Value,
    tensors: Vec<Entry>,
    optimizer: Option<OptHeader>,
    rng: Option<ChaCha8Rng>,
    total_values: usize,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn capture<M: Module>(kind: &str, config: serde_json::Value, step: u64, module: &M) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            config,
            step,
            tensors: module
                .named_params()
                .into_iter()
                .map(|(n, t)| {
                    let mut c = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
                    c.set_requires_grad(t.requires_grad());
                    (n, c)
                })
                .collect(),
            optimizer: None,
            rng: None,
        }
    }

    /// Copies the stored values into `module`, which must have exactly the
    /// same parameter names and shapes.
    pub fn restore_into<M: Module>(&self, module: &mut M) -> Result<()> {
        let mut stored: BTreeMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut params = module.named_params_mut();
        if params.len() != stored.len() {
            return Err(bad(format!("{} stored tensors for {} parameters", stored.len(), params.len())));
        }
        for (name, t) in params.iter_mut() {
            let s = stored.remove(name.as_str()).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if s.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "checkpoint restore",
                    lhs: s.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            t.data_mut().copy_from_slice(s.data());
            t.set_requires_grad(s.requires_grad());
            t.zero_grad();
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload: Vec<f32> = Vec::new();
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            tensors.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
                requires_grad: t.requires_grad(),
            });
            payload.extend_from_slice(t.data());
        }
        let optimizer = self.optimizer.as_ref().map(|opt| {
            let moments = opt
                .moments()
                .iter()
                .map(|(name, m)| {
                    let e = OptEntry {
                        name: name.clone(),
                        offset: payload.len(),
                        len: m.first.len(),
                    };
                    payload.extend_from_slice(&m.first);
                    payload.extend_from_slice(&m.second);
                    e
                })
                .collect();
            OptHeader {
                config: opt.config.clone(),
                step: opt.step_count(),
                moments,
            }
        });
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            tensors,
            optimizer,
            rng: self.rng.clone(),
            total_values: payload.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + json.len() + 4 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(e.to_string()))?;
        let raw = &body[hlen..];
        if raw.len() != 4 * header.total_values {
            return Err(bad(format!("payload of {} bytes, expected {}", raw.len(), 4 * header.total_values)));
        }
        let payload: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let slice = |offset: usize, len: usize| -> Result<&[f32]> {
            payload.get(offset..offset + len).ok_or_else(|| bad("tensor offset out of range"))
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let len = e.shape.iter().product();
            let mut t = Tensor::new(e.shape, slice(e.offset, len)?.to_vec())?;
            t.set_requires_grad(e.requires_grad);
            tensors.push((e.name, t));
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut moments = BTreeMap::new();
                for m in o.moments {
                    let both = slice(m.offset, 2 * m.len)?;
                    moments.insert(
                        m.name,
                        Moments {
                            first: both[..m.len].to_vec(),
                            second: both[m.len..].to_vec(),
                        },
                    );
                }
                Some(AdamW::from_state(o.config, o.step, moments))
            }
            None => None,
        };
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            step: header.step,
            tensors,
            optimizer,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    struct Pair {
        a: Tensor,
        b: Tensor,
    }

    impl Module for Pair {
        fn named_params(&self) -> Vec<(String, &Tensor)> {
            vec![("a".into(), &self.a), ("b".into(), &self.b)]
        }
        fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("a".into(), &mut self.a), ("b".into(), &mut self.b)]
        }
    }

    #[test]
    fn bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Pair {
            a: Tensor::randn(&[3, 2], 1.0, &mut rng),
            b: Tensor::new(vec![2], vec![f32::MIN_POSITIVE, -0.0]).unwrap(),
        };
        p.b.set_requires_grad(false);
        let mut ck = Checkpoint::capture("test", serde_json::json!({"x": 1}), 7, &p);
        let mut moments = BTreeMap::new();
        moments.insert(
            "a".to_string(),
            Moments {
                first: vec![1.0; 6],
                second: vec![2.0; 6],
            },
        );
        ck.optimizer = Some(AdamW::from_state(AdamWConfig::default(), 3, moments));
        ck.rng = Some(rng.clone());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);

        let mut q = Pair {
            a: Tensor::zeros(&[3, 2]),
            b: Tensor::zeros(&[2]),
        };
        back.restore_into(&mut q).unwrap();
        assert_eq!(q.a.data(), p.a.data());
        assert_eq!(q.b.data()[1].to_bits(), (-0.0f32).to_bits());
        assert!(!q.b.requires_grad());
    }

    #[test]
    fn rejects_other_versions_and_shapes() {
        let p = Pair {
            a: Tensor::zeros(&[1]),
            b: Tensor::zeros(&[1]),
        };
        let mut bytes = Checkpoint::capture("t", serde_json::Value::Null, 0, &p).to_bytes();
        bytes[8] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());

        let ck = Checkpoint::capture("t", serde_json::Value::Null, 0, &p);
        let mut wrong = Pair {
            a: Tensor::zeros(&[2]),
            b: Tensor::zeros(&[1]),
        };
        assert!(matches!(ck.restore_into(&mut wrong), Err(Error::Shape { .. })));
    }
}
