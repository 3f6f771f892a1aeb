//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SSMECGCK"
//! version    u32      FORMAT_VERSION
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count      u64      number of arrays
//! count times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, ndim × u64 dims
//!   data     product(dims) × f64
//! ```
//!
//! Model arrays use their parameter names. Optimizer moments follow as
//! `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Head, HeadSpec, Model};
use super::optim::{AdamW, Moments};
use super::HistoryRecord;
use crate::error::{Error, Result};
use crate::ssm::{Backbone, NetworkConfig, Params};

pub const MAGIC: &[u8; 8] = b"SSMECGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    pub network: NetworkConfig,
    pub head: HeadSpec,
    pub optimizer: OptimizerMeta,
    /// Snapshot of the run configuration.
    pub config: serde_json::Value,
    pub history: Vec<HistoryRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub optimizer: AdamW,
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);

        let mut arrays: Vec<(String, Vec<usize>, &[f64])> = self.model.tensors();
        let shapes: BTreeMap<String, Vec<usize>> =
            arrays.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect();
        let mut moments = Vec::new();
        for (name, m) in &self.optimizer.state {
            let shape = shapes
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown array {name}")))?;
            moments.push((format!("adam.m.{name}"), shape.clone(), m.m.as_slice()));
            moments.push((format!("adam.v.{name}"), shape, m.v.as_slice()));
        }
        arrays.extend(moments);

        out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for (name, shape, data) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.len()?;
        let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if arrays.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last array".into()));
        }

        let mut model = Model {
            backbone: Backbone::new(meta.network.clone(), 0)?,
            head: Head::new(meta.head, meta.network.embedding_dim, 0),
        };
        let expected: Vec<(String, Vec<usize>)> =
            model.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, shape), dst) in expected.iter().zip(model.tensors_mut()) {
            let (s, data) = arrays
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if &s != shape {
                return Err(Error::Checkpoint(format!("{name}: shape {s:?}, expected {shape:?}")));
            }
            dst.copy_from_slice(&data);
        }
        let mut optimizer = AdamW::new(meta.optimizer.lr, meta.optimizer.weight_decay);
        for (name, shape) in &expected {
            let m = arrays.remove(&format!("adam.m.{name}"));
            let v = arrays.remove(&format!("adam.v.{name}"));
            match (m, v) {
                (None, None) => {}
                (Some((sm, m)), Some((sv, v))) if &sm == shape && &sv == shape => {
                    optimizer.state.insert(
                        name.clone(),
                        Moments {
                            m,
                            v,
                            step: meta.optimizer.step,
                        },
                    );
                }
                _ => return Err(Error::Checkpoint(format!("incomplete optimizer state for {name}"))),
            }
        }
        if let Some(name) = arrays.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {name}")));
        }
        Ok(Checkpoint { meta, model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::Params;

    fn sample() -> Checkpoint {
        let network = NetworkConfig {
            d_model: 3,
            d_state: 2,
            n_blocks: 2,
            dropout: 0.1,
            embedding_dim: 4,
            window_len: 8,
        };
        let head = HeadSpec::Mlp { hidden: 5, outputs: 2 };
        let model = Model {
            backbone: Backbone::new(network.clone(), 3).unwrap(),
            head: Head::new(head, 4, 4),
        };
        let mut optimizer = AdamW::new(1e-3, 0.01);
        let mut grads = model.clone();
        grads.scale(0.1);
        let mut m = model.clone();
        optimizer.step(&mut m, &grads).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                stage: Stage::Finetune,
                epoch: 3,
                seed: 42,
                network,
                head,
                optimizer: OptimizerMeta {
                    lr: 1e-3,
                    weight_decay: 0.01,
                    step: 1,
                },
                config: serde_json::json!({"task": "stress", "fraction": 0.05}),
                history: vec![HistoryRecord {
                    epoch: 1,
                    step: 1,
                    split: "train".into(),
                    loss: 0.1 + 0.2,
                    metric: Some(1.0 / 3.0),
                    metric_name: Some("f1_macro".into()),
                    fold: Some(0),
                }],
            },
            model: m,
            optimizer,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        Checkpoint::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }
}
