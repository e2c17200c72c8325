//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `DSCK` |
//! | 1 | format version |
//! | 8 | header length `n` (u64) |
//! | n | UTF-8 JSON [`Header`] |
//! | rest | every listed tensor as f64 values, in header order |
//!
//! The header carries the pointmap network configuration and its SHA-256
//! fingerprint, δ, the optional regressor configuration and the loss history.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::ActivationConfig;
use crate::gaussian_regress::{GaussianNet, UNetConfig};
use crate::nn::ParamStore;
use crate::pointmap_net::{NetConfig, PointMapNet};
use crate::training::LogRecord;

pub const MAGIC: &[u8; 4] = b"DSCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// `pointmap.<param>` or `gaussian.<param>`.
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub fingerprint: String,
    pub net: NetConfig,
    pub delta: f64,
    pub regressor: Option<RegressorHeader>,
    pub history: Vec<LogRecord>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorHeader {
    pub unet: UNetConfig,
    pub activation: ActivationConfig,
}

/// Trained networks plus their training history.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub pointmap: PointMapNet,
    pub regressor: Option<(GaussianNet, ActivationConfig)>,
    pub history: Vec<LogRecord>,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.pointmap.config().fingerprint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut stores: Vec<(&str, &ParamStore)> = vec![("pointmap", self.pointmap.store())];
        if let Some((g, _)) = &self.regressor {
            stores.push(("gaussian", g.store()));
        }
        for (prefix, store) in &stores {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry {
                    name: format!("{prefix}.{name}"),
                    shape: t.shape().to_vec(),
                });
            }
        }
        let header = Header {
            fingerprint: self.fingerprint(),
            net: self.pointmap.config().clone(),
            delta: self.pointmap.delta(),
            regressor: self.regressor.as_ref().map(|(g, a)| RegressorHeader {
                unet: g.config().clone(),
                activation: a.clone(),
            }),
            history: self.history.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&[VERSION]).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, store) in &stores {
            for (_, t) in store.iter() {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    /// Reads and validates a checkpoint, rebuilding both networks.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bad = |m: String| Error::format(path, m);
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut head = [0u8; 13];
        r.read_exact(&mut head).map_err(|_| bad("file too short for a checkpoint".into()))?;
        if &head[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        if head[4] != VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", head[4])));
        }
        let len = u64::from_le_bytes(head[5..13].try_into().expect("8 bytes")) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
        if header.net.fingerprint() != header.fingerprint {
            return Err(bad("stored fingerprint does not match the stored configuration".into()));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if body.len() != total * 8 {
            return Err(bad(format!("expected {} tensor bytes, found {}", total * 8, body.len())));
        }
        let mut pointmap = PointMapNet::new(header.net.clone(), 0).map_err(|e| bad(e.to_string()))?;
        let mut regressor = match &header.regressor {
            Some(h) => Some((GaussianNet::new(h.unet.clone(), 0).map_err(|e| bad(e.to_string()))?, h.activation.clone())),
            None => None,
        };
        let mut filled = (0usize, 0usize);
        let mut offset = 0;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let values: Vec<f64> = body[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            offset += n * 8;
            let (store, name, count) = if let Some(name) = entry.name.strip_prefix("pointmap.") {
                (pointmap.store_mut(), name, &mut filled.0)
            } else if let (Some(name), Some((g, _))) = (entry.name.strip_prefix("gaussian."), regressor.as_mut()) {
                (g.store_mut(), name, &mut filled.1)
            } else {
                return Err(bad(format!("unexpected tensor {}", entry.name)));
            };
            let id = store.find(name).ok_or_else(|| bad(format!("unknown tensor {}", entry.name)))?;
            let t = store.get_mut(id);
            if t.shape() != entry.shape.as_slice() {
                return Err(bad(format!("tensor {} has shape {:?}, expected {:?}", entry.name, entry.shape, t.shape())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor {} holds non-finite values", entry.name)));
            }
            t.data_mut().copy_from_slice(&values);
            *count += 1;
        }
        let want_g = regressor.as_ref().map_or(0, |(g, _)| g.store().len());
        if filled.0 != pointmap.store().len() || filled.1 != want_g {
            return Err(bad("checkpoint does not cover every parameter".into()));
        }
        Ok(Checkpoint {
            pointmap,
            regressor,
            history: header.history,
        })
    }

    /// Loads and rejects checkpoints written for a different network configuration.
    pub fn load_for(path: &Path, expected: &NetConfig) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path)?;
        let (want, found) = (expected.fingerprint(), ck.fingerprint());
        if want != found {
            return Err(Error::FingerprintMismatch { expected: want, found });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointmap_net::{Fusion, HeadType};

    fn cfg() -> NetConfig {
        NetConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            heads: 2,
            mlp_ratio: 2,
            n_encoder_blocks: 1,
            n_decoder_blocks: 2,
            head_type: HeadType::Linear,
            fusion: Fusion::Concat,
            init_depth: 2.5,
        }
    }

    fn stores_equal(a: &ParamStore, b: &ParamStore) -> bool {
        a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| na == nb && ta == tb) && a.len() == b.len()
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut pm = PointMapNet::new(cfg(), 9).unwrap();
        let ld = pm.log_delta_id();
        pm.store_mut().get_mut(ld).data_mut()[0] = 0.123;
        let g = GaussianNet::new(UNetConfig { channels: 8, levels: 2, groups: 2 }, 4).unwrap();
        let history = vec![LogRecord {
            stage: 1,
            iteration: 0,
            loss: 1.5,
            terms: [1.0, 0.5],
            lr: 1e-4,
            elapsed_s: 0.1,
        }];
        let ck = Checkpoint {
            pointmap: pm.clone(),
            regressor: Some((g.clone(), ActivationConfig::default())),
            history: history.clone(),
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load_for(&path, &cfg()).unwrap();
        assert!(stores_equal(back.pointmap.store(), pm.store()));
        let (bg, act) = back.regressor.unwrap();
        assert!(stores_equal(bg.store(), g.store()));
        assert_eq!(act, ActivationConfig::default());
        assert_eq!(back.history, history);
        assert_eq!(back.pointmap.delta(), 0.123f64.exp());
    }

    #[test]
    fn fingerprint_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint {
            pointmap: PointMapNet::new(cfg(), 1).unwrap(),
            regressor: None,
            history: Vec::new(),
        };
        ck.save(&path).unwrap();
        let other = NetConfig { fusion: Fusion::Average, ..cfg() };
        assert!(matches!(Checkpoint::load_for(&path, &other), Err(Error::FingerprintMismatch { .. })));
        assert!(Checkpoint::load(&path).unwrap().regressor.is_none());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint {
            pointmap: PointMapNet::new(cfg(), 1).unwrap(),
            regressor: None,
            history: Vec::new(),
        };
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[4] = 99;
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"nope").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
