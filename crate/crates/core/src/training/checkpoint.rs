//! Versioned binary checkpoints.
//!
//! Layout: magic `SWFA`, `u32` format version, `u64` header length, a JSON
//! header (configuration echo, scalar state and a manifest of arrays), then
//! each array as `u32` name length, name, `u32` rank, `u64` dims and
//! little-endian `f64` data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsLog;
use super::optim::{Adam, Optimizer, OptimizerKind};
use super::{Model, TrainConfig};
use crate::autodiff::ParamStore;
use crate::banded_stack_wfa::WindowState;
use crate::controller::{Carry, Controller, ControllerConfig, ModelFamily, StackCarry};
use crate::error::{Error, Result};
use crate::stack_wfa::PdaSignature;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SWFA";

/// Position inside an interrupted corpus run.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusProgress {
    /// Epoch in progress (1-based).
    pub epoch: usize,
    /// Index of the next training chunk to run in that epoch.
    pub next_chunk: usize,
    pub learning_rate: f64,
    pub best_valid_ppl: f64,
    pub best_epoch: usize,
    pub stagnant: usize,
    pub epoch_nll: f64,
    pub epoch_tokens: usize,
    pub best_params: ParamStore<f64>,
    pub log: MetricsLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub controller: ControllerConfig,
    pub vocab: Vec<String>,
    pub eos: usize,
    pub params: ParamStore<f64>,
    pub optimizer: Option<Optimizer>,
    pub carry: Option<Carry<f64>>,
    pub progress: Option<CorpusProgress>,
    /// Path of the metrics log written alongside, if any.
    pub log_path: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
enum StackHeader {
    Null,
    Superpos {
        time: usize,
    },
    Window {
        signature: PdaSignature,
        band: usize,
        batch: usize,
        time: usize,
        columns: Vec<usize>,
        alphas: Vec<isize>,
    },
}

#[derive(Serialize, Deserialize)]
struct CarryHeader {
    steps: usize,
    has_reading: bool,
    stack: StackHeader,
}

/// Exact (bit-pattern) encoding for floats that may be infinite.
mod f64_bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(x.to_bits())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        u64::deserialize(d).map(f64::from_bits)
    }
}

#[derive(Serialize, Deserialize)]
struct ProgressHeader {
    epoch: usize,
    next_chunk: usize,
    #[serde(with = "f64_bits")]
    learning_rate: f64,
    #[serde(with = "f64_bits")]
    best_valid_ppl: f64,
    best_epoch: usize,
    stagnant: usize,
    #[serde(with = "f64_bits")]
    epoch_nll: f64,
    epoch_tokens: usize,
    log: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    family: ModelFamily,
    config: TrainConfig,
    controller: ControllerConfig,
    vocab: Vec<String>,
    eos: usize,
    optimizer: Option<OptimizerKind>,
    adam: Option<AdamHeader>,
    carry: Option<CarryHeader>,
    progress: Option<ProgressHeader>,
    log_path: Option<String>,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &TrainConfig, optimizer: Option<&Optimizer>) -> Self {
        Checkpoint {
            config: config.clone(),
            controller: *model.controller.config(),
            vocab: model.vocab.clone(),
            eos: model.eos,
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
            carry: None,
            progress: None,
            log_path: None,
        }
    }

    pub fn model(&self) -> Result<Model> {
        let controller = Controller::new(self.controller)?;
        controller.check_params(&self.params)?;
        Ok(Model {
            family: self.config.family,
            controller,
            params: self.params.clone(),
            vocab: self.vocab.clone(),
            eos: self.eos,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Vec<(String, Tensor<f64>)> = Vec::new();
        let put_store = |prefix: &str, s: &ParamStore<f64>, arrays: &mut Vec<(String, Tensor<f64>)>| {
            for (k, t) in s.iter() {
                arrays.push((format!("{prefix}/{k}"), t.clone()));
            }
        };
        put_store("param", &self.params, &mut arrays);
        let adam = match &self.optimizer {
            Some(Optimizer::Adam(a)) => {
                put_store("adam.m", &a.m, &mut arrays);
                put_store("adam.v", &a.v, &mut arrays);
                Some(AdamHeader {
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                    step: a.step,
                })
            }
            _ => None,
        };
        let carry = self.carry.as_ref().map(|c| {
            arrays.push(("carry/h".into(), c.h.clone()));
            arrays.push(("carry/c".into(), c.c.clone()));
            if let Some(r) = &c.reading {
                arrays.push(("carry/reading".into(), r.clone()));
            }
            let stack = match &c.stack {
                StackCarry::Null => StackHeader::Null,
                StackCarry::Superpos { cells, time } => {
                    arrays.push(("carry/superpos".into(), cells.clone()));
                    StackHeader::Superpos { time: *time }
                }
                StackCarry::Window(w) => {
                    for (t, col) in &w.columns {
                        arrays.push((format!("window/column/{t}"), Tensor::from_vec(col.clone())));
                    }
                    for (i, a) in &w.alphas {
                        arrays.push((format!("window/alpha/{i}"), Tensor::from_vec(a.clone())));
                    }
                    StackHeader::Window {
                        signature: w.signature,
                        band: w.band,
                        batch: w.batch,
                        time: w.time,
                        columns: w.columns.iter().map(|c| c.0).collect(),
                        alphas: w.alphas.iter().map(|a| a.0).collect(),
                    }
                }
            };
            CarryHeader {
                steps: c.steps,
                has_reading: c.reading.is_some(),
                stack,
            }
        });
        let progress = self.progress.as_ref().map(|p| {
            put_store("best", &p.best_params, &mut arrays);
            ProgressHeader {
                epoch: p.epoch,
                next_chunk: p.next_chunk,
                learning_rate: p.learning_rate,
                best_valid_ppl: p.best_valid_ppl,
                best_epoch: p.best_epoch,
                stagnant: p.stagnant,
                epoch_nll: p.epoch_nll,
                epoch_tokens: p.epoch_tokens,
                log: p.log.to_text(),
            }
        });
        let header = Header {
            family: self.config.family,
            config: self.config.clone(),
            controller: self.controller,
            vocab: self.vocab.clone(),
            eos: self.eos,
            optimizer: self.optimizer.as_ref().map(Optimizer::kind),
            adam,
            carry,
            progress,
            log_path: self.log_path.clone(),
            arrays: arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::data(format!("cannot encode header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for (name, t) in &arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::data("not a checkpoint (bad magic bytes)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::data(format!("corrupt checkpoint header: {e}")))?;
        let count = r.u64()? as usize;
        let mut arrays: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::data("checkpoint array name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            arrays.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::data("trailing bytes after checkpoint arrays"));
        }
        for e in &header.arrays {
            match arrays.get(&e.name) {
                Some(t) if t.shape() == e.shape.as_slice() => {}
                _ => {
                    return Err(Error::data(format!(
                        "checkpoint array `{}` missing or misshapen",
                        e.name
                    )))
                }
            }
        }
        if arrays.len() != header.arrays.len() {
            return Err(Error::data("checkpoint holds arrays not listed in its manifest"));
        }
        let store = |prefix: &str| -> ParamStore<f64> {
            let mut s = ParamStore::new();
            let p = format!("{prefix}/");
            for (k, t) in &arrays {
                if let Some(name) = k.strip_prefix(&p) {
                    s.insert(name, t.clone());
                }
            }
            s
        };
        let array = |name: &str| -> Result<Tensor<f64>> {
            arrays
                .get(name)
                .cloned()
                .ok_or_else(|| Error::data(format!("checkpoint is missing array `{name}`")))
        };
        let params = store("param");
        let optimizer = match (header.optimizer, header.adam) {
            (None, _) => None,
            (Some(OptimizerKind::Sgd), _) => Some(Optimizer::Sgd),
            (Some(OptimizerKind::Adam), Some(a)) => Some(Optimizer::Adam(Adam {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
                m: store("adam.m"),
                v: store("adam.v"),
            })),
            (Some(OptimizerKind::Adam), None) => return Err(Error::data("Adam checkpoint without optimizer state")),
        };
        let carry = match header.carry {
            None => None,
            Some(c) => {
                let stack = match c.stack {
                    StackHeader::Null => StackCarry::Null,
                    StackHeader::Superpos { time } => StackCarry::Superpos {
                        cells: array("carry/superpos")?,
                        time,
                    },
                    StackHeader::Window {
                        signature,
                        band,
                        batch,
                        time,
                        columns,
                        alphas,
                    } => {
                        let w = WindowState {
                            signature,
                            band,
                            batch,
                            time,
                            columns: columns
                                .iter()
                                .map(|&t| Ok((t, array(&format!("window/column/{t}"))?.into_data())))
                                .collect::<Result<_>>()?,
                            alphas: alphas
                                .iter()
                                .map(|&i| Ok((i, array(&format!("window/alpha/{i}"))?.into_data())))
                                .collect::<Result<_>>()?,
                        };
                        w.validate()?;
                        StackCarry::Window(w)
                    }
                };
                Some(Carry {
                    h: array("carry/h")?,
                    c: array("carry/c")?,
                    reading: if c.has_reading {
                        Some(array("carry/reading")?)
                    } else {
                        None
                    },
                    steps: c.steps,
                    stack,
                })
            }
        };
        let progress = match header.progress {
            None => None,
            Some(p) => Some(CorpusProgress {
                epoch: p.epoch,
                next_chunk: p.next_chunk,
                learning_rate: p.learning_rate,
                best_valid_ppl: p.best_valid_ppl,
                best_epoch: p.best_epoch,
                stagnant: p.stagnant,
                epoch_nll: p.epoch_nll,
                epoch_tokens: p.epoch_tokens,
                best_params: store("best"),
                log: MetricsLog::parse(&p.log)?,
            }),
        };
        let ck = Checkpoint {
            config: header.config,
            controller: header.controller,
            vocab: header.vocab,
            eos: header.eos,
            params,
            optimizer,
            carry,
            progress,
            log_path: header.log_path,
        };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
            other => other,
        })
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
            .ok_or_else(|| Error::data("checkpoint is truncated"))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
