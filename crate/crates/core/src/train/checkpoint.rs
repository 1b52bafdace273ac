//! Model checkpoints in the shared binary container: one record per tensor
//! (name, group, trainable flag, value, optimizer moments) and a trailer with
//! the model configuration.

use std::path::Path;

use crate::codec::{Container, Decoder, Encoder};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{GroundTruthOracle, ModelConfig, MotionTransformer, Predictor};
use crate::params::ParamGroup;
use crate::tensor::Tensor;

use super::optim::{AdamWConfig, OptimizerState};

const TAG: &[u8; 4] = b"CKPT";
const KIND_MODEL: u8 = 0;
const KIND_ORACLE: u8 = 1;

/// A trained model together with its optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MotionTransformer,
    pub optimizer: OptimizerState,
}

fn encode_tensor(e: &mut Encoder, t: &Tensor) {
    e.usizes(t.shape());
    e.f64s(t.data());
}

fn decode_tensor(d: &mut Decoder<'_>) -> Result<Tensor> {
    let shape = d.usizes()?;
    let data = d.f64s()?;
    Tensor::new(&shape, data).map_err(|e| Error::Format(format!("stored tensor: {e}")))
}

impl Checkpoint {
    pub fn new(model: MotionTransformer, cfg: AdamWConfig) -> Self {
        let optimizer = OptimizerState::new(&model.store, cfg);
        Self { model, optimizer }
    }

    pub fn encode(&self) -> Vec<u8> {
        let records = self
            .model
            .store
            .entries()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut e = Encoder::new();
                e.str(&p.name);
                e.u8(p.group.code());
                e.bool(p.trainable);
                encode_tensor(&mut e, &p.value);
                e.f64s(&self.optimizer.m[i]);
                e.f64s(&self.optimizer.v[i]);
                e.finish()
            })
            .collect();
        let mut t = Encoder::new();
        TAG.iter().for_each(|b| t.u8(*b));
        t.u8(KIND_MODEL);
        t.str(&self.model.cfg.to_key_values().to_text());
        t.u64(self.model.seed);
        t.bool(self.model.has_feature_reuse());
        encode_tensor(&mut t, &self.model.intentions);
        let o = &self.optimizer;
        t.u64(o.step);
        for v in [o.cfg.beta1, o.cfg.beta2, o.cfg.eps, o.cfg.weight_decay] {
            t.f64(v);
        }
        Container {
            records,
            trailer: t.finish(),
        }
        .encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        match decode_any(bytes)? {
            Loaded::Model(c) => Ok(*c),
            Loaded::Oracle(_) => Err(Error::Format("checkpoint holds an oracle fixture, not a model".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

enum Loaded {
    Model(Box<Checkpoint>),
    Oracle(GroundTruthOracle),
}

fn decode_any(bytes: &[u8]) -> Result<Loaded> {
    let c = Container::decode(bytes)?;
    let mut t = Decoder::new(&c.trailer);
    let tag = [t.u8()?, t.u8()?, t.u8()?, t.u8()?];
    if &tag != TAG {
        return Err(Error::Format("container does not hold a checkpoint".into()));
    }
    match t.u8()? {
        KIND_ORACLE => {
            let modes = t.usize()?;
            t.expect_end()?;
            Ok(Loaded::Oracle(GroundTruthOracle { modes }))
        }
        KIND_MODEL => {
            let cfg = ModelConfig::from_key_values(&KeyValues::parse(&t.str()?)?)?;
            let seed = t.u64()?;
            let has_fr = t.bool()?;
            let intentions = decode_tensor(&mut t)?;
            let step = t.u64()?;
            let opt_cfg = AdamWConfig {
                beta1: t.f64()?,
                beta2: t.f64()?,
                eps: t.f64()?,
                weight_decay: t.f64()?,
            };
            t.expect_end()?;

            let mut model = MotionTransformer::new(cfg, intentions, seed)?;
            if has_fr {
                model.add_feature_reuse_blocks()?;
            }
            if c.records.len() != model.store.len() {
                return Err(Error::Format(format!(
                    "checkpoint holds {} tensors, model expects {}",
                    c.records.len(),
                    model.store.len()
                )));
            }
            let mut m = Vec::with_capacity(c.records.len());
            let mut v = Vec::with_capacity(c.records.len());
            for (i, rec) in c.records.iter().enumerate() {
                let mut d = Decoder::new(rec);
                let name = d.str()?;
                let group = ParamGroup::from_code(d.u8()?)?;
                let trainable = d.bool()?;
                let value = decode_tensor(&mut d)?;
                let (mi, vi) = (d.f64s()?, d.f64s()?);
                d.expect_end()?;
                let entry = &mut model.store.entries_mut()[i];
                if entry.name != name || entry.group != group {
                    return Err(Error::Format(format!(
                        "tensor {i} is '{name}' ({group}), model expects '{}' ({})",
                        entry.name, entry.group
                    )));
                }
                if entry.value.shape() != value.shape() || mi.len() != value.numel() || vi.len() != value.numel() {
                    return Err(Error::Format(format!(
                        "tensor '{name}' has shape {:?}, model expects {:?}",
                        value.shape(),
                        entry.value.shape()
                    )));
                }
                entry.value = value;
                entry.trainable = trainable;
                m.push(mi);
                v.push(vi);
            }
            Ok(Loaded::Model(Box::new(Checkpoint {
                model,
                optimizer: OptimizerState {
                    cfg: opt_cfg,
                    step,
                    m,
                    v,
                },
            })))
        }
        k => Err(Error::Format(format!("unknown checkpoint kind {k}"))),
    }
}

/// Writes a fixture checkpoint whose predictor emits the ground truth as its top mode.
pub fn save_oracle_fixture(path: &Path, modes: usize) -> Result<()> {
    let mut t = Encoder::new();
    TAG.iter().for_each(|b| t.u8(*b));
    t.u8(KIND_ORACLE);
    t.usize(modes);
    Container {
        records: Vec::new(),
        trailer: t.finish(),
    }
    .write(path)
}

/// Any loadable predictor.
#[derive(Debug, Clone)]
pub enum LoadedPredictor {
    Model(Box<MotionTransformer>),
    Oracle(GroundTruthOracle),
}

impl LoadedPredictor {
    /// Model configuration, if the checkpoint holds a network.
    pub fn config(&self) -> Option<&ModelConfig> {
        match self {
            Self::Model(m) => Some(&m.cfg),
            Self::Oracle(_) => None,
        }
    }

    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            Self::Model(m) => m.as_ref(),
            Self::Oracle(o) => o,
        }
    }
}

/// Loads either a trained model or an oracle fixture.
pub fn load_predictor(path: &Path) -> Result<LoadedPredictor> {
    Ok(match decode_any(&std::fs::read(path)?)? {
        Loaded::Model(c) => LoadedPredictor::Model(Box::new(c.model)),
        Loaded::Oracle(o) => LoadedPredictor::Oracle(o),
    })
}
