//! The seven experiment procedures of the transfer study.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{evaluate, MatchThresholds, MetricsReport};
use crate::model::{fit_intentions, ModelConfig, MotionTransformer};
use crate::params::{ParamGroup, ParameterStore};
use crate::scene::{to_ego_frame, vectorize, Dataset, SceneSample, SplitName, VectorizeConfig};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::loss::training_loss;
use super::optim::{adamw_step, lr_at, AdamWConfig, LrSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Method {
    /// Target baseline.
    TB,
    /// Source baseline.
    SB,
    /// Multi-task learning on the union of both datasets.
    MTL,
    /// Fine-tune everything.
    FT,
    /// Fine-tune the decoder only.
    FTD,
    /// Fine-tune the encoder only.
    FTE,
    /// Feature reuse: frozen model plus new trainable blocks.
    FR,
}

impl Method {
    /// Row order of the study table.
    pub const ALL: [Method; 7] = [
        Method::TB,
        Method::SB,
        Method::MTL,
        Method::FT,
        Method::FTD,
        Method::FTE,
        Method::FR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TB => "TB",
            Self::SB => "SB",
            Self::MTL => "MTL",
            Self::FT => "FT",
            Self::FTD => "FTD",
            Self::FTE => "FTE",
            Self::FR => "FR",
        }
    }

    /// Methods that start from the source-baseline checkpoint.
    pub fn needs_source_checkpoint(self) -> bool {
        matches!(self, Self::FT | Self::FTD | Self::FTE | Self::FR)
    }

    /// Groups left trainable; `None` means every tensor.
    pub fn trainable_groups(self) -> Option<&'static [ParamGroup]> {
        match self {
            Self::TB | Self::SB | Self::MTL | Self::FT => None,
            Self::FTE => Some(&[ParamGroup::Encoder]),
            Self::FTD => Some(&[ParamGroup::Decoder]),
            Self::FR => Some(&[ParamGroup::AuxiliaryNew]),
        }
    }

    fn salt(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown method '{s}', expected one of TB, SB, MTL, FT, FTD, FTE, FR")))
    }
}

/// Sets trainability for `method`.
pub fn build_freeze_mask(model: &mut MotionTransformer, method: Method) -> Result<()> {
    match method.trainable_groups() {
        None => model.store.set_all_trainable(true),
        Some(groups) => {
            if method == Method::FR && !model.has_feature_reuse() {
                return Err(Error::State("feature reuse needs its blocks added before freezing".into()));
            }
            model.store.set_trainable_groups(groups);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Origin {
    Source,
    Target,
}

/// Endless stream of `(origin, index within that split)`, drawing the source
/// with probability `n_source / (n_source + n_target)`.
#[derive(Debug, Clone)]
pub struct MtlSampler {
    n_source: usize,
    n_target: usize,
    rng: ChaCha8Rng,
}

pub fn mtl_batch_sampler(n_source: usize, n_target: usize, seed: u64) -> Result<MtlSampler> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::Config(format!(
            "multi-task sampling needs both splits non-empty (source {n_source}, target {n_target})"
        )));
    }
    Ok(MtlSampler {
        n_source,
        n_target,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl Iterator for MtlSampler {
    type Item = (Origin, usize);

    fn next(&mut self) -> Option<Self::Item> {
        let total = self.n_source + self.n_target;
        if self.rng.gen_range(0..total) < self.n_source {
            Some((Origin::Source, self.rng.gen_range(0..self.n_source)))
        } else {
            Some((Origin::Target, self.rng.gen_range(0..self.n_target)))
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate of the staircase schedule.
    pub lr: f64,
    pub optimizer: AdamWConfig,
    /// Initial learning rate of the target stage of two-stage methods.
    pub finetune_lr: f64,
    /// Scenarios whose gradients are averaged per update.
    pub batch: usize,
    /// Global gradient-norm cap applied before each update; 0 disables it.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 2e-3,
            finetune_lr: 2e-3,
            optimizer: AdamWConfig::default(),
            batch: 1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = ["epochs", "lr", "finetune_lr", "weight_decay", "beta1", "beta2", "eps", "batch", "grad_clip", "seed"];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&Self::KEYS)?;
        let d = Self::default();
        let cfg = Self {
            epochs: kv.get_or("epochs", d.epochs)?,
            lr: kv.get_or("lr", d.lr)?,
            finetune_lr: kv.get_or("finetune_lr", d.finetune_lr)?,
            optimizer: AdamWConfig {
                beta1: kv.get_or("beta1", d.optimizer.beta1)?,
                beta2: kv.get_or("beta2", d.optimizer.beta2)?,
                eps: kv.get_or("eps", d.optimizer.eps)?,
                weight_decay: kv.get_or("weight_decay", d.optimizer.weight_decay)?,
            },
            batch: kv.get_or("batch", d.batch)?,
            grad_clip: kv.get_or("grad_clip", d.grad_clip)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip {} must be a finite non-negative number", self.grad_clip)));
        }
        LrSchedule::new(self.lr, self.epochs as f64)?;
        LrSchedule::new(self.finetune_lr, self.epochs as f64)?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub method: Method,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Vectorized train and test splits of both datasets.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub source_train: Vec<SceneSample>,
    pub source_test: Vec<SceneSample>,
    pub target_train: Vec<SceneSample>,
    pub target_test: Vec<SceneSample>,
}

fn prepare_split(ds: &Dataset, split: SplitName, cfg: &VectorizeConfig) -> Result<Vec<SceneSample>> {
    ds.split(split)
        .par_iter()
        .map(|s| vectorize(&to_ego_frame(s)?, cfg))
        .collect()
}

impl PreparedData {
    pub fn new(source: &Dataset, target: &Dataset, model: &ModelConfig) -> Result<Self> {
        let cfg = model.vectorize();
        Ok(Self {
            source_train: prepare_split(source, SplitName::Train, &cfg)?,
            source_test: prepare_split(source, SplitName::Test, &cfg)?,
            target_train: prepare_split(target, SplitName::Train, &cfg)?,
            target_test: prepare_split(target, SplitName::Test, &cfg)?,
        })
    }
}

/// Timing and loss trace of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageLog {
    pub method: Method,
    /// `source`, `target` or `joint`.
    pub stage: &'static str,
    /// Optimizer updates.
    pub steps: usize,
    pub seconds: f64,
    /// Graph nodes' element count summed over all steps; a machine-independent cost measure.
    pub work: u64,
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub method: Method,
    pub checkpoint: Checkpoint,
    pub source_report: MetricsReport,
    pub target_report: MetricsReport,
    pub stages: Vec<StageLog>,
}

impl ExperimentResult {
    pub fn stage(&self, name: &str) -> Option<&StageLog> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

fn endpoints(samples: &[&SceneSample]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.endpoint().to_vec()).collect();
    if rows.is_empty() {
        return Err(Error::Config("cannot fit intention points on an empty training split".into()));
    }
    Tensor::from_rows(&rows)
}

/// One forward/backward/update per scenario in `order`, per epoch.
fn train_stage(
    ckpt: &mut Checkpoint,
    method: Method,
    stage: &'static str,
    pool: &[&SceneSample],
    train: &TrainConfig,
    initial_lr: f64,
    mut order: impl FnMut(usize) -> Vec<usize>,
) -> Result<StageLog> {
    let schedule = LrSchedule::new(initial_lr, train.epochs as f64)?;
    let start = Instant::now();
    let mut log = StageLog {
        method,
        stage,
        steps: 0,
        seconds: 0.0,
        work: 0,
        epoch_loss: Vec::with_capacity(train.epochs),
    };
    for epoch in 0..train.epochs {
        let idx = order(epoch);
        if idx.is_empty() {
            return Err(Error::Config(format!("{method} {stage} stage has no training scenarios")));
        }
        let mut sum = 0.0;
        for (c, chunk) in idx.chunks(train.batch).enumerate() {
            let lr = lr_at(&schedule, epoch as f64 + (c * train.batch) as f64 / idx.len() as f64)?;
            let model = &mut ckpt.model;
            for &j in chunk {
                let sample = pool[j];
                let mut g = Graph::new();
                let out = model.forward(&mut g, sample)?;
                let (loss, bd) = training_loss(&mut g, &out, sample, &model.intentions)?;
                let grads = g.backward(loss)?;
                g.accumulate_param_grads(&grads, &mut model.store)?;
                log.work += g.work();
                sum += bd.total;
            }
            if chunk.len() > 1 {
                scale_grads(&mut model.store, 1.0 / chunk.len() as f64);
            }
            if train.grad_clip > 0.0 {
                clip_grad_norm(&mut model.store, train.grad_clip);
            }
            adamw_step(&mut model.store, &mut ckpt.optimizer, lr)?;
            log.steps += 1;
        }
        let mean = sum / idx.len() as f64;
        log::debug!("{method} {stage} epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

fn scale_grads(store: &mut ParameterStore, f: f64) {
    for e in store.entries_mut() {
        if let Some(g) = &mut e.grad {
            g.iter_mut().for_each(|x| *x *= f);
        }
    }
}

/// Rescales all accumulated gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store
        .entries()
        .iter()
        .filter_map(|e| e.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        scale_grads(store, max_norm / norm);
    }
    norm
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Runs one method end to end. Two-stage methods need `source_checkpoint`
/// (the SB result); their logs hold only the target stage.
pub fn run_experiment(
    spec: &ExperimentSpec,
    data: &PreparedData,
    source_checkpoint: Option<&Checkpoint>,
) -> Result<ExperimentResult> {
    spec.model.validate()?;
    spec.train.validate()?;
    let method = spec.method;
    let train = &spec.train;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ method.salt().wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let source: Vec<&SceneSample> = data.source_train.iter().collect();
    let target: Vec<&SceneSample> = data.target_train.iter().collect();

    let fresh = |pool: &[&SceneSample]| -> Result<Checkpoint> {
        let intentions = fit_intentions(&endpoints(pool)?, spec.model.modes, train.seed)?;
        let model = MotionTransformer::new(spec.model.clone(), intentions, train.seed)?;
        Ok(Checkpoint::new(model, train.optimizer))
    };

    let (ckpt, stages) = match method {
        Method::SB | Method::TB => {
            let (pool, stage) = if method == Method::SB {
                (&source, "source")
            } else {
                (&target, "target")
            };
            let mut ckpt = fresh(pool)?;
            let n = pool.len();
            let log = train_stage(&mut ckpt, method, stage, pool, train, train.lr, |_| shuffled(n, &mut rng))?;
            (ckpt, vec![log])
        }
        Method::MTL => {
            let pool: Vec<&SceneSample> = source.iter().chain(&target).copied().collect();
            let mut ckpt = fresh(&pool)?;
            let (ns, nt) = (source.len(), target.len());
            let mut sampler = mtl_batch_sampler(ns, nt, rng.gen())?;
            let log = train_stage(&mut ckpt, method, "joint", &pool, train, train.lr, |_| {
                (&mut sampler)
                    .take(ns + nt)
                    .map(|(o, i)| if o == Origin::Source { i } else { ns + i })
                    .collect()
            })?;
            (ckpt, vec![log])
        }
        Method::FT | Method::FTD | Method::FTE | Method::FR => {
            let base = source_checkpoint.ok_or_else(|| {
                Error::Config(format!("{method} requires a source-baseline checkpoint (--source-checkpoint)"))
            })?;
            if base.model.cfg != spec.model {
                return Err(Error::Config(format!(
                    "source checkpoint model config {:?} differs from the requested {:?}",
                    base.model.cfg, spec.model
                )));
            }
            if base.model.has_feature_reuse() {
                return Err(Error::Config("source checkpoint already carries feature-reuse blocks".into()));
            }
            let mut model = base.model.clone();
            if method == Method::FR {
                model.add_feature_reuse_blocks()?;
            }
            build_freeze_mask(&mut model, method)?;
            // fresh moments so frozen tensors keep zero optimizer state
            let mut ckpt = Checkpoint::new(model, train.optimizer);
            let n = target.len();
            let log = train_stage(&mut ckpt, method, "target", &target, train, train.finetune_lr, |_| shuffled(n, &mut rng))?;
            (ckpt, vec![log])
        }
    };

    let th = MatchThresholds::default();
    let source_report = evaluate(&ckpt.model, &data.source_test, &th)?;
    let target_report = evaluate(&ckpt.model, &data.target_test, &th)?;
    Ok(ExperimentResult {
        method,
        checkpoint: ckpt,
        source_report,
        target_report,
        stages,
    })
}
