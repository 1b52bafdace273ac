//! The motion transformer: encoder, motion query pair decoder and the
//! optional feature-reuse blocks appended for transfer experiments.

pub mod decoder;
pub mod encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::AttentionSpec;
use crate::params::{ParamGroup, ParameterStore};
use crate::scene::{SceneSample, VectorizeConfig};
use crate::tensor::Tensor;

pub use decoder::{
    dynamic_map_collect, fit_intentions, gmm_head, mixture_density, select_modes, Decoder, DecoderConfig, DecoderLayer,
    ModePrediction, PredictionSet,
};
pub use encoder::{knn_mask, Encoded, Encoder, EncoderConfig, EncoderLayer, SceneTokens};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Number of intention points and decoder queries.
    pub modes: usize,
    /// Modes kept after selection.
    pub output_modes: usize,
    pub nms_radius: f64,
    pub history: usize,
    pub future: usize,
    pub neighbors: usize,
    pub map_collect: usize,
    pub max_agents: usize,
    pub max_map: usize,
    pub map_points: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            modes: 6,
            output_modes: 6,
            nms_radius: 2.0,
            history: 11,
            future: 30,
            neighbors: 8,
            map_collect: 16,
            max_agents: 8,
            max_map: 24,
            map_points: 20,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 14] = [
        "dim",
        "heads",
        "encoder_layers",
        "decoder_layers",
        "modes",
        "output_modes",
        "nms_radius",
        "history",
        "future",
        "neighbors",
        "map_collect",
        "max_agents",
        "max_map",
        "map_points",
    ];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&Self::KEYS)?;
        let d = Self::default();
        let cfg = Self {
            dim: kv.get_or("dim", d.dim)?,
            heads: kv.get_or("heads", d.heads)?,
            encoder_layers: kv.get_or("encoder_layers", d.encoder_layers)?,
            decoder_layers: kv.get_or("decoder_layers", d.decoder_layers)?,
            modes: kv.get_or("modes", d.modes)?,
            output_modes: kv.get_or("output_modes", d.output_modes)?,
            nms_radius: kv.get_or("nms_radius", d.nms_radius)?,
            history: kv.get_or("history", d.history)?,
            future: kv.get_or("future", d.future)?,
            neighbors: kv.get_or("neighbors", d.neighbors)?,
            map_collect: kv.get_or("map_collect", d.map_collect)?,
            max_agents: kv.get_or("max_agents", d.max_agents)?,
            max_map: kv.get_or("max_map", d.max_map)?,
            map_points: kv.get_or("map_points", d.map_points)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("dim", self.dim);
        kv.set("heads", self.heads);
        kv.set("encoder_layers", self.encoder_layers);
        kv.set("decoder_layers", self.decoder_layers);
        kv.set("modes", self.modes);
        kv.set("output_modes", self.output_modes);
        kv.set("nms_radius", self.nms_radius);
        kv.set("history", self.history);
        kv.set("future", self.future);
        kv.set("neighbors", self.neighbors);
        kv.set("map_collect", self.map_collect);
        kv.set("max_agents", self.max_agents);
        kv.set("max_map", self.max_map);
        kv.set("map_points", self.map_points);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        AttentionSpec::new(self.dim, self.heads)?;
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!("dim {} must be a multiple of 4 for 2-D encodings", self.dim)));
        }
        if self.modes == 0 || self.output_modes == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("modes, output_modes and decoder_layers must be positive".into()));
        }
        if self.neighbors == 0 || self.map_collect == 0 {
            return Err(Error::Config("neighbors and map_collect must be positive".into()));
        }
        self.vectorize().validate()
    }

    pub fn vectorize(&self) -> VectorizeConfig {
        VectorizeConfig {
            history: self.history,
            future: self.future,
            map_points: self.map_points,
            max_agents: self.max_agents,
            max_map: self.max_map,
        }
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.encoder_layers,
            neighbors: self.neighbors,
            future: self.future,
        }
    }

    fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.decoder_layers,
            future: self.future,
            map_collect: self.map_collect,
        }
    }
}

/// Anything that turns a vectorized scene into a prediction set.
pub trait Predictor: Sync {
    fn predict(&self, sample: &SceneSample) -> Result<PredictionSet>;
}

/// Blocks appended for feature reuse, tagged `AuxiliaryNew`.
#[derive(Debug, Clone)]
pub struct FeatureReuse {
    pub encoder_layer: EncoderLayer,
    pub decoder_layer: DecoderLayer,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Raw head output per decoder layer, `K × (T·5 + 1)`; the last one is used for prediction.
    pub layers: Vec<Var>,
    /// Dense agent futures, `N_a × (T·4)`.
    pub dense: Var,
}

#[derive(Debug, Clone)]
pub struct MotionTransformer {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
    pub intentions: Tensor,
    pub seed: u64,
    encoder: Encoder,
    decoder: Decoder,
    fr: Option<FeatureReuse>,
}

impl MotionTransformer {
    /// Registers freshly initialized parameters; identical arguments give identical models.
    pub fn new(cfg: ModelConfig, intentions: Tensor, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if intentions.shape() != [cfg.modes, 2] {
            return Err(Error::Config(format!(
                "intentions {:?} do not match {} modes",
                intentions.shape(),
                cfg.modes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let encoder = Encoder::register(&mut store, cfg.encoder(), &mut rng)?;
        let decoder = Decoder::register(&mut store, &cfg.decoder(), &mut rng)?;
        Ok(Self {
            cfg,
            store,
            intentions,
            seed,
            encoder,
            decoder,
            fr: None,
        })
    }

    pub fn has_feature_reuse(&self) -> bool {
        self.fr.is_some()
    }

    /// Appends one local self-attention encoder layer and one full decoder
    /// layer (with its own head), all in the `AuxiliaryNew` group.
    pub fn add_feature_reuse_blocks(&mut self) -> Result<()> {
        if self.fr.is_some() {
            return Err(Error::State("feature-reuse blocks already added".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xF00D_F00D);
        let spec = AttentionSpec::new(self.cfg.dim, self.cfg.heads)?;
        let grp = ParamGroup::AuxiliaryNew;
        let encoder_layer = EncoderLayer::register(&mut self.store, "fr.enc", spec, grp, &mut rng)?;
        let decoder_layer = DecoderLayer::register(&mut self.store, "fr.dec", spec, self.cfg.future, grp, &mut rng)?;
        self.fr = Some(FeatureReuse {
            encoder_layer,
            decoder_layer,
        });
        Ok(())
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn encode(&self, g: &mut Graph, sample: &SceneSample) -> Result<Encoded> {
        let enc = self.encoder.forward(
            g,
            &self.store,
            &sample.agents,
            &sample.map,
            &sample.agent_pos,
            &sample.map_pos,
        )?;
        match &self.fr {
            None => Ok(enc),
            Some(fr) => {
                let tokens = Encoder::local_self_attention(
                    g,
                    &self.store,
                    std::slice::from_ref(&fr.encoder_layer),
                    &enc.tokens,
                    self.cfg.neighbors,
                    self.cfg.dim,
                )?;
                Ok(Encoded { tokens, ..enc })
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, sample: &SceneSample) -> Result<ForwardOutput> {
        if sample.horizon() != self.cfg.future {
            return Err(Error::Config(format!(
                "sample horizon {} differs from model horizon {}",
                sample.horizon(),
                self.cfg.future
            )));
        }
        let enc = self.encode(g, sample)?;
        let extra: Vec<&DecoderLayer> = self.fr.iter().map(|f| &f.decoder_layer).collect();
        let layers = self.decoder.forward(g, &self.store, &enc.tokens, &self.intentions, &extra)?;
        Ok(ForwardOutput {
            layers,
            dense: enc.dense,
        })
    }

    /// Mixture from the last decoder layer, before mode selection.
    pub fn predict_raw(&self, sample: &SceneSample) -> Result<PredictionSet> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, sample)?;
        let last = *out.layers.last().expect("at least one decoder layer");
        gmm_head(g.value(last), self.cfg.future)
    }
}

impl Predictor for MotionTransformer {
    fn predict(&self, sample: &SceneSample) -> Result<PredictionSet> {
        let raw = self.predict_raw(sample)?;
        Ok(select_modes(&raw, self.cfg.output_modes, self.cfg.nms_radius))
    }
}

/// Test fixture emitting the ground truth as its top mode.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruthOracle {
    pub modes: usize,
}

impl Predictor for GroundTruthOracle {
    fn predict(&self, sample: &SceneSample) -> Result<PredictionSet> {
        let t = sample.horizon();
        let gt: Vec<[f64; 2]> = (0..t).map(|s| [sample.gt.at2(s, 0), sample.gt.at2(s, 1)]).collect();
        let others = self.modes.saturating_sub(1).max(0);
        let mut modes = vec![ModePrediction {
            traj: gt.clone(),
            sigma: vec![[1.0, 1.0]; t],
            rho: vec![0.0; t],
            confidence: if others == 0 { 1.0 } else { 0.9 },
        }];
        for k in 0..others {
            // far-off decoys with low confidence
            let off = 100.0 * (k + 1) as f64;
            modes.push(ModePrediction {
                traj: gt.iter().map(|p| [p[0] + off, p[1] - off]).collect(),
                sigma: vec![[1.0, 1.0]; t],
                rho: vec![0.0; t],
                confidence: 0.1 / others as f64,
            });
        }
        Ok(PredictionSet { modes })
    }
}
