//! Scene context encoder: polyline feature extraction, local self-attention
//! over agent and map tokens, and the dense future head that feeds coarse
//! agent futures back into the agent tokens.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{mhsa, AttentionSpec, FeedForward, LayerNorm, Mlp, MlpSpec, MultiHeadAttention};
use crate::params::{ParamGroup, ParameterStore};
use crate::scene::vectorize::{AGENT_CHANNELS, MAP_CHANNELS};
use crate::scene::PolylineBatch;
use crate::tensor::Tensor;

/// Fixed per-channel input scaling so raw meters and m/s enter at unit scale.
const AGENT_INPUT_SCALE: [f64; AGENT_CHANNELS] = [0.1, 0.1, 0.1, 0.2, 0.2, 1.0, 1.0, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0];
const MAP_INPUT_SCALE: [f64; MAP_CHANNELS] = [0.1, 0.1, 0.1, 1.0, 1.0, 1.0, 1.0, 1.0];
/// Dense future outputs are predicted in these units (meters at the final
/// step, m/s); displacement units shrink linearly towards the first step.
pub const DENSE_OUTPUT_SCALE: [f64; 4] = [30.0, 30.0, 5.0, 5.0];

fn dense_scale(step: usize, future: usize) -> [f64; 4] {
    let f = (step + 1) as f64 / future as f64;
    let [x, y, vx, vy] = DENSE_OUTPUT_SCALE;
    [x * f, y * f, vx, vy]
}

/// Encoded scene tokens living on one graph: agents first, then map segments.
#[derive(Debug, Clone)]
pub struct SceneTokens {
    pub features: Var,
    pub positions: Vec<[f64; 2]>,
    pub n_agents: usize,
}

impl SceneTokens {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_map(&self) -> usize {
        self.len() - self.n_agents
    }

    pub fn is_agent(&self, i: usize) -> bool {
        i < self.n_agents
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Indices of the `k` positions nearest to `query`, ties broken by index.
pub fn nearest(positions: &[[f64; 2]], query: [f64; 2], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..positions.len()).collect();
    idx.sort_by(|&a, &b| {
        dist2(positions[a], query)
            .partial_cmp(&dist2(positions[b], query))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Row-major `n × n` attention mask keeping each token's `k` nearest tokens (itself included).
pub fn knn_mask(positions: &[[f64; 2]], k: usize) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::Config("neighbor count must be positive".into()));
    }
    let n = positions.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in nearest(positions, positions[i], k) {
            mask[i * n + j] = true;
        }
    }
    Ok(mask)
}

/// One local self-attention layer: attention + residual + norm, then feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        spec: AttentionSpec,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::register(store, &format!("{prefix}.attn"), spec, group, rng)?,
            norm: LayerNorm::register(store, &format!("{prefix}.norm"), spec.dim, group)?,
            ffn: FeedForward::register(store, &format!("{prefix}.ffn"), spec.dim, 2 * spec.dim, group, rng)?,
        })
    }

    /// `pe` is the positional encoding of the token positions, `mask` the neighbor mask.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, pe: Var, mask: Option<&[bool]>) -> Result<Var> {
        let qk = g.add(x, pe)?;
        let a = mhsa(g, store, &self.attn, qk, qk, x, mask)?;
        let r = g.add(x, a)?;
        let h = self.norm.forward(g, store, r)?;
        self.ffn.forward(g, store, h)
    }
}

/// Pointwise MLP over every polyline point followed by a masked max-pool.
#[derive(Debug, Clone)]
pub struct PolylineEncoder {
    mlp: Mlp,
    scale: Vec<f64>,
}

impl PolylineEncoder {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        dim: usize,
        scale: Vec<f64>,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::register(store, prefix, MlpSpec::new(channels, &[dim, dim])?, group, rng)?,
            scale,
        })
    }

    /// `batch [N × P × C] → [N × D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, batch: &PolylineBatch) -> Result<Var> {
        let (n, p, c) = batch.data.dims3()?;
        if c != self.scale.len() {
            return Err(dim_err("encode_polylines", format!("{c} channels, expected {}", self.scale.len())));
        }
        let scaled: Vec<f64> = batch
            .data
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&self.scale).map(|(v, s)| v * s))
            .collect();
        let x = g.constant(Tensor::new(&[n * p, c], scaled)?)?;
        self.pool(g, store, x, n, p, &batch.mask)
    }

    /// Encodes `x [(N·P) × C]` (already on the graph) and pools over `P`.
    pub fn pool(&self, g: &mut Graph, store: &ParameterStore, x: Var, n: usize, p: usize, mask: &[bool]) -> Result<Var> {
        let h = self.mlp.forward(g, store, x)?;
        let d = self.mlp.spec().output();
        let h3 = g.reshape(h, &[n, p, d])?;
        g.max_pool(h3, mask)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub neighbors: usize,
    pub future: usize,
}

/// Encoder output: tokens after dense future fusion plus the dense prediction.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub tokens: SceneTokens,
    /// `N_a × (T·4)` in meters and m/s, displacement relative to each agent's position.
    pub dense: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    agent_poly: PolylineEncoder,
    map_poly: PolylineEncoder,
    layers: Vec<EncoderLayer>,
    dense: Mlp,
    future_poly: PolylineEncoder,
    fuse: Mlp,
}

impl Encoder {
    pub fn register<R: Rng>(store: &mut ParameterStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        let g = ParamGroup::Encoder;
        let d = cfg.dim;
        let spec = AttentionSpec::new(d, cfg.heads)?;
        if cfg.neighbors == 0 {
            return Err(Error::Config("neighbor count must be positive".into()));
        }
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::register(store, &format!("enc.layer{i}"), spec, g, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            agent_poly: PolylineEncoder::register(store, "enc.agent_poly", AGENT_CHANNELS, d, AGENT_INPUT_SCALE.to_vec(), g, rng)?,
            map_poly: PolylineEncoder::register(store, "enc.map_poly", MAP_CHANNELS, d, MAP_INPUT_SCALE.to_vec(), g, rng)?,
            layers,
            dense: Mlp::register(store, "enc.dense", MlpSpec::new(d, &[d, cfg.future * 4])?, g, rng)?,
            future_poly: PolylineEncoder::register(store, "enc.future_poly", 4, d, vec![0.1, 0.1, 0.2, 0.2], g, rng)?,
            fuse: Mlp::register(store, "enc.fuse", MlpSpec::new(2 * d, &[d, d])?, g, rng)?,
            cfg,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Polyline features for agents and map, concatenated into one token set.
    pub fn encode_polylines(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        agents: &PolylineBatch,
        map: &PolylineBatch,
        agent_pos: &[[f64; 2]],
        map_pos: &[[f64; 2]],
    ) -> Result<SceneTokens> {
        if agents.is_empty() {
            return Err(Error::Input("scene has no agents".into()));
        }
        if agent_pos.len() != agents.len() || map_pos.len() != map.len() {
            return Err(dim_err("encode_polylines", "token positions do not match polyline counts"));
        }
        let fa = self.agent_poly.forward(g, store, agents)?;
        let features = if map.is_empty() {
            fa
        } else {
            let fm = self.map_poly.forward(g, store, map)?;
            g.concat_rows(&[fa, fm])?
        };
        let mut positions = agent_pos.to_vec();
        positions.extend_from_slice(map_pos);
        Ok(SceneTokens {
            features,
            positions,
            n_agents: agents.len(),
        })
    }

    /// Runs `layers` with each token attending to its `k` nearest tokens.
    ///
    /// `k` larger than the token count keeps every token.
    pub fn local_self_attention(
        g: &mut Graph,
        store: &ParameterStore,
        layers: &[EncoderLayer],
        tokens: &SceneTokens,
        k: usize,
        dim: usize,
    ) -> Result<SceneTokens> {
        let mask = knn_mask(&tokens.positions, k)?;
        let pos = g.constant(Tensor::new(&[tokens.len(), 2], tokens.positions.iter().flatten().copied().collect())?)?;
        let pe = g.sinusoidal_pe(pos, dim)?;
        let mut x = tokens.features;
        for layer in layers {
            x = layer.forward(g, store, x, pe, Some(&mask))?;
        }
        Ok(SceneTokens {
            features: x,
            ..tokens.clone()
        })
    }

    /// Predicts coarse futures for every agent token and fuses them back in.
    pub fn dense_future_predict(&self, g: &mut Graph, store: &ParameterStore, tokens: &SceneTokens) -> Result<Encoded> {
        let na = tokens.n_agents;
        let t = self.cfg.future;
        let all: Vec<usize> = (0..na).collect();
        let fa = g.gather_rows(tokens.features, &all)?;
        let raw = self.dense.forward(g, store, fa)?;
        let scale: Vec<f64> = (0..na * t).flat_map(|i| dense_scale(i % t, t)).collect();
        let scale = g.constant(Tensor::new(&[na, t * 4], scale)?)?;
        let dense = g.mul(raw, scale)?;
        // re-featurize the predicted futures; polyline encoder scaling is applied on the graph
        let steps = g.reshape(dense, &[na * t, 4])?;
        let in_scale: Vec<f64> = (0..na * t).flat_map(|_| [0.1, 0.1, 0.2, 0.2]).collect();
        let in_scale = g.constant(Tensor::new(&[na * t, 4], in_scale)?)?;
        let steps = g.mul(steps, in_scale)?;
        let ff = self.future_poly.pool(g, store, steps, na, t, &vec![true; na * t])?;
        let cat = g.concat_cols(&[fa, ff])?;
        let fa_new = self.fuse.forward(g, store, cat)?;
        let features = if tokens.n_map() == 0 {
            fa_new
        } else {
            let map_rows: Vec<usize> = (na..tokens.len()).collect();
            let fm = g.gather_rows(tokens.features, &map_rows)?;
            g.concat_rows(&[fa_new, fm])?
        };
        Ok(Encoded {
            tokens: SceneTokens {
                features,
                ..tokens.clone()
            },
            dense,
        })
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    /// Full encoder: polylines, local attention stack, dense future fusion.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        agents: &PolylineBatch,
        map: &PolylineBatch,
        agent_pos: &[[f64; 2]],
        map_pos: &[[f64; 2]],
    ) -> Result<Encoded> {
        let tokens = self.encode_polylines(g, store, agents, map, agent_pos, map_pos)?;
        let tokens = Self::local_self_attention(g, store, &self.layers, &tokens, self.cfg.neighbors, self.cfg.dim)?;
        self.dense_future_predict(g, store, &tokens)
    }
}
