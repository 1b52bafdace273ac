//! Motion query pair decoder: static intention queries, dynamic search
//! queries, agent and map cross-attention, and the Gaussian mixture head.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::Rng;
use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kmeans::kmeans;
use crate::model::encoder::{nearest, SceneTokens};
use crate::nn::{mhsa, AttentionSpec, LayerNorm, Mlp, MlpSpec, MultiHeadAttention};
use crate::params::{ParamGroup, ParameterStore};
use crate::tensor::Tensor;

/// Predicted means at the final step are emitted in units of this many meters.
pub const TRAJ_SCALE: f64 = 30.0;

/// Output unit of the mean at `step`, growing linearly with the horizon so a
/// constant raw value describes constant velocity.
pub fn traj_scale(step: usize, future: usize) -> f64 {
    TRAJ_SCALE * (step + 1) as f64 / future as f64
}
/// Gaussian parameters per future step: `mu_x, mu_y, log sigma_x, log sigma_y, atanh rho`.
pub const GAUSS_PARAMS: usize = 5;

/// k-means over focal endpoints; rows are the intention points.
pub fn fit_intentions(endpoints: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    let (m, _) = endpoints.dims2()?;
    if m < k {
        return Err(Error::Config(format!("{m} endpoints cannot seed {k} intention points")));
    }
    kmeans(endpoints, k, seed, 100)
}

/// For each query endpoint, the `m` nearest map tokens (ties by index).
pub fn dynamic_map_collect(endpoints: &[[f64; 2]], map_pos: &[[f64; 2]], m: usize) -> Vec<Vec<usize>> {
    endpoints.iter().map(|e| nearest(map_pos, *e, m)).collect()
}

/// Two-stream cross-attention: queries and keys concatenate a content and a
/// position projection; values carry content only.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    q_content: Mlp,
    q_pos: Mlp,
    k_content: Mlp,
    k_pos: Mlp,
    value: Mlp,
    out: Mlp,
    heads: usize,
}

impl CrossAttention {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        spec: AttentionSpec,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let d = spec.dim;
        let lin = |store: &mut ParameterStore, name: &str, rng: &mut R| {
            Mlp::register(store, &format!("{prefix}.{name}"), MlpSpec::new(d, &[d])?, group, rng)
        };
        Ok(Self {
            q_content: lin(store, "q_content", rng)?,
            q_pos: lin(store, "q_pos", rng)?,
            k_content: lin(store, "k_content", rng)?,
            k_pos: lin(store, "k_pos", rng)?,
            value: lin(store, "value", rng)?,
            out: lin(store, "out", rng)?,
            heads: spec.heads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        content: Var,
        search: Var,
        keys: Var,
        key_pe: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let qc = self.q_content.forward(g, store, content)?;
        let qs = self.q_pos.forward(g, store, search)?;
        let q = g.concat_cols(&[qc, qs])?;
        let kc = self.k_content.forward(g, store, keys)?;
        let kp = self.k_pos.forward(g, store, key_pe)?;
        let k = g.concat_cols(&[kc, kp])?;
        let v = self.value.forward(g, store, keys)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.out.forward(g, store, a)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    sa: MultiHeadAttention,
    sa_norm: LayerNorm,
    agent_ca: CrossAttention,
    agent_norm: LayerNorm,
    map_ca: CrossAttention,
    map_norm: LayerNorm,
    fuse: Mlp,
    head: Mlp,
    score: Mlp,
}

impl DecoderLayer {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        spec: AttentionSpec,
        future: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let d = spec.dim;
        Ok(Self {
            sa: MultiHeadAttention::register(store, &format!("{prefix}.sa"), spec, group, rng)?,
            sa_norm: LayerNorm::register(store, &format!("{prefix}.sa_norm"), d, group)?,
            agent_ca: CrossAttention::register(store, &format!("{prefix}.agent_ca"), spec, group, rng)?,
            agent_norm: LayerNorm::register(store, &format!("{prefix}.agent_norm"), d, group)?,
            map_ca: CrossAttention::register(store, &format!("{prefix}.map_ca"), spec, group, rng)?,
            map_norm: LayerNorm::register(store, &format!("{prefix}.map_norm"), d, group)?,
            fuse: Mlp::register(store, &format!("{prefix}.fuse"), MlpSpec::new(2 * d, &[d, d])?, group, rng)?,
            head: Mlp::register(
                store,
                &format!("{prefix}.head"),
                MlpSpec::new(d, &[d, future * GAUSS_PARAMS])?,
                group,
                rng,
            )?,
            score: Mlp::register(store, &format!("{prefix}.score"), MlpSpec::new(d, &[d, 1])?, group, rng)?,
        })
    }

    /// Prediction head on the updated content: `[K × (T·5 + 1)]`, Gaussian
    /// parameters from the regression branch and the mode logit last.
    pub fn head(&self, g: &mut Graph, store: &ParameterStore, content: Var) -> Result<Var> {
        let reg = self.head.forward(g, store, content)?;
        let logit = self.score.forward(g, store, content)?;
        g.concat_cols(&[reg, logit])
    }
}

/// Graph inputs shared by every decoder layer of one forward pass.
#[derive(Debug, Clone)]
pub struct DecoderContext {
    pub static_query: Var,
    pub agent_keys: Var,
    pub agent_pe: Var,
    pub map_keys: Option<Var>,
    pub map_pe: Option<Var>,
    pub map_pos: Vec<[f64; 2]>,
}

/// State carried between decoder layers.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layer: usize,
    pub content: Var,
    /// Endpoints of the latest predicted trajectories, `K × 2` on the graph.
    pub endpoints: Var,
    /// Raw head outputs of every layer run so far.
    pub outputs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    static_q: Mlp,
    dynamic_q: Mlp,
    layers: Vec<DecoderLayer>,
    dim: usize,
    heads: usize,
    future: usize,
    map_collect: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub future: usize,
    pub map_collect: usize,
}

impl Decoder {
    pub fn register<R: Rng>(store: &mut ParameterStore, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let grp = ParamGroup::Decoder;
        let d = cfg.dim;
        let spec = AttentionSpec::new(d, cfg.heads)?;
        if cfg.map_collect == 0 {
            return Err(Error::Config("map collection count must be positive".into()));
        }
        Ok(Self {
            static_q: Mlp::register(store, "dec.static_q", MlpSpec::new(d, &[d, d])?, grp, rng)?,
            dynamic_q: Mlp::register(store, "dec.dynamic_q", MlpSpec::new(d, &[d, d])?, grp, rng)?,
            layers: (0..cfg.layers)
                .map(|j| DecoderLayer::register(store, &format!("dec.layer{j}"), spec, cfg.future, grp, rng))
                .collect::<Result<Vec<_>>>()?,
            dim: d,
            heads: cfg.heads,
            future: cfg.future,
            map_collect: cfg.map_collect,
        })
    }

    pub fn layers(&self) -> &[DecoderLayer] {
        &self.layers
    }

    pub fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            dim: self.dim,
            heads: self.heads,
        }
    }

    /// `Q_I = MLP(PE(I))`.
    pub fn static_intention_query(&self, g: &mut Graph, store: &ParameterStore, intentions: Var) -> Result<Var> {
        let pe = g.sinusoidal_pe(intentions, self.dim)?;
        self.static_q.forward(g, store, pe)
    }

    /// `Q_S = MLP'(PE(Y_T))` with parameters separate from the static query.
    pub fn dynamic_search_query(&self, g: &mut Graph, store: &ParameterStore, endpoints: Var) -> Result<Var> {
        let pe = g.sinusoidal_pe(endpoints, self.dim)?;
        self.dynamic_q.forward(g, store, pe)
    }

    /// Sets up the per-pass context and the initial state (`C^0 = 0`, `Y_T^0 = I`).
    pub fn begin(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        tokens: &SceneTokens,
        intentions: &Tensor,
    ) -> Result<(DecoderContext, DecoderState)> {
        let (k, c) = intentions.dims2()?;
        if c != 2 || k == 0 {
            return Err(dim_err("decoder", format!("intentions {:?}", intentions.shape())));
        }
        let i_var = g.constant(intentions.clone())?;
        let static_query = self.static_intention_query(g, store, i_var)?;
        let na = tokens.n_agents;
        let agent_rows: Vec<usize> = (0..na).collect();
        let agent_keys = g.gather_rows(tokens.features, &agent_rows)?;
        let pos_tensor = |p: &[[f64; 2]]| Tensor::new(&[p.len(), 2], p.iter().flatten().copied().collect());
        let ap = g.constant(pos_tensor(&tokens.positions[..na])?)?;
        let agent_pe = g.sinusoidal_pe(ap, self.dim)?;
        let (map_keys, map_pe) = if tokens.n_map() > 0 {
            let rows: Vec<usize> = (na..tokens.len()).collect();
            let mk = g.gather_rows(tokens.features, &rows)?;
            let mp = g.constant(pos_tensor(&tokens.positions[na..])?)?;
            (Some(mk), Some(g.sinusoidal_pe(mp, self.dim)?))
        } else {
            (None, None)
        };
        let content = g.constant(Tensor::zeros(&[k, self.dim]))?;
        Ok((
            DecoderContext {
                static_query,
                agent_keys,
                agent_pe,
                map_keys,
                map_pe,
                map_pos: tokens.positions[na..].to_vec(),
            },
            DecoderState {
                layer: 0,
                content,
                endpoints: i_var,
                outputs: Vec::new(),
            },
        ))
    }

    /// One decoder layer: self-attention, agent and map cross-attention, fusion, head.
    pub fn layer_forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        layer: &DecoderLayer,
        ctx: &DecoderContext,
        state: DecoderState,
    ) -> Result<DecoderState> {
        let search = self.dynamic_search_query(g, store, state.endpoints)?;
        let x = g.add(state.content, ctx.static_query)?;
        let sa = mhsa(g, store, &layer.sa, x, x, state.content, None)?;
        let r = g.add(state.content, sa)?;
        let c_qc = layer.sa_norm.forward(g, store, r)?;

        let ca = layer.agent_ca.forward(g, store, c_qc, search, ctx.agent_keys, ctx.agent_pe, None)?;
        let r = g.add(c_qc, ca)?;
        let c_a = layer.agent_norm.forward(g, store, r)?;

        let c_m = match (ctx.map_keys, ctx.map_pe) {
            (Some(mk), Some(mp)) => {
                let ends = g.value(state.endpoints);
                let ends: Vec<[f64; 2]> = ends.data().chunks(2).map(|c| [c[0], c[1]]).collect();
                let nm = ctx.map_pos.len();
                let mut mask = vec![false; ends.len() * nm];
                for (q, sel) in dynamic_map_collect(&ends, &ctx.map_pos, self.map_collect).iter().enumerate() {
                    for &j in sel {
                        mask[q * nm + j] = true;
                    }
                }
                let cm = layer.map_ca.forward(g, store, c_qc, search, mk, mp, Some(&mask))?;
                let r = g.add(c_qc, cm)?;
                layer.map_norm.forward(g, store, r)?
            }
            _ => c_qc,
        };
        let cat = g.concat_cols(&[c_a, c_m])?;
        let content = layer.fuse.forward(g, store, cat)?;
        let out = layer.head(g, store, content)?;
        let t = self.future;
        let end_raw = g.slice_cols(out, (t - 1) * GAUSS_PARAMS, (t - 1) * GAUSS_PARAMS + 2)?;
        let endpoints = g.scale(end_raw, TRAJ_SCALE)?;
        let mut outputs = state.outputs;
        outputs.push(out);
        Ok(DecoderState {
            layer: state.layer + 1,
            content,
            endpoints,
            outputs,
        })
    }

    /// Runs the configured layers followed by any `extra` layers.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        tokens: &SceneTokens,
        intentions: &Tensor,
        extra: &[&DecoderLayer],
    ) -> Result<Vec<Var>> {
        let (ctx, mut state) = self.begin(g, store, tokens, intentions)?;
        for layer in self.layers.iter().chain(extra.iter().copied()) {
            state = self.layer_forward(g, store, layer, &ctx, state)?;
        }
        Ok(state.outputs)
    }
}

/// Per-mode Gaussian parameters for one step, scaled to meters on the graph: `[T × 5]`.
pub fn mode_gaussians(g: &mut Graph, out: Var, mode: usize, future: usize) -> Result<Var> {
    let row = g.gather_rows(out, &[mode])?;
    let params = g.slice_cols(row, 0, future * GAUSS_PARAMS)?;
    let params = g.reshape(params, &[future, GAUSS_PARAMS])?;
    let scale: Vec<f64> = (0..future)
        .flat_map(|s| {
            let u = traj_scale(s, future);
            [u, u, 1.0, 1.0, 1.0]
        })
        .collect();
    let scale = g.constant(Tensor::new(&[future, GAUSS_PARAMS], scale)?)?;
    g.mul(params, scale)
}

/// Mode logits as a `1 × K` row.
pub fn mode_logits(g: &mut Graph, out: Var, future: usize) -> Result<Var> {
    let (k, c) = g.value(out).dims2()?;
    let col = g.slice_cols(out, future * GAUSS_PARAMS, c)?;
    g.reshape(col, &[1, k])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModePrediction {
    /// Gaussian centers per step, meters.
    pub traj: Vec<[f64; 2]>,
    pub sigma: Vec<[f64; 2]>,
    pub rho: Vec<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSet {
    pub modes: Vec<ModePrediction>,
}

impl PredictionSet {
    pub fn horizon(&self) -> usize {
        self.modes.first().map_or(0, |m| m.traj.len())
    }

    /// Checks the simplex and link-function invariants.
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.modes.iter().map(|m| m.confidence).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("confidences sum to {total}")));
        }
        for (k, m) in self.modes.iter().enumerate() {
            if m.sigma.iter().flatten().any(|s| !(*s > 0.0)) {
                return Err(Error::Contract(format!("mode {k}: non-positive sigma")));
            }
            if m.rho.iter().any(|r| !(r.abs() < 1.0)) {
                return Err(Error::Contract(format!("mode {k}: correlation outside (-1, 1)")));
            }
        }
        Ok(())
    }
}

/// Converts raw head output `[K × (T·5 + 1)]` into constrained mixture parameters.
pub fn gmm_head(out: &Tensor, future: usize) -> Result<PredictionSet> {
    let (k, c) = out.dims2()?;
    if c != future * GAUSS_PARAMS + 1 {
        return Err(dim_err("gmm_head", format!("{c} columns for horizon {future}")));
    }
    for (i, v) in out.data().iter().enumerate() {
        if !v.is_finite() {
            let (mode, col) = (i / c, i % c);
            let what = if col == c - 1 {
                "logit".to_string()
            } else {
                format!("step {} param {}", col / GAUSS_PARAMS, col % GAUSS_PARAMS)
            };
            return Err(Error::Numeric {
                op: "gmm_head",
                detail: format!("mode {mode} {what} is {v}"),
            });
        }
    }
    let logits: Vec<f64> = (0..k).map(|m| out.at2(m, c - 1)).collect();
    let conf = softmax(&logits);
    let modes = (0..k)
        .map(|m| {
            let row = out.row(m);
            let step = |s: usize| &row[s * GAUSS_PARAMS..(s + 1) * GAUSS_PARAMS];
            ModePrediction {
                traj: (0..future)
                    .map(|s| [step(s)[0] * traj_scale(s, future), step(s)[1] * traj_scale(s, future)])
                    .collect(),
                sigma: (0..future).map(|s| [step(s)[2].exp(), step(s)[3].exp()]).collect(),
                rho: (0..future).map(|s| step(s)[4].tanh()).collect(),
                confidence: conf[m],
            }
        })
        .collect();
    Ok(PredictionSet { modes })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Standard bivariate normal density of offset `(dx, dy)`.
pub fn bivariate_density(dx: f64, dy: f64, sx: f64, sy: f64, rho: f64) -> f64 {
    let one = 1.0 - rho * rho;
    let (u, v) = (dx / sx, dy / sy);
    let z = u * u + v * v - 2.0 * rho * u * v;
    (-z / (2.0 * one)).exp() / (2.0 * PI * sx * sy * one.sqrt())
}

/// `P_h(o) = sum_k p_k N_k(o)` at step `h` (0-based).
pub fn mixture_density(pred: &PredictionSet, h: usize, o: [f64; 2]) -> Result<f64> {
    if h >= pred.horizon() {
        return Err(Error::Input(format!("step {h} beyond horizon {}", pred.horizon())));
    }
    let mut total = 0.0;
    for (k, m) in pred.modes.iter().enumerate() {
        let [sx, sy] = m.sigma[h];
        if !(sx > 0.0 && sy > 0.0) {
            return Err(Error::Contract(format!("mode {k}: sigma must be positive")));
        }
        total += m.confidence * bivariate_density(o[0] - m.traj[h][0], o[1] - m.traj[h][1], sx, sy, m.rho[h]);
    }
    Ok(total)
}

/// Greedy endpoint NMS down to `target` modes, refilling from suppressed
/// candidates when too few survive; confidences are renormalized.
pub fn select_modes(pred: &PredictionSet, target: usize, radius: f64) -> PredictionSet {
    let k = pred.modes.len();
    let renorm = |modes: Vec<ModePrediction>| {
        let total: f64 = modes.iter().map(|m| m.confidence).sum();
        PredictionSet {
            modes: modes
                .into_iter()
                .map(|m| ModePrediction {
                    confidence: m.confidence / total,
                    ..m
                })
                .collect(),
        }
    };
    if k <= target {
        return renorm(pred.modes.clone());
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        pred.modes[b]
            .confidence
            .partial_cmp(&pred.modes[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let end = |i: usize| *pred.modes[i].traj.last().expect("non-empty trajectory");
    let mut chosen: Vec<usize> = Vec::with_capacity(target);
    let mut suppressed = Vec::new();
    for &i in &order {
        if chosen.len() == target {
            break;
        }
        let e = end(i);
        let close = chosen.iter().any(|&j| {
            let f = end(j);
            (e[0] - f[0]).hypot(e[1] - f[1]) < radius
        });
        if close {
            suppressed.push(i);
        } else {
            chosen.push(i);
        }
    }
    for &i in &suppressed {
        if chosen.len() == target {
            break;
        }
        chosen.push(i);
    }
    renorm(chosen.into_iter().map(|i| pred.modes[i].clone()).collect())
}
