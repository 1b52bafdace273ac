//! Network building blocks on top of [`Graph`]: MLPs, multi-head attention
//! and layer normalization, each owning the ids of its registered tensors.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Layer widths of a ReLU MLP; the final layer is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input: usize,
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(input: usize, widths: &[usize]) -> Result<Self> {
        if input == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!(
                "mlp needs positive widths, got input {input} and {widths:?}"
            )));
        }
        Ok(Self {
            input,
            widths: widths.to_vec(),
        })
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        spec: MlpSpec,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut fan_in = spec.input;
        for (i, &w) in spec.widths.iter().enumerate() {
            let wid = store.register_linear_weight(&format!("{prefix}.l{i}.w"), fan_in, w, group, rng)?;
            let bid = store.register(&format!("{prefix}.l{i}.b"), Tensor::zeros(&[w]), group)?;
            layers.push((wid, bid));
            fan_in = w;
        }
        Ok(Self { spec, layers })
    }

    /// Wraps already registered tensors (checked against `spec`).
    pub fn from_ids(store: &ParameterStore, spec: MlpSpec, layers: Vec<(ParamId, ParamId)>) -> Result<Self> {
        let mut fan_in = spec.input;
        if layers.len() != spec.widths.len() {
            return Err(dim_err("mlp", "layer count differs from spec"));
        }
        for (&(w, b), &out) in layers.iter().zip(&spec.widths) {
            if store.value(w).shape() != [fan_in, out] || store.value(b).shape() != [out] {
                return Err(dim_err(
                    "mlp",
                    format!("'{}' does not match {fan_in}x{out}", store.entry(w).name),
                ));
            }
            fan_in = out;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// `x [N × input] → [N × output]`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let (_, c) = g.value(x).dims2()?;
        if c != self.spec.input {
            return Err(dim_err("mlp_forward", format!("input width {c}, expected {}", self.spec.input)));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, w)?;
            let bv = g.param(store, b)?;
            let z = g.matmul(h, wv)?;
            h = g.add_row(z, bv)?;
            if i != last {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Model width and head count of an attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionSpec {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if dim == 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self { dim, heads })
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn register<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.register_linear_weight(&format!("{name}.w"), fan_in, fan_out, group, rng)?,
            b: store.register(&format!("{name}.b"), Tensor::zeros(&[fan_out]), group)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let z = g.matmul(x, w)?;
        g.add_row(z, b)
    }
}

/// Multi-head attention with query/key/value/output projections.
///
/// The same block serves as self-attention (`q`, `k`, `v` from one token
/// set) and cross-attention (queries from a different set).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    spec: AttentionSpec,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHeadAttention {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        spec: AttentionSpec,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let d = spec.dim;
        Ok(Self {
            spec,
            q: Linear::register(store, &format!("{prefix}.q"), d, d, group, rng)?,
            k: Linear::register(store, &format!("{prefix}.k"), d, d, group, rng)?,
            v: Linear::register(store, &format!("{prefix}.v"), d, d, group, rng)?,
            o: Linear::register(store, &format!("{prefix}.o"), d, d, group, rng)?,
        })
    }

    pub fn spec(&self) -> AttentionSpec {
        self.spec
    }

    /// Returns the output and the raw attention node (for inspecting weights).
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        for x in [q, k, v] {
            let (_, c) = g.value(x).dims2()?;
            if c != self.spec.dim {
                return Err(dim_err("attention", format!("token width {c}, model width {}", self.spec.dim)));
            }
        }
        let qp = self.q.forward(g, store, q)?;
        let kp = self.k.forward(g, store, k)?;
        let vp = self.v.forward(g, store, v)?;
        let att = g.attention(qp, kp, vp, self.spec.heads, mask)?;
        Ok((self.o.forward(g, store, att)?, att))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, q, k, v, mask)?.0)
    }
}

/// Self-attention: queries, keys and values share a token count.
pub fn mhsa(
    g: &mut Graph,
    store: &ParameterStore,
    block: &MultiHeadAttention,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let nq = g.value(q).dims2()?.0;
    let nk = g.value(k).dims2()?.0;
    if nq != nk {
        return Err(dim_err("mhsa", format!("{nq} queries vs {nk} keys")));
    }
    block.forward(g, store, q, k, v, mask)
}

/// Cross-attention: queries come from a different token set than keys.
pub fn mhca(
    g: &mut Graph,
    store: &ParameterStore,
    block: &MultiHeadAttention,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    block.forward(g, store, q, k, v, mask)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParameterStore, prefix: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            gamma: store.register(&format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0), group)?,
            beta: store.register(&format!("{prefix}.beta"), Tensor::zeros(&[dim]), group)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let gm = g.param(store, self.gamma)?;
        let bt = g.param(store, self.beta)?;
        g.layer_norm(x, gm, bt)
    }
}

/// Position-wise feed-forward sublayer with residual and normalization.
#[derive(Debug, Clone)]
pub struct FeedForward {
    mlp: Mlp,
    norm: LayerNorm,
}

impl FeedForward {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::register(store, &format!("{prefix}.mlp"), MlpSpec::new(dim, &[hidden, dim])?, group, rng)?,
            norm: LayerNorm::register(store, &format!("{prefix}.norm"), dim, group)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.mlp.forward(g, store, x)?;
        let r = g.add(x, h)?;
        self.norm.forward(g, store, r)
    }
}
