//! Pre-norm residual blocks for the Transformer and MLP-Mixer backbones.
//!
//! Parameters live in a [`ParamStore`]; each block only remembers the ids of
//! its tensors. A forward pass first binds every parameter once with
//! [`Bound::new`], so a tensor used at several sites gets a single tape leaf
//! and its gradient is summed automatically.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Tape leaves for every parameter of a store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new<'p>(tape: &mut Tape<'p>, store: &'p ParamStore) -> Self {
        let vars = store.ids().map(|id| tape.param(store.get(id))).collect();
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients indexed by parameter id, taken out of the tape.
    pub fn take_grads(&self, tape: &mut Tape<'_>) -> Vec<Option<Vec<f32>>> {
        self.vars.iter().map(|&v| tape.take_grad(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearIds {
    /// Weight `[out, in]` with fan-in uniform init; zero bias when present.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.insert(
            format!("{name}.weight"),
            Tensor::fan_in_uniform(vec![output, input], rng),
        );
        let b = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(vec![output])));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.linear(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormIds {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::filled(vec![dim], 1.0)),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Two-layer perceptron `fc2(gelu(fc1(x)))` over the last axis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MlpIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl MlpIds {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: LinearIds::init(store, &format!("{name}.fc1"), dim, hidden, bias, rng),
            fc2: LinearIds::init(store, &format!("{name}.fc2"), hidden, dim, bias, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub heads: usize,
}

impl AttentionIds {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let mut lin = |s: &str| LinearIds::init(store, &format!("{name}.{s}"), dim, dim, true, rng);
        Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
            heads,
        }
    }
}

/// Multi-head self-attention over `[B, T, D]` tokens, no positional terms.
pub fn multi_head_attention(tape: &mut Tape<'_>, p: &Bound, ids: &AttentionIds, x: Var) -> Result<Var> {
    let q = ids.q.forward(tape, p, x)?;
    let k = ids.k.forward(tape, p, x)?;
    let v = ids.v.forward(tape, p, x)?;
    let a = tape.attention(q, k, v, ids.heads)?;
    ids.o.forward(tape, p, a)
}

/// MLP applied along the token axis of `[B, T, D]`; the weights fix `T`.
pub fn token_mix(tape: &mut Tape<'_>, p: &Bound, ids: &MlpIds, x: Var) -> Result<Var> {
    let t = tape.shape(x)[1];
    let expected = tape.shape(p.var(ids.fc1.w))[1];
    if t != expected {
        return Err(Error::ShapeMismatch {
            op: "token_mix",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![expected],
        });
    }
    let xt = tape.transpose(x)?;
    let y = ids.forward(tape, p, xt)?;
    tape.transpose(y)
}

/// MLP applied to every token independently.
pub fn channel_mix(tape: &mut Tape<'_>, p: &Bound, ids: &MlpIds, x: Var) -> Result<Var> {
    ids.forward(tape, p, x)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MixerBlockIds {
    pub norm1: LayerNormIds,
    pub token: MlpIds,
    pub norm2: LayerNormIds,
    pub channel: MlpIds,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TransformerBlockIds {
    pub norm1: LayerNormIds,
    pub attn: AttentionIds,
    pub norm2: LayerNormIds,
    pub mlp: MlpIds,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum BlockIds {
    Mixer(MixerBlockIds),
    Transformer(TransformerBlockIds),
}

/// Widths shared by every block of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub tokens: usize,
    pub dim: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub heads: usize,
}

impl BlockIds {
    pub fn init_mixer(store: &mut ParamStore, name: &str, d: BlockDims, rng: &mut impl Rng) -> Self {
        BlockIds::Mixer(MixerBlockIds {
            norm1: LayerNormIds::init(store, &format!("{name}.norm1"), d.dim),
            token: MlpIds::init(store, &format!("{name}.token"), d.tokens, d.token_hidden, true, rng),
            norm2: LayerNormIds::init(store, &format!("{name}.norm2"), d.dim),
            channel: MlpIds::init(store, &format!("{name}.channel"), d.dim, d.channel_hidden, true, rng),
        })
    }

    pub fn init_transformer(store: &mut ParamStore, name: &str, d: BlockDims, rng: &mut impl Rng) -> Self {
        BlockIds::Transformer(TransformerBlockIds {
            norm1: LayerNormIds::init(store, &format!("{name}.norm1"), d.dim),
            attn: AttentionIds::init(store, &format!("{name}.attn"), d.dim, d.heads, rng),
            norm2: LayerNormIds::init(store, &format!("{name}.norm2"), d.dim),
            mlp: MlpIds::init(store, &format!("{name}.mlp"), d.dim, d.channel_hidden, true, rng),
        })
    }

    /// One pre-norm residual block on `[B, T, D]`.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            BlockIds::Mixer(b) => {
                let h = b.norm1.forward(tape, p, x)?;
                let h = token_mix(tape, p, &b.token, h)?;
                let x = tape.add(x, h)?;
                let h = b.norm2.forward(tape, p, x)?;
                let h = channel_mix(tape, p, &b.channel, h)?;
                tape.add(x, h)
            }
            BlockIds::Transformer(b) => {
                let h = b.norm1.forward(tape, p, x)?;
                let h = multi_head_attention(tape, p, &b.attn, h)?;
                let x = tape.add(x, h)?;
                let h = b.norm2.forward(tape, p, x)?;
                let h = b.mlp.forward(tape, p, h)?;
                tape.add(x, h)
            }
        }
    }

    /// Parameters whose output mixes information across tokens.
    pub fn cross_token_params(&self) -> Vec<ParamId> {
        let lin = |l: &LinearIds| std::iter::once(l.w).chain(l.b);
        match self {
            BlockIds::Mixer(b) => lin(&b.token.fc1).chain(lin(&b.token.fc2)).collect(),
            BlockIds::Transformer(b) => [b.attn.q, b.attn.k, b.attn.v, b.attn.o]
                .iter()
                .flat_map(lin)
                .collect(),
        }
    }
}
