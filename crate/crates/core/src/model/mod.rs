//! The locally adaptive morphable model.
//!
//! Each region is projected to one token, an input-independent identity
//! token is prepended, and after the encoder stack the identity token is
//! squeezed to the latent `z`. The decoder starts from `[W_up z, y_1, …, y_K]`
//! where `y_i` are learned tokens plus the output of a bias-free control
//! network fed with the displacements of that region's control vertices.
//! Every token state can be read out with the shared per-region output
//! projections.
//!
//! All graph computations run in normalized coordinates (centered, then
//! divided by `coord_scale`); the public inference API takes and returns
//! centered model-unit coordinates.

mod flops;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{template_from_json, template_to_json, Template};
use crate::tensor::io::{self as ckpt, Container};
use crate::tensor::layers::{BlockDims, BlockIds, Bound, LinearIds};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub use flops::{count_flops, count_params, FlopCount};

pub const CHECKPOINT_KIND: &str = "lamm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Transformer,
    Mlpmixer,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "mlpmixer" | "mixer" => Ok(Self::Mlpmixer),
            other => Err(Error::invalid(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LammConfig {
    pub region_sizes: Vec<usize>,
    pub control_sizes: Vec<usize>,
    /// Token width `D`.
    pub dim: usize,
    /// Latent size `d`.
    pub latent: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub backbone: Backbone,
    pub heads: usize,
    pub control_hidden: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    /// Coordinates are divided by this before tokenization and multiplied
    /// back after the output projection.
    pub coord_scale: f32,
}

impl LammConfig {
    /// Defaults for a template: 5 encoder and 3 decoder layers, `D/64` heads,
    /// hidden widths `2T` (token mixing), `4D` (channel MLP) and `D` (control nets).
    pub fn for_template(t: &Template, backbone: Backbone, dim: usize, latent: usize) -> Self {
        let k = t.num_regions();
        Self {
            region_sizes: t.region_sizes(),
            control_sizes: t.control_sizes(),
            dim,
            latent,
            encoder_layers: 5,
            decoder_layers: 3,
            backbone,
            heads: (dim / 64).max(1),
            control_hidden: dim,
            token_hidden: 2 * (k + 1),
            channel_hidden: 4 * dim,
            coord_scale: 1.0,
        }
    }

    pub fn num_regions(&self) -> usize {
        self.region_sizes.len()
    }

    /// `K + 1`, independent of the vertex count.
    pub fn tokens(&self) -> usize {
        self.num_regions() + 1
    }

    pub fn num_vertices(&self) -> usize {
        self.region_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.region_sizes.is_empty() || self.region_sizes.contains(&0) {
            return bad("every region needs at least one vertex".into());
        }
        if self.control_sizes.len() != self.region_sizes.len() {
            return bad(format!(
                "{} control sets for {} regions",
                self.control_sizes.len(),
                self.region_sizes.len()
            ));
        }
        if self.latent == 0 || self.latent > self.dim {
            return bad(format!("latent size {} must be in 1..={}", self.latent, self.dim));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.control_hidden == 0 || self.token_hidden == 0 || self.channel_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if !(self.coord_scale.is_finite() && self.coord_scale > 0.0) {
            return bad(format!("coord_scale {} must be positive", self.coord_scale));
        }
        Ok(())
    }

    fn block_dims(&self) -> BlockDims {
        BlockDims {
            tokens: self.tokens(),
            dim: self.dim,
            token_hidden: self.token_hidden,
            channel_hidden: self.channel_hidden,
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone)]
struct Ids {
    w_in: Vec<ParamId>,
    w_out: Vec<ParamId>,
    down: ParamId,
    up: ParamId,
    identity_token: ParamId,
    region_tokens: ParamId,
    encoder: Vec<BlockIds>,
    decoder: Vec<BlockIds>,
    control: Vec<(LinearIds, LinearIds)>,
}

/// Token states of every layer, `[B, K+1, D]` each, index 0 being the input.
#[derive(Debug, Clone)]
pub struct Trace {
    pub states: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LammModel {
    config: LammConfig,
    template: Template,
    store: ParamStore,
    ids: Ids,
    coord_index: Vec<Vec<usize>>,
    control_index: Vec<Vec<usize>>,
}

impl LammModel {
    pub fn new(config: LammConfig, template: Template, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.region_sizes != template.region_sizes()
            || config.control_sizes != template.control_sizes()
        {
            return Err(Error::TemplateMismatch {
                expected: format!(
                    "regions {:?}, controls {:?}",
                    config.region_sizes, config.control_sizes
                ),
                found: format!(
                    "regions {:?}, controls {:?}",
                    template.region_sizes(),
                    template.control_sizes()
                ),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, k) = (config.dim, config.num_regions());
        let w_in = (0..k)
            .map(|i| {
                let n = 3 * config.region_sizes[i];
                store.insert(format!("w_in.{i}"), Tensor::fan_in_uniform(vec![d, n], &mut rng))
            })
            .collect();
        let w_out = (0..k)
            .map(|i| {
                let n = 3 * config.region_sizes[i];
                store.insert(format!("w_out.{i}"), Tensor::fan_in_uniform(vec![n, d], &mut rng))
            })
            .collect();
        let down = store.insert("w_down", Tensor::fan_in_uniform(vec![config.latent, d], &mut rng));
        let up = store.insert("w_up", Tensor::fan_in_uniform(vec![d, config.latent], &mut rng));
        let identity_token = store.insert("identity_token", Tensor::zeros(vec![1, d]));
        let region_tokens = store.insert("region_tokens", Tensor::zeros(vec![k, d]));
        let dims = config.block_dims();
        let mut stack = |prefix: &str, n: usize, store: &mut ParamStore| -> Vec<BlockIds> {
            (0..n)
                .map(|l| {
                    let name = format!("{prefix}.{l}");
                    match config.backbone {
                        Backbone::Mlpmixer => BlockIds::init_mixer(store, &name, dims, &mut rng),
                        Backbone::Transformer => BlockIds::init_transformer(store, &name, dims, &mut rng),
                    }
                })
                .collect()
        };
        let encoder = stack("encoder", config.encoder_layers, &mut store);
        let decoder = stack("decoder", config.decoder_layers, &mut store);
        let control = (0..k)
            .map(|i| {
                let c = 3 * config.control_sizes[i];
                let h = config.control_hidden;
                (
                    LinearIds::init(&mut store, &format!("control.{i}.fc1"), c, h, false, &mut rng),
                    LinearIds::init(&mut store, &format!("control.{i}.fc2"), h, d, false, &mut rng),
                )
            })
            .collect();
        let coord_index = (0..k).map(|i| coords_of(template.region(i))).collect();
        let control_index = (0..k).map(|i| coords_of(template.controls(i))).collect();
        Ok(Self {
            config,
            template,
            store,
            ids: Ids {
                w_in,
                w_out,
                down,
                up,
                identity_token,
                region_tokens,
                encoder,
                decoder,
                control,
            },
            coord_index,
            control_index,
        })
    }

    pub fn config(&self) -> &LammConfig {
        &self.config
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Parameter ids of the control networks.
    pub fn control_param_ids(&self) -> Vec<ParamId> {
        self.ids
            .control
            .iter()
            .flat_map(|(a, b)| [a.w, b.w])
            .collect()
    }

    /// Parameters that mix information across tokens (attention or token mixing).
    pub fn cross_token_param_ids(&self) -> Vec<ParamId> {
        self.ids
            .encoder
            .iter()
            .chain(&self.ids.decoder)
            .flat_map(BlockIds::cross_token_params)
            .collect()
    }

    fn floats_per_mesh(&self) -> usize {
        3 * self.template.num_vertices()
    }

    fn batch_len(&self, centered: &[f32]) -> Result<usize> {
        let n = self.floats_per_mesh();
        if centered.is_empty() || !centered.len().is_multiple_of(n) {
            return Err(Error::partition(format!(
                "buffer of {} floats is not a whole number of {}-vertex meshes",
                centered.len(),
                n / 3
            )));
        }
        Ok(centered.len() / n)
    }

    /// Per-region `[B, 3N_i]` inputs in normalized coordinates.
    pub fn gather_regions(&self, centered: &[f32], b: usize) -> Vec<Vec<f32>> {
        gather(centered, b, self.floats_per_mesh(), &self.coord_index, 1.0 / self.config.coord_scale)
    }

    /// Per-region `[B, 3|C_i|]` displacements `(target − source)[C_i]`, in model units.
    pub fn control_deltas(&self, source: &[f32], target: &[f32]) -> Result<Vec<Vec<f32>>> {
        let b = self.batch_len(source)?;
        if target.len() != source.len() {
            return Err(Error::partition("source and target batches differ in size"));
        }
        let n = self.floats_per_mesh();
        Ok(self
            .control_index
            .iter()
            .map(|idx| {
                let mut out = Vec::with_capacity(b * idx.len());
                for s in 0..b {
                    out.extend(idx.iter().map(|&j| target[s * n + j] - source[s * n + j]));
                }
                out
            })
            .collect())
    }

    fn check_deltas(&self, deltas: &[Vec<f32>], b: usize) -> Result<()> {
        if deltas.len() != self.config.num_regions() {
            return Err(Error::partition(format!(
                "{} displacement vectors for {} regions",
                deltas.len(),
                self.config.num_regions()
            )));
        }
        for (i, (d, idx)) in deltas.iter().zip(&self.control_index).enumerate() {
            if d.len() != b * idx.len() {
                return Err(Error::partition(format!(
                    "region {i}: displacement length {} != {}·{}",
                    d.len(),
                    b,
                    idx.len()
                )));
            }
        }
        Ok(())
    }

    pub fn normalized_deltas(&self, deltas: &[Vec<f32>]) -> Vec<Vec<f32>> {
        let s = 1.0 / self.config.coord_scale;
        deltas.iter().map(|d| d.iter().map(|v| v * s).collect()).collect()
    }

    pub fn tokenize_graph(&self, tape: &mut Tape<'_>, p: &Bound, regions: &[Vec<f32>], b: usize) -> Result<Var> {
        let d = self.config.dim;
        let mut tokens = Vec::with_capacity(self.config.tokens());
        let id = tape.repeat(p.var(self.ids.identity_token), b);
        tokens.push(id);
        for (i, data) in regions.iter().enumerate() {
            let x = tape.constant(vec![b, data.len() / b], data.clone())?;
            let t = tape.linear(x, p.var(self.ids.w_in[i]))?;
            tokens.push(tape.reshape(t, vec![b, 1, d])?);
        }
        tape.concat(&tokens, 1)
    }

    /// Encoder graph: returns `z` (`[B, d]`) and the `L_enc + 1` token states.
    pub fn encode_graph(&self, tape: &mut Tape<'_>, p: &Bound, regions: &[Vec<f32>], b: usize) -> Result<(Var, Vec<Var>)> {
        let mut x = self.tokenize_graph(tape, p, regions, b)?;
        let mut trace = vec![x];
        for block in &self.ids.encoder {
            x = block.forward(tape, p, x)?;
            trace.push(x);
        }
        let first = tape.slice(x, 1, 0, 1)?;
        let first = tape.reshape(first, vec![b, self.config.dim])?;
        let z = tape.linear(first, p.var(self.ids.down))?;
        Ok((z, trace))
    }

    /// `[B, K, D]` control embeddings from normalized displacements.
    pub fn control_graph(&self, tape: &mut Tape<'_>, p: &Bound, deltas: &[Vec<f32>], b: usize) -> Result<Var> {
        let d = self.config.dim;
        let mut out = Vec::with_capacity(deltas.len());
        for (i, delta) in deltas.iter().enumerate() {
            let (fc1, fc2) = &self.ids.control[i];
            let x = tape.constant(vec![b, delta.len() / b], delta.clone())?;
            let h = fc1.forward(tape, p, x)?;
            let h = tape.gelu(h);
            let e = fc2.forward(tape, p, h)?;
            out.push(tape.reshape(e, vec![b, 1, d])?);
        }
        tape.concat(&out, 1)
    }

    /// Decoder graph; `deltas = None` is the auto-encoder path without the
    /// control branch. Returns the `L_dec + 1` token states.
    pub fn decode_graph(&self, tape: &mut Tape<'_>, p: &Bound, z: Var, deltas: Option<&[Vec<f32>]>, b: usize) -> Result<Vec<Var>> {
        let d = self.config.dim;
        let up = tape.linear(z, p.var(self.ids.up))?;
        let up = tape.reshape(up, vec![b, 1, d])?;
        let mut regions = tape.repeat(p.var(self.ids.region_tokens), b);
        if let Some(deltas) = deltas {
            let e = self.control_graph(tape, p, deltas, b)?;
            regions = tape.add(regions, e)?;
        }
        let mut y = tape.concat(&[up, regions], 1)?;
        let mut trace = vec![y];
        for block in &self.ids.decoder {
            y = block.forward(tape, p, y)?;
            trace.push(y);
        }
        Ok(trace)
    }

    /// `W_i^out` applied to token `i + 1` of a state: `[B, 3N_i]`, normalized.
    pub fn region_out(&self, tape: &mut Tape<'_>, p: &Bound, state: Var, i: usize, b: usize) -> Result<Var> {
        let t = tape.slice(state, 1, i + 1, 1)?;
        let t = tape.reshape(t, vec![b, self.config.dim])?;
        tape.linear(t, p.var(self.ids.w_out[i]))
    }

    /// Read a state out as centered model-unit coordinates `[B·N·3]`.
    fn readout(&self, tape: &mut Tape<'_>, p: &Bound, state: Var, b: usize) -> Result<Vec<f32>> {
        let n = self.floats_per_mesh();
        let mut out = vec![0.0; b * n];
        let s = self.config.coord_scale;
        for (i, idx) in self.coord_index.iter().enumerate() {
            let r = self.region_out(tape, p, state, i, b)?;
            let v = tape.value(r);
            for bi in 0..b {
                let row = &v[bi * idx.len()..(bi + 1) * idx.len()];
                for (&j, &x) in idx.iter().zip(row) {
                    out[bi * n + j] = x * s;
                }
            }
        }
        Ok(out)
    }

    /// Token states `[B, K+1, D]` from the tokenizer alone.
    pub fn tokenize(&self, centered: &[f32]) -> Result<Tensor> {
        let b = self.batch_len(centered)?;
        let mut tape = Tape::inference();
        let p = Bound::new(&mut tape, &self.store);
        let x = self.tokenize_graph(&mut tape, &p, &self.gather_regions(centered, b), b)?;
        Ok(tape.to_tensor(x))
    }

    /// Latent codes `[B·d]` and the encoder trace.
    pub fn encode(&self, centered: &[f32]) -> Result<(Vec<f32>, Trace)> {
        let b = self.batch_len(centered)?;
        let mut tape = Tape::inference();
        let p = Bound::new(&mut tape, &self.store);
        let (z, trace) = self.encode_graph(&mut tape, &p, &self.gather_regions(centered, b), b)?;
        let states = trace.iter().map(|&v| tape.to_tensor(v)).collect();
        Ok((tape.value(z).to_vec(), Trace { states }))
    }

    /// Latent codes `[B·d]`.
    pub fn encode_latent(&self, centered: &[f32]) -> Result<Vec<f32>> {
        let b = self.batch_len(centered)?;
        let mut tape = Tape::inference();
        let p = Bound::new(&mut tape, &self.store);
        let (z, _) = self.encode_graph(&mut tape, &p, &self.gather_regions(centered, b), b)?;
        Ok(tape.value(z).to_vec())
    }

    fn latent_batch(&self, z: &[f32]) -> Result<usize> {
        let d = self.config.latent;
        if z.is_empty() || !z.len().is_multiple_of(d) {
            return Err(Error::partition(format!("latent buffer of {} is not a multiple of {d}", z.len())));
        }
        Ok(z.len() / d)
    }

    fn decode_inner(&self, z: &[f32], deltas: Option<&[Vec<f32>]>, keep_trace: bool) -> Result<(Vec<f32>, Option<Trace>)> {
        let b = self.latent_batch(z)?;
        if let Some(d) = deltas {
            self.check_deltas(d, b)?;
        }
        let norm = deltas.map(|d| self.normalized_deltas(d));
        let mut tape = Tape::inference();
        let p = Bound::new(&mut tape, &self.store);
        let zv = tape.constant(vec![b, self.config.latent], z.to_vec())?;
        let trace = self.decode_graph(&mut tape, &p, zv, norm.as_deref(), b)?;
        let last = *trace.last().unwrap();
        let out = self.readout(&mut tape, &p, last, b)?;
        let trace = keep_trace.then(|| Trace {
            states: trace.iter().map(|&v| tape.to_tensor(v)).collect(),
        });
        Ok((out, trace))
    }

    /// Decode latents (`[B·d]`) with optional per-region control
    /// displacements (model units) into centered coordinates `[B·N·3]`.
    pub fn decode(&self, z: &[f32], deltas: Option<&[Vec<f32>]>) -> Result<Vec<f32>> {
        Ok(self.decode_inner(z, deltas, false)?.0)
    }

    pub fn decode_with_trace(&self, z: &[f32], deltas: Option<&[Vec<f32>]>) -> Result<(Vec<f32>, Trace)> {
        let (out, trace) = self.decode_inner(z, deltas, true)?;
        Ok((out, trace.unwrap()))
    }

    /// Control-network outputs `[B, K, D]`.
    pub fn control_embed(&self, deltas: &[Vec<f32>]) -> Result<Tensor> {
        let per = self.control_index.first().map_or(0, Vec::len);
        let b = deltas.first().map_or(0, |d| d.len() / per.max(1));
        if b == 0 {
            return Err(Error::invalid("empty displacement batch"));
        }
        self.check_deltas(deltas, b)?;
        let mut tape = Tape::inference();
        let p = Bound::new(&mut tape, &self.store);
        let e = self.control_graph(&mut tape, &p, &self.normalized_deltas(deltas), b)?;
        Ok(tape.to_tensor(e))
    }

    /// Decode every state of a trace with the shared output projections.
    pub fn decode_states(&self, trace: &Trace) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::inference();
        let p = Bound::new(&mut tape, &self.store);
        trace
            .states
            .iter()
            .map(|s| {
                let b = s.shape[0];
                let v = tape.constant(s.shape.clone(), s.data.clone())?;
                self.readout(&mut tape, &p, v, b)
            })
            .collect()
    }

    /// Auto-encoder reconstruction: no control branch at all.
    pub fn reconstruct(&self, centered: &[f32]) -> Result<Vec<f32>> {
        let z = self.encode_latent(centered)?;
        self.decode(&z, None)
    }

    /// `decode(encode(source), deltas)`.
    pub fn forward(&self, centered: &[f32], deltas: &[Vec<f32>]) -> Result<Vec<f32>> {
        let z = self.encode_latent(centered)?;
        self.decode(&z, Some(deltas))
    }

    /// Zero displacements for a batch of `b`.
    pub fn zero_deltas(&self, b: usize) -> Vec<Vec<f32>> {
        self.control_index.iter().map(|idx| vec![0.0; b * idx.len()]).collect()
    }

    pub fn to_container(&self, meta: serde_json::Value, extra: Vec<(String, Tensor)>) -> Container {
        let header = serde_json::json!({
            "config": self.config,
            "template_checksum": self.template.checksum(),
            "template": template_to_json(&self.template),
            "meta": meta,
        });
        let mut tensors: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        tensors.extend(extra);
        Container {
            kind: CHECKPOINT_KIND.into(),
            header,
            tensors,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        ckpt::save(&self.to_container(meta, Vec::new()), path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", c.kind)));
        }
        let config: LammConfig = serde_json::from_value(
            c.header
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
        )?;
        let template = template_from_json(
            c.header
                .get("template")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing template".into()))?,
        )?;
        let stored = c.header.get("template_checksum").and_then(|v| v.as_str());
        if stored != Some(template.checksum().as_str()) {
            return Err(Error::TemplateMismatch {
                expected: stored.unwrap_or("<none>").to_string(),
                found: template.checksum(),
            });
        }
        let mut model = Self::new(config, template, 0)?;
        model
            .store
            .load_from(c.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&ckpt::load(path)?)
    }

    /// Load and refuse a checkpoint trained on a different template.
    pub fn load_for(path: impl AsRef<Path>, template: &Template) -> Result<Self> {
        let model = Self::load(path)?;
        model.check_template(template)?;
        Ok(model)
    }

    pub fn check_template(&self, template: &Template) -> Result<()> {
        let (expected, found) = (self.template.checksum(), template.checksum());
        if expected != found {
            return Err(Error::TemplateMismatch { expected, found });
        }
        Ok(())
    }
}

fn coords_of(vertices: &[u32]) -> Vec<usize> {
    vertices
        .iter()
        .flat_map(|&v| [3 * v as usize, 3 * v as usize + 1, 3 * v as usize + 2])
        .collect()
}

fn gather(data: &[f32], b: usize, stride: usize, index: &[Vec<usize>], scale: f32) -> Vec<Vec<f32>> {
    index
        .iter()
        .map(|idx| {
            let mut out = Vec::with_capacity(b * idx.len());
            for s in 0..b {
                let row = &data[s * stride..(s + 1) * stride];
                out.extend(idx.iter().map(|&j| row[j] * scale));
            }
            out
        })
        .collect()
}
