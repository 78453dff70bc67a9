#![allow(dead_code)]

use std::sync::Arc;

use lamm_core::mesh::{Mesh, Template};
use lamm_core::model::{Backbone, LammConfig, LammModel};
use lamm_core::tensor::layers::{
    channel_mix, multi_head_attention, Bound, token_mix, AttentionIds, BlockDims, BlockIds, LayerNormIds,
    LinearIds, MlpIds,
};
use lamm_core::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use lamm_core::train::{batch_loss, LossWeights, ManipulationBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Objective `Σ y ⊙ R` for a fixed random `R`, evaluated in f64.
fn projected(y: &[f32], r: &[f32]) -> f64 {
    y.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Something owning a parameter store.
pub trait HasParams {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn store(&self) -> &ParamStore {
        self
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self
    }
}

impl HasParams for LammModel {
    fn store(&self) -> &ParamStore {
        self.params()
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self.params_mut()
    }
}

/// Norm-wise relative error between `analytic` gradients and
/// Richardson-extrapolated central differences of `value`, over at most
/// `per_tensor` coordinates of every parameter.
pub fn finite_difference_error<M: HasParams>(
    ctx: &mut M,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
    analytic: &[Option<Vec<f32>>],
    value: impl Fn(&M) -> f64,
) -> f64 {
    let eps = 4e-3f32;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let ids: Vec<ParamId> = ctx.store().ids().collect();
    for id in ids {
        let len = ctx.store().get(id).len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        let g = analytic[id.0].clone().unwrap_or_else(|| vec![0.0; len]);
        for j in picks {
            let orig = ctx.store().get(id).data[j];
            let mut central = |h: f32| {
                ctx.store_mut().get_mut(id).data[j] = orig + h;
                let up = value(ctx);
                ctx.store_mut().get_mut(id).data[j] = orig - h;
                let down = value(ctx);
                ctx.store_mut().get_mut(id).data[j] = orig;
                (up - down) / (2.0 * h as f64)
            };
            let fd = (4.0 * central(eps / 2.0) - central(eps)) / 3.0;
            num += (fd - g[j] as f64).powi(2);
            den += fd.powi(2).max((g[j] as f64).powi(2));
        }
    }
    (num / den.max(1e-30)).sqrt()
}

/// Gradient error of `Σ f ⊙ R` for a fixed random `R`.
pub fn gradient_error_of<M, F>(ctx: &mut M, per_tensor: usize, seed: u64, f: F) -> f64
where
    M: HasParams,
    F: Fn(&M, &mut Tape<'_>, &Bound) -> Var,
{
    let mut rng = rng(seed);
    let out_len = {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, ctx.store());
        let y = f(ctx, &mut tape, &p);
        tape.value(y).len()
    };
    let r: Vec<f32> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let analytic = {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, ctx.store());
        let y = f(ctx, &mut tape, &p);
        let shape = tape.shape(y).to_vec();
        let rv = tape.constant(shape, r.clone()).unwrap();
        let prod = tape.mul(y, rv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        p.take_grads(&mut tape)
    };

    finite_difference_error(ctx, per_tensor, &mut rng, &analytic, |ctx| {
        let mut tape = Tape::inference();
        let p = Bound::new(&mut tape, ctx.store());
        let y = f(ctx, &mut tape, &p);
        projected(tape.value(y), &r)
    })
}

pub fn gradient_error<F>(store: &mut ParamStore, per_tensor: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &Bound) -> Var,
{
    gradient_error_of(store, per_tensor, seed, |_, t, p| f(t, p))
}

fn with_input(shape: Vec<usize>, seed: u64) -> (ParamStore, ParamId) {
    let mut store = ParamStore::new();
    let x = store.insert("x", random_tensor(shape, &mut rng(seed)));
    (store, x)
}

pub fn check_linear() -> f64 {
    let (mut store, x) = with_input(vec![2, 3, 5], 1);
    let lin = LinearIds::init(&mut store, "l", 5, 4, true, &mut rng(2));
    store.get_mut(lin.b.unwrap()).data = vec![0.1, -0.2, 0.3, 0.05];
    gradient_error(&mut store, 64, 3, |t, p| lin.forward(t, p, p.var(x)).unwrap())
}

pub fn check_layer_norm() -> f64 {
    let (mut store, x) = with_input(vec![2, 3, 6], 4);
    let ln = LayerNormIds::init(&mut store, "n", 6);
    store.get_mut(ln.gamma).data = vec![1.2, 0.7, -0.4, 1.0, 0.9, 1.5];
    store.get_mut(ln.beta).data = vec![0.1, 0.0, -0.3, 0.2, 0.0, 0.4];
    gradient_error(&mut store, 64, 5, |t, p| ln.forward(t, p, p.var(x)).unwrap())
}

pub fn check_gelu_softmax() -> f64 {
    let (mut store, x) = with_input(vec![3, 7], 6);
    gradient_error(&mut store, 64, 7, |t, p| {
        let g = t.gelu(p.var(x));
        t.softmax(g)
    })
}

pub fn check_attention() -> f64 {
    let (mut store, x) = with_input(vec![2, 4, 8], 8);
    let attn = AttentionIds::init(&mut store, "a", 8, 2, &mut rng(9));
    gradient_error(&mut store, 24, 10, |t, p| multi_head_attention(t, p, &attn, p.var(x)).unwrap())
}

pub fn check_mixing() -> f64 {
    let (mut store, x) = with_input(vec![2, 4, 6], 11);
    let tok = MlpIds::init(&mut store, "t", 4, 8, true, &mut rng(12));
    let ch = MlpIds::init(&mut store, "c", 6, 12, true, &mut rng(13));
    gradient_error(&mut store, 24, 14, |t, p| {
        let y = token_mix(t, p, &tok, p.var(x)).unwrap();
        channel_mix(t, p, &ch, y).unwrap()
    })
}

pub fn check_block(mixer: bool) -> f64 {
    let dims = BlockDims {
        tokens: 3,
        dim: 8,
        token_hidden: 6,
        channel_hidden: 16,
        heads: 2,
    };
    let k = mixer as u64;
    let (mut store, x) = with_input(vec![2, 3, 8], 20 + k);
    let block = if mixer {
        BlockIds::init_mixer(&mut store, "b", dims, &mut rng(30 + k))
    } else {
        BlockIds::init_transformer(&mut store, "b", dims, &mut rng(30 + k))
    };
    gradient_error(&mut store, 16, 40 + k, |t, p| block.forward(t, p, p.var(x)).unwrap())
}

pub fn check_structural() -> f64 {
    let mut store = ParamStore::new();
    let a = store.insert("a", random_tensor(vec![2, 3, 4], &mut rng(50)));
    let b = store.insert("b", random_tensor(vec![2, 2, 4], &mut rng(51)));
    let w = store.insert("w", random_tensor(vec![4, 5], &mut rng(52)));
    gradient_error(&mut store, 64, 53, |t, p| {
        let c = t.concat(&[p.var(a), p.var(b)], 1).unwrap();
        let s = t.slice(c, 1, 1, 3).unwrap();
        let m = t.matmul(s, p.var(w)).unwrap();
        let r = t.reshape(m, vec![2, 15]).unwrap();
        let sc = t.scale(r, 0.7);
        let tr = t.transpose(sc).unwrap();
        let sq = t.mul(tr, tr).unwrap();
        t.sub(sq, tr).unwrap()
    })
}

pub fn check_repeat_l1() -> f64 {
    let mut store = ParamStore::new();
    let a = store.insert("a", random_tensor(vec![3, 4], &mut rng(60)));
    gradient_error(&mut store, 64, 61, |t, p| {
        let r = t.repeat(p.var(a), 2);
        let g = t.gelu(r);
        // targets far from the values keep |.| smooth at the probe points
        t.l1(g, vec![1.0; 24]).unwrap()
    })
}

/// 12 vertices in a 2×6 strip, two regions of 6 with 2 controls each.
pub fn tiny_template() -> Template {
    let mut v = Vec::new();
    for r in 0..2 {
        for c in 0..6 {
            v.push([c as f32 * 0.3, r as f32 * 0.4, 0.1 * (c % 2) as f32]);
        }
    }
    let faces = (0..5).map(|c| vec![c, c + 1, c + 7, c + 6]).collect::<Vec<_>>();
    let mesh = Mesh::new(v, Arc::new(faces)).unwrap();
    Template::new(
        mesh,
        vec![vec![0, 1, 2, 6, 7, 8], vec![3, 4, 5, 9, 10, 11]],
        vec![vec![1, 7], vec![4, 10]],
        None,
    )
    .unwrap()
}

/// `N = 12, K = 2, D = 8, d = 4`, one block per stack, every parameter random.
pub fn tiny_model(backbone: Backbone, seed: u64) -> LammModel {
    let t = tiny_template();
    let mut cfg = LammConfig::for_template(&t, backbone, 8, 4);
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.heads = 2;
    let mut m = LammModel::new(cfg, t, seed).unwrap();
    let mut r = rng(seed + 100);
    for tensor in m.params_mut().tensors_mut() {
        for v in tensor.data.iter_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
    m
}

fn random_coords(b: usize, seed: u64, offset: f32) -> Vec<f32> {
    let mut r = rng(seed);
    (0..b * 36).map(|_| offset + r.random_range(-0.5..0.5)).collect()
}

/// Every encoder and decoder readout of the tiny model with a nonzero
/// control displacement, projected on a random direction.
pub fn check_tiny_model(backbone: Backbone) -> f64 {
    let mut m = tiny_model(backbone, 7);
    let b = 2;
    let src = random_coords(b, 8, 0.0);
    let tgt = random_coords(b, 9, 0.0);
    let deltas = m.normalized_deltas(&m.control_deltas(&src, &tgt).unwrap());
    gradient_error_of(&mut m, 12, 10, |m, t, p| {
        let regions = m.gather_regions(&src, b);
        let (z, enc) = m.encode_graph(t, p, &regions, b).unwrap();
        let dec = m.decode_graph(t, p, z, Some(&deltas), b).unwrap();
        let mut outs = Vec::new();
        for &s in enc.iter().chain(&dec) {
            for i in 0..2 {
                outs.push(m.region_out(t, p, s, i, b).unwrap());
            }
        }
        outs.push(z);
        let flat: Vec<Var> = outs
            .into_iter()
            .map(|o| {
                let n = t.value(o).len();
                t.reshape(o, vec![n]).unwrap()
            })
            .collect();
        t.concat(&flat, 0).unwrap()
    })
}

/// Training loss of the tiny model summed in f64 from its readouts.
fn reference_loss(m: &LammModel, batch: &ManipulationBatch, enc_w: &[f32], dec_w: &[f32]) -> f64 {
    let b = batch.len;
    let mut tape = Tape::inference();
    let p = Bound::new(&mut tape, m.params());
    let src = m.gather_regions(&batch.source, b);
    let tgt = m.gather_regions(&batch.target, b);
    let deltas = m.normalized_deltas(&m.control_deltas(&batch.source, &batch.target).unwrap());
    let (z, enc) = m.encode_graph(&mut tape, &p, &src, b).unwrap();
    let dec = m.decode_graph(&mut tape, &p, z, Some(&deltas), b).unwrap();
    let k = src.len() as f64;
    let mut total = 0.0f64;
    let layers = (enc.len() - 1) as f64;
    let mut terms = |trace: &[Var], v: &[Vec<f32>], w: &[f32], anchor: &dyn Fn(f64) -> f64| {
        for (l, &s) in trace.iter().enumerate() {
            for (i, vi) in v.iter().enumerate() {
                let out = m.region_out(&mut tape, &p, s, i, b).unwrap();
                let a = anchor(l as f64);
                let sum: f64 = tape.value(out).iter().zip(vi).map(|(&o, &t)| (o as f64 - a * t as f64).abs()).sum();
                total += w[l] as f64 * sum / k;
            }
        }
    };
    terms(&enc, &src, enc_w, &|l| (layers - l) / layers);
    let layers = (dec.len() - 1) as f64;
    terms(&dec, &tgt, dec_w, &|l| l / layers);
    total / b as f64
}

/// Gradients of the training loss against differences of an f64
/// reference loss; the reference must also match the loss value.
pub fn check_tiny_loss(backbone: Backbone) -> f64 {
    let mut m = tiny_model(backbone, 17);
    let b = 2;
    let batch = ManipulationBatch {
        source: random_coords(b, 18, 8.0),
        target: random_coords(b, 19, 8.0),
        len: b,
        ae_pairs: 0,
        fixed_point: false,
    };
    // zero weight on the terms anchored at the origin, where readouts may cross
    let (enc_w, dec_w) = (vec![1.0, 0.0], vec![0.0, 1.0]);
    let weights = LossWeights::Explicit {
        encoder: enc_w.clone(),
        decoder: dec_w.clone(),
    };
    let (value, analytic) = {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, m.params());
        let loss = batch_loss(&m, &mut tape, &p, &batch, true, &weights).unwrap();
        let value = tape.value(loss)[0] as f64;
        tape.backward(loss).unwrap();
        (value, p.take_grads(&mut tape))
    };
    let reference = reference_loss(&m, &batch, &enc_w, &dec_w);
    let value_err = (value - reference).abs() / reference.abs().max(1e-12);
    let grad_err = finite_difference_error(&mut m, 12, &mut rng(20), &analytic, |m| {
        reference_loss(m, &batch, &enc_w, &dec_w)
    });
    grad_err.max(value_err)
}

/// Every gradient check with its name.
pub fn all_gradient_checks() -> Vec<(&'static str, f64)> {
    vec![
        ("linear", check_linear()),
        ("layer_norm", check_layer_norm()),
        ("gelu_softmax", check_gelu_softmax()),
        ("attention", check_attention()),
        ("token_channel_mixing", check_mixing()),
        ("mixer_block", check_block(true)),
        ("transformer_block", check_block(false)),
        ("structural", check_structural()),
        ("repeat_l1", check_repeat_l1()),
        ("tiny_model_mixer", check_tiny_model(Backbone::Mlpmixer)),
        ("tiny_model_transformer", check_tiny_model(Backbone::Transformer)),
        ("tiny_loss_mixer", check_tiny_loss(Backbone::Mlpmixer)),
        ("tiny_loss_transformer", check_tiny_loss(Backbone::Transformer)),
    ]
}

/// One region holding one vertex, `D = 2`, two layers per stack, with
/// `W_out` rows `(1,0) (0,1) (1,1)`.
fn anchor_model() -> LammModel {
    let mesh = Mesh::new(vec![[0.0; 3]], Arc::new(Vec::new())).unwrap();
    let t = Template::new(mesh, vec![vec![0]], vec![vec![0]], None).unwrap();
    let mut cfg = LammConfig::for_template(&t, Backbone::Mlpmixer, 2, 1);
    cfg.encoder_layers = 2;
    cfg.decoder_layers = 2;
    cfg.heads = 1;
    let mut m = LammModel::new(cfg, t, 0).unwrap();
    let w = m.params().id("w_out.0").unwrap();
    m.params_mut().get_mut(w).data = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    m
}

/// Hand-computed anchored losses; returns the largest absolute deviation.
///
/// Region-token states per layer are `(1,0) (½,½) (0,1)`, so the readouts are
/// `(1,0,1) (½,½,1) (0,1,1)`. With `v_s = (1,−2,½)`, `v_t = (3,1,−1)` and
/// `λ = (1,2,4)`, the encoder terms are `2.5, 2.25, 2` (total 15) and the
/// decoder terms `2, 2.5, 5` (total 27). The last decoder term alone is
/// `‖W y^L − v_t‖₁ = 5` and the first encoder term `‖W x^0 − v_s‖₁ = 2.5`.
pub fn check_loss_anchors() -> f64 {
    use lamm_core::train::{decoder_anchor, encoder_anchor, loss_decoder, loss_encoder};
    let m = anchor_model();
    let vs = vec![vec![1.0, -2.0, 0.5]];
    let vt = vec![vec![3.0, 1.0, -1.0]];
    let states = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]];
    let lambda = LossWeights::Explicit {
        encoder: vec![1.0, 2.0, 4.0],
        decoder: vec![1.0, 2.0, 4.0],
    };
    let only = |l: usize| {
        let mut w = vec![0.0; 3];
        w[l] = 1.0;
        LossWeights::Explicit {
            encoder: w.clone(),
            decoder: w,
        }
    };
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, m.params());
    let trace: Vec<Var> = states
        .iter()
        .map(|s| tape.constant(vec![1, 2, 2], vec![9.0, -9.0, s[0], s[1]]).unwrap())
        .collect();
    let mut value = |enc: bool, w: &LossWeights| {
        let v = if enc {
            loss_encoder(&m, &mut tape, &p, &trace, &vs, w, 1).unwrap()
        } else {
            loss_decoder(&m, &mut tape, &p, &trace, &vt, w, 1).unwrap()
        };
        tape.value(v)[0] as f64
    };
    let got = [
        value(true, &lambda),
        value(false, &lambda),
        value(true, &only(0)),
        value(false, &only(2)),
        value(true, &only(1)),
        value(false, &only(1)),
        encoder_anchor(0, 2) as f64,
        decoder_anchor(2, 2) as f64,
        encoder_anchor(2, 2) as f64,
        decoder_anchor(0, 2) as f64,
    ];
    let want = [15.0, 27.0, 2.5, 5.0, 2.25, 2.5, 1.0, 1.0, 0.0, 0.0];
    got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
}
