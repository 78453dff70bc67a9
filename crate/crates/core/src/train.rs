//! Self-supervised manipulation training and the evaluation protocol.
//!
//! A batch holds `B` source/target pairs. For manipulation tasks the first
//! half is auto-encoding (`target = source`) and the second half maps a
//! source to another identity (identity task) or to the same identity with
//! an expression (expression task). Targets of the second half are mixed
//! with their sources by a per-pair `α ~ U(α_min, 1)`.
//!
//! The loss reads out every encoder and decoder layer with the shared output
//! projections: encoder layer `l` is pulled towards `(L−l)/L · v^s`, decoder
//! layer `l` towards `l/L · v^t` (the mean shape is zero after centering).

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{sum_euclidean_distance, ShapeBatch};
use crate::model::{Backbone, LammConfig, LammModel};
use crate::synth::{Dataset, Split};
use crate::tensor::layers::Bound;
use crate::tensor::optim::{AdamW, AdamWConfig};
use crate::tensor::schedule::LrSchedule;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ae,
    Identity,
    Expression,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(Self::Ae),
            "identity" | "identity-manip" => Ok(Self::Identity),
            "expression" | "expression-manip" => Ok(Self::Expression),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// Per-layer loss weights `λ_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LossWeights {
    Ones,
    /// `λ_l = base^l`.
    Power { base: f32 },
    Explicit { encoder: Vec<f32>, decoder: Vec<f32> },
}

impl LossWeights {
    fn encoder(&self, l: usize) -> f32 {
        match self {
            Self::Ones => 1.0,
            Self::Power { base } => base.powi(l as i32),
            Self::Explicit { encoder, .. } => encoder.get(l).copied().unwrap_or(0.0),
        }
    }

    fn decoder(&self, l: usize) -> f32 {
        match self {
            Self::Ones => 1.0,
            Self::Power { base } => base.powi(l as i32),
            Self::Explicit { decoder, .. } => decoder.get(l).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch: usize,
    pub alpha_min: f32,
    pub weights: LossWeights,
    pub schedule: LrSchedule,
    pub weight_decay: f32,
    pub eval_every: usize,
    pub seed: u64,
    /// Auto-encoder checkpoint to start manipulation training from.
    pub pretrained: Option<PathBuf>,
    pub backbone: Backbone,
    pub dim: usize,
    pub latent: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Ae,
            epochs: 300,
            batch: 32,
            alpha_min: 0.0,
            weights: LossWeights::Ones,
            schedule: LrSchedule {
                peak: 1e-3,
                total_epochs: 300.0,
                ..Default::default()
            },
            weight_decay: 0.01,
            eval_every: 10,
            seed: 0,
            pretrained: None,
            backbone: Backbone::Mlpmixer,
            dim: 64,
            latent: 32,
            encoder_layers: 5,
            decoder_layers: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_loop()?;
        if self.task != Task::Ae && self.pretrained.is_none() {
            return Err(Error::invalid(
                "manipulation training starts from a pretrained auto-encoder checkpoint",
            ));
        }
        Ok(())
    }

    fn validate_loop(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha_min) {
            return Err(Error::invalid(format!("alpha_min {} not in [0, 1)", self.alpha_min)));
        }
        if self.batch < 2 || !self.batch.is_multiple_of(2) {
            return Err(Error::invalid(format!("batch size {} must be even and ≥ 2", self.batch)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        Ok(())
    }

    fn model_config(&self, data: &Dataset) -> LammConfig {
        let mut c = LammConfig::for_template(&data.template, self.backbone, self.dim, self.latent);
        c.encoder_layers = self.encoder_layers;
        c.decoder_layers = self.decoder_layers;
        c.coord_scale = coordinate_rms(&data.train.neutral);
        c
    }
}

/// Root mean square of the centered coordinates.
pub fn coordinate_rms(batch: &ShapeBatch) -> f32 {
    let d = batch.data();
    let s: f64 = d.iter().map(|&v| (v as f64).powi(2)).sum();
    ((s / d.len().max(1) as f64).sqrt() as f32).max(f32::MIN_POSITIVE)
}

/// Fresh model for the auto-encoder task, the pretrained one otherwise.
pub fn prepare_model(cfg: &TrainConfig, data: &Dataset) -> Result<LammModel> {
    cfg.validate()?;
    match &cfg.pretrained {
        Some(path) => LammModel::load_for(path, &data.template),
        None => LammModel::new(cfg.model_config(data), data.template.clone(), cfg.seed),
    }
}

/// Source/target pairs, flat `[B·N·3]` centered coordinates.
#[derive(Debug, Clone)]
pub struct ManipulationBatch {
    pub source: Vec<f32>,
    pub target: Vec<f32>,
    pub len: usize,
    /// Pairs `0..ae_pairs` are auto-encoding pairs.
    pub ae_pairs: usize,
    /// True when a permutation could not avoid mapping a source to itself.
    pub fixed_point: bool,
}

/// Assemble a batch from identities `indices` of `split`.
pub fn build_batch(split: &Split, indices: &[usize], task: Task, rng: &mut impl Rng) -> Result<ManipulationBatch> {
    let b = indices.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let source = split.neutral.select(indices).data().to_vec();
    if task == Task::Ae {
        return Ok(ManipulationBatch {
            target: source.clone(),
            source,
            len: b,
            ae_pairs: b,
            fixed_point: false,
        });
    }
    if !b.is_multiple_of(2) {
        return Err(Error::invalid(format!("manipulation batch size {b} must be even")));
    }
    let h = b / 2;
    let mut target = source.clone();
    let stride = source.len() / b;
    let mut fixed_point = false;
    match task {
        Task::Identity => {
            let mut perm: Vec<usize> = (h..b).collect();
            perm.shuffle(rng);
            // rotate a shuffled order: a derangement whenever h > 1
            let rotated: Vec<usize> = (0..h).map(|j| perm[(j + 1) % h]).collect();
            for (j, &src) in perm.iter().enumerate() {
                let dst_pair = src;
                let from = rotated[j];
                fixed_point |= from == dst_pair;
                target[dst_pair * stride..(dst_pair + 1) * stride]
                    .copy_from_slice(&source[from * stride..(from + 1) * stride]);
            }
        }
        Task::Expression => {
            if split.expressive.len() != split.neutral.len() {
                return Err(Error::invalid("expression task needs expressive meshes for every identity"));
            }
            let expr = split.expressive.select(&indices[h..]);
            target[h * stride..].copy_from_slice(expr.data());
        }
        Task::Ae => unreachable!(),
    }
    Ok(ManipulationBatch {
        source,
        target,
        len: b,
        ae_pairs: h,
        fixed_point,
    })
}

/// Replace the targets of pairs `from..` with `α·source + (1−α)·target`,
/// `α ~ U(α_min, 1)` per pair. Returns the sampled `α`s.
pub fn alpha_mix(batch: &mut ManipulationBatch, from: usize, alpha_min: f32, rng: &mut impl Rng) -> Vec<f32> {
    let stride = batch.source.len() / batch.len;
    (from..batch.len)
        .map(|p| {
            let a = if alpha_min < 1.0 {
                rng.random_range(alpha_min..1.0)
            } else {
                1.0
            };
            mix_pair(batch, p, stride, a);
            a
        })
        .collect()
}

/// Mix pair `p` with a given `α`.
pub fn mix_pair(batch: &mut ManipulationBatch, p: usize, stride: usize, alpha: f32) {
    let s = &batch.source[p * stride..(p + 1) * stride];
    let t = &mut batch.target[p * stride..(p + 1) * stride];
    for (tv, &sv) in t.iter_mut().zip(s) {
        *tv = alpha * sv + (1.0 - alpha) * *tv;
    }
}

/// Scale of the source coordinates supervising encoder state `l` of `layers`.
pub fn encoder_anchor(l: usize, layers: usize) -> f32 {
    (layers - l) as f32 / layers as f32
}

/// Scale of the target coordinates supervising decoder state `l` of `layers`.
pub fn decoder_anchor(l: usize, layers: usize) -> f32 {
    l as f32 / layers as f32
}

/// `Σ_l (λ_l/K) Σ_i ‖W_i^out x_i^l − (L−l)/L · v_i^s‖₁` over encoder states.
pub fn loss_encoder(
    model: &LammModel,
    tape: &mut Tape<'_>,
    p: &Bound,
    trace: &[Var],
    source_regions: &[Vec<f32>],
    weights: &LossWeights,
    b: usize,
) -> Result<Var> {
    let layers = trace.len() - 1;
    multilayer(model, tape, p, trace, source_regions, b, |l| {
        (weights.encoder(l), encoder_anchor(l, layers))
    })
}

/// `Σ_l (λ_l/K) Σ_i ‖W_i^out y_i^l − l/L · v_i^t‖₁` over decoder states.
pub fn loss_decoder(
    model: &LammModel,
    tape: &mut Tape<'_>,
    p: &Bound,
    trace: &[Var],
    target_regions: &[Vec<f32>],
    weights: &LossWeights,
    b: usize,
) -> Result<Var> {
    let layers = trace.len() - 1;
    multilayer(model, tape, p, trace, target_regions, b, |l| {
        (weights.decoder(l), decoder_anchor(l, layers))
    })
}

fn multilayer(
    model: &LammModel,
    tape: &mut Tape<'_>,
    p: &Bound,
    trace: &[Var],
    regions: &[Vec<f32>],
    b: usize,
    coef: impl Fn(usize) -> (f32, f32),
) -> Result<Var> {
    let k = regions.len() as f32;
    let mut total: Option<Var> = None;
    for (l, &state) in trace.iter().enumerate() {
        let (lambda, anchor) = coef(l);
        if lambda == 0.0 {
            continue;
        }
        for (i, v) in regions.iter().enumerate() {
            let out = model.region_out(tape, p, state, i, b)?;
            let target = v.iter().map(|x| anchor * x).collect();
            let term = tape.l1(out, target)?;
            let term = tape.scale(term, lambda / k);
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(vec![1], vec![0.0]),
    }
}

/// Total loss of one batch, averaged over pairs, recorded on `tape`.
pub fn batch_loss(
    model: &LammModel,
    tape: &mut Tape<'_>,
    p: &Bound,
    batch: &ManipulationBatch,
    use_controls: bool,
    weights: &LossWeights,
) -> Result<Var> {
    let b = batch.len;
    let src = model.gather_regions(&batch.source, b);
    let tgt = model.gather_regions(&batch.target, b);
    let (z, enc) = model.encode_graph(tape, p, &src, b)?;
    let deltas = if use_controls {
        Some(model.normalized_deltas(&model.control_deltas(&batch.source, &batch.target)?))
    } else {
        None
    };
    let dec = model.decode_graph(tape, p, z, deltas.as_deref(), b)?;
    let le = loss_encoder(model, tape, p, &enc, &src, weights, b)?;
    let ld = loss_decoder(model, tape, p, &dec, &tgt, weights, b)?;
    let total = tape.add(le, ld)?;
    Ok(tape.scale(total, 1.0 / b as f32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean vertex error of auto-encoding the eval meshes.
    pub ae: f64,
    /// Mean error at control vertices after source→target transfer.
    pub in_c: f64,
    /// Mean error at the remaining vertices after transfer.
    pub not_in_c: f64,
    /// Mean length of the fed control displacements.
    pub displacement: f64,
}

/// Eval pairs for the manipulation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairs {
    Expression,
    Identity,
}

const EVAL_CHUNK: usize = 50;

/// Targets for the manipulation metrics on `split`.
pub fn eval_targets(split: &Split, pairs: Pairs) -> ShapeBatch {
    match pairs {
        Pairs::Expression => split.expressive.clone(),
        Pairs::Identity => {
            let n = split.len();
            let order: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
            split.neutral.select(&order)
        }
    }
}

pub fn evaluate(model: &LammModel, split: &Split, pairs: Pairs) -> Result<EvalMetrics> {
    if split.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    let t = model.template();
    let controls = t.all_controls();
    let others = t.non_controls();
    let nf = 3 * t.num_vertices();
    let targets = eval_targets(split, pairs);
    let (mut ae, mut inc, mut outc, mut disp) = (0.0, 0.0, 0.0, 0.0);
    let n = split.len();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let src = split.neutral.select(&idx);
        let tgt = targets.select(&idx);
        let z = model.encode_latent(src.data())?;
        let rec = model.decode(&z, None)?;
        let deltas = model.control_deltas(src.data(), tgt.data())?;
        let out = model.decode(&z, Some(&deltas))?;
        for j in 0..idx.len() {
            let r = j * nf..(j + 1) * nf;
            ae += sum_euclidean_distance(&rec[r.clone()], &src.data()[r.clone()], None)?;
            inc += sum_euclidean_distance(&out[r.clone()], &tgt.data()[r.clone()], Some(&controls))?;
            if !others.is_empty() {
                outc += sum_euclidean_distance(&out[r.clone()], &tgt.data()[r.clone()], Some(&others))?;
            }
            disp += sum_euclidean_distance(&src.data()[r.clone()], &tgt.data()[r], Some(&controls))?;
        }
    }
    let nv = t.num_vertices() as f64;
    let n = n as f64;
    Ok(EvalMetrics {
        ae: ae / (n * nv),
        in_c: inc / (n * controls.len() as f64),
        not_in_c: if others.is_empty() { 0.0 } else { outc / (n * others.len() as f64) },
        displacement: disp / (n * controls.len() as f64),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub metrics: Option<EvalMetrics>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best: EvalMetrics,
    pub history: Vec<EpochLog>,
    pub skipped_fixed_points: usize,
}

const CSV_HEADER: &str = "epoch,lr,train_loss,ae_err,inC_err,notinC_err";

fn selection_metric(task: Task, m: &EvalMetrics) -> f64 {
    match task {
        Task::Ae => m.ae,
        _ => m.in_c,
    }
}

fn eval_pairs(task: Task) -> Pairs {
    match task {
        Task::Identity => Pairs::Identity,
        _ => Pairs::Expression,
    }
}

/// Optimize `model` in place. With `out_dir`, appends `metrics.csv` and
/// keeps `best.ckpt` (the selection metric is AE error for the AE task and
/// ∈C error otherwise); the best parameters are restored on return.
pub fn train(
    model: &mut LammModel,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate_loop()?;
    model.check_template(&data.template)?;
    let n = data.train.len();
    if n < cfg.batch {
        return Err(Error::invalid(format!("{n} training meshes is fewer than one batch of {}", cfg.batch)));
    }
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let fresh = !path.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "{CSV_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = LrSchedule {
        total_epochs: cfg.epochs as f64,
        ..cfg.schedule
    };
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let steps = n / cfg.batch;
    let pairs = eval_pairs(cfg.task);
    let use_controls = cfg.task != Task::Ae;
    let mut best: Option<(usize, EvalMetrics, crate::tensor::ParamStore)> = None;
    let mut history = Vec::new();
    let mut skipped = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for s in 0..steps {
            opt.lr = schedule.lr_at(epoch as f64 + s as f64 / steps as f64) as f32;
            let idx = &order[s * cfg.batch..(s + 1) * cfg.batch];
            let mut batch = build_batch(&data.train, idx, cfg.task, &mut rng)?;
            skipped += batch.fixed_point as usize;
            if use_controls {
                let from = batch.ae_pairs;
                alpha_mix(&mut batch, from, cfg.alpha_min, &mut rng);
            }
            let grads = {
                let mut tape = Tape::new();
                let p = Bound::new(&mut tape, model.params());
                let loss = batch_loss(model, &mut tape, &p, &batch, use_controls, &cfg.weights)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    if let Some(dir) = out_dir {
                        model.save(dir.join("last_good.ckpt"), serde_json::json!({"epoch": epoch, "step": s}))?;
                    }
                    return Err(Error::NonFinite(format!("loss is {value} at epoch {epoch}, step {s}")));
                }
                loss_sum += value as f64;
                tape.backward(loss)?;
                p.take_grads(&mut tape)
            };
            if let Err(e) = opt.step(model.params_mut(), &grads) {
                if let Some(dir) = out_dir {
                    model.save(dir.join("last_good.ckpt"), serde_json::json!({"epoch": epoch, "step": s}))?;
                }
                return Err(e);
            }
        }
        let last = epoch + 1 == cfg.epochs;
        let metrics = if (epoch + 1) % cfg.eval_every.max(1) == 0 || last {
            Some(evaluate(model, &data.eval, pairs)?)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            lr: schedule.lr_at(epoch as f64),
            train_loss: loss_sum / steps as f64,
            metrics,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(f) = csv.as_mut() {
            let m = |g: fn(&EvalMetrics) -> f64| metrics.map(|x| format!("{:.6e}", g(&x))).unwrap_or_default();
            writeln!(
                f,
                "{},{:.6e},{:.6e},{},{},{}",
                epoch,
                log.lr,
                log.train_loss,
                m(|x| x.ae),
                m(|x| x.in_c),
                m(|x| x.not_in_c)
            )?;
        }
        if let Some(m) = metrics {
            let better = best
                .as_ref()
                .is_none_or(|(_, b, _)| selection_metric(cfg.task, &m) < selection_metric(cfg.task, b));
            if better {
                if let Some(dir) = out_dir {
                    model.save(
                        dir.join("best.ckpt"),
                        serde_json::json!({"epoch": epoch, "task": cfg.task, "metrics": m}),
                    )?;
                }
                best = Some((epoch, m, model.params().clone()));
            }
        }
        progress(&log);
        history.push(log);
    }
    let (best_epoch, best_metrics, params) = best.expect("final epoch is always evaluated");
    *model.params_mut() = params;
    Ok(TrainReport {
        best_epoch,
        best: best_metrics,
        history,
        skipped_fixed_points: skipped,
    })
}
