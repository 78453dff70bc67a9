//! `lamm` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manip::{self, fit_latent_gaussian, fit_region_gaussians};
use crate::mesh::{read_obj, write_obj, Mesh};
use crate::model::{Backbone, LammConfig, LammModel};
use crate::pca::fit_pca;
use crate::serve::{self, AppState, Priors};
use crate::synth::{self, generate_dataset, Dataset, SynthSpec};
use crate::train::{self, evaluate, Pairs, Task, TrainConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_TEMPLATE: i32 = 4;
pub const EXIT_INVALID: i32 = 5;
pub const EXIT_DIVERGED: i32 = 6;
pub const EXIT_CHECKPOINT: i32 = 7;

pub const PORT_ENV: &str = "LAMM_PORT";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        Error::TemplateMismatch { .. } => EXIT_TEMPLATE,
        Error::InvalidArgument(_)
        | Error::PartitionMismatch(_)
        | Error::InvalidTemplate(_)
        | Error::Parse { .. }
        | Error::Json(_)
        | Error::Degenerate(_)
        | Error::ShapeMismatch { .. } => EXIT_INVALID,
        Error::NonFinite(_) => EXIT_DIVERGED,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Io(_) => EXIT_FAILURE,
    }
}

/// One JSON file covering every stage; all sections optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub serve: ServeConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    pub undo_limit: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            undo_limit: serve::DEFAULT_UNDO,
        }
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "lamm", version, about = "Locally adaptive morphable model")]
pub struct Cli {
    /// JSON config file with optional `synth`, `train` and `serve` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic head dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Spec JSON; overrides the config file's `synth` section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        identities: Option<usize>,
    },
    /// Train an auto-encoder or fine-tune for manipulation.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<Backbone>,
    },
    /// Print eval errors as a CSV row.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Use identity pairs instead of expression pairs for the ∈C/∉C columns.
        #[arg(long)]
        identity_pairs: bool,
        /// Also fit PCA with this many components and print its error.
        #[arg(long)]
        pca: Option<usize>,
    },
    /// Time single-sample decodes and print a JSON report.
    Bench {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Without a checkpoint: sphere rings of a random model's template.
        #[arg(long, default_value_t = 100)]
        rings: usize,
        #[arg(long, default_value_t = 120)]
        segments: usize,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value = "transformer")]
        backbone: Backbone,
    },
    /// Replace a region of one mesh by another's.
    Swap {
        #[arg(long)]
        ckpt: PathBuf,
        /// OBJ path, or `split:index` (e.g. `eval:3`) with `--data`.
        #[arg(long)]
        recipient: String,
        #[arg(long)]
        donor: String,
        #[arg(long)]
        region: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode latent codes drawn from a Gaussian fit.
    SampleIdentity {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        priors: PriorSource,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample one region's control displacements.
    SampleRegion {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        priors: PriorSource,
        #[arg(long)]
        base: String,
        #[arg(long)]
        region: usize,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a straight line between two latent codes.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-vertex change fields and leakage ratios of sampled region edits.
    DisentangleReport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long)]
        region: Option<usize>,
        /// CSV of the per-vertex fields.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API until interrupted.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        #[command(flatten)]
        priors: PriorSource,
    },
}

#[derive(Debug, clap::Args)]
pub struct PriorSource {
    /// `priors.json` written by `train`.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Dataset to fit the priors on instead.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl PriorSource {
    fn load(&self, model: &LammModel, required: bool) -> Result<Option<Priors>> {
        match (&self.priors, &self.data) {
            (Some(p), _) => Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?)),
            (None, Some(d)) => Ok(Some(fit_priors(model, &load_data(d, model)?)?)),
            (None, None) if required => Err(Error::invalid("pass --priors or --data")),
            (None, None) => Ok(None),
        }
    }
}

pub fn fit_priors(model: &LammModel, data: &Dataset) -> Result<Priors> {
    Ok(Priors {
        latent: fit_latent_gaussian(model, &data.train.neutral)?,
        regions: fit_region_gaussians(&data.template, &data.train.neutral, &data.train.expressive)?,
    })
}

fn load_data(dir: &Path, model: &LammModel) -> Result<Dataset> {
    let data = Dataset::load(dir)?;
    model.check_template(&data.template)?;
    Ok(data)
}

/// An OBJ path or `split:index` into a dataset.
fn load_mesh(spec: &str, data: Option<&Path>, model: &LammModel) -> Result<Mesh> {
    if let Some((split, idx)) = spec.split_once(':') {
        if let (Ok(i), Some(dir)) = (idx.parse::<usize>(), data) {
            let d = load_data(dir, model)?;
            let batch = match split {
                "train" => &d.train.neutral,
                "train_expr" => &d.train.expressive,
                "eval" => &d.eval.neutral,
                "eval_expr" => &d.eval.expressive,
                other => return Err(Error::invalid(format!("unknown split {other:?}"))),
            };
            if i >= batch.len() {
                return Err(Error::invalid(format!("index {i} beyond {} meshes", batch.len())));
            }
            return Ok(d.template.uncenter(batch.sample(i)));
        }
    }
    let m = read_obj(spec)?;
    model.template().check_mesh(&m)?;
    Ok(m)
}

fn write_meshes(dir: &Path, stem: &str, meshes: &[Mesh]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, m) in meshes.iter().enumerate() {
        write_obj(m, dir.join(format!("{stem}_{i:03}.obj")))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let seed = cli.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Synth { out: dir, spec, identities } => {
            let mut s = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?).map_err(|e| Error::Parse {
                    path: p.clone(),
                    msg: e.to_string(),
                })?,
                None => file.synth,
            };
            if let Some(n) = identities {
                s.identities = n;
            }
            if let Some(v) = seed {
                s.seed = v;
            }
            let (data, labels) = generate_dataset(&s)?;
            data.save(&dir)?;
            synth::write_labels(&labels, dir.join("labels.json"))?;
            writeln!(
                out,
                "{} train / {} eval meshes, {} vertices, {} regions",
                data.train.len(),
                data.eval.len(),
                data.template.num_vertices(),
                data.template.num_regions()
            )?;
        }
        Command::Train {
            data,
            out: dir,
            task,
            epochs,
            pretrained,
            backbone,
        } => {
            let mut cfg = file.train;
            if let Some(t) = task {
                cfg.task = t;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if pretrained.is_some() {
                cfg.pretrained = pretrained;
            }
            if let Some(b) = backbone {
                cfg.backbone = b;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            let data = Dataset::load(&data)?;
            let mut model = train::prepare_model(&cfg, &data)?;
            let report = train::train(&mut model, &data, &cfg, Some(&dir), |log| {
                if let Some(m) = log.metrics {
                    log::info!(
                        "epoch {} lr {:.2e} loss {:.4e} ae {:.6} inC {:.6} notinC {:.6}",
                        log.epoch,
                        log.lr,
                        log.train_loss,
                        m.ae,
                        m.in_c,
                        m.not_in_c
                    );
                }
            })?;
            let priors = fit_priors(&model, &data)?;
            std::fs::write(dir.join("priors.json"), serde_json::to_vec(&priors)?)?;
            std::fs::write(dir.join("train_config.json"), serde_json::to_vec_pretty(&cfg)?)?;
            writeln!(out, "{}", serde_json::json!({ "best_epoch": report.best_epoch, "best": report.best }))?;
        }
        Command::Eval {
            ckpt,
            data,
            identity_pairs,
            pca,
        } => {
            let model = LammModel::load(&ckpt)?;
            let data = load_data(&data, &model)?;
            let pairs = if identity_pairs { Pairs::Identity } else { Pairs::Expression };
            let m = evaluate(&model, &data.eval, pairs)?;
            writeln!(out, "ae_err,inC_err,notinC_err,displacement")?;
            writeln!(out, "{:.6e},{:.6e},{:.6e},{:.6e}", m.ae, m.in_c, m.not_in_c, m.displacement)?;
            if let Some(d) = pca {
                let p = fit_pca(&data.train.neutral, d)?;
                let rec = p.reconstruct_batch(&data.eval.neutral)?;
                let err = crate::mesh::mean_euclidean_distance(&rec, data.eval.neutral.data(), None)?;
                writeln!(out, "pca_{d}_err,{err:.6e}")?;
            }
        }
        Command::Bench {
            ckpt,
            iters,
            warmup,
            threads,
            rings,
            segments,
            dim,
            backbone,
        } => {
            if threads != 1 {
                return Err(Error::invalid("decode latency is measured on exactly one thread"));
            }
            let model = match ckpt {
                Some(p) => LammModel::load(p)?,
                None => bench_model(rings, segments, dim, backbone, seed.unwrap_or(0))?,
            };
            let report = serve::bench(&model, warmup, iters)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::Swap {
            ckpt,
            recipient,
            donor,
            region,
            data,
            out: path,
        } => {
            let model = LammModel::load(&ckpt)?;
            let r = load_mesh(&recipient, data.as_deref(), &model)?;
            let d = load_mesh(&donor, data.as_deref(), &model)?;
            write_obj(&manip::region_swap(&model, &r, &d, region)?, &path)?;
        }
        Command::SampleIdentity {
            ckpt,
            priors,
            count,
            out: dir,
        } => {
            let model = LammModel::load(&ckpt)?;
            let p = priors.load(&model, true)?.expect("required");
            let meshes = (0..count)
                .map(|_| manip::sample_identity(&model, &p.latent, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            write_meshes(&dir, "identity", &meshes)?;
        }
        Command::SampleRegion {
            ckpt,
            priors,
            base,
            region,
            count,
            out: dir,
        } => {
            let model = LammModel::load(&ckpt)?;
            let p = priors.load(&model, true)?.expect("required");
            let g = p
                .regions
                .get(region)
                .ok_or_else(|| Error::invalid(format!("region {region} out of range")))?;
            let base = load_mesh(&base, priors.data.as_deref(), &model)?;
            let meshes = (0..count)
                .map(|_| manip::sample_region(&model, &base, region, g, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            write_meshes(&dir, &format!("region{region}"), &meshes)?;
        }
        Command::Interpolate {
            ckpt,
            a,
            b,
            steps,
            data,
            out: dir,
        } => {
            let model = LammModel::load(&ckpt)?;
            let a = load_mesh(&a, data.as_deref(), &model)?;
            let b = load_mesh(&b, data.as_deref(), &model)?;
            write_meshes(&dir, "step", &manip::interpolate_latent(&model, &a, &b, steps)?)?;
        }
        Command::DisentangleReport {
            ckpt,
            data,
            samples,
            region,
            out: path,
        } => {
            let model = LammModel::load(&ckpt)?;
            let data = load_data(&data, &model)?;
            let priors = fit_priors(&model, &data)?;
            let regions: Vec<usize> = match region {
                Some(r) => vec![r],
                None => (0..data.template.num_regions()).collect(),
            };
            let mut profiles = Vec::new();
            for &r in &regions {
                let g = priors
                    .regions
                    .get(r)
                    .ok_or_else(|| Error::invalid(format!("region {r} out of range")))?;
                profiles.push(manip::disentanglement_profile(&model, &data.eval.neutral, r, g, samples, &mut rng)?);
            }
            let mut csv = String::from("vertex,region_of");
            for p in &profiles {
                csv.push_str(&format!(",edit_{}", p.region));
            }
            csv.push('\n');
            for v in 0..data.template.num_vertices() {
                csv.push_str(&format!("{v},{}", data.template.region_of()[v]));
                for p in &profiles {
                    csv.push_str(&format!(",{:.6e}", p.field[v]));
                }
                csv.push('\n');
            }
            std::fs::write(&path, csv)?;
            writeln!(out, "region,name,inside,outside,leakage")?;
            for p in &profiles {
                writeln!(
                    out,
                    "{},{},{:.6e},{:.6e},{:.4}",
                    p.region,
                    data.template.region_names()[p.region],
                    p.inside,
                    p.outside,
                    p.leakage
                )?;
            }
        }
        Command::Serve { ckpt, port, priors } => {
            let model = LammModel::load(&ckpt)?;
            let p = priors.load(&model, false)?;
            let port = match port {
                Some(p) => p,
                None => match std::env::var(PORT_ENV) {
                    Ok(v) => v
                        .parse()
                        .map_err(|_| Error::invalid(format!("{PORT_ENV}={v:?} is not a port")))?,
                    Err(_) => file.serve.port,
                },
            };
            let state = Arc::new(AppState::with_undo_limit(model, p, file.serve.undo_limit));
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let addr = std::net::SocketAddr::from(([0, 0, 0, 0], port));
                tokio::select! {
                    r = serve::serve(state, addr) => r,
                    _ = tokio::signal::ctrl_c() => Ok(()),
                }
            })?;
        }
    }
    Ok(())
}

/// Randomly initialized model on a synthetic sphere template.
pub fn bench_model(rings: usize, segments: usize, dim: usize, backbone: Backbone, seed: u64) -> Result<LammModel> {
    let head = synth::HeadModel::new(&SynthSpec {
        rings,
        segments,
        ..Default::default()
    })?;
    let t = head.template().clone();
    let cfg = LammConfig::for_template(&t, backbone, dim, 32);
    LammModel::new(cfg, t, seed)
}

pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
