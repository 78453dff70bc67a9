//! Synthetic registered head dataset.
//!
//! The template is a UV sphere squashed into an ellipsoid. Identities are a
//! small global scale change plus moving cosine bumps pushed along the
//! surface normal; expressions are cosine-bump blendshapes confined to one
//! region each. Every sample comes as a neutral/expressive pair of the same
//! identity.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{
    mean_center, read_batch, read_template, write_batch, write_template, Faces, Mesh,
    ShapeBatch, Template,
};

const HEAD_SEEDS: [([f64; 3], &str); 8] = [
    ([0.0, 1.0, 0.0], "crown"),
    ([0.0, 0.2, -1.0], "back"),
    ([1.0, 0.1, 0.0], "right"),
    ([-1.0, 0.1, 0.0], "left"),
    ([0.0, 0.6, 0.8], "forehead"),
    ([0.0, 0.0, 1.0], "nose"),
    ([0.0, -0.5, 0.85], "mouth"),
    ([0.0, -1.0, -0.1], "neck"),
];

const GLOBAL_SCALE: f64 = 0.03;
const IDENTITY_AMPLITUDE: f64 = 0.15;
const IDENTITY_WIDTH: f64 = 0.3;
const IDENTITY_SHIFT: f64 = 0.5;
const EXPRESSION_AMPLITUDE: f64 = 0.12;
const CONTROL_MARGIN: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub rings: usize,
    pub segments: usize,
    pub axis_scale: [f64; 3],
    pub regions: usize,
    pub controls_per_region: usize,
    /// Number of moving identity bumps `P`.
    pub identity_factors: usize,
    /// Number of blendshapes `E`.
    pub expressions: usize,
    pub identities: usize,
    /// Standard deviation of per-vertex Gaussian jitter.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rings: 30,
            segments: 40,
            axis_scale: [0.8, 1.0, 0.9],
            regions: 8,
            controls_per_region: 5,
            identity_factors: 8,
            expressions: 8,
            identities: 1000,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 10 {
            return Err(Error::invalid(format!(
                "dataset size {} is below the minimum of 10",
                self.identities
            )));
        }
        if self.identity_factors == 0 {
            return Err(Error::Degenerate("spec has zero identity factors".into()));
        }
        if self.rings < 2 || self.segments < 3 {
            return Err(Error::invalid("sphere needs at least 2 rings and 3 segments"));
        }
        if self.regions == 0 || self.controls_per_region == 0 {
            return Err(Error::invalid("need at least one region and one control per region"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn eval_count(&self) -> usize {
        self.identities / 10
    }
}

/// Per-identity shape parameters, all in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub scale: [f64; 3],
    pub amplitude: Vec<f64>,
    pub shift: Vec<[f64; 2]>,
}

impl IdentityParams {
    pub fn zero(p: usize) -> Self {
        Self {
            scale: [0.0; 3],
            amplitude: vec![0.0; p],
            shift: vec![[0.0; 2]; p],
        }
    }

    fn sample(p: usize, rng: &mut impl Rng) -> Self {
        let mut u = || rng.random_range(-1.0..1.0);
        Self {
            scale: [u(), u(), u()],
            amplitude: (0..p).map(|_| u()).collect(),
            shift: (0..p).map(|_| [u(), u()]).collect(),
        }
    }
}

/// Localized additive displacement fields.
#[derive(Debug, Clone)]
pub struct Blendshapes {
    fields: Vec<Vec<[f32; 3]>>,
    support: Vec<usize>,
}

impl Blendshapes {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field(&self, e: usize) -> &[[f32; 3]] {
        &self.fields[e]
    }

    /// Region whose vertices blendshape `e` may move.
    pub fn support_region(&self, e: usize) -> usize {
        self.support[e]
    }

    /// `mesh + Σ_e c_e · blendshape_e`.
    pub fn apply(&self, mesh: &Mesh, coefficients: &[f32]) -> Result<Mesh> {
        if coefficients.len() != self.fields.len() {
            return Err(Error::invalid(format!(
                "{} coefficients for {} blendshapes",
                coefficients.len(),
                self.fields.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("expression coefficient".into()));
        }
        if mesh.num_vertices() != self.fields.first().map_or(mesh.num_vertices(), Vec::len) {
            return Err(Error::partition("mesh does not match blendshape vertex count"));
        }
        let mut out = mesh.clone();
        for (field, &c) in self.fields.iter().zip(coefficients) {
            if c == 0.0 {
                continue;
            }
            for (v, d) in out.vertices.iter_mut().zip(field) {
                for k in 0..3 {
                    v[k] += c * d[k];
                }
            }
        }
        Ok(out)
    }
}

/// Everything derived from a spec that does not depend on sampling.
pub struct HeadModel {
    spec: SynthSpec,
    directions: Vec<[f64; 3]>,
    normals: Vec<[f64; 3]>,
    faces: Faces,
    identity_centers: Vec<[f64; 3]>,
    template: Template,
    blendshapes: Blendshapes,
}

impl HeadModel {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let (directions, faces) = uv_sphere(spec.rings, spec.segments);
        let faces: Faces = Arc::new(faces);
        let base: Vec<[f64; 3]> = directions
            .iter()
            .map(|d| [d[0] * spec.axis_scale[0], d[1] * spec.axis_scale[1], d[2] * spec.axis_scale[2]])
            .collect();
        let normals: Vec<[f64; 3]> = base.iter().map(|&b| normalize(b)).collect();

        let (seeds, names) = region_seeds(spec.regions);
        let region_of: Vec<usize> = directions
            .iter()
            .map(|d| argmax(seeds.iter().map(|s| dot(*d, *s))))
            .collect();
        let mut regions = vec![Vec::new(); spec.regions];
        for (v, &r) in region_of.iter().enumerate() {
            regions[r].push(v as u32);
        }
        if let Some(r) = regions.iter().position(Vec::is_empty) {
            return Err(Error::Degenerate(format!(
                "region {r} received no vertices; use a finer sphere"
            )));
        }
        let clearance = outside_clearance(&directions, &region_of);
        let mut on_border = vec![false; region_of.len()];
        for f in faces.iter() {
            if f.iter().any(|&v| region_of[v as usize] != region_of[f[0] as usize]) {
                for &v in f {
                    on_border[v as usize] = true;
                }
            }
        }
        let controls = regions
            .iter()
            .enumerate()
            .map(|(r, set)| {
                let eligible: Vec<u32> = set
                    .iter()
                    .copied()
                    .filter(|&v| !on_border[v as usize] && clearance[v as usize] > CONTROL_MARGIN)
                    .collect();
                pick_controls(r, &eligible, &directions, &clearance, spec.controls_per_region)
            })
            .collect::<Result<Vec<_>>>()?;

        let identity_centers = (0..spec.identity_factors)
            .map(|p| {
                if p < HEAD_SEEDS.len() {
                    normalize(HEAD_SEEDS[p].0)
                } else {
                    fibonacci_point(p - HEAD_SEEDS.len(), spec.identity_factors - HEAD_SEEDS.len())
                }
            })
            .collect();

        let mut fields = Vec::with_capacity(spec.expressions);
        let mut support = Vec::with_capacity(spec.expressions);
        for e in 0..spec.expressions {
            let r = e % spec.regions;
            let slot = (e / spec.regions) % controls[r].len();
            let centre = controls[r][slot] as usize;
            let radius = 0.9 * clearance[centre];
            let c = directions[centre];
            let field = directions
                .iter()
                .zip(&normals)
                .zip(&region_of)
                .map(|((d, n), &rv)| {
                    let w = if rv == r {
                        EXPRESSION_AMPLITUDE * bump(*d, c, radius)
                    } else {
                        0.0
                    };
                    [(w * n[0]) as f32, (w * n[1]) as f32, (w * n[2]) as f32]
                })
                .collect();
            fields.push(field);
            support.push(r);
        }

        let mut head = Self {
            spec: spec.clone(),
            directions,
            normals,
            faces: faces.clone(),
            identity_centers,
            template: Template::new(
                Mesh::new(vec![[0.0; 3]; region_of.len()], faces)?,
                regions,
                controls,
                Some(names),
            )?,
            blendshapes: Blendshapes { fields, support },
        };
        let reference = head.identity_mesh(&IdentityParams::zero(spec.identity_factors))?;
        head.template = Template::new(
            reference,
            head.template.partition().sets().to_vec(),
            head.template.control_sets().to_vec(),
            Some(head.template.region_names().to_vec()),
        )?;
        Ok(head)
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn blendshapes(&self) -> &Blendshapes {
        &self.blendshapes
    }

    /// Neutral mesh of one identity; all-zero parameters give the reference.
    pub fn identity_mesh(&self, p: &IdentityParams) -> Result<Mesh> {
        let np = self.spec.identity_factors;
        if p.amplitude.len() != np || p.shift.len() != np {
            return Err(Error::invalid(format!(
                "identity has {} factors, spec has {np}",
                p.amplitude.len()
            )));
        }
        let centers: Vec<[f64; 3]> = self
            .identity_centers
            .iter()
            .zip(&p.shift)
            .map(|(&c, s)| {
                let (t1, t2) = tangent_frame(c);
                let c = rotate_towards(c, t1, IDENTITY_SHIFT * s[0]);
                normalize(rotate_towards(c, t2, IDENTITY_SHIFT * s[1]))
            })
            .collect();
        let a = self.spec.axis_scale;
        let vertices = self
            .directions
            .iter()
            .zip(&self.normals)
            .map(|(d, n)| {
                let disp: f64 = centers
                    .iter()
                    .zip(&p.amplitude)
                    .map(|(&c, &amp)| {
                        IDENTITY_AMPLITUDE * (0.5 + 0.5 * amp) * bump(*d, c, IDENTITY_WIDTH)
                    })
                    .sum();
                let mut v = [0.0f32; 3];
                for k in 0..3 {
                    let base = d[k] * a[k] * (1.0 + GLOBAL_SCALE * p.scale[k]);
                    v[k] = (base + disp * n[k]) as f32;
                }
                v
            })
            .collect();
        Mesh::new(vertices, self.faces.clone())
    }
}

/// One side of the split: neutral and expressive meshes, index-aligned.
#[derive(Debug, Clone)]
pub struct Split {
    pub neutral: ShapeBatch,
    pub expressive: ShapeBatch,
    pub identity_ids: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.neutral.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neutral.is_empty()
    }
}

/// A template plus mean-centered train and eval splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub template: Template,
    pub train: Split,
    pub eval: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleLabel {
    pub identity: usize,
    pub split: String,
    pub identity_params: IdentityParams,
    pub expression: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlendshapeLabel {
    pub index: usize,
    pub region: usize,
    pub region_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Labels {
    pub spec: SynthSpec,
    pub blendshapes: Vec<BlendshapeLabel>,
    pub samples: Vec<SampleLabel>,
}

/// Sample a dataset. Identities `0..n-n/10` train, the rest evaluate.
pub fn generate_dataset(spec: &SynthSpec) -> Result<(Dataset, Labels)> {
    let head = HeadModel::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let n_eval = spec.eval_count();
    let n_train = spec.identities - n_eval;
    let nv = head.template.num_vertices();

    let mut neutral = Vec::with_capacity(spec.identities * nv * 3);
    let mut expressive = Vec::with_capacity(spec.identities * nv * 3);
    let mut samples = Vec::with_capacity(spec.identities);
    for id in 0..spec.identities {
        let params = IdentityParams::sample(spec.identity_factors, &mut rng);
        let coeffs: Vec<f32> = (0..spec.expressions).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = head.identity_mesh(&params)?;
        let x = head.blendshapes.apply(&m, &coeffs)?;
        for (dst, mesh) in [(&mut neutral, &m), (&mut expressive, &x)] {
            for v in &mesh.vertices {
                for &c in v {
                    let noise = if spec.noise > 0.0 {
                        jitter.sample(&mut rng) as f32
                    } else {
                        0.0
                    };
                    dst.push(c + noise);
                }
            }
        }
        samples.push(SampleLabel {
            identity: id,
            split: if id < n_train { "train" } else { "eval" }.into(),
            identity_params: params,
            expression: coeffs,
        });
    }

    let split_at = n_train * nv * 3;
    let train_neutral = ShapeBatch::new(nv, neutral[..split_at].to_vec())?;
    let (_, mean) = mean_center(&train_neutral);
    let template = head.template.clone().with_mean(mean)?;
    let center = |raw: &[f32]| -> Result<ShapeBatch> {
        ShapeBatch::new(nv, center_flat(raw, template.mean()))
    };
    let dataset = Dataset {
        train: Split {
            neutral: center(&neutral[..split_at])?,
            expressive: center(&expressive[..split_at])?,
            identity_ids: (0..n_train).collect(),
        },
        eval: Split {
            neutral: center(&neutral[split_at..])?,
            expressive: center(&expressive[split_at..])?,
            identity_ids: (n_train..spec.identities).collect(),
        },
        template,
    };
    let blendshapes = (0..head.blendshapes.len())
        .map(|e| {
            let r = head.blendshapes.support_region(e);
            BlendshapeLabel {
                index: e,
                region: r,
                region_name: head.template.region_names()[r].clone(),
            }
        })
        .collect();
    Ok((
        dataset,
        Labels {
            spec: spec.clone(),
            blendshapes,
            samples,
        },
    ))
}

fn center_flat(raw: &[f32], mean: &[[f32; 3]]) -> Vec<f32> {
    raw.chunks_exact(3)
        .zip(mean.iter().cycle())
        .flat_map(|(v, m)| [v[0] - m[0], v[1] - m[1], v[2] - m[2]])
        .collect()
}

fn uncenter_flat(centered: &[f32], mean: &[[f32; 3]]) -> Vec<f32> {
    centered
        .chunks_exact(3)
        .zip(mean.iter().cycle())
        .flat_map(|(v, m)| [v[0] + m[0], v[1] + m[1], v[2] + m[2]])
        .collect()
}

const FILES: [&str; 4] = ["train.bin", "train_expr.bin", "eval.bin", "eval_expr.bin"];

impl Dataset {
    /// Write `template.json` and the four batch files (stored un-centered).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_template(&self.template, dir.join("template.json"))?;
        let k = self.template.num_regions();
        let nv = self.template.num_vertices();
        let batches = [
            &self.train.neutral,
            &self.train.expressive,
            &self.eval.neutral,
            &self.eval.expressive,
        ];
        for (name, b) in FILES.iter().zip(batches) {
            let raw = ShapeBatch::new(nv, uncenter_flat(b.data(), self.template.mean()))?;
            write_batch(&raw, k, dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let template = read_template(dir.join("template.json"))?;
        let nv = template.num_vertices();
        let mut batches = Vec::with_capacity(4);
        for name in FILES {
            let path = dir.join(name);
            let (raw, k) = read_batch(&path)?;
            if raw.num_vertices() != nv || k != template.num_regions() {
                return Err(Error::TemplateMismatch {
                    expected: format!("{nv} vertices, {} regions", template.num_regions()),
                    found: format!("{} vertices, {k} regions in {}", raw.num_vertices(), path.display()),
                });
            }
            batches.push(ShapeBatch::new(nv, center_flat(raw.data(), template.mean()))?);
        }
        let mut it = batches.into_iter();
        let (tn, te, en, ee) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        if tn.len() != te.len() || en.len() != ee.len() {
            return Err(Error::invalid("neutral and expressive batches differ in size"));
        }
        let n_train = tn.len();
        Ok(Self {
            train: Split {
                identity_ids: (0..n_train).collect(),
                neutral: tn,
                expressive: te,
            },
            eval: Split {
                identity_ids: (n_train..n_train + en.len()).collect(),
                neutral: en,
                expressive: ee,
            },
            template,
        })
    }
}

pub fn write_labels(labels: &Labels, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(labels)?)?;
    Ok(())
}

/// Every face keeps a nonzero area with the same orientation as in `reference`.
pub fn faces_consistent(mesh: &Mesh, reference: &Mesh) -> bool {
    mesh.face_area_vectors()
        .iter()
        .zip(reference.face_area_vectors())
        .all(|(a, r)| a[0] * r[0] + a[1] * r[1] + a[2] * r[2] > 0.0)
}

fn uv_sphere(rings: usize, segments: usize) -> (Vec<[f64; 3]>, Vec<Vec<u32>>) {
    let mut v = vec![[0.0, 1.0, 0.0]];
    for r in 1..=rings {
        let th = PI * r as f64 / (rings + 1) as f64;
        for s in 0..segments {
            let ph = 2.0 * PI * s as f64 / segments as f64;
            v.push([th.sin() * ph.sin(), th.cos(), th.sin() * ph.cos()]);
        }
    }
    v.push([0.0, -1.0, 0.0]);
    let idx = |r: usize, s: usize| (1 + (r - 1) * segments + s % segments) as u32;
    let last = (v.len() - 1) as u32;
    let mut f = Vec::new();
    for s in 0..segments {
        f.push(vec![0, idx(1, s + 1), idx(1, s)]);
    }
    for r in 1..rings {
        for s in 0..segments {
            f.push(vec![idx(r, s), idx(r, s + 1), idx(r + 1, s + 1), idx(r + 1, s)]);
        }
    }
    for s in 0..segments {
        f.push(vec![idx(rings, s), idx(rings, s + 1), last]);
    }
    (v, f)
}

fn region_seeds(k: usize) -> (Vec<[f64; 3]>, Vec<String>) {
    if k == HEAD_SEEDS.len() {
        HEAD_SEEDS
            .iter()
            .map(|(s, n)| (normalize(*s), n.to_string()))
            .unzip()
    } else {
        (0..k).map(|i| (fibonacci_point(i, k), format!("region_{i}"))).unzip()
    }
}

fn fibonacci_point(i: usize, n: usize) -> [f64; 3] {
    let golden = PI * (3.0 - 5f64.sqrt());
    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
    let r = (1.0 - y * y).sqrt();
    let th = golden * i as f64;
    [r * th.cos(), y, r * th.sin()]
}

/// Angular distance from each vertex to the nearest vertex of another region.
fn outside_clearance(dirs: &[[f64; 3]], region_of: &[usize]) -> Vec<f64> {
    dirs.iter()
        .zip(region_of)
        .map(|(d, &r)| {
            let best = dirs
                .iter()
                .zip(region_of)
                .filter(|(_, &o)| o != r)
                .map(|(o, _)| dot(*d, *o))
                .fold(-1.0f64, f64::max);
            best.clamp(-1.0, 1.0).acos()
        })
        .collect()
}

/// Farthest-point sampling over `eligible`, starting at its most interior vertex.
fn pick_controls(
    region: usize,
    eligible: &[u32],
    dirs: &[[f64; 3]],
    clearance: &[f64],
    count: usize,
) -> Result<Vec<u32>> {
    if eligible.len() < count {
        return Err(Error::Degenerate(format!(
            "region {region} has {} interior vertices, {count} controls requested",
            eligible.len()
        )));
    }
    let centre = eligible[argmax(eligible.iter().map(|&v| clearance[v as usize]))];
    let mut picked = vec![centre];
    let mut dist: Vec<f64> = eligible
        .iter()
        .map(|&v| dist2(dirs[v as usize], dirs[centre as usize]))
        .collect();
    while picked.len() < count {
        let j = argmax(dist.iter().copied());
        let next = eligible[j];
        picked.push(next);
        for (d, &v) in dist.iter_mut().zip(eligible) {
            *d = d.min(dist2(dirs[v as usize], dirs[next as usize]));
        }
    }
    Ok(picked)
}

fn bump(d: [f64; 3], c: [f64; 3], radius: f64) -> f64 {
    let ang = dot(d, c).clamp(-1.0, 1.0).acos();
    if ang < radius {
        0.5 * (1.0 + (PI * ang / radius).cos())
    } else {
        0.0
    }
}

fn tangent_frame(c: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = if c[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let t = normalize(mesh_cross(c, a));
    (t, mesh_cross(c, t))
}

fn rotate_towards(c: [f64; 3], t: [f64; 3], ang: f64) -> [f64; 3] {
    let (s, co) = ang.sin_cos();
    [c[0] * co + t[0] * s, c[1] * co + t[1] * s, c[2] * co + t[2] * s]
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn mesh_cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Coarse sphere for quick runs.
pub fn small_spec(identities: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        rings: 20,
        segments: 26,
        controls_per_region: 2,
        identities,
        seed,
        ..Default::default()
    }
}
