//! Editing on top of direct control: rigid boundary alignment, region swap,
//! Gaussian sampling of latents and control displacements, interpolation
//! and the disentanglement profile.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, ShapeBatch, Template};
use crate::model::LammModel;

/// `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub const IDENTITY: Self = Self {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }

    pub fn determinant(&self) -> f64 {
        Matrix3::from_fn(|i, j| self.rotation[i][j]).determinant()
    }
}

/// Sum of squared distances `Σ‖T(t_j) − s_j‖²`.
pub fn alignment_residual(t: &RigidTransform, source: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(s, p)| {
            let q = t.apply(*p);
            (0..3).map(|k| (q[k] - s[k]).powi(2)).sum::<f64>()
        })
        .sum()
}

/// Least-squares rotation and translation carrying `target` onto `source`.
pub fn rigid_align(source: &[[f64; 3]], target: &[[f64; 3]]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::invalid(format!(
            "point sets differ in size: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::Degenerate(format!("{} points cannot fix a rotation", source.len())));
    }
    let centroid = |pts: &[[f64; 3]]| {
        pts.iter().fold(Vector3::zeros(), |a, p| a + Vector3::from(*p)) / pts.len() as f64
    };
    let (cs, ct) = (centroid(source), centroid(target));
    let spread = |pts: &[[f64; 3]], c: &Vector3<f64>| {
        let mut m = Matrix3::zeros();
        for p in pts {
            let d = Vector3::from(*p) - c;
            m += d * d.transpose();
        }
        m
    };
    for (pts, c) in [(source, &cs), (target, &ct)] {
        let eig = spread(pts, c).symmetric_eigenvalues();
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        if e[1] <= 1e-12 * e[2].max(f64::MIN_POSITIVE) || e[2] <= 0.0 {
            return Err(Error::Degenerate("points are collinear or coincident".into()));
        }
    }
    if source == target {
        return Ok(RigidTransform::IDENTITY);
    }
    let mut h = Matrix3::zeros();
    for (s, p) in source.iter().zip(target) {
        h += (Vector3::from(*p) - ct) * (Vector3::from(*s) - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = cs - r * ct;
    Ok(RigidTransform {
        rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
        translation: [t[0], t[1], t[2]],
    })
}

/// Relative ridge added to covariances before factorization.
pub const RIDGE: f64 = 1e-6;
/// Standard-normal draws are clipped to this many deviations.
pub const CLIP_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceFactor {
    /// Row-major lower-triangular `L` with `LLᵀ = Σ`.
    Full(Vec<f64>),
    /// Per-coordinate standard deviations.
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianModel {
    pub mean: Vec<f64>,
    pub factor: CovarianceFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Covariance {
    Full,
    Diagonal,
}

impl GaussianModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Σ = LLᵀ` (or the diagonal), row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let n = self.dim();
        let mut c = vec![0.0; n * n];
        match &self.factor {
            CovarianceFactor::Full(l) => {
                for i in 0..n {
                    for j in 0..n {
                        c[i * n + j] = (0..=i.min(j)).map(|k| l[i * n + k] * l[j * n + k]).sum();
                    }
                }
            }
            CovarianceFactor::Diagonal(s) => {
                for i in 0..n {
                    c[i * n + i] = s[i] * s[i];
                }
            }
        }
        c
    }

    /// Maps standard-normal `eps` (already clipped) through the factor.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        let n = self.dim();
        match &self.factor {
            CovarianceFactor::Full(l) => (0..n)
                .map(|i| self.mean[i] + (0..=i).map(|k| l[i * n + k] * eps[k]).sum::<f64>())
                .collect(),
            CovarianceFactor::Diagonal(s) => (0..n).map(|i| self.mean[i] + s[i] * eps[i]).collect(),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal).clamp(-CLIP_SIGMA, CLIP_SIGMA))
            .collect();
        self.transform(&eps)
    }

    pub fn sample_f32(&self, rng: &mut impl Rng) -> Vec<f32> {
        self.sample(rng).into_iter().map(|v| v as f32).collect()
    }
}

/// Maximum-likelihood Gaussian over `samples` (one row each). The ridge is
/// relative to the mean variance, so constant samples keep a zero factor.
pub fn fit_gaussian(samples: &[Vec<f64>], kind: Covariance) -> Result<GaussianModel> {
    let s = samples.len();
    if s < 2 {
        return Err(Error::invalid(format!("{s} samples; a covariance needs at least 2")));
    }
    let n = samples[0].len();
    if n == 0 || samples.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("samples must share one positive dimension"));
    }
    let mut mean = vec![0.0; n];
    for r in samples {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s as f64);
    let centered = DMatrix::from_fn(s, n, |r, c| samples[r][c] - mean[c]);
    let factor = match kind {
        Covariance::Diagonal => {
            let var: Vec<f64> = (0..n).map(|c| centered.column(c).norm_squared() / s as f64).collect();
            let ridge = RIDGE * var.iter().sum::<f64>() / n as f64;
            CovarianceFactor::Diagonal(var.iter().map(|v| (v + ridge).sqrt()).collect())
        }
        Covariance::Full => {
            let mut cov = centered.transpose() * &centered / s as f64;
            let ridge = RIDGE * cov.trace() / n as f64;
            for i in 0..n {
                cov[(i, i)] += ridge;
            }
            let l = if ridge == 0.0 {
                DMatrix::zeros(n, n)
            } else {
                cov.cholesky()
                    .ok_or_else(|| Error::Degenerate("covariance is not positive definite".into()))?
                    .l()
            };
            CovarianceFactor::Full((0..n * n).map(|k| l[(k / n, k % n)]).collect())
        }
    };
    Ok(GaussianModel { mean, factor })
}

fn gather(flat: &[f32], idx: &[u32]) -> Vec<[f64; 3]> {
    idx.iter()
        .map(|&v| std::array::from_fn(|k| flat[3 * v as usize + k] as f64))
        .collect()
}

fn check_region(t: &Template, i: usize) -> Result<()> {
    if i >= t.num_regions() {
        return Err(Error::invalid(format!("region {i} out of range 0..{}", t.num_regions())));
    }
    Ok(())
}

/// Displacements `[3|C_i|]` taking `recipient`'s region-`i` controls to the
/// donor's, after aligning the donor's region boundary onto the recipient's.
pub fn aligned_control_displacement(t: &Template, recipient: &[f32], donor: &[f32], i: usize) -> Result<Vec<f32>> {
    check_region(t, i)?;
    let boundary = t.boundary(i);
    let transform = if boundary.len() >= 3 {
        rigid_align(&gather(recipient, boundary), &gather(donor, boundary))?
    } else {
        RigidTransform::IDENTITY
    };
    let controls = t.controls(i);
    let rc = gather(recipient, controls);
    let dc = gather(donor, controls);
    Ok(rc
        .iter()
        .zip(&dc)
        .flat_map(|(r, d)| {
            let a = transform.apply(*d);
            [0, 1, 2].map(|k| (a[k] - r[k]) as f32)
        })
        .collect())
}

/// Per-region displacement lists with only region `i` filled.
pub fn single_region_deltas(t: &Template, i: usize, delta: &[f32]) -> Result<Vec<Vec<f32>>> {
    check_region(t, i)?;
    if delta.len() != 3 * t.controls(i).len() {
        return Err(Error::ShapeMismatch {
            op: "region displacement",
            lhs: vec![3 * t.controls(i).len()],
            rhs: vec![delta.len()],
        });
    }
    Ok((0..t.num_regions())
        .map(|r| if r == i { delta.to_vec() } else { vec![0.0; 3 * t.controls(r).len()] })
        .collect())
}

fn centered(model: &LammModel, mesh: &Mesh) -> Result<Vec<f32>> {
    model.template().center(mesh)
}

fn to_mesh(model: &LammModel, centered: &[f32]) -> Mesh {
    model.template().uncenter(centered)
}

/// Replace region `i` of `recipient` by the donor's, driven through its controls.
pub fn region_swap(model: &LammModel, recipient: &Mesh, donor: &Mesh, i: usize) -> Result<Mesh> {
    let (r, d) = (centered(model, recipient)?, centered(model, donor)?);
    let delta = aligned_control_displacement(model.template(), &r, &d, i)?;
    let deltas = single_region_deltas(model.template(), i, &delta)?;
    Ok(to_mesh(model, &model.forward(&r, &deltas)?))
}

/// Full-covariance Gaussian over the latent codes of `batch` (centered).
pub fn fit_latent_gaussian(model: &LammModel, batch: &ShapeBatch) -> Result<GaussianModel> {
    let z = model.encode_latent(batch.data())?;
    let d = model.config().latent;
    let rows: Vec<Vec<f64>> = z.chunks_exact(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    fit_gaussian(&rows, Covariance::Full)
}

pub fn sample_identity(model: &LammModel, g_z: &GaussianModel, rng: &mut impl Rng) -> Result<Mesh> {
    let z = g_z.sample_f32(rng);
    Ok(to_mesh(model, &model.decode(&z, None)?))
}

/// Diagonal Gaussians over aligned per-region control displacements of
/// `source → target` pairs. Pairs whose region does not move are skipped.
pub fn fit_region_gaussians(t: &Template, source: &ShapeBatch, target: &ShapeBatch) -> Result<Vec<GaussianModel>> {
    if source.len() != target.len() {
        return Err(Error::invalid("source and target batches differ in size"));
    }
    (0..t.num_regions())
        .map(|i| {
            let rows: Vec<Vec<f64>> = (0..source.len())
                .map(|b| aligned_control_displacement(t, source.sample(b), target.sample(b), i))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .map(|d| d.into_iter().map(|v| v as f64).collect::<Vec<f64>>())
                .collect();
            let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            let top = norms.iter().copied().fold(0.0, f64::max);
            let valid: Vec<Vec<f64>> = rows
                .iter()
                .zip(&norms)
                .filter(|(_, &n)| n > 1e-3 * top)
                .map(|(r, _)| r.clone())
                .collect();
            fit_gaussian(if valid.len() >= 2 { &valid } else { &rows }, Covariance::Diagonal)
        })
        .collect()
}

pub fn sample_region(
    model: &LammModel,
    base: &Mesh,
    i: usize,
    g_delta: &GaussianModel,
    rng: &mut impl Rng,
) -> Result<Mesh> {
    let x = centered(model, base)?;
    let deltas = single_region_deltas(model.template(), i, &g_delta.sample_f32(rng))?;
    Ok(to_mesh(model, &model.forward(&x, &deltas)?))
}

/// Decodes of `(1−t)·z_a + t·z_b` for `steps` evenly spaced `t ∈ [0, 1]`.
pub fn interpolate_latent(model: &LammModel, a: &Mesh, b: &Mesh, steps: usize) -> Result<Vec<Mesh>> {
    if steps < 2 {
        return Err(Error::invalid(format!("{steps} interpolation steps; need at least 2")));
    }
    let za = model.encode_latent(&centered(model, a)?)?;
    let zb = model.encode_latent(&centered(model, b)?)?;
    let z: Vec<f32> = (0..steps)
        .flat_map(|k| {
            let t = k as f32 / (steps - 1) as f32;
            za.iter().zip(&zb).map(move |(&x, &y)| (1.0 - t) * x + t * y).collect::<Vec<_>>()
        })
        .collect();
    let out = model.decode(&z, None)?;
    let nf = 3 * model.template().num_vertices();
    Ok(out.chunks_exact(nf).map(|c| to_mesh(model, c)).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct DisentanglementProfile {
    pub region: usize,
    /// Mean per-vertex distance between the AE reconstruction and the edits.
    pub field: Vec<f64>,
    pub inside: f64,
    pub outside: f64,
    pub leakage: f64,
}

const PROFILE_CHUNK: usize = 200;

/// Edit region `i` of every mesh of `eval` (centered) with `samples` draws of
/// `g_delta` and average the per-vertex change against the reconstruction.
pub fn disentanglement_profile(
    model: &LammModel,
    eval: &ShapeBatch,
    i: usize,
    g_delta: &GaussianModel,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<DisentanglementProfile> {
    let t = model.template();
    check_region(t, i)?;
    let nv = t.num_vertices();
    let nf = 3 * nv;
    let z = model.encode_latent(eval.data())?;
    let d = model.config().latent;
    let mut field = vec![0.0f64; nv];
    let jobs: Vec<usize> = (0..eval.len()).flat_map(|m| std::iter::repeat_n(m, samples)).collect();
    for chunk in jobs.chunks(PROFILE_CHUNK) {
        let zc: Vec<f32> = chunk.iter().flat_map(|&m| z[m * d..(m + 1) * d].to_vec()).collect();
        let mut deltas = model.zero_deltas(chunk.len());
        let c = 3 * t.controls(i).len();
        for j in 0..chunk.len() {
            deltas[i][j * c..(j + 1) * c].copy_from_slice(&g_delta.sample_f32(rng));
        }
        // same batch shape for both decodes keeps the comparison exact
        let rec = model.decode(&zc, None)?;
        let out = model.decode(&zc, Some(&deltas))?;
        for j in 0..chunk.len() {
            let (o, r) = (&out[j * nf..(j + 1) * nf], &rec[j * nf..(j + 1) * nf]);
            for (v, f) in field.iter_mut().enumerate() {
                let s: f32 = (0..3).map(|k| (o[3 * v + k] - r[3 * v + k]).powi(2)).sum();
                *f += s.sqrt() as f64;
            }
        }
    }
    let total = jobs.len().max(1) as f64;
    field.iter_mut().for_each(|f| *f /= total);
    let region = t.region(i);
    let inside = region.iter().map(|&v| field[v as usize]).sum::<f64>() / region.len() as f64;
    let outside_n = nv - region.len();
    let outside = if outside_n == 0 {
        0.0
    } else {
        (field.iter().sum::<f64>() - inside * region.len() as f64) / outside_n as f64
    };
    let leakage = if inside > 0.0 { outside / inside } else { 0.0 };
    Ok(DisentanglementProfile {
        region: i,
        field,
        inside,
        outside,
        leakage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_model;
    use crate::model::Backbone;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rot_z(theta: f64) -> [[f64; 3]; 3] {
        let (s, c) = theta.sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    fn points() -> Vec<[f64; 3]> {
        vec![[0.0, 0.0, 0.0], [1.0, 0.2, 0.0], [0.3, 1.1, 0.4], [0.5, -0.4, 0.9], [-0.7, 0.1, 0.2]]
    }

    #[test]
    fn identical_sets_give_identity() {
        let p = points();
        assert_eq!(rigid_align(&p, &p).unwrap(), RigidTransform::IDENTITY);
    }

    #[test]
    fn recovers_inverse_of_quarter_turn_and_shift() {
        let src = points();
        let fwd = RigidTransform {
            rotation: rot_z(std::f64::consts::FRAC_PI_2),
            translation: [1.0, 2.0, 3.0],
        };
        let tgt: Vec<[f64; 3]> = src.iter().map(|p| fwd.apply(*p)).collect();
        let t = rigid_align(&src, &tgt).unwrap();
        // inverse of x ↦ Rx + s is x ↦ Rᵀx − Rᵀs
        let r = rot_z(-std::f64::consts::FRAC_PI_2);
        for i in 0..3 {
            for j in 0..3 {
                assert!((t.rotation[i][j] - r[i][j]).abs() < 1e-6);
            }
        }
        let want = [-2.0, 1.0, -3.0];
        for k in 0..3 {
            assert!((t.translation[k] - want[k]).abs() < 1e-6, "{:?}", t.translation);
        }
    }

    #[test]
    fn reflection_is_excluded() {
        let src = points();
        let tgt: Vec<[f64; 3]> = src.iter().map(|p| [p[0], p[1], -p[2]]).collect();
        let t = rigid_align(&src, &tgt).unwrap();
        assert!((t.determinant() - 1.0).abs() < 1e-9);
        let id = alignment_residual(&RigidTransform::IDENTITY, &src, &tgt);
        assert!(alignment_residual(&t, &src, &tgt) <= id + 1e-12);
    }

    #[test]
    fn degenerate_sets_are_errors() {
        let line: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(matches!(rigid_align(&line, &line), Err(Error::Degenerate(_))));
        assert!(rigid_align(&points()[..2], &points()[..2]).is_err());
    }

    #[test]
    fn gaussian_of_plus_minus_one() {
        let g = fit_gaussian(&[vec![-1.0], vec![1.0]], Covariance::Full).unwrap();
        assert_eq!(g.mean, vec![0.0]);
        assert!((g.covariance()[0] - 1.0).abs() < 1e-5);
        let g = fit_gaussian(&[vec![-1.0], vec![1.0]], Covariance::Diagonal).unwrap();
        assert!((g.covariance()[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_samples_always_sample_the_mean() {
        let rows = vec![vec![0.5, -2.0, 3.0]; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [Covariance::Full, Covariance::Diagonal] {
            let g = fit_gaussian(&rows, kind).unwrap();
            assert!(g.covariance().iter().all(|&c| c == 0.0));
            for _ in 0..10 {
                assert_eq!(g.sample(&mut rng), rows[0]);
            }
        }
        assert!(fit_gaussian(&rows[..1], Covariance::Full).is_err());
    }

    #[test]
    fn full_covariance_matches_sample_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                vec![a, a + 0.5 * b, -b]
            })
            .collect();
        let g = fit_gaussian(&rows, Covariance::Full).unwrap();
        let c = g.covariance();
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 =
                    rows.iter().map(|r| (r[i] - g.mean[i]) * (r[j] - g.mean[j])).sum::<f64>() / 50.0;
                let ridge = if i == j { RIDGE * (0..3).map(|k| c[k * 3 + k]).sum::<f64>() / 3.0 } else { 0.0 };
                assert!((c[i * 3 + j] - want - ridge).abs() < 1e-9, "{i}{j}");
                assert_eq!(c[i * 3 + j], c[j * 3 + i]);
            }
        }
    }

    #[test]
    fn draws_are_clipped() {
        let g = fit_gaussian(&[vec![-1.0], vec![1.0]], Covariance::Diagonal).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = g.covariance()[0].sqrt();
        for _ in 0..20_000 {
            assert!(g.sample(&mut rng)[0].abs() <= 3.0 * s + 1e-12);
        }
    }

    fn tiny_meshes() -> (LammModel, Mesh, Mesh) {
        let m = tiny_model(Backbone::Mlpmixer);
        let t = m.template().clone();
        let mk = |s: f32| {
            let v: Vec<f32> = (0..36).map(|j| ((j * 13 + 5) % 11) as f32 * 0.1 * s).collect();
            t.uncenter(&v)
        };
        (m, mk(1.0), mk(-0.7))
    }

    #[test]
    fn self_swap_is_the_auto_encoder_bitwise() {
        let (m, a, _) = tiny_meshes();
        let rec = m.template().uncenter(&m.reconstruct(&m.template().center(&a).unwrap()).unwrap());
        for i in 0..2 {
            assert_eq!(region_swap(&m, &a, &a, i).unwrap().vertices, rec.vertices);
        }
        assert!(region_swap(&m, &a, &a, 2).is_err());
    }

    #[test]
    fn interpolation_endpoints_and_symmetry() {
        let (m, a, b) = tiny_meshes();
        let fwd = interpolate_latent(&m, &a, &b, 5).unwrap();
        let back = interpolate_latent(&m, &b, &a, 5).unwrap();
        let rec = |x: &Mesh| m.template().uncenter(&m.reconstruct(&m.template().center(x).unwrap()).unwrap());
        let close = |x: &Mesh, y: &Mesh| {
            x.vertices.iter().flatten().zip(y.vertices.iter().flatten()).all(|(p, q)| (p - q).abs() < 1e-5)
        };
        assert!(close(&fwd[0], &rec(&a)));
        assert!(close(&fwd[4], &rec(&b)));
        assert_eq!(fwd[2].vertices, back[2].vertices);
        assert!(interpolate_latent(&m, &a, &b, 1).is_err());
    }

    #[test]
    fn zero_mean_zero_spread_region_sample_is_reconstruction() {
        let (m, a, _) = tiny_meshes();
        let g = fit_gaussian(&vec![vec![0.0; 6]; 3], Covariance::Diagonal).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rec = m.template().uncenter(&m.reconstruct(&m.template().center(&a).unwrap()).unwrap());
        assert_eq!(sample_region(&m, &a, 1, &g, &mut rng).unwrap().vertices, rec.vertices);
    }

    #[test]
    fn profile_of_zeroed_control_branch_is_zero() {
        let (mut m, a, b) = tiny_meshes();
        for id in m.control_param_ids() {
            m.params_mut().get_mut(id).data.fill(0.0);
        }
        let t = m.template().clone();
        let batch = ShapeBatch::new(12, [t.center(&a).unwrap(), t.center(&b).unwrap()].concat()).unwrap();
        let g = fit_gaussian(&[vec![0.1; 6], vec![-0.3; 6]], Covariance::Diagonal).unwrap();
        let p = disentanglement_profile(&m, &batch, 0, &g, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(p.field.iter().all(|&f| f == 0.0));
        assert_eq!(p.leakage, 0.0);
    }

    #[test]
    fn same_rng_state_gives_same_identity() {
        let (m, a, b) = tiny_meshes();
        let t = m.template().clone();
        let batch = ShapeBatch::new(12, [t.center(&a).unwrap(), t.center(&b).unwrap(), t.center(&a).unwrap()].concat()).unwrap();
        let g = fit_latent_gaussian(&m, &batch).unwrap();
        let x = sample_identity(&m, &g, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let y = sample_identity(&m, &g, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(x.vertices, y.vertices);
    }
}
