//! Linear morphable model over flattened vertex coordinates.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, ShapeBatch};
use crate::tensor::io::{self as ckpt, Container};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "pca";

/// Mean, orthonormal components (column `j` of a `[3N, d]` matrix stored
/// row-major) and singular values of the centered training data.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub components: Vec<f64>,
    pub singular_values: Vec<f64>,
    dim: usize,
}

impl PcaModel {
    pub fn latent(&self) -> usize {
        self.singular_values.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_vertices(&self) -> usize {
        self.dim / 3
    }

    /// Column `j` as a contiguous vector.
    pub fn component(&self, j: usize) -> Vec<f64> {
        let d = self.latent();
        (0..self.dim).map(|r| self.components[r * d + j]).collect()
    }

    pub fn explained_variance(&self, samples: usize) -> Vec<f64> {
        let denom = samples.saturating_sub(1).max(1) as f64;
        self.singular_values.iter().map(|s| s * s / denom).collect()
    }

    fn check(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "pca",
                lhs: vec![self.dim],
                rhs: vec![x.len()],
            });
        }
        Ok(())
    }

    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check(x)?;
        let d = self.latent();
        let mut c = vec![0.0; d];
        for (r, (&v, &m)) in x.iter().zip(&self.mean).enumerate() {
            let centered = v as f64 - m;
            let row = &self.components[r * d..(r + 1) * d];
            for (cj, &u) in c.iter_mut().zip(row) {
                *cj += centered * u;
            }
        }
        Ok(c)
    }

    pub fn expand(&self, coeffs: &[f64]) -> Result<Vec<f32>> {
        let d = self.latent();
        if coeffs.len() != d {
            return Err(Error::ShapeMismatch {
                op: "pca expand",
                lhs: vec![d],
                rhs: vec![coeffs.len()],
            });
        }
        Ok((0..self.dim)
            .map(|r| {
                let row = &self.components[r * d..(r + 1) * d];
                (self.mean[r] + row.iter().zip(coeffs).map(|(u, c)| u * c).sum::<f64>()) as f32
            })
            .collect())
    }

    /// Project onto the span and map back, flat coordinates.
    pub fn reconstruct_flat(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.expand(&self.project(x)?)
    }

    pub fn reconstruct_batch(&self, batch: &ShapeBatch) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(batch.data().len());
        for b in 0..batch.len() {
            out.extend(self.reconstruct_flat(batch.sample(b))?);
        }
        Ok(out)
    }

    /// Coordinates must be in the frame the model was fit in.
    pub fn reconstruct(&self, mesh: &Mesh) -> Result<Mesh> {
        Ok(Mesh::from_flat(&self.reconstruct_flat(&mesh.flat())?, mesh.faces.clone()))
    }

    pub fn to_container(&self) -> Container {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let d = self.latent();
        Container {
            kind: CHECKPOINT_KIND.into(),
            header: serde_json::json!({ "dim": self.dim, "latent": d }),
            tensors: vec![
                ("mean".into(), Tensor::new(vec![self.dim], f(&self.mean)).expect("sized")),
                ("components".into(), Tensor::new(vec![self.dim, d], f(&self.components)).expect("sized")),
                ("singular_values".into(), Tensor::new(vec![d], f(&self.singular_values)).expect("sized")),
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", c.kind)));
        }
        let get = |n: &str| {
            c.tensor(n)
                .map(|t| t.data.iter().map(|&x| x as f64).collect::<Vec<_>>())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")))
        };
        let (mean, components, singular_values) = (get("mean")?, get("components")?, get("singular_values")?);
        if components.len() != mean.len() * singular_values.len() || mean.len() % 3 != 0 {
            return Err(Error::Checkpoint("inconsistent pca tensor sizes".into()));
        }
        Ok(Self {
            dim: mean.len(),
            mean,
            components,
            singular_values,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        ckpt::save(&self.to_container(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&ckpt::load(path)?)
    }
}

/// Top-`d` principal components. Uses the `B×B` Gram matrix when there are
/// fewer samples than coordinates and the covariance otherwise.
pub fn fit_pca(train: &ShapeBatch, d: usize) -> Result<PcaModel> {
    let (b, dim) = (train.len(), 3 * train.num_vertices());
    if d == 0 || d > dim.min(b) {
        return Err(Error::invalid(format!(
            "latent size {d} must be in 1..={} for {b} samples of {dim} coordinates",
            dim.min(b)
        )));
    }
    let mut mean = vec![0.0f64; dim];
    for s in 0..b {
        for (m, &v) in mean.iter_mut().zip(train.sample(s)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let x = DMatrix::from_fn(b, dim, |r, c| train.sample(r)[c] as f64 - mean[c]);

    let (mut components, singular_values) = if b < dim {
        let gram = &x * x.transpose();
        let (vals, vecs) = sorted_eigen(gram, d);
        let mut u = DMatrix::zeros(dim, d);
        let mut sv = Vec::with_capacity(d);
        let tol = vals.first().copied().unwrap_or(0.0).max(0.0) * 1e-20 + f64::MIN_POSITIVE;
        for (j, (&lam, v)) in vals.iter().zip(&vecs).enumerate() {
            let s = lam.max(0.0).sqrt();
            sv.push(s);
            if lam > tol {
                let col = x.transpose() * DMatrix::from_column_slice(b, 1, v) / s;
                u.set_column(j, &col.column(0));
            }
        }
        (u, sv)
    } else {
        let cov = x.transpose() * &x;
        let (vals, vecs) = sorted_eigen(cov, d);
        let mut u = DMatrix::zeros(dim, d);
        for (j, v) in vecs.iter().enumerate() {
            u.set_column(j, &nalgebra::DVector::from_column_slice(v));
        }
        (u, vals.iter().map(|l| l.max(0.0).sqrt()).collect())
    };
    complete_basis(&mut components);
    let mut flat = Vec::with_capacity(dim * d);
    for r in 0..dim {
        for j in 0..d {
            flat.push(components[(r, j)]);
        }
    }
    Ok(PcaModel {
        mean,
        components: flat,
        singular_values,
        dim,
    })
}

/// Eigenpairs in decreasing order, first `d`.
fn sorted_eigen(m: DMatrix<f64>, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order.truncate(d);
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = order.iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
    (vals, vecs)
}

/// Replace zero columns (null directions of the data) by unit vectors
/// orthogonal to the others.
fn complete_basis(u: &mut DMatrix<f64>) {
    let (dim, d) = u.shape();
    let mut axis = 0;
    for j in 0..d {
        if u.column(j).norm() > 0.5 {
            continue;
        }
        while axis < dim {
            let mut v = nalgebra::DVector::zeros(dim);
            v[axis] = 1.0;
            axis += 1;
            for k in 0..d {
                if k != j && u.column(k).norm() > 0.5 {
                    let proj = u.column(k).dot(&v);
                    v -= u.column(k) * proj;
                }
            }
            let n = v.norm();
            if n > 1e-6 {
                u.set_column(j, &(v / n));
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(b: usize, nv: usize, seed: u64) -> ShapeBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ShapeBatch::new(nv, (0..b * nv * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Cyclic Jacobi rotations on a dense symmetric matrix.
    fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        let vals = (0..n).map(|i| a[i][i]).collect();
        let vecs = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
        (vals, vecs)
    }

    fn covariance(batch: &ShapeBatch) -> Vec<Vec<f64>> {
        let (b, dim) = (batch.len(), batch.num_vertices() * 3);
        let mean: Vec<f64> = (0..dim).map(|c| (0..b).map(|r| batch.sample(r)[c] as f64).sum::<f64>() / b as f64).collect();
        (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| (0..b).map(|r| (batch.sample(r)[i] as f64 - mean[i]) * (batch.sample(r)[j] as f64 - mean[j])).sum())
                    .collect()
            })
            .collect()
    }

    fn assert_matches_oracle(batch: &ShapeBatch, d: usize) {
        let model = fit_pca(batch, d).unwrap();
        let (vals, vecs) = jacobi(covariance(batch));
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        for j in 0..d {
            let want = &vecs[order[j]];
            let got = model.component(j);
            let sign = want.iter().zip(&got).map(|(a, b)| a * b).sum::<f64>().signum();
            for (a, b) in want.iter().zip(&got) {
                assert!((a - sign * b).abs() < 1e-6, "component {j}: {a} vs {b}");
            }
            assert!((model.singular_values[j].powi(2) - vals[order[j]]).abs() < 1e-8 * vals[order[0]]);
        }
    }

    #[test]
    fn covariance_path_matches_jacobi() {
        assert_matches_oracle(&random_batch(10, 2, 0), 4);
    }

    #[test]
    fn gram_path_matches_jacobi() {
        assert_matches_oracle(&random_batch(10, 5, 1), 6);
    }

    #[test]
    fn components_are_orthonormal() {
        for (b, nv, d) in [(10, 5, 10), (30, 3, 9), (6, 10, 6)] {
            let m = fit_pca(&random_batch(b, nv, 2), d).unwrap();
            for i in 0..d {
                for j in 0..d {
                    let dot: f64 = m.component(i).iter().zip(m.component(j)).map(|(a, b)| a * b).sum();
                    assert!((dot - (i == j) as u8 as f64).abs() < 1e-5, "{b} {nv} {d}: {i},{j} {dot}");
                }
            }
        }
    }

    #[test]
    fn full_rank_reconstructs_exactly() {
        let batch = random_batch(20, 3, 3);
        let m = fit_pca(&batch, 9).unwrap();
        let probe = random_batch(1, 3, 4);
        let r = m.reconstruct_flat(probe.sample(0)).unwrap();
        for (a, b) in r.iter().zip(probe.sample(0)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn line_data_has_one_component() {
        let dir = [0.3f32, -0.2, 0.5, 0.1, 0.0, -0.4];
        let data: Vec<f32> = (0..8).flat_map(|t| dir.iter().map(move |v| v * t as f32 + 1.0)).collect();
        let m = fit_pca(&ShapeBatch::new(2, data).unwrap(), 2).unwrap();
        let var = m.explained_variance(8);
        assert!(var[1] < 1e-9 * var[0]);
    }

    #[test]
    fn mean_and_training_samples_reconstruct() {
        let batch = random_batch(5, 4, 5);
        let m = fit_pca(&batch, 5).unwrap();
        let mean: Vec<f32> = m.mean.iter().map(|&v| v as f32).collect();
        let r = m.reconstruct_flat(&mean).unwrap();
        for (a, b) in r.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-6);
        }
        let r = m.reconstruct_flat(batch.sample(2)).unwrap();
        for (a, b) in r.iter().zip(batch.sample(2)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn oversized_latent_is_rejected() {
        let batch = random_batch(4, 2, 6);
        assert!(fit_pca(&batch, 5).is_err());
        assert!(fit_pca(&batch, 0).is_err());
        assert!(fit_pca(&batch, 4).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = fit_pca(&random_batch(8, 3, 7), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pca.ckpt");
        m.save(&p).unwrap();
        let back = PcaModel::load(&p).unwrap();
        assert_eq!(back.latent(), 3);
        for (a, b) in back.components.iter().zip(&m.components) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut c = m.to_container();
        c.kind = "lamm".into();
        assert!(PcaModel::from_container(&c).is_err());
    }
}
