//! Registered meshes sharing a fixed template topology.
//!
//! A [`Template`] fixes the vertex count, face list, the dense region
//! partition `R_1..R_K` and the sparse control vertices `C_i ⊆ R_i`.
//! Every [`Mesh`] and [`ShapeBatch`] handled by the model is interpreted
//! against one template.

mod io;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use io::{
    read_batch, read_obj, read_template, template_from_json, template_to_json, write_batch,
    write_obj, write_template,
};

pub type Faces = Arc<Vec<Vec<u32>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Faces,
}

impl Mesh {
    pub fn new(vertices: Vec<[f32; 3]>, faces: Faces) -> Result<Self> {
        let n = vertices.len() as u32;
        for face in faces.iter() {
            if face.len() < 3 {
                return Err(Error::invalid("face with fewer than 3 vertices"));
            }
            if let Some(&bad) = face.iter().find(|&&i| i >= n) {
                return Err(Error::invalid(format!(
                    "face index {bad} out of range for {n} vertices"
                )));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn from_flat(flat: &[f32], faces: Faces) -> Self {
        let vertices = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self { vertices, faces }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.vertices.iter().flatten().copied().collect()
    }

    /// Twice the signed area vector of each face (triangle fan for polygons).
    pub fn face_area_vectors(&self) -> Vec<[f64; 3]> {
        self.faces
            .iter()
            .map(|f| {
                let p0 = to_f64(self.vertices[f[0] as usize]);
                let mut acc = [0.0; 3];
                for w in f[1..].windows(2) {
                    let a = sub(to_f64(self.vertices[w[0] as usize]), p0);
                    let b = sub(to_f64(self.vertices[w[1] as usize]), p0);
                    let c = cross(a, b);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
                acc
            })
            .collect()
    }
}

fn to_f64(v: [f32; 3]) -> [f64; 3] {
    [v[0] as f64, v[1] as f64, v[2] as f64]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Dense, disjoint, covering split of the template vertices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    sets: Vec<Vec<u32>>,
}

impl RegionPartition {
    pub fn new(sets: Vec<Vec<u32>>, num_vertices: usize) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::partition("partition has no regions"));
        }
        let mut seen = vec![false; num_vertices];
        for (r, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::partition(format!("region {r} is empty")));
            }
            for &v in set {
                let v = v as usize;
                if v >= num_vertices {
                    return Err(Error::partition(format!(
                        "region {r} references vertex {v} >= {num_vertices}"
                    )));
                }
                if seen[v] {
                    return Err(Error::partition(format!(
                        "vertex {v} appears more than once (region {r})"
                    )));
                }
                seen[v] = true;
            }
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(Error::partition(format!(
                "vertex {gap} is not covered by any region"
            )));
        }
        Ok(Self { sets })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn region(&self, i: usize) -> &[u32] {
        &self.sets[i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sets.iter().map(Vec::len).collect()
    }

    pub fn sets(&self) -> &[Vec<u32>] {
        &self.sets
    }

    pub fn num_vertices(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// The registered template: topology, regions, control points, boundaries and mean shape.
#[derive(Debug, Clone)]
pub struct Template {
    reference: Mesh,
    partition: RegionPartition,
    controls: Vec<Vec<u32>>,
    boundaries: Vec<Vec<u32>>,
    region_names: Vec<String>,
    region_of: Vec<u32>,
    mean: Vec<[f32; 3]>,
}

impl Template {
    pub fn new(
        reference: Mesh,
        regions: Vec<Vec<u32>>,
        controls: Vec<Vec<u32>>,
        region_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = reference.num_vertices();
        let partition = RegionPartition::new(regions, n)?;
        let k = partition.len();
        if controls.len() != k {
            return Err(Error::InvalidTemplate(format!(
                "{} control sets for {k} regions",
                controls.len()
            )));
        }
        let mut region_of = vec![0u32; n];
        for (r, set) in partition.sets().iter().enumerate() {
            for &v in set {
                region_of[v as usize] = r as u32;
            }
        }
        let mut used = BTreeSet::new();
        for (r, set) in controls.iter().enumerate() {
            for &c in set {
                if c as usize >= n || region_of[c as usize] != r as u32 {
                    return Err(Error::InvalidTemplate(format!(
                        "control vertex {c} is not inside region {r}"
                    )));
                }
                if !used.insert(c) {
                    return Err(Error::InvalidTemplate(format!(
                        "control vertex {c} listed twice"
                    )));
                }
            }
        }
        let region_names = match region_names {
            Some(names) if names.len() == k => names,
            Some(names) => {
                return Err(Error::InvalidTemplate(format!(
                    "{} region names for {k} regions",
                    names.len()
                )))
            }
            None => (0..k).map(|r| format!("region_{r}")).collect(),
        };
        let boundaries = compute_boundaries(&reference, &region_of, k);
        Ok(Self {
            mean: vec![[0.0; 3]; n],
            reference,
            partition,
            controls,
            boundaries,
            region_names,
            region_of,
        })
    }

    pub fn with_mean(mut self, mean: Vec<[f32; 3]>) -> Result<Self> {
        if mean.len() != self.num_vertices() {
            return Err(Error::partition(format!(
                "mean has {} vertices, template has {}",
                mean.len(),
                self.num_vertices()
            )));
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn num_vertices(&self) -> usize {
        self.reference.num_vertices()
    }

    pub fn num_regions(&self) -> usize {
        self.partition.len()
    }

    pub fn reference(&self) -> &Mesh {
        &self.reference
    }

    pub fn faces(&self) -> &Faces {
        &self.reference.faces
    }

    pub fn partition(&self) -> &RegionPartition {
        &self.partition
    }

    pub fn region(&self, i: usize) -> &[u32] {
        self.partition.region(i)
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        self.partition.sizes()
    }

    pub fn controls(&self, i: usize) -> &[u32] {
        &self.controls[i]
    }

    pub fn control_sets(&self) -> &[Vec<u32>] {
        &self.controls
    }

    pub fn control_sizes(&self) -> Vec<usize> {
        self.controls.iter().map(Vec::len).collect()
    }

    /// All control vertices, region by region.
    pub fn all_controls(&self) -> Vec<u32> {
        self.controls.iter().flatten().copied().collect()
    }

    pub fn non_controls(&self) -> Vec<u32> {
        let c: BTreeSet<u32> = self.controls.iter().flatten().copied().collect();
        (0..self.num_vertices() as u32)
            .filter(|v| !c.contains(v))
            .collect()
    }

    pub fn boundary(&self, i: usize) -> &[u32] {
        &self.boundaries[i]
    }

    pub fn region_names(&self) -> &[String] {
        &self.region_names
    }

    pub fn region_of(&self) -> &[u32] {
        &self.region_of
    }

    /// `(region, slot)` of a control vertex, if it is one.
    pub fn control_slot(&self, vertex: u32) -> Option<(usize, usize)> {
        let r = *self.region_of.get(vertex as usize)? as usize;
        self.controls[r]
            .iter()
            .position(|&c| c == vertex)
            .map(|slot| (r, slot))
    }

    pub fn mean(&self) -> &[[f32; 3]] {
        &self.mean
    }

    pub fn mean_mesh(&self) -> Mesh {
        Mesh {
            vertices: self.mean.clone(),
            faces: self.reference.faces.clone(),
        }
    }

    /// Per-region flattened mean shape.
    pub fn region_mean(&self, i: usize) -> Vec<f32> {
        self.region(i)
            .iter()
            .flat_map(|&v| self.mean[v as usize])
            .collect()
    }

    /// Hex SHA-256 over the topology, regions and control sets.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_vertices() as u64).to_le_bytes());
        h.update((self.reference.faces.len() as u64).to_le_bytes());
        for f in self.reference.faces.iter() {
            h.update((f.len() as u32).to_le_bytes());
            for &i in f {
                h.update(i.to_le_bytes());
            }
        }
        for group in [self.partition.sets(), &self.controls[..]] {
            h.update((group.len() as u32).to_le_bytes());
            for set in group {
                h.update((set.len() as u32).to_le_bytes());
                for &i in set {
                    h.update(i.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Add the stored mean back to centered coordinates.
    pub fn uncenter(&self, centered: &[f32]) -> Mesh {
        let vertices = centered
            .chunks_exact(3)
            .zip(&self.mean)
            .map(|(c, m)| [c[0] + m[0], c[1] + m[1], c[2] + m[2]])
            .collect();
        Mesh {
            vertices,
            faces: self.reference.faces.clone(),
        }
    }

    /// Subtract the stored mean.
    pub fn center(&self, mesh: &Mesh) -> Result<Vec<f32>> {
        self.check_mesh(mesh)?;
        Ok(mesh
            .vertices
            .iter()
            .zip(&self.mean)
            .flat_map(|(v, m)| [v[0] - m[0], v[1] - m[1], v[2] - m[2]])
            .collect())
    }

    pub fn check_mesh(&self, mesh: &Mesh) -> Result<()> {
        if mesh.num_vertices() != self.num_vertices() {
            return Err(Error::partition(format!(
                "mesh has {} vertices, template has {}",
                mesh.num_vertices(),
                self.num_vertices()
            )));
        }
        Ok(())
    }
}

fn compute_boundaries(mesh: &Mesh, region_of: &[u32], k: usize) -> Vec<Vec<u32>> {
    let mut sets = vec![BTreeSet::new(); k];
    for face in mesh.faces.iter() {
        for &a in face {
            let ra = region_of[a as usize];
            if face.iter().any(|&b| region_of[b as usize] != ra) {
                sets[ra as usize].insert(a);
            }
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// `B` meshes on one template, stored as a flat `[B][N][3]` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeBatch {
    num_vertices: usize,
    data: Vec<f32>,
}

impl ShapeBatch {
    pub fn new(num_vertices: usize, data: Vec<f32>) -> Result<Self> {
        if num_vertices == 0 || !data.len().is_multiple_of(num_vertices * 3) {
            return Err(Error::partition(format!(
                "buffer of {} floats is not a whole number of {num_vertices}-vertex meshes",
                data.len()
            )));
        }
        Ok(Self { num_vertices, data })
    }

    pub fn from_meshes(meshes: &[Mesh]) -> Result<Self> {
        let n = meshes
            .first()
            .map(Mesh::num_vertices)
            .ok_or_else(|| Error::invalid("empty mesh list"))?;
        let mut data = Vec::with_capacity(n * 3 * meshes.len());
        for m in meshes {
            if m.num_vertices() != n {
                return Err(Error::partition("meshes with differing vertex counts"));
            }
            data.extend(m.vertices.iter().flatten());
        }
        Ok(Self {
            num_vertices: n,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / (self.num_vertices * 3)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn sample(&self, b: usize) -> &[f32] {
        let s = self.num_vertices * 3;
        &self.data[b * s..(b + 1) * s]
    }

    pub fn mesh(&self, b: usize, faces: &Faces) -> Mesh {
        Mesh::from_flat(self.sample(b), faces.clone())
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.num_vertices * 3);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            num_vertices: self.num_vertices,
            data,
        }
    }
}

/// Flatten region `i` into `[x0, y0, z0, x1, ...]` in region-local order.
pub fn flatten_region(vertices: &[f32], template: &Template, i: usize) -> Result<Vec<f32>> {
    if i >= template.num_regions() {
        return Err(Error::partition(format!(
            "region {i} out of range (K = {})",
            template.num_regions()
        )));
    }
    if vertices.len() != template.num_vertices() * 3 {
        return Err(Error::partition(format!(
            "{} coordinates for a {}-vertex template",
            vertices.len(),
            template.num_vertices()
        )));
    }
    Ok(template
        .region(i)
        .iter()
        .flat_map(|&v| {
            let v = v as usize * 3;
            [vertices[v], vertices[v + 1], vertices[v + 2]]
        })
        .collect())
}

/// Scatter per-region vectors back into one flat vertex buffer.
pub fn merge_regions_flat<V: AsRef<[f32]>>(
    region_vectors: &[V],
    template: &Template,
) -> Result<Vec<f32>> {
    if region_vectors.len() != template.num_regions() {
        return Err(Error::partition(format!(
            "{} region vectors for {} regions",
            region_vectors.len(),
            template.num_regions()
        )));
    }
    let mut out = vec![0.0f32; template.num_vertices() * 3];
    for (i, vec) in region_vectors.iter().enumerate() {
        let vec = vec.as_ref();
        let idx = template.region(i);
        if vec.len() != idx.len() * 3 {
            return Err(Error::partition(format!(
                "region {i}: vector of length {} but 3·N_i = {}",
                vec.len(),
                idx.len() * 3
            )));
        }
        for (j, &v) in idx.iter().enumerate() {
            out[v as usize * 3..v as usize * 3 + 3].copy_from_slice(&vec[j * 3..j * 3 + 3]);
        }
    }
    Ok(out)
}

pub fn merge_regions<V: AsRef<[f32]>>(region_vectors: &[V], template: &Template) -> Result<Mesh> {
    let flat = merge_regions_flat(region_vectors, template)?;
    Ok(Mesh::from_flat(&flat, template.faces().clone()))
}

/// Per-vertex mean of the batch, and the batch with that mean removed.
pub fn mean_center(batch: &ShapeBatch) -> (ShapeBatch, Vec<[f32; 3]>) {
    let n3 = batch.num_vertices * 3;
    let b = batch.len();
    let mut acc = vec![0.0f64; n3];
    for s in 0..b {
        for (a, &x) in acc.iter_mut().zip(batch.sample(s)) {
            *a += x as f64;
        }
    }
    let mean: Vec<f32> = acc.iter().map(|a| (a / b.max(1) as f64) as f32).collect();
    let mut data = batch.data.clone();
    for chunk in data.chunks_exact_mut(n3) {
        for (x, m) in chunk.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    (
        ShapeBatch {
            num_vertices: batch.num_vertices,
            data,
        },
        mean.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    )
}

/// Sum of per-vertex Euclidean distances over `subset` (all vertices if `None`).
pub fn sum_euclidean_distance(a: &[f32], b: &[f32], subset: Option<&[u32]>) -> Result<f64> {
    if a.len() != b.len() || !a.len().is_multiple_of(3) {
        return Err(Error::partition(format!(
            "coordinate buffers of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dist = |v: usize| -> f64 {
        let (p, q) = (&a[v * 3..v * 3 + 3], &b[v * 3..v * 3 + 3]);
        let dx = (p[0] - q[0]) as f64;
        let dy = (p[1] - q[1]) as f64;
        let dz = (p[2] - q[2]) as f64;
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let n = a.len() / 3;
    match subset {
        None => Ok((0..n).map(dist).sum()),
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&v| v as usize >= n) {
                return Err(Error::partition(format!("subset index {bad} >= {n}")));
            }
            Ok(s.iter().map(|&v| dist(v as usize)).sum())
        }
    }
}

pub fn mean_euclidean_distance(a: &[f32], b: &[f32], subset: Option<&[u32]>) -> Result<f64> {
    let count = match subset {
        Some(s) if s.is_empty() => return Err(Error::invalid("empty vertex subset")),
        Some(s) => s.len(),
        None => a.len() / 3,
    };
    if count == 0 {
        return Err(Error::invalid("empty mesh"));
    }
    Ok(sum_euclidean_distance(a, b, subset)? / count as f64)
}

pub fn mesh_distance(a: &Mesh, b: &Mesh, subset: Option<&[u32]>) -> Result<f64> {
    if a.num_vertices() != b.num_vertices() {
        return Err(Error::partition("meshes on different templates"));
    }
    mean_euclidean_distance(&a.flat(), &b.flat(), subset)
}
