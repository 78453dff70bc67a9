use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Mesh, ShapeBatch, Template};
use crate::error::{Error, Result};

pub fn write_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for f in mesh.faces.iter() {
        write!(w, "f")?;
        for i in f {
            write!(w, " {}", i + 1)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `v` and `f` records; texture/normal indices in `f a/b/c` are ignored.
pub fn read_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        msg: format!("line {}: {msg}", line + 1),
    };
    let reader = BufReader::new(File::open(path)?);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f32> = parts
                    .take(3)
                    .map(|p| p.parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(ln, "bad vertex coordinate"))?;
                if xyz.len() != 3 {
                    return Err(err(ln, "vertex needs three coordinates"));
                }
                vertices.push([xyz[0], xyz[1], xyz[2]]);
            }
            Some("f") => {
                let mut face = Vec::new();
                for p in parts {
                    let idx = p.split('/').next().unwrap_or("");
                    let i: i64 = idx.parse().map_err(|_| err(ln, "bad face index"))?;
                    let i = if i < 0 {
                        vertices.len() as i64 + i
                    } else {
                        i - 1
                    };
                    if i < 0 {
                        return Err(err(ln, "face index out of range"));
                    }
                    face.push(i as u32);
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, Arc::new(faces))
}

#[derive(Serialize, Deserialize)]
struct TemplateFile {
    vertices: Vec<[f32; 3]>,
    faces: Vec<Vec<u32>>,
    regions: Vec<Vec<u32>>,
    control_points: Vec<Vec<u32>>,
    #[serde(default)]
    region_names: Option<Vec<String>>,
    #[serde(default)]
    boundaries: Option<Vec<Vec<u32>>>,
    #[serde(default)]
    mean: Option<Vec<[f32; 3]>>,
    #[serde(default)]
    checksum: Option<String>,
}

/// JSON template: reference vertices, faces, regions, control points,
/// boundary lists (informational, recomputed on load) and the mean shape.
pub fn write_template(template: &Template, path: impl AsRef<Path>) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, &template_file(template))?;
    Ok(())
}

pub fn read_template(path: impl AsRef<Path>) -> Result<Template> {
    let path = path.as_ref();
    let file: TemplateFile = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    from_file(file)
}

/// The template file contents as a JSON value.
pub fn template_to_json(template: &Template) -> serde_json::Value {
    serde_json::to_value(template_file(template)).expect("template serializes")
}

pub fn template_from_json(value: serde_json::Value) -> Result<Template> {
    from_file(serde_json::from_value(value)?)
}

fn template_file(template: &Template) -> TemplateFile {
    TemplateFile {
        vertices: template.reference().vertices.clone(),
        faces: template.faces().as_ref().clone(),
        regions: template.partition().sets().to_vec(),
        control_points: template.control_sets().to_vec(),
        region_names: Some(template.region_names().to_vec()),
        boundaries: Some(
            (0..template.num_regions())
                .map(|r| template.boundary(r).to_vec())
                .collect(),
        ),
        mean: Some(template.mean().to_vec()),
        checksum: Some(template.checksum()),
    }
}

fn from_file(file: TemplateFile) -> Result<Template> {
    let reference = Mesh::new(file.vertices, Arc::new(file.faces))?;
    let mut t = Template::new(
        reference,
        file.regions,
        file.control_points,
        file.region_names,
    )?;
    if let Some(mean) = file.mean {
        t = t.with_mean(mean)?;
    }
    if let Some(expected) = file.checksum {
        let found = t.checksum();
        if expected != found {
            return Err(Error::TemplateMismatch { expected, found });
        }
    }
    Ok(t)
}

/// Binary batch: `u32 N, u32 B, u32 K` then `B·N·3` little-endian f32.
pub fn write_batch(
    batch: &ShapeBatch,
    num_regions: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(batch.num_vertices() as u32).to_le_bytes())?;
    w.write_all(&(batch.len() as u32).to_le_bytes())?;
    w.write_all(&(num_regions as u32).to_le_bytes())?;
    for x in batch.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the batch and the region count stored in the header.
pub fn read_batch(path: impl AsRef<Path>) -> Result<(ShapeBatch, usize)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 {
        return Err(bad("truncated header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (n, b, k) = (word(0), word(1), word(2));
    let expected = 12 + n * b * 3 * 4;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for N={n}, B={b}, found {}",
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((ShapeBatch::new(n, data)?, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::tests::strip_template;

    #[test]
    fn obj_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = strip_template();
        let p = dir.path().join("m.obj");
        write_obj(t.reference(), &p).unwrap();
        let back = read_obj(&p).unwrap();
        assert_eq!(&back, t.reference());
    }

    #[test]
    fn obj_slash_indices() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.obj");
        std::fs::write(&p, "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1/1 2/1/1 -1/1/1\n").unwrap();
        let m = read_obj(&p).unwrap();
        assert_eq!(m.faces[0], vec![0, 1, 2]);
    }

    #[test]
    fn template_roundtrip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let t = strip_template();
        let p = dir.path().join("t.json");
        write_template(&t, &p).unwrap();
        let back = read_template(&p).unwrap();
        assert_eq!(back.checksum(), t.checksum());
        assert_eq!(back.boundary(1), t.boundary(1));

        let text = std::fs::read_to_string(&p).unwrap();
        let tampered = text.replace("\"control_points\":[[0]", "\"control_points\":[[1]");
        std::fs::write(&p, tampered).unwrap();
        assert!(matches!(
            read_template(&p),
            Err(Error::TemplateMismatch { .. })
        ));
    }

    #[test]
    fn batch_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = ShapeBatch::new(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = dir.path().join("b.bin");
        write_batch(&b, 7, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &7u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 24);
        let (back, k) = read_batch(&p).unwrap();
        assert_eq!((back, k), (b, 7));
    }
}
