//! Checkpoint container: a text manifest (format version, model kind,
//! metadata, one line per parameter with shape, byte offset and length)
//! followed by a flat little-endian f32 blob with one section per parameter.
//! Saving a loaded checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::NamedParams;
use crate::tensor::Tensor;

const MAGIC: &str = "cmae-checkpoint v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    /// (name, shape, values), sorted by name.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model(kind: &str, meta: BTreeMap<String, String>, model: &impl NamedParams) -> Self {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        model.visit(&mut |name, t| {
            tensors.push((
                name,
                t.shape().to_vec(),
                t.data().iter().map(|&x| x as f32).collect(),
            ));
        });
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint {
            kind: kind.to_string(),
            meta,
            tensors,
        }
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Parse(format!("checkpoint missing metadata key {key}")))?
            .parse()
            .map_err(|_| Error::Parse(format!("checkpoint metadata {key} is not an integer")))
    }

    /// Copy tensor values into a model with the same layout.
    pub fn load_into(&self, model: &mut impl NamedParams) -> Result<()> {
        let by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> = self
            .tensors
            .iter()
            .map(|(n, s, v)| (n.as_str(), (s, v)))
            .collect();
        let mut err: Option<Error> = None;
        let mut count = 0usize;
        model.visit_mut(&mut |name, t| {
            count += 1;
            if err.is_some() {
                return;
            }
            match by_name.get(name.as_str()) {
                None => err = Some(Error::Parse(format!("checkpoint missing tensor {name}"))),
                Some((shape, values)) => {
                    if shape.as_slice() != t.shape() {
                        err = Some(Error::Shape(format!(
                            "tensor {name}: checkpoint shape {shape:?} vs model {:?}",
                            t.shape()
                        )));
                        return;
                    }
                    *t = Tensor::from_vec(shape, values.iter().map(|&x| x as f64).collect())
                        .expect("shape and length agree");
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if count != self.tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} tensors, model expects {count}",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("kind={}\n", ckpt.kind));
    for (k, v) in &ckpt.meta {
        manifest.push_str(&format!("meta.{k}={v}\n"));
    }
    let mut offset = 0usize;
    for (name, shape, values) in &ckpt.tensors {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let bytes = values.len() * 4;
        manifest.push_str(&format!(
            "param={name} shape={} offset={offset} bytes={bytes}\n",
            dims.join("x")
        ));
        offset += bytes;
    }
    manifest.push_str(&format!("blob={offset}\n"));
    w.write_all(manifest.as_bytes()).map_err(io)?;
    for (_, _, values) in &ckpt.tensors {
        for &v in values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));

    // The manifest ends at the line `blob=<n>`; the blob starts right after.
    let mut kind = None;
    let mut meta = BTreeMap::new();
    let mut entries: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    let mut pos = 0usize;
    let mut blob_len = None;
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&c| c == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| bad("unterminated manifest line"))?;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("manifest not UTF-8"))?;
        pos = end + 1;
        if entries.is_empty() && kind.is_none() && meta.is_empty() {
            if line != MAGIC {
                return Err(bad("not a cmae checkpoint"));
            }
            kind = Some(String::new());
            continue;
        }
        if let Some(rest) = line.strip_prefix("kind=") {
            kind = Some(rest.to_string());
        } else if let Some(rest) = line.strip_prefix("meta.") {
            let (k, v) = rest.split_once('=').ok_or_else(|| bad("bad meta line"))?;
            meta.insert(k.to_string(), v.to_string());
        } else if let Some(rest) = line.strip_prefix("param=") {
            let mut name = None;
            let mut shape = None;
            let mut offset = None;
            let mut nbytes = None;
            for (i, tok) in rest.split(' ').enumerate() {
                if i == 0 {
                    name = Some(tok.to_string());
                } else if let Some(s) = tok.strip_prefix("shape=") {
                    let dims: std::result::Result<Vec<usize>, _> =
                        s.split('x').map(str::parse).collect();
                    shape = Some(dims.map_err(|_| bad("bad shape"))?);
                } else if let Some(s) = tok.strip_prefix("offset=") {
                    offset = Some(s.parse().map_err(|_| bad("bad offset"))?);
                } else if let Some(s) = tok.strip_prefix("bytes=") {
                    nbytes = Some(s.parse().map_err(|_| bad("bad byte count"))?);
                }
            }
            entries.push((
                name.ok_or_else(|| bad("param line without name"))?,
                shape.ok_or_else(|| bad("param line without shape"))?,
                offset.ok_or_else(|| bad("param line without offset"))?,
                nbytes.ok_or_else(|| bad("param line without bytes"))?,
            ));
        } else if let Some(rest) = line.strip_prefix("blob=") {
            blob_len = Some(rest.parse::<usize>().map_err(|_| bad("bad blob length"))?);
            break;
        } else {
            return Err(bad(&format!("unrecognized manifest line {line:?}")));
        }
    }
    let kind = kind.filter(|k| !k.is_empty()).ok_or_else(|| bad("missing kind"))?;
    let blob_len = blob_len.ok_or_else(|| bad("missing blob length"))?;
    let blob = &bytes[pos..];
    if blob.len() != blob_len {
        return Err(bad(&format!("blob is {} bytes, manifest says {blob_len}", blob.len())));
    }

    let mut tensors = Vec::with_capacity(entries.len());
    for (name, shape, offset, nbytes) in entries {
        let expect: usize = shape.iter().product::<usize>() * 4;
        if expect != nbytes {
            return Err(bad(&format!("tensor {name}: shape needs {expect} bytes, manifest says {nbytes}")));
        }
        if offset + nbytes > blob.len() {
            return Err(bad(&format!("tensor {name}: section outside blob")));
        }
        let values: Vec<f32> = blob[offset..offset + nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        tensors.push((name, shape, values));
    }
    Ok(Checkpoint {
        kind,
        meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::{MaeDims, MaeParams};
    use crate::rng::RngStream;

    fn mae_meta(dims: &MaeDims) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("patch_dim".into(), dims.patch_dim.to_string());
        m.insert("num_patches".into(), dims.num_patches.to_string());
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut rng = RngStream::new(1);
        let dims = MaeDims::toy();
        let model = MaeParams::init(dims, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");

        let ckpt = Checkpoint::from_model("mae", mae_meta(&dims), &model);
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.kind, "mae");
        assert_eq!(loaded.meta["patch_dim"], "16");
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_into_restores_values() {
        let mut rng = RngStream::new(2);
        let dims = MaeDims::toy();
        let model = MaeParams::init(dims, &mut rng);
        let ckpt = Checkpoint::from_model("mae", mae_meta(&dims), &model);

        let mut fresh = MaeParams::init(dims, &mut rng.derive("other", 0));
        ckpt.load_into(&mut fresh).unwrap();
        // f32 narrowing is the only difference
        use crate::param::NamedParams;
        let a = model.to_store();
        let b = fresh.to_store();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut rng = RngStream::new(3);
        let model = MaeParams::init(MaeDims::toy(), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let ckpt = Checkpoint::from_model("mae", BTreeMap::new(), &model);
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
