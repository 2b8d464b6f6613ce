//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PKDC" | version u32
//! meta count u32 | (key, value) length-prefixed utf-8 pairs
//! section count u32
//!   per section: name | tensor count u32
//!     per tensor: name | ndim u32 | dims u64... | payload f64 LE
//! ```
//!
//! Values round-trip bit-exactly; loading validates names and shapes
//! against the audience model's layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::backbones::{Arch, BackboneModel, SizeVariant};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"PKDC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn meta_required(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::InvalidData(format!("checkpoint missing meta key '{key}'")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            write_str(&mut buf, k);
            write_str(&mut buf, v);
        }
        buf.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            write_str(&mut buf, &s.name);
            buf.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
            for t in &s.tensors {
                write_str(&mut buf, &t.name);
                buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for d in &t.shape {
                    buf.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in &t.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        let mut f =
            fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::load(path.display().to_string(), "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::load(
                path.display().to_string(),
                format!("unsupported version {version}"),
            ));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let mut sections = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let mut tensors = Vec::new();
            for _ in 0..r.u32()? {
                let tname = r.string()?;
                let ndim = r.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let numel: usize = shape.iter().product();
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                }
                tensors.push(NamedTensor {
                    name: tname,
                    shape,
                    data,
                });
            }
            sections.push(Section { name, tensors });
        }
        if r.pos != bytes.len() {
            return Err(Error::load(
                path.display().to_string(),
                "trailing bytes after checkpoint payload",
            ));
        }
        Ok(Checkpoint { meta, sections })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::load(
                self.path.display().to_string(),
                "truncated checkpoint",
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::load(self.path.display().to_string(), "non-utf8 string"))
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn store_section(name: &str, store: &ParamStore) -> Section {
    Section {
        name: name.to_string(),
        tensors: store
            .specs()
            .iter()
            .enumerate()
            .map(|(i, spec)| NamedTensor {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                data: store.slice(i).to_vec(),
            })
            .collect(),
    }
}

fn load_store_section(section: &Section, store: &mut ParamStore, path: &Path) -> Result<()> {
    if section.tensors.len() != store.specs().len() {
        return Err(Error::load(
            path.display().to_string(),
            format!(
                "section '{}' has {} tensors, model expects {}",
                section.name,
                section.tensors.len(),
                store.specs().len()
            ),
        ));
    }
    for (i, t) in section.tensors.iter().enumerate() {
        let spec = store.spec(i).clone();
        if spec.name != t.name || spec.shape != t.shape {
            return Err(Error::load(
                path.display().to_string(),
                format!(
                    "tensor {} mismatch: file has {} {:?}, model expects {} {:?}",
                    i, t.name, t.shape, spec.name, spec.shape
                ),
            ));
        }
        store.slice_mut(i).copy_from_slice(&t.data);
    }
    Ok(())
}

/// Serialize a backbone (parameters, running statistics, identity meta).
pub fn save_model(
    model: &BackboneModel,
    path: &Path,
    extra_meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut meta = extra_meta.clone();
    meta.insert("kind".into(), "backbone".into());
    meta.insert("arch".into(), model.arch.as_str().into());
    meta.insert("variant".into(), model.variant.as_str().into());
    meta.insert("num_classes".into(), model.num_classes.to_string());
    meta.insert("feature_dim".into(), model.feature_dim.to_string());
    meta.insert("window_len".into(), model.window_len.to_string());
    let ckpt = Checkpoint {
        meta,
        sections: vec![
            store_section("params", &model.params),
            store_section("buffers", &model.buffers),
        ],
    };
    ckpt.write(path)
}

/// Rebuild a backbone from a checkpoint, validating the layout.
pub fn load_model(path: &Path) -> Result<(BackboneModel, BTreeMap<String, String>)> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.meta_required("kind")? != "backbone" {
        return Err(Error::load(
            path.display().to_string(),
            "not a backbone checkpoint",
        ));
    }
    let arch = Arch::parse(ckpt.meta_required("arch")?)?;
    let variant = SizeVariant::parse(ckpt.meta_required("variant")?)?;
    let num_classes: usize = ckpt
        .meta_required("num_classes")?
        .parse()
        .map_err(|_| Error::load(path.display().to_string(), "bad num_classes"))?;
    let window_len: usize = ckpt
        .meta_required("window_len")?
        .parse()
        .map_err(|_| Error::load(path.display().to_string(), "bad window_len"))?;
    let mut model = BackboneModel::new(arch, variant, num_classes, window_len)?;
    let params = ckpt
        .section("params")
        .ok_or_else(|| Error::load(path.display().to_string(), "missing params section"))?;
    load_store_section(params, &mut model.params, path)?;
    let buffers = ckpt
        .section("buffers")
        .ok_or_else(|| Error::load(path.display().to_string(), "missing buffers section"))?;
    load_store_section(buffers, &mut model.buffers, path)?;
    Ok((model, ckpt.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{Arch, BackboneModel, SizeVariant};

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = BackboneModel::seeded(Arch::ShuffleNetV1, SizeVariant::Tiny, 7, 300, 42).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("seed".into(), "42".into());
        save_model(&model, &path, &meta).unwrap();
        let (loaded, meta2) = load_model(&path).unwrap();
        assert_eq!(model.params.data(), loaded.params.data());
        assert_eq!(model.buffers.data(), loaded.buffers.data());
        assert_eq!(meta2.get("seed").map(String::as_str), Some("42"));
        assert_eq!(loaded.num_classes, 7);

        // byte-identical re-serialization
        save_model(&loaded, &dir.path().join("m2.ckpt"), &meta).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(dir.path().join("m2.ckpt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = BackboneModel::seeded(Arch::ResNet34, SizeVariant::Tiny, 3, 300, 1).unwrap();
        save_model(&model, &path, &BTreeMap::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());
    }
}
