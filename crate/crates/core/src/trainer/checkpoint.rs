//! Per-level checkpoint directories.
//!
//! ```text
//! <root>/level_<i>/manifest.toml   human-readable description of the level
//! <root>/level_<i>/params.bin      tensor blob
//! ```
//!
//! `params.bin` layout (little endian), format version 1:
//!
//! ```text
//! b"PFCK"  u32 version  u32 entry_count
//! entry_count × { u32 name_len, name (utf-8),
//!                 u8 dtype (1 = f32, 2 = f64), u32 rank, rank × u64 dim,
//!                 numel × element }
//! ```
//!
//! Entry names are `generator.*`, `discriminator.*`, `discriminator.sn.<k>.u`
//! and, for resumable checkpoints, `adam_g.{m,v}.*` / `adam_d.{m,v}.*`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::LevelBundle;
use crate::error::{Error, Result};
use crate::networks::{ContentGenerator, Generator, NetworkWidths, PatchDiscriminator, TextureGenerator};
use crate::params::Parameterized;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &[u8; 4] = b"PFCK";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub level: usize,
    pub levels: usize,
    pub scale_factor: usize,
    /// Side length of this level's images.
    pub resolution: usize,
    pub base_resolution: usize,
    pub full_resolution: usize,
    /// `"content"` or `"texture"`.
    pub generator: String,
    pub widths: NetworkWidths,
    pub one_stage: bool,
    pub use_consistency: bool,
    pub two_stage: bool,
    pub step: u64,
    pub target_steps: u64,
    pub seed: u64,
    pub param_count: usize,
    pub blob: String,
}

pub fn level_dir(root: &Path, level: usize) -> PathBuf {
    root.join(format!("level_{level}"))
}

/// One tensor entry of a blob.
#[derive(Clone, Debug, PartialEq)]
pub enum BlobTensor {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
}

pub fn write_blob(path: &Path, entries: &BTreeMap<String, BlobTensor>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let (tag, shape) = match t {
            BlobTensor::F32(s, _) => (1u8, s),
            BlobTensor::F64(s, _) => (2u8, s),
        };
        buf.push(tag);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t {
            BlobTensor::F32(_, d) => d.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            BlobTensor::F64(_, d) => d.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
    }
    write_atomic(path, &buf)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Dependency(format!(
                "{} is truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_blob(path: &Path) -> Result<BTreeMap<String, BlobTensor>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Dependency(format!("cannot read checkpoint blob {}: {e}", path.display())))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Dependency(format!("{} is not a checkpoint blob", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Dependency(format!(
            "{}: unsupported blob version {version}",
            path.display()
        )));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Dependency(format!("{}: bad entry name", path.display())))?;
        let tag = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let t = match tag {
            1 => BlobTensor::F32(
                shape,
                r.take(4 * numel)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            ),
            2 => BlobTensor::F64(
                shape,
                r.take(8 * numel)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            ),
            other => {
                return Err(Error::Dependency(format!(
                    "{}: unknown dtype tag {other} for {name}",
                    path.display()
                )))
            }
        };
        out.insert(name, t);
    }
    Ok(out)
}

fn put_params<P: Parameterized<f32>>(out: &mut BTreeMap<String, BlobTensor>, prefix: &str, p: &P) {
    p.visit(prefix, &mut |name, t| {
        out.insert(name, BlobTensor::F32(t.shape().to_vec(), t.to_vec()));
    });
}

fn put_adam(out: &mut BTreeMap<String, BlobTensor>, prefix: &str, opt: &Adam) {
    for (kind, map) in [("m", &opt.m), ("v", &opt.v)] {
        for (name, v) in map {
            out.insert(
                format!("{prefix}.{kind}.{name}"),
                BlobTensor::F32(vec![v.len()], v.clone()),
            );
        }
    }
}

fn take_params<P: Parameterized<f32>>(
    entries: &BTreeMap<String, BlobTensor>,
    prefix: &str,
    p: &mut P,
    trainable: bool,
) -> Result<()> {
    let mut err = None;
    p.visit_mut(prefix, &mut |name, t| {
        if err.is_some() {
            return;
        }
        match entries.get(&name) {
            Some(BlobTensor::F32(shape, data)) if shape == t.shape() => {
                let loaded = if trainable {
                    Tensor::var(data.clone(), shape)
                } else {
                    Tensor::from_vec(data.clone(), shape)
                };
                *t = loaded.expect("shape matches data");
            }
            Some(_) => {
                err = Some(Error::Dependency(format!(
                    "checkpoint entry {name} does not match shape {:?}",
                    t.shape()
                )))
            }
            None => err = Some(Error::Dependency(format!("checkpoint lacks {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn take_adam(entries: &BTreeMap<String, BlobTensor>, prefix: &str, opt: &mut Adam) {
    for (kind, map) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        let head = format!("{prefix}.{kind}.");
        for (name, t) in entries.range(head.clone()..) {
            let Some(param) = name.strip_prefix(&head) else { break };
            if let BlobTensor::F32(_, d) = t {
                map.insert(param.to_string(), d.clone());
            }
        }
    }
}

/// Writes `bundle` under `<root>/level_<i>`; the blob is written before the manifest.
pub fn save_level(root: &Path, bundle: &LevelBundle, manifest: &Manifest) -> Result<PathBuf> {
    let dir = level_dir(root, bundle.level);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = BTreeMap::new();
    put_params(&mut entries, "generator", &bundle.generator);
    put_params(&mut entries, "discriminator", &bundle.discriminator);
    for (k, s) in bundle.discriminator.spectral.iter().enumerate() {
        entries.insert(
            format!("discriminator.sn.{k}.u"),
            BlobTensor::F64(vec![s.u.len()], s.u.clone()),
        );
    }
    put_adam(&mut entries, "adam_g", &bundle.opt_g);
    put_adam(&mut entries, "adam_d", &bundle.opt_d);
    write_blob(&dir.join(BLOB_FILE), &entries)?;
    let mut manifest = manifest.clone();
    manifest.step = bundle.step;
    manifest.param_count = bundle.generator.param_count();
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::input(format!("cannot serialize manifest: {e}")))?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Dependency(format!("missing checkpoint manifest {}: {e}", path.display())))?;
    let m: Manifest = toml::from_str(&text)
        .map_err(|e| Error::Dependency(format!("invalid manifest {}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Dependency(format!(
            "{}: unsupported format version {}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

/// Options used to rebuild optimizers of a loaded bundle.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub trainable: bool,
    pub adam_g: AdamConfig,
    pub adam_d: AdamConfig,
    pub power_iterations: usize,
}

/// Loads `<root>/level_<i>`.
pub fn load_level(root: &Path, level: usize, opts: LoadOptions) -> Result<(Manifest, LevelBundle)> {
    let dir = level_dir(root, level);
    let manifest = read_manifest(&dir)?;
    if manifest.level != level {
        return Err(Error::Dependency(format!(
            "{} describes level {}, expected {level}",
            dir.display(),
            manifest.level
        )));
    }
    let entries = read_blob(&dir.join(&manifest.blob))?;
    // Shapes come from the manifest; values are overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut generator = if level == 0 {
        if manifest.generator != "content" {
            return Err(Error::Dependency(format!("level 0 must hold a content generator, found {}", manifest.generator)));
        }
        let base = manifest.base_resolution;
        Generator::Content(ContentGenerator::new(manifest.widths, Some((base, base)), &mut rng))
    } else {
        Generator::Texture(TextureGenerator::new(manifest.widths, manifest.one_stage, &mut rng))
    };
    let mut discriminator = if level == 0 {
        PatchDiscriminator::content(manifest.widths, &mut rng)
    } else {
        PatchDiscriminator::texture(manifest.widths, &mut rng)
    };
    take_params(&entries, "generator", &mut generator, opts.trainable)?;
    take_params(&entries, "discriminator", &mut discriminator, opts.trainable)?;
    for (k, s) in discriminator.spectral.iter_mut().enumerate() {
        match entries.get(&format!("discriminator.sn.{k}.u")) {
            Some(BlobTensor::F64(_, u)) if u.len() == s.u.len() => s.u = u.clone(),
            _ => {
                return Err(Error::Dependency(format!(
                    "checkpoint lacks spectral state for discriminator layer {k}"
                )))
            }
        }
        s.power_iterations = opts.power_iterations.max(1);
    }
    let mut opt_g = Adam::new(opts.adam_g);
    let mut opt_d = Adam::new(opts.adam_d);
    take_adam(&entries, "adam_g", &mut opt_g);
    take_adam(&entries, "adam_d", &mut opt_d);
    opt_g.t = manifest.step;
    opt_d.t = manifest.step;
    let bundle = LevelBundle {
        level,
        generator,
        discriminator,
        opt_g,
        opt_d,
        step: manifest.step,
    };
    Ok((manifest, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let mut e = BTreeMap::new();
        e.insert("a".to_string(), BlobTensor::F32(vec![2, 1], vec![1.5, -2.0]));
        e.insert("b.c".to_string(), BlobTensor::F64(vec![3], vec![0.1, 0.2, 0.3]));
        e.insert("empty".to_string(), BlobTensor::F32(vec![0], vec![]));
        write_blob(&path, &e).unwrap();
        assert_eq!(read_blob(&path).unwrap(), e);
    }

    #[test]
    fn corrupt_blobs_are_dependency_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_blob(&path), Err(Error::Dependency(_))));
        let mut e = BTreeMap::new();
        e.insert("a".to_string(), BlobTensor::F32(vec![4], vec![0.0; 4]));
        write_blob(&path, &e).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_blob(&path), Err(Error::Dependency(_))));
        assert!(matches!(read_manifest(dir.path()), Err(Error::Dependency(_))));
    }
}
