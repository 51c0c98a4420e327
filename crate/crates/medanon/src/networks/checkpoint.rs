//! Checkpoint layout: one binary blob per network plus a JSON manifest
//! carrying `{config_hash, epoch, metric}` and the full network config needed
//! to rebuild the graphs. Values round-trip bitwise at their own precision
//! (f32 payloads survive the f64 container exactly).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::{build_networks, hex_string, IdentityHead, IdentityVae, NetworkBundle, NetworkConfig};
use crate::error::{Error, Result};
use crate::nn::{Dtype, Element, ParamSet};

const BLOB_MAGIC: &[u8; 4] = b"MDAN";
const BLOB_VERSION: u32 = 1;

/// Metadata persisted alongside the parameter blobs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: usize,
    pub metric: f64,
    pub dtype: Dtype,
    pub network_config: NetworkConfig,
    pub networks: Vec<String>,
}

/// A persisted checkpoint directory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
}

fn write_set<E: Element>(path: &Path, set: &ParamSet<E>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for i in 0..set.len() {
        let name = set.name_of(i).as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let value = set.value_by_index(i);
        buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for d in value.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in value.iter() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let tmp = path.with_extension("bin.tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_set<E: Element>(path: &Path, set: &mut ParamSet<E>) -> Result<()> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut buf)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > buf.len() {
            return Err(Error::contract(format!("truncated blob {}", path.display())));
        }
        let s = &buf[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != BLOB_MAGIC {
        return Err(Error::contract(format!("bad magic in {}", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(Error::contract(format!("unsupported blob version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    if count != set.len() {
        return Err(Error::contract(format!(
            "blob {} holds {count} tensors, network expects {}",
            path.display(),
            set.len()
        )));
    }
    for i in 0..count {
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(take(&mut off, name_len)?).into_owned();
        if name != set.name_of(i) {
            return Err(Error::contract(format!(
                "tensor {i} named '{name}', expected '{}'",
                set.name_of(i)
            )));
        }
        let ndim = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = take(&mut off, n * 8)?;
        let data: Vec<E> = bytes
            .chunks_exact(8)
            .map(|c| E::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::contract(format!("bad tensor shape in blob: {e}")))?;
        set.set_value(i, value);
    }
    Ok(())
}

fn set_names<E: Element>(bundle: &NetworkBundle<E>) -> Vec<(&'static str, &ParamSet<E>)> {
    let mut v: Vec<(&'static str, &ParamSet<E>)> = vec![
        ("encoder", &bundle.encoder.params),
        ("decoder", &bundle.decoder.params),
        ("c_med", &bundle.c_med.params),
        ("discriminator", &bundle.discriminator.params),
    ];
    if let IdentityHead::Multiclass(h) = &bundle.c_id {
        v.insert(3, ("c_id", &h.params));
    }
    v
}

/// Persists all networks of `bundle` into `dir`.
pub fn save_bundle<E: Element>(
    dir: &Path,
    bundle: &NetworkBundle<E>,
    epoch: usize,
    metric: f64,
) -> Result<Checkpoint> {
    fs::create_dir_all(dir)?;
    let sets = set_names(bundle);
    for (name, set) in &sets {
        write_set(&dir.join(format!("{name}.bin")), set)?;
    }
    let meta = CheckpointMeta {
        config_hash: bundle.cfg.config_hash(),
        epoch,
        metric,
        dtype: E::DTYPE,
        network_config: bundle.cfg.clone(),
        networks: sets.iter().map(|(n, _)| n.to_string()).collect(),
    };
    write_manifest(dir, &meta)?;
    Ok(Checkpoint { dir: dir.to_path_buf(), meta })
}

fn write_manifest(dir: &Path, meta: &CheckpointMeta) -> Result<()> {
    let tmp = dir.join("manifest.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(meta).expect("serializable meta"))?;
    fs::rename(tmp, dir.join("manifest.json"))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text).map_err(|e| Error::contract(format!("bad manifest: {e}")))
}

/// Rebuilds the bundle from `dir`; the element type must match the stored
/// dtype.
pub fn load_bundle<E: Element>(dir: &Path) -> Result<(NetworkBundle<E>, CheckpointMeta)> {
    let meta = read_manifest(dir)?;
    if meta.dtype != E::DTYPE {
        return Err(Error::contract(format!(
            "checkpoint dtype {} does not match requested {}",
            meta.dtype.name(),
            E::DTYPE.name()
        )));
    }
    let mut bundle = build_networks::<E>(&meta.network_config)?;
    read_set(&dir.join("encoder.bin"), &mut bundle.encoder.params)?;
    read_set(&dir.join("decoder.bin"), &mut bundle.decoder.params)?;
    read_set(&dir.join("c_med.bin"), &mut bundle.c_med.params)?;
    if let IdentityHead::Multiclass(h) = &mut bundle.c_id {
        read_set(&dir.join("c_id.bin"), &mut h.params)?;
    }
    read_set(&dir.join("discriminator.bin"), &mut bundle.discriminator.params)?;
    Ok((bundle, meta))
}

/// Persists an identity VAE (same manifest layout, single blob).
pub fn save_vae<E: Element>(
    dir: &Path,
    vae: &IdentityVae<E>,
    cfg: &NetworkConfig,
    epoch: usize,
    metric: f64,
) -> Result<Checkpoint> {
    fs::create_dir_all(dir)?;
    write_set(&dir.join("vae.bin"), &vae.params)?;
    let meta = CheckpointMeta {
        config_hash: cfg.config_hash(),
        epoch,
        metric,
        dtype: E::DTYPE,
        network_config: cfg.clone(),
        networks: vec!["vae".into()],
    };
    write_manifest(dir, &meta)?;
    Ok(Checkpoint { dir: dir.to_path_buf(), meta })
}

pub fn load_vae<E: Element>(dir: &Path) -> Result<(IdentityVae<E>, CheckpointMeta)> {
    let meta = read_manifest(dir)?;
    if meta.dtype != E::DTYPE {
        return Err(Error::contract(format!(
            "checkpoint dtype {} does not match requested {}",
            meta.dtype.name(),
            E::DTYPE.name()
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(meta.network_config.init_seed);
    use rand::SeedableRng;
    let mut vae = IdentityVae::<E>::new(&meta.network_config, &mut rng);
    read_set(&dir.join("vae.bin"), &mut vae.params)?;
    Ok((vae, meta))
}

/// SHA-256 over every parameter of the bundle's generator and discriminator
/// sets in declaration order. Two bundles hash equal iff their parameters are
/// bitwise equal.
pub fn param_hash<E: Element>(bundle: &NetworkBundle<E>) -> String {
    let mut h = Sha256::new();
    for (name, set) in set_names(bundle) {
        h.update(name.as_bytes());
        for i in 0..set.len() {
            h.update(set.name_of(i).as_bytes());
            for v in set.value_by_index(i).iter() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
    }
    hex_string(&h.finalize())
}
