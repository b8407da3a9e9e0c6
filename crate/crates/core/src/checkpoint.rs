//! On-disk checkpoints: `manifest.json` plus raw little-endian `weights.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::denoiser::{DenoiserNet, NetConfig};
use crate::error::{Error, Result};
use crate::lora::{AdapterBundle, LoraAdapter, LoraEntry, Provenance, Role};
use crate::schedule::ScheduleConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const DTYPE: &str = "f64";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Net,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
    /// Byte length.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ArtifactKind,
    pub tensors: Vec<TensorRecord>,
    /// Hex SHA-256 of `weights.bin`.
    pub sha256: String,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    /// Effective run configuration that produced the artifact.
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub meta: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Extra manifest content besides the tensors.
#[derive(Debug, Clone, Default)]
pub struct SaveOptions {
    pub schedule: Option<ScheduleConfig>,
    pub config: Value,
}

/// Writes `tensors` in the given order; names must be unique.
pub fn save_checkpoint(
    dir: &Path,
    kind: ArtifactKind,
    tensors: &[(String, &Tensor)],
    opts: &SaveOptions,
    meta: Value,
) -> Result<Manifest> {
    let mut seen = std::collections::BTreeSet::new();
    let mut bytes = Vec::new();
    let mut records = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
        }
        let offset = bytes.len() as u64;
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        records.push(TensorRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset,
            length: bytes.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        tensors: records,
        sha256: hex::encode(Sha256::digest(&bytes)),
        schedule: opts.schedule,
        config: opts.config.clone(),
        meta,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(WEIGHTS_FILE), &bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a checkpoint directory, verifying version, hash and layout.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: Value = serde_json::from_str(&text)?;
    let version = raw.get("format_version").and_then(Value::as_u64);
    match version {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::UnsupportedVersion {
                found: v as u32,
                supported: FORMAT_VERSION,
            })
        }
        None => return Err(Error::Corrupted("manifest lacks format_version".into())),
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.sha256 {
        return Err(Error::Corrupted(format!(
            "weights hash {digest} does not match manifest {}",
            manifest.sha256
        )));
    }
    let mut cursor = 0u64;
    let mut tensors = BTreeMap::new();
    for r in &manifest.tensors {
        let numel: usize = r.shape.iter().product();
        if r.dtype != DTYPE || r.offset != cursor || r.length != 8 * numel as u64 {
            return Err(Error::Corrupted(format!("bad table entry for `{}`", r.name)));
        }
        let end = r.offset + r.length;
        if end > bytes.len() as u64 {
            return Err(Error::Corrupted(format!("`{}` runs past end of weights", r.name)));
        }
        let data = bytes[r.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(r.shape.clone(), data)
            .map_err(|e| Error::Corrupted(format!("`{}`: {e}", r.name)))?;
        if tensors.insert(r.name.clone(), t).is_some() {
            return Err(Error::Corrupted(format!("duplicate tensor `{}`", r.name)));
        }
        cursor = end;
    }
    if cursor != bytes.len() as u64 {
        return Err(Error::Corrupted("tensor table does not cover weights.bin".into()));
    }
    Ok(Checkpoint { manifest, tensors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetMeta {
    net: NetConfig,
    fingerprint: String,
}

pub fn save_net(dir: &Path, net: &DenoiserNet, opts: &SaveOptions) -> Result<Manifest> {
    let tensors: Vec<(String, &Tensor)> = net.params().iter().map(|(k, v)| (k.clone(), v)).collect();
    let meta = NetMeta {
        net: net.config().clone(),
        fingerprint: net.fingerprint(),
    };
    save_checkpoint(dir, ArtifactKind::Net, &tensors, opts, serde_json::to_value(meta)?)
}

fn expect_kind(m: &Manifest, kind: ArtifactKind) -> Result<()> {
    if m.kind != kind {
        return Err(Error::invalid(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            m.kind
        )));
    }
    Ok(())
}

pub fn load_net(dir: &Path) -> Result<(DenoiserNet, Manifest)> {
    let ck = load_checkpoint(dir)?;
    expect_kind(&ck.manifest, ArtifactKind::Net)?;
    let meta: NetMeta = serde_json::from_value(ck.manifest.meta.clone())?;
    let net = DenoiserNet::from_params(meta.net, ck.tensors)?;
    if net.fingerprint() != meta.fingerprint {
        return Err(Error::Incompatible {
            expected: meta.fingerprint,
            found: net.fingerprint(),
        });
    }
    Ok((net, ck.manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryMeta {
    rank: usize,
    scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterMeta {
    role: Role,
    name: String,
    base_fingerprint: String,
    targets: Vec<String>,
    entries: BTreeMap<String, EntryMeta>,
    #[serde(default)]
    provenance: Option<Provenance>,
}

fn factor_names(layer: &str) -> (String, String) {
    (format!("{layer}.lora_a"), format!("{layer}.lora_b"))
}

pub fn save_adapter(dir: &Path, bundle: &AdapterBundle, opts: &SaveOptions) -> Result<Manifest> {
    let a = &bundle.adapter;
    let mut tensors = Vec::new();
    let mut entries = BTreeMap::new();
    for (layer, e) in a.entries() {
        let (na, nb) = factor_names(layer);
        tensors.push((na, &e.a));
        tensors.push((nb, &e.b));
        entries.insert(
            layer.clone(),
            EntryMeta {
                rank: e.rank(),
                scale: e.scale,
            },
        );
    }
    let meta = AdapterMeta {
        role: bundle.role,
        name: bundle.name.clone(),
        base_fingerprint: a.base_fingerprint().to_string(),
        targets: a.targets(),
        entries,
        provenance: bundle.provenance.clone(),
    };
    save_checkpoint(dir, ArtifactKind::Adapter, &tensors, opts, serde_json::to_value(meta)?)
}

pub fn load_adapter(dir: &Path) -> Result<(AdapterBundle, Manifest)> {
    let mut ck = load_checkpoint(dir)?;
    expect_kind(&ck.manifest, ArtifactKind::Adapter)?;
    let meta: AdapterMeta = serde_json::from_value(ck.manifest.meta.clone())?;
    let mut entries = BTreeMap::new();
    for (layer, em) in &meta.entries {
        let (na, nb) = factor_names(layer);
        let missing = |n: &str| Error::Corrupted(format!("adapter lacks tensor `{n}`"));
        let a = ck.tensors.remove(&na).ok_or_else(|| missing(&na))?;
        let b = ck.tensors.remove(&nb).ok_or_else(|| missing(&nb))?;
        if a.rows() != em.rank {
            return Err(Error::Corrupted(format!("rank of `{layer}` disagrees with manifest")));
        }
        entries.insert(layer.clone(), LoraEntry { a, b, scale: em.scale });
    }
    if let Some(extra) = ck.tensors.keys().next() {
        return Err(Error::Corrupted(format!("unexpected tensor `{extra}`")));
    }
    let adapter = LoraAdapter::from_entries(meta.base_fingerprint, entries)?;
    if adapter.targets() != meta.targets {
        return Err(Error::Corrupted("adapter targets disagree with entries".into()));
    }
    Ok((
        AdapterBundle {
            adapter,
            role: meta.role,
            name: meta.name,
            provenance: meta.provenance,
        },
        ck.manifest,
    ))
}
