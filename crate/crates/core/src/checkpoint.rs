//! Checkpoint directories: `manifest.json` plus a `weights.bin` blob of
//! little-endian f32 values, tensors concatenated in manifest order.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel, Gate, Group, ParamKind, Proj};
use crate::error::{Error, Result};
use crate::redundancy::PruningPlan;
use crate::retrieval::LoraSettings;
use crate::slimming::PruneMask;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// Provenance carried alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    #[serde(default)]
    pub pruning: Option<PruningPlan>,
    #[serde(default)]
    pub slim_mask: Option<PruneMask>,
    #[serde(default)]
    pub history: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub attn_present: Vec<bool>,
    pub mlp_present: Vec<bool>,
    pub gates_frozen: Vec<bool>,
    pub lora: Option<LoraSettings>,
    pub fingerprint: String,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

/// Holds the directory lock for the duration of a write.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let p = dir.join(LOCK_FILE);
        OpenOptions::new().write(true).create_new(true).open(&p).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Checkpoint(format!("{} is locked by another writer", dir.display()))
            } else {
                Error::io(&p, e)
            }
        })?;
        Ok(Self(p))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn lora_settings(model: &EncoderModel<f32>) -> Option<LoraSettings> {
    let params = model.params();
    let a = params.iter().find(|p| p.kind == ParamKind::LoraA)?;
    let mut targets: Vec<Proj> = params
        .iter()
        .filter(|p| p.kind == ParamKind::LoraA)
        .filter_map(|p| p.name.rsplit('.').nth(1).and_then(|n| Proj::parse(n).ok()))
        .collect();
    targets.sort();
    targets.dedup();
    let alpha = model
        .blocks
        .iter()
        .flat_map(|b| {
            let attn = b.attn.iter().flat_map(|s| [&s.attn.q, &s.attn.k, &s.attn.v, &s.attn.o]);
            let mlp = b.mlp.iter().flat_map(|s| [&s.mlp.gate, &s.mlp.up, &s.mlp.down]);
            attn.chain(mlp).filter_map(|l| l.lora.as_ref().map(|l| l.alpha)).collect::<Vec<_>>()
        })
        .next()?;
    Some(LoraSettings { rank: a.tensor.rows(), alpha, targets })
}

pub fn manifest_of(model: &EncoderModel<f32>, meta: &CheckpointMeta) -> Manifest {
    let mut offset = 0u64;
    let tensors = model
        .params()
        .into_iter()
        .map(|p| {
            let length = 4 * p.tensor.numel() as u64;
            let e = TensorEntry { name: p.name, shape: p.tensor.shape().to_vec(), offset, length };
            offset += length;
            e
        })
        .collect();
    Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        attn_present: (0..model.n_layers()).map(|l| model.has_sublayer(Group::Attn, l)).collect(),
        mlp_present: (0..model.n_layers()).map(|l| model.has_sublayer(Group::Mlp, l)).collect(),
        gates_frozen: model
            .blocks
            .iter()
            .map(|b| b.mlp.as_ref().and_then(|s| s.mlp.z.as_ref()).is_some_and(|z| z.frozen))
            .collect(),
        lora: lora_settings(model),
        fingerprint: model.fingerprint(),
        meta: meta.clone(),
        tensors,
    }
}

pub fn save(model: &EncoderModel<f32>, meta: &CheckpointMeta, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _lock = DirLock::acquire(dir)?;
    let manifest = manifest_of(model, meta);
    let mut blob = Vec::with_capacity(manifest.tensors.iter().map(|t| t.length as usize).sum());
    for p in model.params() {
        for &x in p.tensor.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let wp = dir.join(WEIGHTS_FILE);
    std::fs::write(&wp, &blob).map_err(|e| Error::io(&wp, e))?;
    let mp = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse("manifest", e))?;
    std::fs::write(&mp, text + "\n").map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mp = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(mp.display().to_string(), e))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version:?} (this build reads {FORMAT_VERSION})"
        )));
    }
    serde_json::from_value(raw).map_err(|e| Error::parse(mp.display().to_string(), e))
}

/// Rebuild the architecture the manifest describes, with placeholder weights.
fn skeleton(m: &Manifest) -> Result<EncoderModel<f32>> {
    let l = m.config.n_layers;
    if m.attn_present.len() != l || m.mlp_present.len() != l || m.gates_frozen.len() != l {
        return Err(Error::Checkpoint("presence flags do not match n_layers".into()));
    }
    let mut model = EncoderModel::new(m.config.clone(), 0)?;
    let shape_of = |name: &str| m.tensors.iter().find(|t| t.name == name).map(|t| t.shape.clone());
    for layer in 0..l {
        if !m.attn_present[layer] {
            model.remove_sublayer(Group::Attn, layer);
        }
        if !m.mlp_present[layer] {
            model.remove_sublayer(Group::Mlp, layer);
            continue;
        }
        let width = shape_of(&format!("blocks.{layer}.mlp.gate.weight"))
            .and_then(|s| s.first().copied())
            .ok_or_else(|| Error::Checkpoint(format!("missing MLP weights for layer {layer}")))?;
        let mlp = &mut model.blocks[layer].mlp.as_mut().expect("present").mlp;
        if width > mlp.width() || width == 0 {
            return Err(Error::Checkpoint(format!("layer {layer} MLP width {width} is invalid")));
        }
        if width < mlp.width() {
            mlp.keep_neurons(&(0..width).collect::<Vec<_>>());
        }
        if let Some(s) = shape_of(&format!("blocks.{layer}.mlp.z")) {
            mlp.z = Some(Gate { values: Tensor::zeros(s), frozen: m.gates_frozen[layer] });
        }
    }
    if let Some(lora) = &m.lora {
        model.attach_lora(&lora.targets, lora.rank, lora.alpha, 0)?;
    }
    Ok(model)
}

pub fn load(dir: &Path) -> Result<(EncoderModel<f32>, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = skeleton(&manifest)?;
    let wp = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&wp).map_err(|e| Error::io(&wp, e))?;
    let declared: u64 = manifest.tensors.iter().map(|t| t.length).sum();
    if blob.len() as u64 != declared {
        return Err(Error::Checkpoint(format!(
            "weights blob is {} bytes but the manifest declares {declared}",
            blob.len()
        )));
    }
    let mut params = model.params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors but the architecture has {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    let mut expected_offset = 0u64;
    for (p, e) in params.iter_mut().zip(&manifest.tensors) {
        if p.name != e.name || p.tensor.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match manifest entry `{}` {:?}",
                p.name,
                p.tensor.shape(),
                e.name,
                e.shape
            )));
        }
        if e.offset != expected_offset || e.length != 4 * p.tensor.numel() as u64 {
            return Err(Error::Checkpoint(format!("bad offset or length for `{}`", e.name)));
        }
        expected_offset += e.length;
        let bytes = &blob[e.offset as usize..(e.offset + e.length) as usize];
        for (x, c) in p.tensor.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    drop(params);
    if model.fingerprint() != manifest.fingerprint {
        return Err(Error::Checkpoint("weights do not match the manifest fingerprint".into()));
    }
    Ok((model, manifest))
}

/// True when `dir` looks like a checkpoint directory.
pub fn is_checkpoint(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file() && File::open(dir.join(WEIGHTS_FILE)).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slimming::{apply_mask, global_prune, install_gates, shrink, SlimState};

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    fn round_trip(m: &EncoderModel<f32>) -> EncoderModel<f32> {
        let dir = tempfile::tempdir().unwrap();
        save(m, &CheckpointMeta::default(), dir.path()).unwrap();
        let (back, _) = load(dir.path()).unwrap();
        for x in [vec![1u32, 2, 3], vec![7; 20], vec![400]] {
            assert_eq!(bits(&m.encode(&x).unwrap()), bits(&back.encode(&x).unwrap()));
        }
        assert_eq!(back.fingerprint(), m.fingerprint());
        back
    }

    fn small() -> EncoderModel<f32> {
        EncoderModel::new(EncoderConfig { n_layers: 3, d_model: 16, n_heads: 2, d_ff: 24, ..Default::default() }, 5).unwrap()
    }

    #[test]
    fn plain_dropped_gated_lora_and_shrunk_models_round_trip() {
        let mut m = small();
        round_trip(&m);
        m.remove_sublayer(Group::Attn, 1);
        m.remove_sublayer(Group::Mlp, 2);
        round_trip(&m);
        let mut g = m.clone();
        install_gates(&mut g).unwrap();
        let back = round_trip(&g);
        assert!(back.has_gates());
        let mask = global_prune(&SlimState::of(&g), 0.3).unwrap();
        apply_mask(&mut g, &mask).unwrap();
        assert!(round_trip(&g).blocks[0].mlp.as_ref().unwrap().mlp.z.as_ref().unwrap().frozen);
        let s = shrink(&g, &mask).unwrap();
        round_trip(&s);
        let mut l = s.clone();
        l.attach_lora(&[Proj::Q, Proj::Down], 2, 4.0, 1).unwrap();
        l.params_mut().into_iter().filter(|p| p.kind == ParamKind::LoraB).for_each(|p| p.tensor.data_mut()[0] = 0.25);
        round_trip(&l);
    }

    #[test]
    fn corrupted_blob_and_unknown_version_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        save(&small(), &CheckpointMeta::default(), dir.path()).unwrap();
        let wp = dir.path().join(WEIGHTS_FILE);
        let mut blob = std::fs::read(&wp).unwrap();
        blob.pop();
        std::fs::write(&wp, &blob).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));

        save(&small(), &CheckpointMeta::default(), dir.path()).unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mp).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        std::fs::write(&mp, text).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn flipped_weight_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save(&small(), &CheckpointMeta::default(), dir.path()).unwrap();
        let wp = dir.path().join(WEIGHTS_FILE);
        let mut blob = std::fs::read(&wp).unwrap();
        blob[10] ^= 0x40;
        std::fs::write(&wp, &blob).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn locked_directory_refuses_writes() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(LOCK_FILE), "").unwrap();
        assert!(matches!(save(&small(), &CheckpointMeta::default(), dir.path()), Err(Error::Checkpoint(_))));
        std::fs::remove_file(dir.path().join(LOCK_FILE)).unwrap();
        save(&small(), &CheckpointMeta::default(), dir.path()).unwrap();
        assert!(!dir.path().join(LOCK_FILE).exists());
        assert!(is_checkpoint(dir.path()));
    }
}
