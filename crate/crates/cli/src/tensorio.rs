//! Tensor container file format.
//!
//! Layout: magic `SLTC`, a little-endian u32 version, a little-endian u64
//! header length, a JSON header, then every tensor's f32 data concatenated
//! little-endian in header order. Checkpoints store the model config in the
//! header meta; delta files store estimation provenance (role, pool, pair
//! seeds, padding).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use shapelab_core::intervene::DeltaVectors;
use shapelab_core::model::{ModelConfig, ModelParams};
use shapelab_core::shapes::Role;
use shapelab_core::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SLTC";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Write named tensors plus a JSON meta blob.
pub fn save_container(
    path: &Path,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header {
        meta,
        tensors: entries,
    })?;
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("create {path:?}"))?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in tensors {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a container back into `(meta, name -> tensor)`.
pub fn load_container(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, Tensor>)> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("open {path:?}"))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("{path:?} is not a shapelab tensor container");
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        bail!("unsupported container version {version}");
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total * 4 {
        bail!(
            "payload of {path:?} has {} bytes, header wants {}",
            payload.len(),
            total * 4
        );
    }
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let mut data = Vec::with_capacity(e.len);
        for i in 0..e.len {
            let at = (e.offset + i) * 4;
            data.push(f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()));
        }
        tensors.insert(
            e.name.clone(),
            Tensor::from_vec(e.shape.clone(), data)
                .map_err(|err| anyhow::anyhow!("tensor {}: {err}", e.name))?,
        );
    }
    Ok((header.meta, tensors))
}

/// Write a single named tensor.
pub fn save_tensor(path: &Path, name: &str, tensor: &Tensor) -> Result<()> {
    save_container(
        path,
        serde_json::json!({"kind": "tensor"}),
        &[(name.to_string(), tensor)],
    )
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let named: Vec<(String, &Tensor)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.as_ref()))
        .collect();
    save_container(
        path,
        serde_json::json!({
            "kind": "checkpoint",
            "config": cfg,
            "fingerprint": params.fingerprint(cfg),
        }),
        &named,
    )
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let (meta, mut tensors) = load_container(path)?;
    if meta["kind"] != "checkpoint" {
        bail!("{path:?} is not a checkpoint container");
    }
    let cfg: ModelConfig = serde_json::from_value(meta["config"].clone())?;
    let mut params = ModelParams::init(&cfg, 0);
    for (name, slot) in params.named_mut() {
        let loaded = tensors
            .remove(&name)
            .with_context(|| format!("checkpoint missing tensor {name}"))?;
        if loaded.shape() != slot.shape() {
            bail!(
                "tensor {name}: shape {:?} does not match config {:?}",
                loaded.shape(),
                slot.shape()
            );
        }
        *slot = Arc::new(loaded);
    }
    if !tensors.is_empty() {
        bail!(
            "checkpoint has unexpected tensors: {:?}",
            tensors.keys().collect::<Vec<_>>()
        );
    }
    Ok((cfg, params))
}

fn role_str(role: Role) -> &'static str {
    match role {
        Role::Object => "object",
        Role::Color => "color",
        Role::Item => "item",
    }
}

fn role_from_str(s: &str) -> Result<Role> {
    Ok(match s {
        "object" => Role::Object,
        "color" => Role::Color,
        "item" => Role::Item,
        other => bail!("unknown role {other:?}"),
    })
}

pub fn save_deltas(path: &Path, deltas: &DeltaVectors) -> Result<()> {
    let t = Tensor::from_vec(
        vec![deltas.n_layers, deltas.span_len, deltas.width],
        deltas.data.clone(),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    save_container(
        path,
        serde_json::json!({
            "kind": "deltas",
            "role": role_str(deltas.role),
            "pool": "estimation",
            "pair_seeds": deltas.pair_seeds,
            "padding": deltas.padding,
            "n_pairs": deltas.n_pairs,
            "norms_per_layer": deltas.norms_per_layer,
        }),
        &[("delta".to_string(), &t)],
    )
}

pub fn load_deltas(path: &Path) -> Result<DeltaVectors> {
    let (meta, mut tensors) = load_container(path)?;
    if meta["kind"] != "deltas" {
        bail!("{path:?} is not a delta container");
    }
    let t = tensors
        .remove("delta")
        .context("delta container missing the `delta` tensor")?;
    let shape = t.shape().to_vec();
    if shape.len() != 3 {
        bail!("delta tensor must be rank 3, got {shape:?}");
    }
    let role = role_from_str(meta["role"].as_str().context("role")?)?;
    let pair_seeds: Vec<u64> = serde_json::from_value(meta["pair_seeds"].clone())?;
    let norms: Vec<f32> = serde_json::from_value(meta["norms_per_layer"].clone())?;
    Ok(DeltaVectors {
        role,
        n_layers: shape[0],
        span_len: shape[1],
        width: shape[2],
        padding: meta["padding"].as_u64().context("padding")? as usize,
        n_pairs: meta["n_pairs"].as_u64().context("n_pairs")? as usize,
        data: t.into_data(),
        norms_per_layer: norms,
        pair_seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sltc");
        let cfg = ModelConfig::tiny(1, 16, 2);
        let params = ModelParams::init(&cfg, 11);
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params.fingerprint(&cfg), params2.fingerprint(&cfg2));
        for ((na, ta), (nb, tb)) in params.named().iter().zip(params2.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    /// save -> load -> evaluate gives identical accuracy.
    #[test]
    fn checkpoint_round_trip_preserves_evaluation() {
        use crate::parallel::ThreadedRunner;
        use shapelab_core::train::{self, BatchRunner};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sltc");
        let cfg = ModelConfig::tiny(1, 16, 2);
        let params = ModelParams::init(&cfg, 23);
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        let set = train::eval_instances(12, 5);
        let runner = ThreadedRunner::new(2);
        let before = runner.evaluate(&params, &cfg, &set).unwrap();
        let after = runner.evaluate(&params2, &cfg2, &set).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.correct, b.correct);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }

    #[test]
    fn tensor_container_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sltc");
        std::fs::write(&path, b"not a container").unwrap();
        assert!(load_container(&path).is_err());
    }
}
