//! Binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header length, a
//! JSON header (configuration, step, RNG state, optimizer step counts and an index
//! of named arrays), the arrays as little-endian `f64`, then a SHA-256 of everything
//! before it. Writes go to a temporary file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use caae_core::networks::{init_params, Block, NetworkConfig};
use caae_core::optim::AdamState;
use caae_core::rng::{RngState, TrainRng};
use caae_core::trainer::{Moments, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"CAAECKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    step: u64,
    rng: RngState,
    /// ADAM update counts in `Block::ALL` order.
    adam_steps: [u64; 4],
    arrays: Vec<ArrayEntry>,
}

fn moments(m: &Moments, block: Block) -> &AdamState {
    match block {
        Block::Encoder => &m.enc,
        Block::Generator => &m.gen,
        Block::LatentDisc => &m.dz,
        Block::ImageDisc => &m.dimg,
    }
}

fn moments_mut(m: &mut Moments, block: Block) -> &mut AdamState {
    match block {
        Block::Encoder => &mut m.enc,
        Block::Generator => &mut m.gen,
        Block::LatentDisc => &mut m.dz,
        Block::ImageDisc => &mut m.dimg,
    }
}

/// Every array of `state` under a stable name, in file order.
fn arrays(state: &TrainState) -> Vec<(String, &[f64])> {
    let mut out = Vec::new();
    for block in Block::ALL {
        let group = state.params.group(block);
        let adam = moments(&state.moments, block);
        let b = block.name();
        for (i, p) in group.params.iter().enumerate() {
            out.push((format!("{b}/param/{}", p.name), p.tensor.data()));
            out.push((format!("{b}/adam_m/{}", p.name), &adam.m[i][..]));
            out.push((format!("{b}/adam_v/{}", p.name), &adam.v[i][..]));
        }
        for buf in &group.buffers {
            out.push((format!("{b}/buffer/{}", buf.name), buf.tensor.data()));
        }
    }
    out
}

fn arrays_mut(state: &mut TrainState) -> Vec<(String, &mut [f64])> {
    let mut out = Vec::new();
    let TrainState { params, moments: m, .. } = state;
    let groups = [&mut params.enc, &mut params.gen, &mut params.dz, &mut params.dimg];
    let adams = [&mut m.enc, &mut m.gen, &mut m.dz, &mut m.dimg];
    for ((block, group), adam) in Block::ALL.iter().zip(groups).zip(adams) {
        let b = block.name();
        let AdamState { m, v, .. } = adam;
        for ((p, m), v) in group.params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
            out.push((format!("{b}/param/{}", p.name), p.tensor.data_mut()));
            out.push((format!("{b}/adam_m/{}", p.name), &mut m[..]));
            out.push((format!("{b}/adam_v/{}", p.name), &mut v[..]));
        }
        for buf in group.buffers.iter_mut() {
            out.push((format!("{b}/buffer/{}", buf.name), buf.tensor.data_mut()));
        }
    }
    out
}

pub fn encode(state: &TrainState, config: &TrainConfig) -> Vec<u8> {
    let arrays = arrays(state);
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        step: state.step,
        rng: state.rng.state(),
        adam_steps: Block::ALL.map(|b| moments(&state.moments, b).t),
        arrays: arrays.iter().map(|(name, a)| ArrayEntry { name: name.clone(), len: a.len() }).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let body_len: usize = arrays.iter().map(|(_, a)| a.len() * 8).sum();
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + body_len + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, a) in &arrays {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Atomically write a checkpoint.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = encode(state, config);
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).at(dir)?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp", path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")));
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(&bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

/// Fields of `expected` that `found` disagrees with, as readable messages.
pub fn network_differences(found: &NetworkConfig, expected: &NetworkConfig) -> Vec<String> {
    let a = serde_json::to_value(found).expect("config serializes");
    let b = serde_json::to_value(expected).expect("config serializes");
    let (a, b) = (a.as_object().expect("struct"), b.as_object().expect("struct"));
    b.iter()
        .filter(|(k, v)| a.get(*k) != Some(v))
        .map(|(k, v)| format!("network.{k}: checkpoint has {}, expected {v}", a.get(k).cloned().unwrap_or_default()))
        .collect()
}

pub fn decode(bytes: &[u8], path: &Path, expected: Option<&NetworkConfig>) -> Result<(TrainState, TrainConfig)> {
    let corrupt = |reason: &str| Error::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < PREFIX_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { path: path.to_path_buf(), found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(corrupt("truncated"));
    }
    let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let header_len = u64::from_le_bytes(content[12..20].try_into().expect("8 bytes")) as usize;
    let header_bytes = content.get(PREFIX_LEN..PREFIX_LEN.saturating_add(header_len)).ok_or_else(|| corrupt("header overruns file"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(corrupt("header version disagrees with file prefix"));
    }
    if let Some(expected) = expected {
        let diffs = network_differences(&header.config.network, expected);
        if !diffs.is_empty() {
            return Err(Error::ShapeMismatch(diffs));
        }
    }
    header.config.validate()?;

    let params = init_params(&header.config.network, 0)?;
    let mut state = TrainState::from_params(params, header.config.seed);
    state.step = header.step;
    state.rng = TrainRng::restore(&header.rng);
    for (block, t) in Block::ALL.iter().zip(header.adam_steps) {
        moments_mut(&mut state.moments, *block).t = t;
    }
    let mut slots = arrays_mut(&mut state);
    if slots.len() != header.arrays.len() {
        return Err(Error::ShapeMismatch(vec![format!(
            "checkpoint holds {} arrays, configuration implies {}",
            header.arrays.len(),
            slots.len()
        )]));
    }
    let mut body = &content[PREFIX_LEN + header_len..];
    for (entry, (name, slot)) in header.arrays.iter().zip(slots.iter_mut()) {
        if &entry.name != name || entry.len != slot.len() {
            return Err(Error::ShapeMismatch(vec![format!(
                "array {} (length {}) where {name} (length {}) was expected",
                entry.name,
                entry.len,
                slot.len()
            )]));
        }
        let n = entry.len * 8;
        if body.len() < n {
            return Err(corrupt("array data overruns file"));
        }
        for (v, chunk) in slot.iter_mut().zip(body[..n].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        body = &body[n..];
    }
    if !body.is_empty() {
        return Err(corrupt("trailing data after arrays"));
    }
    Ok((state, header.config))
}

/// Load a checkpoint, optionally insisting on a network configuration.
pub fn load_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<(TrainState, TrainConfig)> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes, path, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use caae_core::data::{make_batches, synth_faces, AgeLabel, Sample};
    use caae_core::trainer::train_step;

    fn trained() -> (TrainState, TrainConfig) {
        let cfg = TrainConfig {
            batch_size: 4,
            network: NetworkConfig { image_size: 16, channels: 1, latent_dim: 4, base_filters: 8, num_scales: 2, use_batchnorm_dimg: true },
            ..TrainConfig::default()
        };
        let samples: Vec<Sample> = synth_faces(4, 16, 1)
            .unwrap()
            .into_iter()
            .map(|(image, age)| Sample { image, label: AgeLabel::from_age(age).unwrap() })
            .collect();
        let batch = &make_batches(&samples, 4, 0, 0).unwrap()[0];
        let (state, _) = train_step(TrainState::new(&cfg).unwrap(), batch, &cfg).unwrap();
        (state, cfg)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (state, cfg) = trained();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt/a.ckpt");
        save_checkpoint(&state, &cfg, &p).unwrap();
        let (back, back_cfg) = load_checkpoint(&p, Some(&cfg.network)).unwrap();
        assert_eq!(back, state);
        assert_eq!(back_cfg, cfg);
        assert_eq!(back.rng.state(), state.rng.state());
        assert!(fs::read_dir(p.parent().unwrap()).unwrap().count() == 1, "temporary file left behind");
    }

    #[test]
    fn mismatched_config_names_the_field() {
        let (state, cfg) = trained();
        let bytes = encode(&state, &cfg);
        let other = NetworkConfig { latent_dim: 8, ..cfg.network };
        let err = decode(&bytes, Path::new("x"), Some(&other)).unwrap_err();
        let Error::ShapeMismatch(msgs) = &err else { panic!("{err:?}") };
        assert_eq!(msgs.len(), 1);
        assert!(msgs[0].starts_with("network.latent_dim"), "{msgs:?}");
    }

    #[test]
    fn truncation_and_tampering_are_corrupt() {
        let (state, cfg) = trained();
        let bytes = encode(&state, &cfg);
        for cut in [bytes.len() - 1, bytes.len() / 2, 30, 10] {
            let err = decode(&bytes[..cut], Path::new("x"), None).unwrap_err();
            assert!(matches!(err, Error::Corrupt { .. }), "cut {cut}: {err:?}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped, Path::new("x"), None), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let (state, cfg) = trained();
        let mut bytes = encode(&state, &cfg);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = decode(&bytes, Path::new("x"), None).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 7, expected: 1, .. }), "{err:?}");
    }
}
