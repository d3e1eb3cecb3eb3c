//! Versioned parameter checkpoints.
//!
//! Layout: one line of compact JSON (the header) terminated by `\n`, then the
//! raw little-endian f64 payload. Manifest offsets are byte positions inside
//! the payload.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub step: u64,
    pub lambda: f64,
    pub manifest: BTreeMap<String, ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub params: EncoderParams,
    pub step: u64,
    pub lambda: f64,
}

pub fn write_checkpoint<W: Write>(mut out: W, ckpt: &Checkpoint) -> Result<()> {
    let mut manifest = BTreeMap::new();
    let mut offset = 0u64;
    let named = ckpt.params.named();
    for (name, t) in &named {
        manifest.insert(
            name.clone(),
            ManifestEntry {
                shape: t.shape().to_vec(),
                offset,
            },
        );
        offset += 8 * t.len() as u64;
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        encoder: ckpt.encoder.clone(),
        step: ckpt.step,
        lambda: ckpt.lambda,
        manifest,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (_, t) in &named {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<Checkpoint> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Checkpoint("missing header line".into()));
    }
    let probe: serde_json::Value =
        serde_json::from_str(&line).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    match probe.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => return Err(Error::Checkpoint(format!("unsupported format_version {v}"))),
        None => return Err(Error::Checkpoint("header lacks format_version".into())),
    }
    let header: CheckpointHeader =
        serde_json::from_value(probe).map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    header.encoder.validate()?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let mut tensors = HashMap::new();
    for (name, entry) in &header.manifest {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload too short for tensor {name}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?
            .with_grad();
        tensors.insert(name.clone(), t);
    }
    let expected: usize = header
        .manifest
        .values()
        .map(|e| 8 * e.shape.iter().product::<usize>())
        .sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest describes {expected}",
            payload.len()
        )));
    }
    // shapes come from a throwaway initialization; every value is overwritten
    let mut params = EncoderParams::init(
        &header.encoder,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )?;
    params.load_named(tensors)?;
    Ok(Checkpoint {
        encoder: header.encoder,
        params,
        step: header.step,
        lambda: header.lambda,
    })
}

/// Names of top-level encoder fields whose values differ.
pub fn config_mismatch(expected: &EncoderConfig, found: &EncoderConfig) -> Vec<String> {
    let a = serde_json::to_value(expected).expect("config serializes");
    let b = serde_json::to_value(found).expect("config serializes");
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return vec![];
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> Checkpoint {
        let encoder = EncoderConfig {
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            ..EncoderConfig::default()
        };
        let params = EncoderParams::init(&encoder, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        Checkpoint {
            encoder,
            params,
            step: 42,
            lambda: 0.125,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.encoder, ckpt.encoder);
        assert_eq!((back.step, back.lambda.to_bits()), (42, 0.125f64.to_bits()));
        for ((_, a), (_, b)) in ckpt.params.named().into_iter().zip(back.params.named()) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let text = String::from_utf8_lossy(&buf).replacen("\"format_version\":1", "\"format_version\":9", 1);
        let err = read_checkpoint(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("format_version 9"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatch_names_fields() {
        let a = EncoderConfig::default();
        let b = EncoderConfig {
            model_dim: 64,
            rho: 0.5,
            ..a.clone()
        };
        assert_eq!(config_mismatch(&a, &b), vec!["model_dim".to_owned(), "rho".to_owned()]);
        assert!(config_mismatch(&a, &a).is_empty());
    }
}
