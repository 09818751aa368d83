//! On-disk checkpoints: a directory holding `manifest.json` (metadata and
//! tensor index) and `params.bin` (raw little-endian f64 values).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{contract, Error, Result};

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into `params.bin`, in f64 elements.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_hash: String,
    step: usize,
    metric: Option<f64>,
    encoder: EncoderConfig,
    theta: Vec<TensorEntry>,
    phi: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: usize,
    /// Dev metric at the time of saving, if any.
    pub metric: Option<f64>,
    pub model: EncoderParams,
    /// The transformation network, kept for inspection. Evaluation never
    /// uses it.
    pub phi: Option<ParamSet>,
}

fn index(set: &ParamSet, offset: &mut usize, blob: &mut Vec<u8>) -> Vec<TensorEntry> {
    set.iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: *offset,
            };
            *offset += t.numel();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            e
        })
        .collect()
}

fn restore(entries: &[TensorEntry], values: &[f64]) -> Result<ParamSet> {
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let Some(slice) = values.get(e.offset..e.offset + n) else {
                return contract(format!("tensor '{}' lies outside {PARAMS}", e.name));
            };
            Ok((
                e.name.clone(),
                Tensor::new(e.shape.clone(), slice.to_vec())?,
            ))
        })
        .collect()
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut offset = 0;
        let theta = index(&self.model.params, &mut offset, &mut blob);
        let phi = self
            .phi
            .as_ref()
            .map(|p| index(p, &mut offset, &mut blob))
            .unwrap_or_default();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            step: self.step,
            metric: self.metric,
            encoder: self.model.config.clone(),
            theta,
            phi,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(dir.join(PARAMS), blob)?;
        fs::write(dir.join(MANIFEST), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json = fs::read_to_string(dir.join(MANIFEST))?;
        let m: Manifest = serde_json::from_str(&json)
            .map_err(|e| Error::Io(format!("corrupt {MANIFEST}: {e}")))?;
        if m.format_version != FORMAT_VERSION {
            return contract(format!(
                "unsupported checkpoint format {}",
                m.format_version
            ));
        }
        m.encoder.validate()?;
        let bytes = fs::read(dir.join(PARAMS))?;
        if bytes.len() % 8 != 0 {
            return contract(format!(
                "{PARAMS} length {} is not a multiple of 8",
                bytes.len()
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let expected: usize = m
            .theta
            .iter()
            .chain(&m.phi)
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if expected != values.len() {
            return contract(format!(
                "{PARAMS} holds {} values but the manifest indexes {expected}",
                values.len()
            ));
        }
        let theta = restore(&m.theta, &values)?;
        EncoderParams::init(&m.encoder, 0)?
            .params
            .check_same_layout(&theta)?;
        let phi = if m.phi.is_empty() {
            None
        } else {
            Some(restore(&m.phi, &values)?)
        };
        Ok(Checkpoint {
            config_hash: m.config_hash,
            step: m.step,
            metric: m.metric,
            model: EncoderParams {
                config: m.encoder,
                params: theta,
            },
            phi,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rtn::RtnParams;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 8,
            max_len: 8,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = EncoderParams::init(&tiny(), 3).unwrap();
        model.params.get_mut("head.b").unwrap().data_mut()[0] = -0.0;
        let ck = Checkpoint {
            config_hash: "abc".into(),
            step: 40,
            metric: Some(0.5),
            model,
            phi: Some(RtnParams::init(8, 4, 1).unwrap().to_param_set()),
        };
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.config_hash, "abc");
        for (a, b) in ck.model.params.iter().zip(back.model.params.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(a.0, b.0);
            assert_eq!(bits(a.1), bits(b.1));
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn truncated_params_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint {
            config_hash: String::new(),
            step: 0,
            metric: None,
            model: EncoderParams::init(&tiny(), 0).unwrap(),
            phi: None,
        };
        ck.save(dir.path()).unwrap();
        let p = dir.path().join(PARAMS);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
