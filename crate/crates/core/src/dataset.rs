//! Binary dataset container.
//!
//! Layout: the magic bytes `MCRA1\n`, one JSON header line terminated by
//! `\n`, then `num_samples * M * D * D` little-endian `f64` gains ordered
//! `[sample][channel][receiver][transmitter]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{self, ChannelInstance, NetworkConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"MCRA1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: NetworkConfig,
    pub samples: Vec<ChannelInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub area_side: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub gamma: f64,
    pub noise_power: f64,
    pub p_max: f64,
}

impl Header {
    pub fn config(&self) -> NetworkConfig {
        NetworkConfig {
            d: self.d,
            m: self.m,
            area_side: self.area_side,
            d_min: self.d_min,
            d_max: self.d_max,
            gamma: self.gamma,
            noise_power: self.noise_power,
            p_max: self.p_max,
            weights: vec![1.0; self.d],
            seed: self.seed,
        }
    }
}

impl Dataset {
    pub fn new(config: NetworkConfig, samples: Vec<ChannelInstance>) -> Result<Self> {
        for (k, s) in samples.iter().enumerate() {
            if s.pairs() != config.d || s.channels() != config.m {
                return Err(Error::Contract(format!(
                    "sample {k} is {}x{}, dataset is {}x{}",
                    s.pairs(),
                    s.channels(),
                    config.d,
                    config.m
                )));
            }
        }
        Ok(Self { config, samples })
    }

    /// Generates `count` samples from `config` (seed taken from the config).
    pub fn generate(config: NetworkConfig, count: usize) -> Result<Self> {
        let samples = channel::generate(&config, count)?;
        Ok(Self { config, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn header(&self) -> Header {
        let c = &self.config;
        Header {
            version: FORMAT_VERSION,
            d: c.d,
            m: c.m,
            num_samples: self.samples.len(),
            seed: c.seed,
            area_side: c.area_side,
            d_min: c.d_min,
            d_max: c.d_max,
            gamma: c.gamma,
            noise_power: c.noise_power,
            p_max: c.p_max,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header()).expect("header serializes");
        let per_sample = self.config.m * self.config.d * self.config.d;
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 1 + 8 * per_sample * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for s in &self.samples {
            for g in s.gains() {
                out.extend_from_slice(&g.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| Error::Format("bad magic, not an MCRA1 dataset".into()))?;
        let newline = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("unterminated header line".into()))?;
        let header: Header =
            serde_json::from_slice(&rest[..newline]).map_err(|e| Error::Format(format!("invalid header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", header.version)));
        }
        let config = header.config();
        config
            .validate()
            .map_err(|e| Error::Format(format!("invalid header: {e}")))?;

        let payload = &rest[newline + 1..];
        let per_sample = header.m * header.d * header.d;
        let expected = header.num_samples * per_sample * 8;
        if payload.len() != expected {
            return Err(Error::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        let mut samples = Vec::with_capacity(header.num_samples);
        for (k, chunk) in payload.chunks_exact(per_sample * 8).enumerate() {
            let gains: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            if let Some(g) = gains.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
                return Err(Error::Corrupt(format!("sample {k} holds invalid gain {g}")));
            }
            samples.push(ChannelInstance::new(header.d, header.m, gains)?);
        }
        Ok(Self { config, samples })
    }

    /// SHA-256 of the serialized dataset, hex encoded.
    pub fn content_hash(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}
