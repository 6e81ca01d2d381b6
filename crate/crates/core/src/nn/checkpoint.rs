use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::LayerSpec;
use super::network::Network;
use super::predict::{InputLayout, TrainedNet};
use super::train::{TrainConfig, TrainLog};
use crate::dataset::NormStats;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSNN";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    specs: Vec<LayerSpec>,
    input_rows: usize,
    input_cols: usize,
    output_dim: usize,
    seed: u64,
    param_count: usize,
    normalization: NormStats,
    layout: InputLayout,
    training: TrainConfig,
    log: TrainLog,
}

/// Serialized trained network: parameters are stored bit-exactly as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: TrainedNet,
    pub training: TrainConfig,
    pub log: TrainLog,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let net = &self.net.net;
        let (input_rows, input_cols) = net.input_dims();
        let header = Header {
            specs: net.specs().to_vec(),
            input_rows,
            input_cols,
            output_dim: net.output_dim(),
            seed: net.seed(),
            param_count: net.param_count(),
            normalization: self.net.norm,
            layout: self.net.layout,
            training: self.training.clone(),
            log: self.log.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION, 0, 0, 0])?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let body: Vec<u8> = net.params_flat().iter().flat_map(|p| p.to_le_bytes()).collect();
        w.write_all(&body)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: &str| Error::Format { offset: offset as u64, reason: reason.into() };
        if bytes.len() < 16 {
            return Err(fail(bytes.len(), "truncated preamble"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad magic"));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(fail(4, &format!("unsupported checkpoint version {}", bytes[4])));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| fail(8, "header length exceeds file size"))?;
        let h: Header = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| fail(16 + e.column().saturating_sub(1), &format!("header: {e}")))?;
        let expected = body + 4 * h.param_count;
        if bytes.len() != expected {
            return Err(fail(bytes.len().min(expected), &format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let params: Vec<f32> = bytes[body..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut net = Network::<f32>::new(&h.specs, h.input_rows, h.input_cols, h.output_dim, h.seed)?;
        if net.param_count() != h.param_count {
            return Err(fail(16, "parameter count does not match the layer stack"));
        }
        net.load_params(&params)?;
        Ok(Checkpoint {
            net: TrainedNet::new(net, h.normalization, h.layout)?,
            training: h.training,
            log: h.log,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
