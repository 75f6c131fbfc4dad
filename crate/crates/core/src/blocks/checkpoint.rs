//! Model checkpoints.
//!
//! ```text
//! file   := magic "MXCK" | version u32 (=1) | header_len u32 | header (JSON, UTF-8)
//!           | n_tensors u32 | tensor*
//! tensor := len u64 | len × f64
//! ```
//!
//! The header holds the model config and the schema text. Tensors are the
//! embedding tables (request fields, item fields, action fields), then the
//! dense weights in canonical order: head projections, action projection,
//! action FFNs (norm scale, gate, up, down), blocks (mixing norm,
//! self-attention query/key/value, query-mixer norm, query-mixer FFNs,
//! key projections, value projections, fusion norm, fusion FFNs), task
//! heads (hidden, hidden bias, out, out bias). Absent sublayers contribute
//! no tensors. Little-endian throughout. Optimizer state is not stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::MixFormer;
use super::params::Tensors;
use crate::error::{Error, Result};
use crate::features::FeatureSchema;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schema: String,
}

fn tensors(m: &MixFormer) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = m.tables.tables.iter().map(|t| t.weights.as_slice()).collect();
    out.extend(m.dense.tensors());
    out
}

impl MixFormer {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out)?;
        Ok(out)
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            schema: self.schema.to_text(),
        })
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let ts = tensors(self);
        w.write_all(&(ts.len() as u32).to_le_bytes())?;
        for t in ts {
            w.write_all(&(t.len() as u64).to_le_bytes())?;
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut word = [0u8; 4];
        let read = |r: &mut dyn Read, buf: &mut [u8]| {
            r.read_exact(buf)
                .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))
        };
        read(r, &mut word)?;
        if &word != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        read(r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        read(r, &mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        read(r, &mut header)?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let schema = FeatureSchema::from_text(&header.schema)?;
        let mut model = MixFormer::zeroed(header.config, schema)?;
        read(r, &mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        let mut targets: Vec<&mut [f64]> = model.tables.tables.iter_mut().map(|t| t.weights.as_mut_slice()).collect();
        targets.extend(model.dense.tensors_mut());
        if n != targets.len() {
            return Err(Error::Data(format!("checkpoint has {n} tensors, model expects {}", targets.len())));
        }
        let mut len = [0u8; 8];
        let mut value = [0u8; 8];
        for t in targets {
            read(r, &mut len)?;
            if u64::from_le_bytes(len) as usize != t.len() {
                return Err(Error::Data("checkpoint tensor size does not match the config".into()));
            }
            for v in t.iter_mut() {
                read(r, &mut value)?;
                *v = f64::from_le_bytes(value);
            }
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(&mut BufReader::new(File::open(path)?))
    }
}
