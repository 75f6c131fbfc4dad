//! RMSProp for dense weights, Adagrad for embedding rows.
//!
//! Optimizer files (`MXOP`) hold the state needed to resume a run:
//!
//! ```text
//! file   := magic "MXOP" | version u32 (=1) | header_len u32 | header (JSON)
//!           | n_tensors u32 | tensor*
//! tensor := len u64 | len × f64
//! ```
//!
//! Tensors are the RMSProp mean squares (dense canonical order), then the
//! Adagrad accumulators (one per embedding table).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EmbeddingTables;

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"MXOP";
pub const OPTIMIZER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { lr: 0.01, decay: 0.9, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct AdagradConfig {
    pub lr: f64,
    pub eps: f64,
}

impl Default for AdagradConfig {
    fn default() -> Self {
        Self { lr: 0.05, eps: 1e-10 }
    }
}

/// Where a run stands: global step count and position in the epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already applied.
    pub batch: u64,
}

/// Everything a step needs besides the parameters.
pub struct StepParts<'a> {
    pub dense: Vec<&'a mut [f64]>,
    pub dense_grads: Vec<&'a [f64]>,
    pub tables: &'a mut EmbeddingTables,
    /// Per table, gradient rows by id.
    pub sparse_grads: &'a [BTreeMap<u32, Vec<f64>>],
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub dense: RmsPropConfig,
    pub sparse: AdagradConfig,
    /// RMSProp mean squares, shaped like the dense tensors.
    pub mean_square: Vec<Vec<f64>>,
    /// Adagrad sums of squared gradients, one entry per embedding entry.
    pub accum: Vec<Vec<f64>>,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dense: RmsPropConfig,
    sparse: AdagradConfig,
    progress: Progress,
}

impl OptimizerState {
    pub fn new(dense: RmsPropConfig, sparse: AdagradConfig) -> Self {
        Self {
            dense,
            sparse,
            mean_square: Vec::new(),
            accum: Vec::new(),
            progress: Progress::default(),
        }
    }

    fn ensure_shapes(&mut self, parts: &StepParts) -> Result<()> {
        if self.mean_square.is_empty() {
            self.mean_square = parts.dense.iter().map(|t| vec![0.0; t.len()]).collect();
            self.accum = parts.tables.tables.iter().map(|t| vec![0.0; t.weights.len()]).collect();
        }
        let dense_ok = self.mean_square.len() == parts.dense.len()
            && self.mean_square.iter().zip(&parts.dense).all(|(m, p)| m.len() == p.len());
        let sparse_ok = self.accum.len() == parts.tables.tables.len()
            && self.accum.iter().zip(&parts.tables.tables).all(|(a, t)| a.len() == t.weights.len());
        if !dense_ok || !sparse_ok || parts.dense_grads.len() != parts.dense.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        Ok(())
    }

    /// One update with gradients multiplied by `scale`. Embedding rows
    /// without a gradient entry are left untouched.
    pub fn step(&mut self, mut parts: StepParts, scale: f64) -> Result<()> {
        self.ensure_shapes(&parts)?;
        let RmsPropConfig { lr, decay, eps } = self.dense;
        for ((p, g), ms) in parts.dense.iter_mut().zip(&parts.dense_grads).zip(&mut self.mean_square) {
            if g.len() != p.len() {
                return Err(Error::Shape("dense gradient shape".into()));
            }
            for ((w, &g), m) in p.iter_mut().zip(g.iter()).zip(ms.iter_mut()) {
                let g = g * scale;
                *m = decay * *m + (1.0 - decay) * g * g;
                if lr != 0.0 {
                    *w -= lr * g / (m.sqrt() + eps);
                }
            }
        }
        let AdagradConfig { lr, eps } = self.sparse;
        for (t, rows) in parts.sparse_grads.iter().enumerate() {
            let table = &mut parts.tables.tables[t];
            let dim = table.dim;
            for (&id, g) in rows {
                let start = table.check(id)? * dim;
                let w = &mut table.weights[start..start + dim];
                let acc = &mut self.accum[t][start..start + dim];
                for ((w, &g), a) in w.iter_mut().zip(g).zip(acc.iter_mut()) {
                    let g = g * scale;
                    *a += g * g;
                    if lr != 0.0 {
                        *w -= lr * g / (a.sqrt() + eps);
                    }
                }
            }
        }
        self.progress.step += 1;
        Ok(())
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            dense: self.dense,
            sparse: self.sparse,
            progress: self.progress,
        })
        .map_err(|e| Error::Data(format!("optimizer header: {e}")))?;
        w.write_all(OPTIMIZER_MAGIC)?;
        w.write_all(&OPTIMIZER_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let n = self.mean_square.len() + self.accum.len();
        w.write_all(&(n as u32).to_le_bytes())?;
        for t in self.mean_square.iter().chain(&self.accum) {
            w.write_all(&(t.len() as u64).to_le_bytes())?;
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// `n_dense` is the number of dense tensors; the rest are accumulators.
    pub fn read(r: &mut impl Read, n_dense: usize) -> Result<Self> {
        let mut word = [0u8; 4];
        let read = |r: &mut dyn Read, buf: &mut [u8]| {
            r.read_exact(buf)
                .map_err(|e| Error::Data(format!("truncated optimizer state: {e}")))
        };
        read(r, &mut word)?;
        if &word != OPTIMIZER_MAGIC {
            return Err(Error::Data("not an optimizer state file (bad magic)".into()));
        }
        read(r, &mut word)?;
        if u32::from_le_bytes(word) != OPTIMIZER_VERSION {
            return Err(Error::Data("unsupported optimizer state version".into()));
        }
        read(r, &mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        read(r, &mut header)?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| Error::Data(format!("optimizer header: {e}")))?;
        read(r, &mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        if n != 0 && n < n_dense {
            return Err(Error::Data(format!("optimizer state has {n} tensors, expected at least {n_dense}")));
        }
        let mut tensors = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read(r, &mut buf)?;
            let len = u64::from_le_bytes(buf) as usize;
            let mut t = Vec::with_capacity(len);
            for _ in 0..len {
                read(r, &mut buf)?;
                t.push(f64::from_le_bytes(buf));
            }
            tensors.push(t);
        }
        let accum = if n == 0 { Vec::new() } else { tensors.split_off(n_dense) };
        Ok(Self {
            dense: header.dense,
            sparse: header.sparse,
            mean_square: tensors,
            accum,
            progress: header.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, n_dense: usize) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?), n_dense)
    }
}
