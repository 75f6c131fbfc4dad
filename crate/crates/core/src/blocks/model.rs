use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::layers::{
    block_backward, block_forward, seq_layer_backward, seq_layer_forward, task_backward, task_forward, BlockCache,
    LayerKv, SeqLayerCache, TaskCache,
};
use super::params::DenseParams;
use crate::error::{Error, Result};
use crate::features::{embed_nonseq, sequence_features, EmbeddingTables, FeatureSchema, HeadLayout, InputDims, Request};
use crate::mathcore::{gemm, seeded_rng, sigmoid, Matrix};

/// Head layout implied by a config: joint, or user segment first when
/// decoupled.
pub fn head_layout(cfg: &ModelConfig, schema: &FeatureSchema) -> Result<HeadLayout> {
    layout_for_dims(cfg, &schema.input_dims())
}

pub fn layout_for_dims(cfg: &ModelConfig, dims: &InputDims) -> Result<HeadLayout> {
    if cfg.decoupling.enabled {
        HeadLayout::decoupled(dims.user, dims.item, cfg.decoupling.n_user_heads, cfg.n_heads, cfg.head_dim)
    } else {
        HeadLayout::joint(dims.nonseq(), cfg.n_heads, cfg.head_dim)
    }
}

/// Work that depends only on the request's behavior sequence: the
/// projected action rows and every layer's keys and values.
#[derive(Clone, Debug)]
pub struct SequenceSide {
    pub raw: Matrix,
    pub actions: Matrix,
    pub layers: Vec<LayerKv>,
    caches: Vec<SeqLayerCache>,
}

/// One candidate's pass through blocks and task heads.
#[derive(Clone, Debug)]
pub(crate) struct CandidatePass {
    pub e_ns: Vec<f64>,
    /// `X^0 ..= X^L`.
    pub activations: Vec<Matrix>,
    pub logits: Vec<f64>,
    blocks: Vec<BlockCache>,
    tasks: Vec<TaskCache>,
}

/// Binary cross-entropy on a logit, computed stably.
pub fn bce_with_logit(z: f64, y: bool) -> f64 {
    let t = if y { 1.0 } else { 0.0 };
    z.max(0.0) - t * z + (-z.abs()).exp().ln_1p()
}

/// Accumulated gradients: dense tensors plus touched embedding rows.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub dense: DenseParams,
    pub sparse: Vec<BTreeMap<u32, Vec<f64>>>,
}

impl Gradients {
    pub fn zeros(model: &MixFormer) -> Self {
        Self {
            dense: model.dense.zeros_like(),
            sparse: vec![BTreeMap::new(); model.tables.tables.len()],
        }
    }

    pub fn clear(&mut self) {
        self.dense.fill(0.0);
        for t in &mut self.sparse {
            t.clear();
        }
    }

    pub fn add_row(&mut self, table: usize, id: u32, g: &[f64]) {
        let row = self.sparse[table].entry(id).or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in row.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        self.dense.add_assign(&other.dense);
        for (t, rows) in other.sparse.iter().enumerate() {
            for (&id, g) in rows {
                self.add_row(t, id, g);
            }
        }
    }
}

/// Loss of one request, summed over candidates and tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RequestLoss {
    pub loss: f64,
    pub impressions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixFormer {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub layout: HeadLayout,
    pub tables: EmbeddingTables,
    pub dense: DenseParams,
}

impl MixFormer {
    pub fn new(config: ModelConfig, schema: FeatureSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let layout = head_layout(&config, &schema)?;
        let mut rng = seeded_rng(seed);
        let tables = EmbeddingTables::random(&mut rng, &schema);
        let dense = DenseParams::init(&config, &layout, schema.input_dims().action, &mut rng)?;
        Ok(Self {
            config,
            schema,
            layout,
            tables,
            dense,
        })
    }

    /// Every weight, embedding and norm scale set to zero.
    pub fn zeroed(config: ModelConfig, schema: FeatureSchema) -> Result<Self> {
        let mut m = Self::new(config, schema, 0)?;
        m.dense.fill(0.0);
        m.tables = EmbeddingTables::zeros(&m.schema);
        Ok(m)
    }

    pub fn action_width(&self) -> usize {
        self.schema.input_dims().action
    }

    pub fn sequence_side(&self, req: &Request) -> Result<SequenceSide> {
        let cfg = &self.config;
        if req.seq_len() > cfg.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds the model's {}",
                req.seq_len(),
                cfg.max_seq_len
            )));
        }
        let raw = sequence_features(req, &self.tables, self.action_width())?;
        let actions = raw.matmul_nt(&self.dense.action_proj)?;
        let mut layers = Vec::with_capacity(cfg.n_blocks);
        let mut caches = Vec::with_capacity(cfg.n_blocks);
        for (l, block) in self.dense.blocks.iter().enumerate() {
            let (kv, c) = seq_layer_forward(cfg, self.dense.seq_for(l), block, &actions)?;
            layers.push(kv);
            caches.push(c);
        }
        Ok(SequenceSide {
            raw,
            actions,
            layers,
            caches,
        })
    }

    pub(crate) fn candidate_pass(&self, req: &Request, k: usize, seq: &SequenceSide) -> Result<CandidatePass> {
        let cfg = &self.config;
        let e_ns = embed_nonseq(req, k, &self.tables)?;
        let mut x = self.layout.split(&e_ns, &self.dense.head_proj)?;
        let mut activations = vec![x.clone()];
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for (block, kv) in self.dense.blocks.iter().zip(&seq.layers) {
            let (y, c) = block_forward(cfg, block, &x, kv)?;
            activations.push(y.clone());
            blocks.push(c);
            x = y;
        }
        let flat = Matrix::row_vector(x.data());
        let mut logits = Vec::with_capacity(cfg.n_tasks);
        let mut tasks = Vec::with_capacity(cfg.n_tasks);
        for t in &self.dense.tasks {
            let (z, c) = task_forward(t, &flat)?;
            logits.push(z);
            tasks.push(c);
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numeric("non-finite logit".into()));
        }
        Ok(CandidatePass {
            e_ns,
            activations,
            logits,
            blocks,
            tasks,
        })
    }

    /// Per-task logits of candidate `k`, computing everything for this
    /// candidate alone.
    pub fn forward(&self, req: &Request, k: usize) -> Result<Vec<f64>> {
        let seq = self.sequence_side(req)?;
        Ok(self.candidate_pass(req, k, &seq)?.logits)
    }

    /// Logits of every candidate, with the sequence side computed once.
    pub fn forward_request(&self, req: &Request) -> Result<Vec<Vec<f64>>> {
        let seq = self.sequence_side(req)?;
        (0..req.n_candidates())
            .map(|k| Ok(self.candidate_pass(req, k, &seq)?.logits))
            .collect()
    }

    pub fn predict_request(&self, req: &Request) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .forward_request(req)?
            .into_iter()
            .map(|z| z.into_iter().map(sigmoid).collect())
            .collect())
    }

    /// Head activations `X^0 ..= X^L` of candidate `k`.
    pub fn head_activations(&self, req: &Request, k: usize) -> Result<Vec<Matrix>> {
        let seq = self.sequence_side(req)?;
        Ok(self.candidate_pass(req, k, &seq)?.activations)
    }

    /// Adds the gradient of the summed binary cross-entropy over all
    /// candidates and tasks of `req` into `grads`.
    pub fn accumulate_gradients(&self, req: &Request, grads: &mut Gradients) -> Result<RequestLoss> {
        let cfg = &self.config;
        let labels = req
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("training request without labels".into()))?;
        let seq = self.sequence_side(req)?;
        let mut dkv: Vec<LayerKv> = seq.layers.iter().map(LayerKv::zeros_like).collect();
        let mut loss = 0.0;
        let tables = &self.tables;
        for (k, row) in labels.iter().enumerate() {
            if row.len() != cfg.n_tasks {
                return Err(Error::Data(format!("{} labels for {} tasks", row.len(), cfg.n_tasks)));
            }
            let pass = self.candidate_pass(req, k, &seq)?;
            let mut dflat = Matrix::zeros(1, cfg.width());
            for (t, (&z, &y)) in pass.logits.iter().zip(row).enumerate() {
                loss += bce_with_logit(z, y);
                let dz = sigmoid(z) - if y { 1.0 } else { 0.0 };
                let d = task_backward(&self.dense.tasks[t], &pass.tasks[t], dz, &mut grads.dense.tasks[t])?;
                dflat.add_assign(&d)?;
            }
            let mut dx = Matrix::new(cfg.n_heads, cfg.head_dim, dflat.into_data())?;
            for l in (0..cfg.n_blocks).rev() {
                dx = block_backward(
                    cfg,
                    &self.dense.blocks[l],
                    &pass.blocks[l],
                    &seq.layers[l],
                    &dx,
                    &mut grads.dense.blocks[l],
                    &mut dkv[l],
                )?;
            }
            let de = self
                .layout
                .split_backward(&pass.e_ns, &self.dense.head_proj, &dx, &mut grads.dense.head_proj)?;
            // e_ns and the table list share the order: request fields, then item fields.
            let mut offset = 0;
            for (table, &id) in req.user_nonseq.iter().chain(&req.candidates[k]).enumerate() {
                let dim = tables.tables[table].dim;
                grads.add_row(table, id, &de[offset..offset + dim]);
                offset += dim;
            }
        }
        let mut ds = Matrix::zeros(seq.actions.rows(), seq.actions.cols());
        for l in 0..cfg.n_blocks {
            let si = self.dense.seq_index(l);
            let d = seq_layer_backward(
                cfg,
                &self.dense.seq[si],
                &self.dense.blocks[l],
                &seq.caches[l],
                &dkv[l],
                &mut grads.dense.seq[si],
                &mut grads.dense.blocks[l],
            )?;
            ds.add_assign(&d)?;
        }
        if ds.rows() > 0 {
            gemm(&ds, true, &seq.raw, false, &mut grads.dense.action_proj, true)?;
            let draw = ds.matmul(&self.dense.action_proj)?;
            for (t, action) in req.sequence.iter().enumerate() {
                let g = draw.row(t);
                let mut offset = 0;
                for (i, &id) in action.iter().enumerate() {
                    let table = tables.action_table(i);
                    let dim = tables.tables[table].dim;
                    grads.add_row(table, id, &g[offset..offset + dim]);
                    offset += dim;
                }
            }
        }
        Ok(RequestLoss {
            loss,
            impressions: labels.len(),
        })
    }

    /// Summed loss of a request without gradients.
    pub fn request_loss(&self, req: &Request) -> Result<f64> {
        let labels = req
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("request without labels".into()))?;
        let logits = self.forward_request(req)?;
        Ok(logits
            .iter()
            .zip(labels)
            .flat_map(|(z, y)| z.iter().zip(y).map(|(&z, &y)| bce_with_logit(z, y)))
            .sum())
    }

    pub fn n_dense_params(&self) -> usize {
        use super::params::Tensors;
        self.dense.n_params()
    }

    pub fn n_sparse_params(&self) -> usize {
        self.tables.tables.iter().map(|t| t.weights.len()).sum()
    }
}
