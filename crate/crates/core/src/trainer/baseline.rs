//! Logistic regression on concatenated embeddings with a mean-pooled
//! behavior sequence. No attention and no feature interaction.

use std::collections::BTreeMap;

use super::optim::StepParts;
use super::Trainable;
use crate::blocks::{bce_with_logit, RequestLoss};
use crate::error::{Error, Result};
use crate::features::request::action_features;
use crate::features::{embed_nonseq, EmbeddingTables, FeatureSchema, Request};
use crate::mathcore::{seeded_rng, sigmoid};

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticBaseline {
    pub schema: FeatureSchema,
    pub tables: EmbeddingTables,
    /// Per task: weights over `[e_ns ; mean action]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct BaselineGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub sparse: Vec<BTreeMap<u32, Vec<f64>>>,
}

impl LogisticBaseline {
    pub fn new(schema: FeatureSchema, n_tasks: usize, seed: u64) -> Result<Self> {
        schema.validate()?;
        if n_tasks == 0 {
            return Err(Error::Config("at least one task".into()));
        }
        let tables = EmbeddingTables::random(&mut seeded_rng(seed), &schema);
        let width = schema.input_dims().nonseq() + schema.input_dims().action;
        Ok(Self {
            schema,
            tables,
            weights: vec![vec![0.0; width]; n_tasks],
            biases: vec![vec![0.0]; n_tasks],
        })
    }

    fn pooled_sequence(&self, req: &Request) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; self.schema.input_dims().action];
        for action in &req.sequence {
            for (m, v) in mean.iter_mut().zip(action_features(action, &self.tables)?) {
                *m += v;
            }
        }
        if !req.sequence.is_empty() {
            let t = req.sequence.len() as f64;
            mean.iter_mut().for_each(|m| *m /= t);
        }
        Ok(mean)
    }

    fn features(&self, req: &Request, k: usize, pooled: &[f64]) -> Result<Vec<f64>> {
        let mut x = embed_nonseq(req, k, &self.tables)?;
        x.extend_from_slice(pooled);
        Ok(x)
    }

    fn logit(&self, t: usize, x: &[f64]) -> f64 {
        self.weights[t].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[t][0]
    }
}

fn add_row(sparse: &mut [BTreeMap<u32, Vec<f64>>], table: usize, id: u32, g: &[f64]) {
    let row = sparse[table].entry(id).or_insert_with(|| vec![0.0; g.len()]);
    row.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

impl Trainable for LogisticBaseline {
    type Grads = BaselineGradients;

    fn n_tasks(&self) -> usize {
        self.weights.len()
    }

    fn zero_grads(&self) -> BaselineGradients {
        BaselineGradients {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: vec![vec![0.0]; self.biases.len()],
            sparse: vec![BTreeMap::new(); self.tables.tables.len()],
        }
    }

    fn clear_grads(g: &mut BaselineGradients) {
        g.weights.iter_mut().chain(g.biases.iter_mut()).for_each(|v| v.fill(0.0));
        g.sparse.iter_mut().for_each(BTreeMap::clear);
    }

    fn accumulate(&self, req: &Request, g: &mut BaselineGradients) -> Result<RequestLoss> {
        let labels = req
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("training request without labels".into()))?;
        let pooled = self.pooled_sequence(req)?;
        let n_ns = self.schema.input_dims().nonseq();
        let mut d_pooled = vec![0.0; pooled.len()];
        let mut loss = 0.0;
        for (k, row) in labels.iter().enumerate() {
            if row.len() != self.n_tasks() {
                return Err(Error::Data(format!("{} labels for {} tasks", row.len(), self.n_tasks())));
            }
            let x = self.features(req, k, &pooled)?;
            let mut dx = vec![0.0; x.len()];
            for (t, &y) in row.iter().enumerate() {
                let z = self.logit(t, &x);
                loss += bce_with_logit(z, y);
                let dz = sigmoid(z) - if y { 1.0 } else { 0.0 };
                for ((gw, v), (d, w)) in g.weights[t].iter_mut().zip(&x).zip(dx.iter_mut().zip(&self.weights[t])) {
                    *gw += dz * v;
                    *d += dz * w;
                }
                g.biases[t][0] += dz;
            }
            let mut offset = 0;
            for (table, &id) in req.user_nonseq.iter().chain(&req.candidates[k]).enumerate() {
                let dim = self.tables.tables[table].dim;
                add_row(&mut g.sparse, table, id, &dx[offset..offset + dim]);
                offset += dim;
            }
            d_pooled.iter_mut().zip(&dx[n_ns..]).for_each(|(a, b)| *a += b);
        }
        if !req.sequence.is_empty() {
            let t = req.sequence.len() as f64;
            d_pooled.iter_mut().for_each(|d| *d /= t);
            for action in &req.sequence {
                let mut offset = 0;
                for (i, &id) in action.iter().enumerate() {
                    let table = self.tables.action_table(i);
                    let dim = self.tables.tables[table].dim;
                    add_row(&mut g.sparse, table, id, &d_pooled[offset..offset + dim]);
                    offset += dim;
                }
            }
        }
        Ok(RequestLoss {
            loss,
            impressions: labels.len(),
        })
    }

    fn logits(&self, req: &Request) -> Result<Vec<Vec<f64>>> {
        let pooled = self.pooled_sequence(req)?;
        (0..req.n_candidates())
            .map(|k| {
                let x = self.features(req, k, &pooled)?;
                Ok((0..self.n_tasks()).map(|t| self.logit(t, &x)).collect())
            })
            .collect()
    }

    fn step_parts<'a>(&'a mut self, g: &'a BaselineGradients) -> StepParts<'a> {
        let n = self.weights.len();
        let mut dense: Vec<&mut [f64]> = Vec::with_capacity(2 * n);
        let mut dense_grads: Vec<&[f64]> = Vec::with_capacity(2 * n);
        for ((w, b), (gw, gb)) in self.weights.iter_mut().zip(self.biases.iter_mut()).zip(g.weights.iter().zip(&g.biases)) {
            dense.push(w);
            dense.push(b);
            dense_grads.push(gw);
            dense_grads.push(gb);
        }
        StepParts {
            dense,
            dense_grads,
            tables: &mut self.tables,
            sparse_grads: &g.sparse,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ActionField, FieldSpec, Side};
    use crate::mathcore::grad_check_scalar;

    fn schema() -> FeatureSchema {
        FeatureSchema::new(
            vec![
                FieldSpec { name: "u".into(), vocab_size: 4, dim: 2, side: Side::User },
                FieldSpec { name: "i".into(), vocab_size: 5, dim: 3, side: Side::Item },
            ],
            vec![ActionField { name: "a".into(), vocab_size: 5, dim: 2 }],
            8,
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = LogisticBaseline::new(schema(), 2, 1).unwrap();
        let mut rng = seeded_rng(2);
        use rand::Rng;
        for w in m.weights.iter_mut().chain(m.biases.iter_mut()).flatten() {
            *w = rng.gen_range(-1.0..1.0);
        }
        let req = Request {
            user_id: 0,
            user_nonseq: vec![3],
            sequence: vec![vec![1], vec![4], vec![1]],
            candidates: vec![vec![0], vec![2]],
            labels: Some(vec![vec![true, false], vec![false, false]]),
        };
        let mut g = m.zero_grads();
        let loss = m.accumulate(&req, &mut g).unwrap().loss;
        let mut point: Vec<f64> = m.weights.concat();
        point.extend(m.biases.concat());
        for t in &m.tables.tables {
            point.extend(&t.weights);
        }
        let mut analytic: Vec<f64> = g.weights.concat();
        analytic.extend(g.biases.concat());
        for (t, rows) in m.tables.tables.iter().zip(&g.sparse) {
            let mut flat = vec![0.0; t.weights.len()];
            for (&id, r) in rows {
                flat[id as usize * t.dim..(id as usize + 1) * t.dim].copy_from_slice(r);
            }
            analytic.extend(flat);
        }
        let loss_at = |m: &LogisticBaseline| -> Result<f64> {
            let z = m.logits(&req)?;
            Ok(z.iter()
                .zip(req.labels.as_ref().unwrap())
                .flat_map(|(z, y)| z.iter().zip(y).map(|(&z, &y)| bce_with_logit(z, y)))
                .sum())
        };
        assert!((loss_at(&m).unwrap() - loss).abs() < 1e-12);
        let mut probe = m.clone();
        let report = grad_check_scalar(
            &mut |x| {
                let mut i = 0;
                for v in probe.weights.iter_mut().chain(probe.biases.iter_mut()).chain(probe.tables.tables.iter_mut().map(|t| &mut t.weights)) {
                    let n = v.len();
                    v.copy_from_slice(&x[i..i + n]);
                    i += n;
                }
                loss_at(&probe)
            },
            &point,
            &analytic,
            None,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
