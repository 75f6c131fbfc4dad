use serde::{Deserialize, Serialize};

use super::embedding::EmbeddingTables;
use super::schema::FeatureSchema;
use crate::error::{shape_err, Error, Result};
use crate::mathcore::Matrix;

/// One user's request: request-level features, behavior sequence and the
/// `K` candidate items to score.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub user_id: u32,
    /// Ids of the user and context fields, in embedding order.
    pub user_nonseq: Vec<u32>,
    /// One id tuple per action, oldest first, in action-field order.
    pub sequence: Vec<Vec<u32>>,
    /// One id tuple per candidate, in item-field order.
    pub candidates: Vec<Vec<u32>>,
    /// `labels[k][task]`
    pub labels: Option<Vec<Vec<bool>>>,
}

impl Request {
    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn seq_len(&self) -> usize {
        self.sequence.len()
    }

    pub fn validate(&self, schema: &FeatureSchema, tables: &EmbeddingTables) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Data("request has no candidates".into()));
        }
        if self.sequence.len() > schema.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max {}",
                self.sequence.len(),
                schema.max_seq_len
            )));
        }
        if self.user_nonseq.len() != tables.n_request {
            return Err(Error::Data("wrong number of request-level ids".into()));
        }
        for (i, &id) in self.user_nonseq.iter().enumerate() {
            tables.tables[tables.request_table(i)].check(id)?;
        }
        for c in &self.candidates {
            if c.len() != tables.n_item {
                return Err(Error::Data("wrong number of item ids".into()));
            }
            for (i, &id) in c.iter().enumerate() {
                tables.tables[tables.item_table(i)].check(id)?;
            }
        }
        for a in &self.sequence {
            if a.len() != tables.n_action() {
                return Err(Error::Data("wrong number of action ids".into()));
            }
            for (i, &id) in a.iter().enumerate() {
                tables.tables[tables.action_table(i)].check(id)?;
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.candidates.len() {
                return Err(Error::Data("one label row per candidate required".into()));
            }
        }
        Ok(())
    }
}

/// Concatenated user and context embeddings.
pub fn embed_request_side(req: &Request, tables: &EmbeddingTables) -> Result<Vec<f64>> {
    if req.user_nonseq.len() != tables.n_request {
        return shape_err("wrong number of request-level ids");
    }
    let mut out = Vec::new();
    for (i, &id) in req.user_nonseq.iter().enumerate() {
        out.extend_from_slice(tables.tables[tables.request_table(i)].lookup(id)?);
    }
    Ok(out)
}

/// Concatenated item embeddings of candidate `k`.
pub fn embed_item_side(req: &Request, k: usize, tables: &EmbeddingTables) -> Result<Vec<f64>> {
    let ids = req
        .candidates
        .get(k)
        .ok_or_else(|| Error::Data(format!("candidate {k} of {}", req.candidates.len())))?;
    if ids.len() != tables.n_item {
        return shape_err("wrong number of item ids");
    }
    let mut out = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        out.extend_from_slice(tables.tables[tables.item_table(i)].lookup(id)?);
    }
    Ok(out)
}

/// `e_ns` for candidate `k`: request-level fields then item fields.
pub fn embed_nonseq(req: &Request, k: usize, tables: &EmbeddingTables) -> Result<Vec<f64>> {
    let mut out = embed_request_side(req, tables)?;
    out.extend(embed_item_side(req, k, tables)?);
    Ok(out)
}

/// Raw concatenated action-field embeddings of one action.
pub fn action_features(ids: &[u32], tables: &EmbeddingTables) -> Result<Vec<f64>> {
    if ids.len() != tables.n_action() {
        return shape_err("wrong number of action ids");
    }
    let mut out = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        out.extend_from_slice(tables.tables[tables.action_table(i)].lookup(id)?);
    }
    Ok(out)
}

/// `s_t`: action features mapped to width `N·D` by the shared input
/// projection (`N·D × Σ action dims`).
pub fn embed_action(ids: &[u32], tables: &EmbeddingTables, proj: &Matrix) -> Result<Vec<f64>> {
    proj.matvec(&action_features(ids, tables)?)
}

/// Raw action features of the whole sequence, one row per action.
pub fn sequence_features(req: &Request, tables: &EmbeddingTables, width: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(req.sequence.len() * width);
    for a in &req.sequence {
        data.extend(action_features(a, tables)?);
    }
    Matrix::new(req.sequence.len(), width, data)
}

/// `S`, one projected row per action. An empty sequence gives a `0 × N·D`
/// matrix.
pub fn embed_sequence(req: &Request, tables: &EmbeddingTables, proj: &Matrix) -> Result<Matrix> {
    sequence_features(req, tables, proj.cols())?.matmul_nt(proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::schema::{ActionField, FieldSpec, Side};
    use crate::mathcore::trace;

    fn schema(dims: &[usize]) -> FeatureSchema {
        let mut fields: Vec<FieldSpec> = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| FieldSpec { name: format!("u{i}"), vocab_size: 4, dim: d, side: Side::User })
            .collect();
        fields.push(FieldSpec { name: "item".into(), vocab_size: 4, dim: 1, side: Side::Item });
        FeatureSchema::new(fields, vec![ActionField { name: "a".into(), vocab_size: 3, dim: 2 }], 8).unwrap()
    }

    fn request(n_user: usize, seq: Vec<Vec<u32>>) -> Request {
        Request {
            user_id: 0,
            user_nonseq: vec![0; n_user],
            sequence: seq,
            candidates: vec![vec![1]],
            labels: None,
        }
    }

    #[test]
    fn single_field_row_is_returned() {
        let s = schema(&[3]);
        let mut t = EmbeddingTables::zeros(&s);
        t.tables[0].set_row(0, &[1.0, 2.0, 3.0]).unwrap();
        let e = embed_request_side(&request(1, vec![]), &t).unwrap();
        assert_eq!(e, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn field_order_and_zero_tables() {
        let s = schema(&[2, 2]);
        let mut t = EmbeddingTables::zeros(&s);
        let e = embed_nonseq(&request(2, vec![]), 0, &t).unwrap();
        assert_eq!(e, vec![0.0; 5]);
        t.tables[0].set_row(0, &[7.0, 8.0]).unwrap();
        let e = embed_nonseq(&request(2, vec![]), 0, &t).unwrap();
        assert_eq!(&e[..2], &[7.0, 8.0]);
        assert_eq!(&e[2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_vocab_is_lookup_error() {
        let s = schema(&[2]);
        let t = EmbeddingTables::zeros(&s);
        let mut r = request(1, vec![]);
        r.user_nonseq[0] = 9;
        assert!(matches!(embed_nonseq(&r, 0, &t), Err(Error::Lookup { .. })));
        assert!(matches!(r.validate(&s, &t), Err(Error::Lookup { .. })));
    }

    #[test]
    fn sequence_rows() {
        let s = schema(&[1]);
        let mut t = EmbeddingTables::zeros(&s);
        let a = t.action_table(0);
        t.tables[a].set_row(1, &[1.0, 0.0]).unwrap();
        t.tables[a].set_row(2, &[0.0, 1.0]).unwrap();
        let proj = Matrix::identity(2);
        let empty = embed_sequence(&request(1, vec![]), &t, &proj).unwrap();
        assert_eq!(empty.shape(), (0, 2));
        let seq = embed_sequence(&request(1, vec![vec![1], vec![2], vec![1]]), &t, &proj).unwrap();
        assert_eq!(seq.row(0), &[1.0, 0.0]);
        assert_eq!(seq.row(1), &[0.0, 1.0]);
        assert_eq!(seq.row(0), seq.row(2));
        assert_eq!(embed_action(&[2], &t, &proj).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn action_projection_flops() {
        let s = schema(&[1]);
        let t = EmbeddingTables::zeros(&s);
        let proj = Matrix::zeros(6, 2);
        let (v, flops) = trace::measure(|| embed_action(&[0], &t, &proj).unwrap());
        assert_eq!(v, vec![0.0; 6]);
        assert_eq!(flops, 2 * 2 * 6);
    }
}
