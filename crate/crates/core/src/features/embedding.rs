use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schema::FeatureSchema;
use crate::error::{Error, Result};

/// Half-width of the uniform range embedding rows are drawn from.
pub const EMBEDDING_INIT_BOUND: f64 = 0.05;

/// One sparse table: `vocab_size` rows of width `dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(name: &str, vocab_size: usize, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            vocab_size,
            dim,
            weights: vec![0.0; vocab_size * dim],
        }
    }

    pub fn random<R: Rng>(rng: &mut R, name: &str, vocab_size: usize, dim: usize) -> Self {
        let mut t = Self::zeros(name, vocab_size, dim);
        for w in &mut t.weights {
            *w = rng.gen_range(-EMBEDDING_INIT_BOUND..=EMBEDDING_INIT_BOUND);
        }
        t
    }

    pub fn check(&self, id: u32) -> Result<usize> {
        let i = id as usize;
        if i >= self.vocab_size {
            return Err(Error::Lookup {
                field: self.name.clone(),
                id,
                vocab: self.vocab_size,
            });
        }
        Ok(i)
    }

    pub fn lookup(&self, id: u32) -> Result<&[f64]> {
        let i = self.check(id)?;
        Ok(&self.weights[i * self.dim..(i + 1) * self.dim])
    }

    pub fn row_mut(&mut self, id: u32) -> Result<&mut [f64]> {
        let i = self.check(id)?;
        Ok(&mut self.weights[i * self.dim..(i + 1) * self.dim])
    }

    pub fn set_row(&mut self, id: u32, values: &[f64]) -> Result<()> {
        let dim = self.dim;
        let row = self.row_mut(id)?;
        if values.len() != dim {
            return Err(Error::Shape(format!("row of width {} into table of width {dim}", values.len())));
        }
        row.copy_from_slice(values);
        Ok(())
    }
}

/// All tables of a schema. Order: request-level fields, item fields (both
/// in embedding order), then action fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub tables: Vec<EmbeddingTable>,
    pub n_request: usize,
    pub n_item: usize,
}

impl EmbeddingTables {
    fn build(schema: &FeatureSchema, mut make: impl FnMut(&str, usize, usize) -> EmbeddingTable) -> Self {
        let mut tables = Vec::new();
        for f in schema.ordered_nonseq() {
            tables.push(make(&f.name, f.vocab_size, f.dim));
        }
        for f in &schema.action_fields {
            tables.push(make(&f.name, f.vocab_size, f.dim));
        }
        Self {
            tables,
            n_request: schema.n_request_fields(),
            n_item: schema.n_item_fields(),
        }
    }

    pub fn zeros(schema: &FeatureSchema) -> Self {
        Self::build(schema, EmbeddingTable::zeros)
    }

    pub fn random<R: Rng>(rng: &mut R, schema: &FeatureSchema) -> Self {
        Self::build(schema, |n, v, d| EmbeddingTable::random(rng, n, v, d))
    }

    pub fn request_table(&self, i: usize) -> usize {
        i
    }

    pub fn item_table(&self, i: usize) -> usize {
        self.n_request + i
    }

    pub fn action_table(&self, i: usize) -> usize {
        self.n_request + self.n_item + i
    }

    pub fn n_action(&self) -> usize {
        self.tables.len() - self.n_request - self.n_item
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_bounds() {
        let mut t = EmbeddingTable::zeros("f", 2, 3);
        t.set_row(0, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.lookup(0).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(matches!(t.lookup(2), Err(Error::Lookup { id: 2, vocab: 2, .. })));
    }
}
