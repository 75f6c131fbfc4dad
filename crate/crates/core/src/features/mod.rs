//! Feature schema, sparse embedding tables, request embedding and the split
//! of the non-sequential embedding into heads.

pub mod dataset;
pub mod embedding;
pub mod heads;
pub mod request;
pub mod schema;

pub use dataset::Dataset;
pub use embedding::{EmbeddingTable, EmbeddingTables};
pub use heads::{split_heads, HeadLayout, HeadMatrix, HeadSegment};
pub use request::{embed_action, embed_item_side, embed_nonseq, embed_request_side, embed_sequence, sequence_features, Request};
pub use schema::{ActionField, FeatureSchema, FieldSpec, InputDims, Side};
