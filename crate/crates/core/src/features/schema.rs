use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
    Context,
}

impl Side {
    /// Context features travel with the user: they are fixed per request.
    pub fn is_request_level(self) -> bool {
        matches!(self, Side::User | Side::Context)
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::User => "user",
            Side::Item => "item",
            Side::Context => "context",
        })
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(Side::User),
            "item" => Ok(Side::Item),
            "context" => Ok(Side::Context),
            other => Err(Error::Config(format!("unknown side `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionField {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
}

/// Widths the model needs from a schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    /// Summed width of user and context fields.
    pub user: usize,
    pub item: usize,
    /// Summed width of the action fields before projection.
    pub action: usize,
}

impl InputDims {
    pub fn nonseq(&self) -> usize {
        self.user + self.item
    }
}

/// Non-sequential fields, action fields and the maximum sequence length.
///
/// The non-sequential embedding is laid out request-level fields first
/// (user and context, in declaration order), then item fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub nonseq_fields: Vec<FieldSpec>,
    pub action_fields: Vec<ActionField>,
    pub max_seq_len: usize,
}

impl FeatureSchema {
    pub fn new(nonseq_fields: Vec<FieldSpec>, action_fields: Vec<ActionField>, max_seq_len: usize) -> Result<Self> {
        let schema = Self {
            nonseq_fields,
            action_fields,
            max_seq_len,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        for f in &self.nonseq_fields {
            if f.vocab_size == 0 || f.dim == 0 {
                return Err(Error::Config(format!("field `{}` needs vocab and dim >= 1", f.name)));
            }
        }
        for f in &self.action_fields {
            if f.vocab_size == 0 || f.dim == 0 {
                return Err(Error::Config(format!("action field `{}` needs vocab and dim >= 1", f.name)));
            }
        }
        if self.item_fields().next().is_none() {
            return Err(Error::Config("schema has no item-side field".into()));
        }
        if self.action_fields.is_empty() {
            return Err(Error::Config("schema has no action field".into()));
        }
        Ok(())
    }

    /// User and context fields, in embedding order.
    pub fn request_fields(&self) -> impl Iterator<Item = &FieldSpec> {
        self.nonseq_fields.iter().filter(|f| f.side.is_request_level())
    }

    pub fn item_fields(&self) -> impl Iterator<Item = &FieldSpec> {
        self.nonseq_fields.iter().filter(|f| f.side == Side::Item)
    }

    /// Non-sequential fields in embedding order.
    pub fn ordered_nonseq(&self) -> impl Iterator<Item = &FieldSpec> {
        self.request_fields().chain(self.item_fields())
    }

    pub fn n_request_fields(&self) -> usize {
        self.request_fields().count()
    }

    pub fn n_item_fields(&self) -> usize {
        self.item_fields().count()
    }

    pub fn input_dims(&self) -> InputDims {
        InputDims {
            user: self.request_fields().map(|f| f.dim).sum(),
            item: self.item_fields().map(|f| f.dim).sum(),
            action: self.action_fields.iter().map(|f| f.dim).sum(),
        }
    }

    /// Plain-text descriptor: one `name side vocab dim` line per field
    /// (side `action` for action fields) plus a `max_seq_len T` line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# name side vocab dim\n");
        out.push_str(&format!("max_seq_len {}\n", self.max_seq_len));
        for f in &self.nonseq_fields {
            out.push_str(&format!("{} {} {} {}\n", f.name, f.side, f.vocab_size, f.dim));
        }
        for f in &self.action_fields {
            out.push_str(&format!("{} action {} {}\n", f.name, f.vocab_size, f.dim));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut nonseq = Vec::new();
        let mut action = Vec::new();
        let mut max_seq_len = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("schema line {}: `{raw}`", lineno + 1));
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            match parts.as_slice() {
                ["max_seq_len", t] => max_seq_len = Some(num(t)?),
                [name, "action", vocab, dim] => action.push(ActionField {
                    name: name.to_string(),
                    vocab_size: num(vocab)?,
                    dim: num(dim)?,
                }),
                [name, side, vocab, dim] => nonseq.push(FieldSpec {
                    name: name.to_string(),
                    side: side.parse()?,
                    vocab_size: num(vocab)?,
                    dim: num(dim)?,
                }),
                _ => return Err(bad()),
            }
        }
        let max_seq_len =
            max_seq_len.ok_or_else(|| Error::Config("schema is missing `max_seq_len`".into()))?;
        Self::new(nonseq, action, max_seq_len)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSchema {
        FeatureSchema::new(
            vec![
                FieldSpec { name: "item_id".into(), vocab_size: 10, dim: 3, side: Side::Item },
                FieldSpec { name: "user_id".into(), vocab_size: 5, dim: 2, side: Side::User },
                FieldSpec { name: "hour".into(), vocab_size: 24, dim: 1, side: Side::Context },
            ],
            vec![ActionField { name: "item_id".into(), vocab_size: 10, dim: 4 }],
            16,
        )
        .unwrap()
    }

    #[test]
    fn text_round_trip() {
        let s = sample();
        assert_eq!(FeatureSchema::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn request_fields_come_first() {
        let s = sample();
        let names: Vec<_> = s.ordered_nonseq().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["user_id", "hour", "item_id"]);
        assert_eq!(s.input_dims(), InputDims { user: 3, item: 3, action: 4 });
    }

    #[test]
    fn rejects_zero_vocab() {
        let mut s = sample();
        s.nonseq_fields[0].vocab_size = 0;
        assert!(s.validate().is_err());
        assert!(FeatureSchema::from_text("max_seq_len 4\nfoo sideways 3 3\n").is_err());
    }
}
