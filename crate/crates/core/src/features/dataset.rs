//! Binary request files.
//!
//! All integers are little-endian.
//!
//! ```text
//! file    := magic "MXDS" | version u32 (=1)
//!            | n_request_fields u16 | n_item_fields u16 | n_action_fields u16 | n_tasks u16
//!            | n_records u64 | record*
//! record  := body_len u32 | body            (body_len counts body bytes only)
//! body    := user_id u32 | K u32 | T u32
//!            | request ids   n_request_fields × u32
//!            | sequence      T × n_action_fields × u32   (oldest action first)
//!            | candidates    K × n_item_fields × u32
//!            | has_labels u8 | labels K × n_tasks × u8 (0 or 1, present iff has_labels = 1)
//! ```
//!
//! Field order inside each id tuple is the schema's embedding order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::schema::FeatureSchema;
use super::request::Request;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MXDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub n_tasks: usize,
    pub requests: Vec<Request>,
}

impl Dataset {
    pub fn n_impressions(&self) -> usize {
        self.requests.iter().map(|r| r.n_candidates()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        encode(self, &mut out)?;
        Ok(out)
    }

    pub fn from_bytes(schema: &FeatureSchema, bytes: &[u8]) -> Result<Self> {
        decode(schema, &mut &bytes[..])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        encode(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(schema: &FeatureSchema, path: &Path) -> Result<Self> {
        decode(schema, &mut BufReader::new(File::open(path)?))
    }
}

fn u16_of(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::Data(format!("{what} {n} does not fit the header")))
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Data(format!("{what} {n} does not fit a record")))
}

fn encode(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    let s = &ds.schema;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for n in [s.n_request_fields(), s.n_item_fields(), s.action_fields.len(), ds.n_tasks] {
        w.write_all(&u16_of(n, "field count")?.to_le_bytes())?;
    }
    w.write_all(&(ds.requests.len() as u64).to_le_bytes())?;
    let mut body = Vec::new();
    for r in &ds.requests {
        body.clear();
        let mut put = |v: u32| body.extend_from_slice(&v.to_le_bytes());
        put(r.user_id);
        put(u32_of(r.candidates.len(), "candidate count")?);
        put(u32_of(r.sequence.len(), "sequence length")?);
        for &id in &r.user_nonseq {
            put(id);
        }
        for a in &r.sequence {
            for &id in a {
                put(id);
            }
        }
        for c in &r.candidates {
            for &id in c {
                put(id);
            }
        }
        match &r.labels {
            Some(labels) => {
                body.push(1);
                for row in labels {
                    if row.len() != ds.n_tasks {
                        return Err(Error::Data(format!("label row of {} tasks, expected {}", row.len(), ds.n_tasks)));
                    }
                    body.extend(row.iter().map(|&b| b as u8));
                }
            }
            None => body.push(0),
        }
        w.write_all(&u32_of(body.len(), "record length")?.to_le_bytes())?;
        w.write_all(&body)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Data("truncated record".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn ids(&mut self, n: usize) -> Result<Vec<u32>> {
        (0..n).map(|_| self.u32()).collect()
    }
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("truncated dataset header: {e}")))?;
    Ok(buf)
}

fn decode(schema: &FeatureSchema, r: &mut impl Read) -> Result<Dataset> {
    if &read_exact::<4>(r)? != DATASET_MAGIC {
        return Err(Error::Data("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != DATASET_VERSION {
        return Err(Error::Data(format!("unsupported dataset version {version}")));
    }
    let mut counts = [0usize; 4];
    for c in &mut counts {
        *c = u16::from_le_bytes(read_exact(r)?) as usize;
    }
    let [n_req, n_item, n_action, n_tasks] = counts;
    if n_req != schema.n_request_fields() || n_item != schema.n_item_fields() || n_action != schema.action_fields.len() {
        return Err(Error::Data("dataset field counts do not match the schema".into()));
    }
    let n_records = u64::from_le_bytes(read_exact(r)?);
    let mut requests = Vec::with_capacity(n_records.min(1 << 20) as usize);
    let mut body = Vec::new();
    for _ in 0..n_records {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        body.resize(len, 0);
        r.read_exact(&mut body)
            .map_err(|e| Error::Data(format!("truncated record: {e}")))?;
        let mut c = Cursor { buf: &body };
        let user_id = c.u32()?;
        let k = c.u32()? as usize;
        let t = c.u32()? as usize;
        let user_nonseq = c.ids(n_req)?;
        let sequence = (0..t).map(|_| c.ids(n_action)).collect::<Result<_>>()?;
        let candidates = (0..k).map(|_| c.ids(n_item)).collect::<Result<_>>()?;
        let labels = match c.take(1)?[0] {
            0 => None,
            1 => {
                let raw = c.take(k * n_tasks)?;
                if n_tasks == 0 {
                    Some(vec![Vec::new(); k])
                } else {
                    Some(raw.chunks(n_tasks).map(|row| row.iter().map(|&b| b != 0).collect()).collect())
                }
            }
            other => return Err(Error::Data(format!("bad label flag {other}"))),
        };
        if !c.buf.is_empty() {
            return Err(Error::Data("record has trailing bytes".into()));
        }
        requests.push(Request {
            user_id,
            user_nonseq,
            sequence,
            candidates,
            labels,
        });
    }
    Ok(Dataset {
        schema: schema.clone(),
        n_tasks,
        requests,
    })
}
