use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::mathcore::{gemm, Matrix};

/// `N × D` activation: one row per feature head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMatrix(Matrix);

impl HeadMatrix {
    /// Requires `D mod N = 0`, the reshape head mixing relies on.
    pub fn new(m: Matrix) -> Result<Self> {
        let (n, d) = m.shape();
        if n == 0 || d % n != 0 {
            return shape_err(format!("head matrix {n}x{d}: head dim must be a multiple of the head count"));
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn n_heads(&self) -> usize {
        self.0.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.0.cols()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl Deref for HeadMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// A contiguous range of `e_ns` split evenly over a contiguous range of
/// heads. `chunk` is the per-head slice width after zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSegment {
    pub offset: usize,
    pub len: usize,
    pub first_head: usize,
    pub n_heads: usize,
    pub chunk: usize,
}

/// How `e_ns` is divided into heads. Without decoupling there is a single
/// segment; with decoupling the request-level fields feed heads `0..N_U`
/// and the item fields feed heads `N_U..N`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub segments: Vec<HeadSegment>,
    pub n_heads: usize,
    pub head_dim: usize,
}

fn segment(offset: usize, len: usize, first_head: usize, n_heads: usize) -> HeadSegment {
    HeadSegment {
        offset,
        len,
        first_head,
        n_heads,
        chunk: len.div_ceil(n_heads),
    }
}

impl HeadLayout {
    pub fn joint(d_ns: usize, n_heads: usize, head_dim: usize) -> Result<Self> {
        if n_heads == 0 || d_ns == 0 {
            return shape_err("joint layout needs heads and a non-empty embedding");
        }
        Ok(Self {
            segments: vec![segment(0, d_ns, 0, n_heads)],
            n_heads,
            head_dim,
        })
    }

    /// `n_user == 0` degenerates to the joint layout.
    pub fn decoupled(user_dim: usize, item_dim: usize, n_user: usize, n_heads: usize, head_dim: usize) -> Result<Self> {
        if n_user == 0 {
            return Self::joint(user_dim + item_dim, n_heads, head_dim);
        }
        if n_user >= n_heads {
            return shape_err(format!("{n_user} user heads leave no item head out of {n_heads}"));
        }
        if user_dim == 0 || item_dim == 0 {
            return shape_err("decoupled layout needs both user-side and item-side features");
        }
        Ok(Self {
            segments: vec![
                segment(0, user_dim, 0, n_user),
                segment(user_dim, item_dim, n_user, n_heads - n_user),
            ],
            n_heads,
            head_dim,
        })
    }

    pub fn d_ns(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Projection shape `D × chunk` of head `j`.
    pub fn proj_shape(&self, head: usize) -> (usize, usize) {
        let seg = self
            .segments
            .iter()
            .find(|s| head >= s.first_head && head < s.first_head + s.n_heads)
            .expect("head within layout");
        (self.head_dim, seg.chunk)
    }

    /// Rows of one segment, from that segment's part of `e_ns`.
    pub fn project_segment(&self, seg: &HeadSegment, part: &[f64], proj: &[Matrix]) -> Result<Matrix> {
        if part.len() != seg.len {
            return shape_err(format!("segment expects {} values, got {}", seg.len, part.len()));
        }
        let mut out = Matrix::zeros(seg.n_heads, self.head_dim);
        for h in 0..seg.n_heads {
            let w = &proj[seg.first_head + h];
            if w.shape() != (self.head_dim, seg.chunk) {
                return shape_err(format!(
                    "head {} projection {:?}, expected {:?}",
                    seg.first_head + h,
                    w.shape(),
                    (self.head_dim, seg.chunk)
                ));
            }
            let slice = padded_chunk(part, h, seg.chunk);
            let x = Matrix::row_vector(&slice).matmul_nt(w)?;
            out.row_mut(h).copy_from_slice(x.data());
        }
        Ok(out)
    }

    /// `X`: row `j` is `W_j · slice_j(e_ns)`.
    pub fn split(&self, e_ns: &[f64], proj: &[Matrix]) -> Result<Matrix> {
        if e_ns.len() != self.d_ns() {
            return shape_err(format!("e_ns length {} vs layout {}", e_ns.len(), self.d_ns()));
        }
        if proj.len() != self.n_heads {
            return shape_err(format!("{} projections for {} heads", proj.len(), self.n_heads));
        }
        let mut out = Matrix::zeros(0, self.head_dim);
        for seg in &self.segments {
            let rows = self.project_segment(seg, &e_ns[seg.offset..seg.offset + seg.len], proj)?;
            out = Matrix::vstack(&out, &rows)?;
        }
        Ok(out)
    }

    /// Accumulates projection gradients and returns `d e_ns`.
    pub fn split_backward(&self, e_ns: &[f64], proj: &[Matrix], dx: &Matrix, dproj: &mut [Matrix]) -> Result<Vec<f64>> {
        let mut de = vec![0.0; e_ns.len()];
        for seg in &self.segments {
            let part = &e_ns[seg.offset..seg.offset + seg.len];
            for h in 0..seg.n_heads {
                let head = seg.first_head + h;
                let slice = Matrix::row_vector(&padded_chunk(part, h, seg.chunk));
                let dy = Matrix::row_vector(dx.row(head));
                gemm(&dy, true, &slice, false, &mut dproj[head], true)?;
                let dslice = dy.matmul(&proj[head])?;
                let start = h * seg.chunk;
                for (c, v) in dslice.data().iter().enumerate() {
                    if start + c < seg.len {
                        de[seg.offset + start + c] += v;
                    }
                }
            }
        }
        Ok(de)
    }
}

fn padded_chunk(part: &[f64], h: usize, chunk: usize) -> Vec<f64> {
    let mut slice = vec![0.0; chunk];
    let start = h * chunk;
    if start < part.len() {
        let end = (start + chunk).min(part.len());
        slice[..end - start].copy_from_slice(&part[start..end]);
    }
    slice
}

/// Splits `e_ns` into `N = proj.len()` contiguous slices (zero padded to a
/// multiple of `N`) and maps slice `j` through `proj[j]` (`D × d`).
pub fn split_heads(e_ns: &[f64], proj: &[Matrix]) -> Result<HeadMatrix> {
    let Some(first) = proj.first() else {
        return shape_err("split_heads needs at least one projection");
    };
    let layout = HeadLayout::joint(e_ns.len(), proj.len(), first.rows())?;
    HeadMatrix::new(layout.split(e_ns, proj)?)
}
