use crate::error::{Error, Result};

/// Contiguous row ranges of a packed `[S×d]` matrix, one per entity.
///
/// Packing many short sequences into one matrix keeps every projection a
/// single GEMM; attention and pooling respect the boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segments {
    spans: Vec<(usize, usize)>,
}

impl Segments {
    /// Consecutive segments with the given lengths, starting at row 0.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        let mut start = 0;
        let mut spans = Vec::with_capacity(lengths.len());
        for &len in lengths {
            if len == 0 {
                return Err(Error::Input("empty segment".into()));
            }
            spans.push((start, len));
            start += len;
        }
        Ok(Self { spans })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::from_lengths(&[len])
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.spans.last().map_or(0, |&(s, l)| s + l)
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.spans.iter().map(|&(_, l)| l).collect()
    }

    pub fn max_len(&self) -> usize {
        self.spans.iter().map(|&(_, l)| l).max().unwrap_or(0)
    }

    /// Index of the final row of every segment.
    pub fn last_rows(&self) -> Vec<usize> {
        self.spans.iter().map(|&(s, l)| s + l - 1).collect()
    }

    /// Segment index of every row.
    pub fn row_owner(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_rows());
        for (i, &(_, l)) in self.spans.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, l));
        }
        out
    }

    /// Position of every row inside its own segment.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_rows());
        for &(_, l) in &self.spans {
            out.extend(0..l);
        }
        out
    }
}
