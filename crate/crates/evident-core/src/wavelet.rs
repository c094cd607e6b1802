//! Orthonormal Haar multi-level wavelet analysis and exact synthesis over
//! TxD matrices, applied per feature channel.
//!
//! Lengths that are not a multiple of 2^L are zero-padded on the right;
//! the original length is stored so synthesis truncates back. Analysis
//! and synthesis are linear maps, so the tape variants
//! ([`dwt_graph`]/[`idwt_graph`]) backpropagate through the transform.

use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};
use crate::{EvidentError, Result};

const SQRT2_INV: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// L high-frequency bands (level 1 first, coarsest last) plus the final
/// low band. Band l has padded_len / 2^l rows.
#[derive(Debug, Clone)]
pub struct WaveletPyramid {
    pub high_bands: Vec<Matrix>,
    pub low_band: Matrix,
    pub original_len: usize,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.high_bands.len()
    }

    /// Total squared energy across all bands.
    pub fn energy(&self) -> f64 {
        self.high_bands.iter().map(Matrix::norm_sq).sum::<f64>() + self.low_band.norm_sq()
    }

    fn validate(&self) -> Result<()> {
        if self.high_bands.is_empty() {
            return Err(EvidentError::Config("pyramid needs at least one level".into()));
        }
        let cols = self.low_band.cols();
        let mut expect = self.low_band.rows();
        for (l, band) in self.high_bands.iter().enumerate().rev() {
            if band.cols() != cols {
                return Err(EvidentError::Dimension(format!(
                    "band {} has {} columns, low band has {}",
                    l + 1,
                    band.cols(),
                    cols
                )));
            }
            if band.rows() != expect {
                return Err(EvidentError::Dimension(format!(
                    "band {} has {} rows, expected {}",
                    l + 1,
                    band.rows(),
                    expect
                )));
            }
            expect *= 2;
        }
        if self.original_len > expect {
            return Err(EvidentError::Dimension(format!(
                "original length {} exceeds padded length {}",
                self.original_len, expect
            )));
        }
        Ok(())
    }
}

/// Right-pad target so the length divides evenly through `levels` halvings.
pub fn padded_len(t: usize, levels: usize) -> usize {
    let block = 1usize << levels;
    t.div_ceil(block) * block
}

fn haar_step(x: &Matrix) -> (Matrix, Matrix) {
    let half = x.rows() / 2;
    let mut low = Matrix::zeros(half, x.cols());
    let mut high = Matrix::zeros(half, x.cols());
    for t in 0..half {
        for c in 0..x.cols() {
            let a = x.get(2 * t, c);
            let b = x.get(2 * t + 1, c);
            low.set(t, c, (a + b) * SQRT2_INV);
            high.set(t, c, (a - b) * SQRT2_INV);
        }
    }
    (low, high)
}

fn haar_unstep(low: &Matrix, high: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(low.rows() * 2, low.cols());
    for t in 0..low.rows() {
        for c in 0..low.cols() {
            let l = low.get(t, c);
            let h = high.get(t, c);
            out.set(2 * t, c, (l + h) * SQRT2_INV);
            out.set(2 * t + 1, c, (l - h) * SQRT2_INV);
        }
    }
    out
}

/// L-level orthonormal Haar analysis of a TxD matrix, per channel.
pub fn dwt(x: &Matrix, levels: usize) -> Result<WaveletPyramid> {
    if x.rows() == 0 {
        return Err(EvidentError::EmptyInput("dwt of an empty sequence".into()));
    }
    if levels == 0 {
        return Err(EvidentError::Config("dwt needs at least one level".into()));
    }
    let target = padded_len(x.rows(), levels);
    let mut current = Matrix::zeros(target, x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            current.set(r, c, x.get(r, c));
        }
    }
    let mut high_bands = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (low, high) = haar_step(&current);
        high_bands.push(high);
        current = low;
    }
    Ok(WaveletPyramid {
        high_bands,
        low_band: current,
        original_len: x.rows(),
    })
}

/// Exact inverse of [`dwt`] up to removal of the zero padding.
pub fn idwt(p: &WaveletPyramid) -> Result<Matrix> {
    p.validate()?;
    let mut current = p.low_band.clone();
    for high in p.high_bands.iter().rev() {
        current = haar_unstep(&current, high);
    }
    let mut out = Matrix::zeros(p.original_len, current.cols());
    for r in 0..p.original_len {
        for c in 0..current.cols() {
            out.set(r, c, current.get(r, c));
        }
    }
    Ok(out)
}

/// Tape-resident pyramid; same layout as [`WaveletPyramid`] with node ids.
pub struct GraphPyramid {
    pub high_bands: Vec<NodeId>,
    pub low_band: NodeId,
    pub original_len: usize,
}

/// Analysis inside the gradient graph.
pub fn dwt_graph(tape: &Tape, x: NodeId, levels: usize) -> GraphPyramid {
    assert!(levels >= 1, "dwt_graph needs at least one level");
    let (rows, _) = tape.shape(x);
    assert!(rows > 0, "dwt_graph of an empty sequence");
    let target = padded_len(rows, levels);
    let mut current = if target == rows {
        x
    } else {
        tape.pad_rows(x, target)
    };
    let mut high_bands = Vec::with_capacity(levels);
    for _ in 0..levels {
        high_bands.push(tape.haar_high(current));
        current = tape.haar_low(current);
    }
    GraphPyramid {
        high_bands,
        low_band: current,
        original_len: rows,
    }
}

/// Synthesis inside the gradient graph, truncated to the original length.
pub fn idwt_graph(tape: &Tape, p: &GraphPyramid) -> NodeId {
    let mut current = p.low_band;
    for high in p.high_bands.iter().rev() {
        current = tape.haar_up(current, *high);
    }
    let (rows, _) = tape.shape(current);
    if rows == p.original_len {
        current
    } else {
        tape.take_rows(current, p.original_len)
    }
}
