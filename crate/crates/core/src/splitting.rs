//! Cross splitting of the Gram matrix.
//!
//! `K = sum_n C_n + D`, where `D` is the diagonal of `K` and `C_n` is zero
//! except for row and column `n`. Moving index `n` to the front,
//!
//! ```text
//! C_n ~ [ 0     kbar_n^H ]
//!       [ kbar_n    0    ]
//! ```
//!
//! with `kbar_n[m] = K[m, n] / 2` for every `m != n`. Each off-diagonal entry
//! of `K` is therefore shared in equal halves by `C_n` and `C_m`. The
//! permutation that moves `n` to the front is never materialized: all
//! per-user vectors are kept in natural index order with position `n`
//! skipped.

use crate::error::{Error, Result};
use crate::model::{CMatrix, CVector, PrecomputedGram, C64};

#[derive(Debug, Clone)]
pub struct SplitComponents {
    /// Diagonal of `K`.
    pub diag: Vec<f64>,
    /// Column `n` holds `kbar_n` in natural index order; entry `(n, n)` is zero.
    pub kbar: CMatrix,
    /// Entry `n` is the only nonzero of `b_n` (the scaled matched filter).
    pub b: CVector,
}

impl SplitComponents {
    pub fn users(&self) -> usize {
        self.diag.len()
    }

    /// `kbar_n` as a length N-1 vector (index `n` removed, order preserved).
    pub fn kbar_vec(&self, n: usize) -> Result<Vec<C64>> {
        self.check_index(n)?;
        Ok(self
            .kbar
            .column(n)
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != n)
            .map(|(_, v)| *v)
            .collect())
    }

    /// `b_n` as a dense length-N vector.
    pub fn b_component(&self, n: usize) -> Result<CVector> {
        self.check_index(n)?;
        let mut v = CVector::zeros(self.users());
        v[n] = self.b[n];
        Ok(v)
    }

    pub(crate) fn kbar_column(&self, n: usize) -> &[C64] {
        let len = self.users();
        &self.kbar.as_slice()[n * len..(n + 1) * len]
    }

    fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.users() {
            return Err(Error::IndexOutOfRange {
                index: n,
                len: self.users(),
            });
        }
        Ok(())
    }
}

pub fn cross_split(g: &PrecomputedGram) -> Result<SplitComponents> {
    let n = g.users();
    if g.k.nrows() != n || g.k.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "Gram matrix",
            expected: n,
            found: g.k.nrows(),
        });
    }
    let scale = g.k.iter().map(|v| v.norm()).fold(1.0, f64::max);
    let max_dev = (&g.k - g.k.adjoint())
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max);
    if max_dev > 1e-9 * scale {
        return Err(Error::NotHermitian { max_dev });
    }

    let diag = g.diagonal();
    let kbar = CMatrix::from_fn(n, n, |m, col| {
        if m == col {
            C64::new(0.0, 0.0)
        } else {
            0.5 * g.k[(m, col)]
        }
    });
    Ok(SplitComponents {
        diag,
        kbar,
        b: g.mf.clone(),
    })
}

/// Dense `C_n`. Test and oracle use only.
pub fn assemble_cross_matrix(s: &SplitComponents, n: usize) -> Result<CMatrix> {
    s.check_index(n)?;
    let len = s.users();
    let mut c = CMatrix::zeros(len, len);
    for m in (0..len).filter(|&m| m != n) {
        let v = s.kbar[(m, n)];
        c[(m, n)] = v;
        c[(n, m)] = v.conj();
    }
    Ok(c)
}
