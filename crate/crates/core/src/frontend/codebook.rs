//! DFT and wide-beam analog codebooks.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Dense complex matrix stored column-major, so codewords are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_columns(rows: usize, columns: Vec<Vec<Complex64>>) -> Self {
        let cols = columns.len();
        let mut data = Vec::with_capacity(rows * cols);
        for c in columns {
            assert_eq!(c.len(), rows, "column length must equal row count");
            data.extend(c);
        }
        Self { rows, cols, data }
    }

    pub fn col(&self, j: usize) -> &[Complex64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[c * self.rows + r]
    }

    /// `A^H A`.
    pub fn gram(&self) -> CMatrix {
        let mut g = CMatrix::zeros(self.cols, self.cols);
        for i in 0..self.cols {
            for j in 0..self.cols {
                g.data[j * self.cols + i] = inner(self.col(i), self.col(j));
            }
        }
        g
    }

    /// Largest absolute entry of `A^H A − I`.
    pub fn unitarity_error(&self) -> f64 {
        let g = self.gram();
        let mut worst: f64 = 0.0;
        for i in 0..self.cols {
            for j in 0..self.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - target).norm());
            }
        }
        worst
    }
}

/// `a^H b`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Normalized DFT codebook: column `i` is `(1/√N)·exp(j2πni/N)` over `n`.
pub fn build_dft_codebook(n_antennas: usize) -> CMatrix {
    let n = n_antennas;
    let scale = 1.0 / (n as f64).sqrt();
    let columns = (0..n)
        .map(|i| {
            (0..n)
                .map(|row| {
                    let phase = 2.0 * PI * ((row * i) % n) as f64 / n as f64;
                    Complex64::from_polar(scale, phase)
                })
                .collect()
        })
        .collect();
    CMatrix::from_columns(n, columns)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WideBeamCodebook {
    /// `N_r × S_w` analog combiner bank.
    pub f_rf: CMatrix,
    pub group_size: usize,
    pub dft_base: CMatrix,
}

impl WideBeamCodebook {
    pub fn size(&self) -> usize {
        self.f_rf.cols
    }

    pub fn antennas(&self) -> usize {
        self.f_rf.rows
    }

    pub fn codeword(&self, g: usize) -> &[Complex64] {
        self.f_rf.col(g)
    }
}

/// Wide beam `g` is the normalized sum of DFT columns `g·m .. g·m + m`.
pub fn build_wide_codebook(dft: &CMatrix, group_size: usize) -> Result<WideBeamCodebook> {
    let n = dft.cols;
    if group_size == 0 || n % group_size != 0 {
        return Err(Error::GroupSize {
            group: group_size,
            antennas: n,
        });
    }
    let columns = (0..n / group_size)
        .map(|g| {
            let mut sum = vec![Complex64::new(0.0, 0.0); dft.rows];
            for i in g * group_size..(g + 1) * group_size {
                for (s, &x) in sum.iter_mut().zip(dft.col(i)) {
                    *s += x;
                }
            }
            let norm = sum.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            sum.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    Ok(WideBeamCodebook {
        f_rf: CMatrix::from_columns(dft.rows, columns),
        group_size,
        dft_base: dft.clone(),
    })
}
