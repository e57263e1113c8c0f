//! Feature matrices, similarity (Gram) matrices and the dense symmetric
//! eigensolver everything else is built on.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::par::Execution;

/// Rows whose Euclidean norm falls below this are rejected by [`normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Largest `|‖row‖ − 1|` accepted by [`gram_matrix`].
pub const UNIT_ROW_TOLERANCE: f64 = 1e-6;

const SYMMETRY_TOLERANCE: f64 = 1e-9;
const DIAGONAL_TOLERANCE: f64 = 1e-9;

/// `n` examples by `d` features, with optional integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
    labels: Option<Vec<i64>>,
}

impl FeatureMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        Self::with_labels(data, None)
    }

    pub fn with_labels(data: DMatrix<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::validation(format!(
                "feature matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some((idx, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (row, col) = (idx % data.nrows(), idx / data.nrows());
            return Err(Error::validation(format!(
                "non-finite entry {v} at row {row}, column {col}"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != data.nrows() {
                return Err(Error::validation(format!(
                    "{} labels for {} rows",
                    l.len(),
                    data.nrows()
                )));
            }
        }
        Ok(Self { data, labels })
    }

    /// Builds a matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::validation(format!(
                "row {i} has {} columns, expected {d}",
                r.len()
            )));
        }
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.data.row(i).norm()
    }

    /// Row-major copy of the rows, convenient for hot distance loops.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| self.row(i)).collect()
    }

    /// Selects rows by index (repetition allowed); labels follow their rows.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::validation(format!(
                "row index {bad} out of range for {} rows",
                self.n()
            )));
        }
        let data = DMatrix::from_fn(indices.len(), self.d(), |r, c| self.data[(indices[r], c)]);
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::with_labels(data, labels)
    }

    pub fn into_parts(self) -> (DMatrix<f64>, Option<Vec<i64>>) {
        (self.data, self.labels)
    }

    /// True when every row has unit Euclidean norm within `tol`.
    pub fn is_row_normalized(&self, tol: f64) -> bool {
        (0..self.n()).all(|i| (self.row_norm(i) - 1.0).abs() <= tol)
    }
}

/// Divides every row by its Euclidean norm.
pub fn normalize_rows(x: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut data = x.data.clone();
    for i in 0..x.n() {
        let norm = x.row_norm(i);
        if norm < MIN_ROW_NORM {
            return Err(Error::validation(format!(
                "row {i} has norm {norm:e}, cannot normalise"
            )));
        }
        data.row_mut(i).unscale_mut(norm);
    }
    FeatureMatrix::with_labels(data, x.labels.clone())
}

/// Symmetric matrix with unit diagonal, the `K` of the weighted Vendi Score.
///
/// Symmetry and the unit diagonal are checked on construction; positive
/// semi-definiteness is checked where the spectrum is computed anyway.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    entries: DMatrix<f64>,
}

impl SimilarityMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        check_square_symmetric(&entries)?;
        if let Some(i) = (0..entries.nrows()).find(|&i| (entries[(i, i)] - 1.0).abs() > DIAGONAL_TOLERANCE) {
            return Err(Error::validation(format!(
                "similarity diagonal entry {i} is {}, expected 1",
                entries[(i, i)]
            )));
        }
        Ok(Self { entries })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: DMatrix::identity(n, n),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::validation("similarity rows must form a square matrix"));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }

    /// Smallest eigenvalue is at least `−1e-8·n`.
    pub fn check_psd(&self) -> Result<()> {
        let eig = eigh(&self.entries)?;
        let min = eig.eigenvalues[self.n() - 1];
        let floor = -1e-8 * self.n() as f64;
        if min < floor {
            return Err(Error::numerical(format!(
                "similarity matrix is not positive semi-definite (smallest eigenvalue {min:e})"
            )));
        }
        Ok(())
    }

    /// Applies the same permutation to rows and columns: entry `(i, j)` of
    /// the result is entry `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        Self {
            entries: DMatrix::from_fn(n, n, |i, j| self.entries[(perm[i], perm[j])]),
        }
    }
}

fn check_square_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::validation(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::validation("matrix must be non-empty"));
    }
    if let Some(v) = a.iter().find(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite matrix entry {v}")));
    }
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::validation(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// `K = X Xᵀ` for a row-normalised `X`.
pub fn gram_matrix(x: &FeatureMatrix) -> Result<SimilarityMatrix> {
    gram_matrix_with(x, Execution::default())
}

pub fn gram_matrix_with(x: &FeatureMatrix, exec: Execution) -> Result<SimilarityMatrix> {
    if let Some(i) = (0..x.n()).find(|&i| (x.row_norm(i) - 1.0).abs() > UNIT_ROW_TOLERANCE) {
        return Err(Error::validation(format!(
            "row {i} has norm {}, gram_matrix needs row-normalised features",
            x.row_norm(i)
        )));
    }
    let n = x.n();
    let rows = x.to_rows();
    // Upper triangle row by row; every entry is an independent dot product.
    let upper = exec.map_range(n, |i| {
        (i..n)
            .map(|j| {
                if i == j {
                    1.0
                } else {
                    rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>()
                }
            })
            .collect::<Vec<f64>>()
    });
    let mut k = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            k[(i, i + off)] = v;
            k[(i + off, i)] = v;
        }
    }
    Ok(SimilarityMatrix { entries: k })
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending and
/// eigenvectors as orthonormal columns.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenResult {
    /// `Q Λ Qᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        q * DMatrix::from_diagonal(&self.eigenvalues) * q.transpose()
    }

    /// `Q f(Λ) Qᵀ`, the matrix function for a scalar map on the spectrum.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        let mut scaled = q.clone();
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(k).scale_mut(f(lambda));
        }
        scaled * q.transpose()
    }
}

/// Dense symmetric eigensolver (tridiagonalisation plus implicit QR).
pub fn eigh(a: &DMatrix<f64>) -> Result<EigenResult> {
    check_square_symmetric(a)?;
    // Solve on the exactly symmetrised input so round-off asymmetry cannot leak in.
    let sym = (a + a.transpose()) * 0.5;
    let SymmetricEigen {
        eigenvalues,
        eigenvectors,
    } = SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| Error::numerical("symmetric eigensolver did not converge"))?;

    let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]).then(i.cmp(&j)));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eigenvalues[i]));
    let vectors = DMatrix::from_fn(a.nrows(), order.len(), |r, c| eigenvectors[(r, order[c])]);
    Ok(EigenResult {
        eigenvalues: values,
        eigenvectors: vectors,
    })
}
