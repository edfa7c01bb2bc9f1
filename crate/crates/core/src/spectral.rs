//! Sign-split eigendecomposition of symmetric matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Asymmetry tolerated by [`hessian_split`].
pub const SPLIT_SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues within this distance of zero are treated as nonnegative.
pub const ZERO_EIGEN_TOL: f64 = 1e-10;

/// `H = V Λ Vᵀ` partitioned as `[V≥0  V<0]`, `diag(Λ≥0, Λ<0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianSplit {
    pub v_nonneg: DMatrix<f64>,
    pub lambda_nonneg: DVector<f64>,
    pub v_neg: DMatrix<f64>,
    pub lambda_neg: DVector<f64>,
}

impl HessianSplit {
    pub fn dimension(&self) -> usize {
        self.v_nonneg.nrows()
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_neg.iter().chain(self.lambda_nonneg.iter()).copied().fold(f64::INFINITY, f64::min)
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let pos = &self.v_nonneg * DMatrix::from_diagonal(&self.lambda_nonneg) * self.v_nonneg.transpose();
        let neg = &self.v_neg * DMatrix::from_diagonal(&self.lambda_neg) * self.v_neg.transpose();
        pos + neg
    }

    /// Orthogonal projector onto the negative-curvature subspace.
    pub fn negative_projector(&self) -> DMatrix<f64> {
        &self.v_neg * self.v_neg.transpose()
    }
}

pub fn hessian_split(h: &DMatrix<f64>) -> Result<HessianSplit> {
    if !h.is_square() {
        return Err(Error::Dimension { expected: h.nrows(), found: h.ncols() });
    }
    let asym = if h.is_empty() { 0.0 } else { (h - h.transpose()).amax() };
    if asym > SPLIT_SYMMETRY_TOL {
        return Err(Error::InvalidArgument(format!("matrix is not symmetric (asymmetry {asym:e})")));
    }
    let m = h.nrows();
    let eig = h.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (nonneg, neg): (Vec<usize>, Vec<usize>) =
        order.into_iter().partition(|&i| eig.eigenvalues[i] >= -ZERO_EIGEN_TOL);
    let gather = |idx: &[usize]| {
        let cols: Vec<DVector<f64>> = idx.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
        let vals = DVector::from_iterator(idx.len(), idx.iter().map(|&i| eig.eigenvalues[i]));
        let mat = if cols.is_empty() { DMatrix::zeros(m, 0) } else { DMatrix::from_columns(&cols) };
        (mat, vals)
    };
    let (v_nonneg, lambda_nonneg) = gather(&nonneg);
    let (v_neg, lambda_neg) = gather(&neg);
    Ok(HessianSplit { v_nonneg, lambda_nonneg, v_neg, lambda_neg })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min(h: &DMatrix<f64>) -> f64 {
    h.clone().symmetric_eigenvalues().min()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saddle_hessian_split() {
        let h = DMatrix::from_row_slice(2, 2, &[0.1, -0.5, -0.5, 0.1]);
        let s = hessian_split(&h).unwrap();
        assert!((s.lambda_nonneg[0] - 0.6).abs() < 1e-12);
        assert!((s.lambda_neg[0] + 0.4).abs() < 1e-12);
        let v = s.v_neg.column(0);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v[0].abs() - r).abs() < 1e-12 && (v[0] - v[1]).abs() < 1e-12);
        assert!((s.reconstruct() - &h).amax() < 1e-12);
    }

    #[test]
    fn identity_has_empty_negative_block() {
        let s = hessian_split(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(s.v_neg.ncols(), 0);
        assert_eq!(s.lambda_nonneg.len(), 3);
        assert_eq!(s.lambda_min(), 1.0);
    }

    #[test]
    fn diagonal_indefinite() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let s = hessian_split(&h).unwrap();
        assert_eq!(s.v_nonneg.column(0).iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(s.v_neg.column(0).iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn zero_eigenvalue_is_nonnegative() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, -2.0]));
        let s = hessian_split(&h).unwrap();
        assert_eq!(s.lambda_nonneg.as_slice(), &[0.0]);
        assert_eq!(s.lambda_neg.as_slice(), &[-2.0]);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1e-6, 1.0]);
        assert!(hessian_split(&h).is_err());
    }
}
