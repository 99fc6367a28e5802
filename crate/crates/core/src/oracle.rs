//! Brute-force recursive least squares over `c = vec(C)` with a dense
//! `mr × mr` covariance. Quadratic-to-cubic in `m·r`; only meant for
//! certifying the matrix-variate recursions on small problems.

use crate::error::{Error, Result};
use crate::linalg::{kron_with_cap, matvec, unvec, vec, Cholesky, DenseMatrix, DenseVector, KRON_CAP};
use crate::model::DictionaryState;

/// Relative Frobenius tolerance for recognising `P = V ⊗ I_m`.
pub const STRUCTURE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FullFilterState {
    pub c: DenseVector,
    pub p: DenseMatrix,
    pub m: usize,
    pub r: usize,
    pub lambda: f64,
}

/// `H = xᵀ ⊗ I_m`.
pub fn observation_matrix(x: &DenseVector, m: usize) -> Result<DenseMatrix> {
    observation_matrix_with_cap(x, m, KRON_CAP)
}

pub fn observation_matrix_with_cap(x: &DenseVector, m: usize, cap: usize) -> Result<DenseMatrix> {
    let xt = DenseMatrix::from_fn(1, x.len(), |_, j| x[j]);
    kron_with_cap(&xt, &DenseMatrix::identity(m), cap)
}

impl FullFilterState {
    /// `c = vec(C)`, `P = V ⊗ I_m`.
    pub fn from_dictionary(state: &DictionaryState) -> Result<Self> {
        let m = state.m();
        Ok(Self {
            c: vec(state.dictionary()),
            p: kron_with_cap(state.covariance_factor(), &DenseMatrix::identity(m), KRON_CAP)?,
            m,
            r: state.rank(),
            lambda: state.lambda(),
        })
    }

    /// Recovers `(C, V)`, failing when `P` has drifted away from `V ⊗ I_m`.
    pub fn to_dictionary(&self) -> Result<(DenseMatrix, DenseMatrix)> {
        let (m, r) = (self.m, self.r);
        let c = unvec(&self.c, m, r)?;
        let v = DenseMatrix::from_fn(r, r, |i, j| {
            (0..m).map(|k| self.p.get(i * m + k, j * m + k)).sum::<f64>() / m as f64
        });
        let structured = kron_with_cap(&v, &DenseMatrix::identity(m), KRON_CAP)?;
        let residual = self.p.rel_error(&structured);
        if residual > STRUCTURE_TOL {
            return Err(Error::StructureBroken { residual });
        }
        Ok((c, v))
    }

    /// Textbook measurement update with `H = xᵀ ⊗ I_m`, `R = λ I_m`.
    pub fn full_step(&self, x: &DenseVector, y: &DenseVector) -> Result<Self> {
        if x.len() != self.r || y.len() != self.m {
            return Err(Error::dims(
                "full_step",
                format!("x of length {}, y of length {}", self.r, self.m),
                format!("x of length {}, y of length {}", x.len(), y.len()),
            ));
        }
        let h = observation_matrix(x, self.m)?;
        let ph_t = self.p.matmul(&h.transpose())?;
        let mut s = h.matmul(&ph_t)?;
        for i in 0..self.m {
            s.set(i, i, s.get(i, i) + self.lambda);
        }
        let chol = Cholesky::factor(&s.symmetrize())?;
        let innovation = y.sub(&matvec(&h, &self.c)?)?;
        let weighted = chol.solve(&innovation)?;
        let delta = matvec(&ph_t, &weighted)?;
        let c = DenseVector::from_vec_unchecked(self.c.iter().zip(delta.iter()).map(|(a, b)| a + b).collect());
        // P Hᵀ S⁻¹ H P with H P = (P Hᵀ)ᵀ
        let s_inv_hp = chol.solve_matrix(&ph_t.transpose())?;
        let p = self.p.sub(&ph_t.matmul(&s_inv_hp)?)?.symmetrize();
        Ok(Self {
            c,
            p,
            m: self.m,
            r: self.r,
            lambda: self.lambda,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DenseVector {
        DenseVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn observation_matrix_examples() {
        assert_eq!(observation_matrix(&v(&[1.]), 2).unwrap(), DenseMatrix::identity(2));
        assert_eq!(
            observation_matrix(&v(&[1., 2.]), 2).unwrap(),
            DenseMatrix::from_rows(&[&[1., 0., 2., 0.], &[0., 1., 0., 2.]]).unwrap()
        );
        let a = DenseMatrix::from_fn(3, 2, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        let x = v(&[0.7, -1.3]);
        let lhs = matvec(&observation_matrix(&x, 3).unwrap(), &vec(&a)).unwrap();
        let rhs = matvec(&a, &x).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-15);
        assert!(matches!(
            observation_matrix_with_cap(&v(&[1., 2.]), 4, 31),
            Err(Error::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn scalar_update() {
        let fs = FullFilterState {
            c: v(&[0.]),
            p: DenseMatrix::identity(1),
            m: 1,
            r: 1,
            lambda: 1.0,
        };
        let next = fs.full_step(&v(&[1.]), &v(&[2.])).unwrap();
        assert!((next.c[0] - 1.0).abs() < 1e-15);
        assert!((next.p.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_regressor_changes_nothing() {
        let s = DictionaryState::from_parts(
            DenseMatrix::from_fn(3, 2, |i, j| (i + j) as f64),
            DenseMatrix::identity(2),
            2.0,
        )
        .unwrap();
        let fs = FullFilterState::from_dictionary(&s).unwrap();
        let next = fs.full_step(&v(&[0., 0.]), &v(&[1., 2., 3.])).unwrap();
        assert_eq!(next, fs);
    }

    #[test]
    fn dictionary_round_trip() {
        let c = DenseMatrix::from_fn(2, 2, |i, j| (3 * i + j) as f64);
        let s = DictionaryState::from_parts(c.clone(), DenseMatrix::identity(2), 1.0).unwrap();
        let fs = FullFilterState::from_dictionary(&s).unwrap();
        assert_eq!(fs.p, DenseMatrix::identity(4));
        let (c2, v2) = fs.to_dictionary().unwrap();
        assert_eq!(c2, c);
        assert_eq!(v2, DenseMatrix::identity(2));
    }

    #[test]
    fn broken_structure_is_detected() {
        let s = DictionaryState::from_parts(DenseMatrix::zeros(2, 1), DenseMatrix::identity(1), 1.0).unwrap();
        let mut fs = FullFilterState::from_dictionary(&s).unwrap();
        fs.p = DenseMatrix::diagonal(&[1.0, 2.0]);
        assert!(matches!(fs.to_dictionary(), Err(Error::StructureBroken { .. })));
    }
}
