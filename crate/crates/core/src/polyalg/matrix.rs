//! Matrices with polynomial entries.

use nalgebra::DMatrix;

use super::{Assignment, Poly, PolyError, VarId, VarRegistry};

/// Dense grid of sparse polynomials. The symmetry flag is a promise used by
/// downstream compilers; it is checked when set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Poly>,
    symmetric: bool,
}

impl PolyMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        PolyMatrix {
            rows,
            cols,
            entries: vec![Poly::zero(); rows * cols],
            symmetric: false,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Poly) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.entries[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Constant matrix lifted to polynomial entries.
    pub fn from_numeric(a: &DMatrix<f64>) -> Self {
        Self::from_fn(a.nrows(), a.ncols(), |i, j| {
            if a[(i, j)] == 0.0 {
                Poly::zero()
            } else {
                Poly::constant(a[(i, j)])
            }
        })
    }

    /// Column vector from a slice of polynomials.
    pub fn col_vector(entries: Vec<Poly>) -> Self {
        let rows = entries.len();
        PolyMatrix {
            rows,
            cols: 1,
            entries,
            symmetric: false,
        }
    }

    pub fn identity_scaled(dim: usize, c: f64) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.entries[i * dim + i] = Poly::constant(c);
        }
        m.symmetric = true;
        m
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn is_symmetric_flagged(&self) -> bool {
        self.symmetric
    }

    pub fn entry(&self, i: usize, j: usize) -> &Poly {
        &self.entries[i * self.cols + j]
    }

    pub fn set_entry(&mut self, i: usize, j: usize, p: Poly) {
        self.entries[i * self.cols + j] = p;
    }

    /// Marks the matrix symmetric after verifying entries coefficient-wise.
    pub fn mark_symmetric(mut self) -> Result<Self, PolyError> {
        if self.rows != self.cols {
            return Err(PolyError::DimensionMismatch(format!(
                "symmetric flag on a {}x{} matrix",
                self.rows, self.cols
            )));
        }
        for i in 0..self.rows {
            for j in 0..i {
                if self.entry(i, j) != self.entry(j, i) {
                    return Err(PolyError::DimensionMismatch(format!(
                        "entry ({i},{j}) differs from ({j},{i})"
                    )));
                }
            }
        }
        self.symmetric = true;
        Ok(self)
    }

    pub fn degree(&self) -> u32 {
        self.entries.iter().map(Poly::degree).max().unwrap_or(0)
    }

    pub fn add(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(PolyError::DimensionMismatch(format!(
                "add {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = PolyMatrix::zeros(self.rows, self.cols);
        for idx in 0..self.entries.len() {
            out.entries[idx] = self.entries[idx].add(&other.entries[idx]);
        }
        out.symmetric = self.symmetric && other.symmetric;
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> PolyMatrix {
        let mut out = self.clone();
        for e in &mut out.entries {
            *e = e.scale(c);
        }
        out
    }

    pub fn mul(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        if self.cols != other.rows {
            return Err(PolyError::DimensionMismatch(format!(
                "mul {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = PolyMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = Poly::zero();
                for l in 0..self.cols {
                    let a = self.entry(i, l);
                    if a.is_zero() {
                        continue;
                    }
                    acc = acc.add(&a.mul(other.entry(l, j)));
                }
                out.entries[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> PolyMatrix {
        let out = PolyMatrix::from_fn(self.cols, self.rows, |i, j| self.entry(j, i).clone());
        PolyMatrix {
            symmetric: self.symmetric,
            ..out
        }
    }

    /// `self^T * other` in one pass.
    pub fn transpose_mul(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        self.transpose().mul(other)
    }

    /// Entrywise numeric evaluation.
    pub fn eval(&self, point: &Assignment, reg: &VarRegistry) -> Result<DMatrix<f64>, PolyError> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self.entry(i, j).eval_in(point, reg)?;
            }
        }
        Ok(out)
    }

    /// All variables mentioned by any entry.
    pub fn variables(&self) -> Vec<VarId> {
        let mut ids: Vec<VarId> = self
            .entries
            .iter()
            .flat_map(|p| p.terms().flat_map(|(m, _)| m.factors().map(|(v, _)| v)))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyalg::VarRegistry;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_poly(reg: &VarRegistry, rng: &mut ChaCha8Rng) -> Poly {
        let mut p = Poly::constant(rng.gen_range(-1.0..1.0));
        for _ in 0..3 {
            let v = VarId(rng.gen_range(0..reg.len() as u32));
            let w = VarId(rng.gen_range(0..reg.len() as u32));
            p = p.add(&Poly::monomial(
                crate::polyalg::Monomial::var(v).mul(&crate::polyalg::Monomial::var(w)),
                rng.gen_range(-1.0..1.0),
            ));
        }
        p
    }

    #[test]
    fn additive_inverse_gives_zero_matrix() {
        let reg = VarRegistry::plant_only(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = PolyMatrix::from_fn(3, 3, |_, _| random_poly(&reg, &mut rng));
        let z = m.add(&m.scale(-1.0)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(z.entry(i, j).is_zero());
            }
        }
    }

    #[test]
    fn product_evaluation_matches_numeric_product() {
        // evaluation homomorphism on a random 3x3 product
        let reg = VarRegistry::plant_only(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = PolyMatrix::from_fn(3, 3, |_, _| random_poly(&reg, &mut rng));
        let b = PolyMatrix::from_fn(3, 3, |_, _| random_poly(&reg, &mut rng));
        let ab = a.mul(&b).unwrap();
        for trial in 0..5 {
            let mut pt = Assignment::for_registry(&reg);
            let mut rng2 = ChaCha8Rng::seed_from_u64(100 + trial);
            for i in 0..reg.len() {
                pt.set(VarId(i as u32), rng2.gen_range(-2.0..2.0));
            }
            let lhs = ab.eval(&pt, &reg).unwrap();
            let rhs = a.eval(&pt, &reg).unwrap() * b.eval(&pt, &reg).unwrap();
            assert!((lhs - rhs).norm() < 1e-10);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = PolyMatrix::zeros(2, 3);
        let b = PolyMatrix::zeros(2, 3);
        assert!(a.mul(&b).is_err());
        assert!(a.add(&b.transpose()).is_err());
    }
}
