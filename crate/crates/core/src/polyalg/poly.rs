//! Sparse polynomials with real coefficients.

use std::collections::BTreeMap;

use super::{Monomial, PolyError, VarId, VarRegistry, COEFF_DROP_TOL};

/// Point at which polynomials are evaluated; indexed by registry variable.
#[derive(Debug, Clone)]
pub struct Assignment {
    values: Vec<Option<f64>>,
}

impl Assignment {
    pub fn new(num_vars: usize) -> Self {
        Assignment {
            values: vec![None; num_vars],
        }
    }

    pub fn for_registry(reg: &VarRegistry) -> Self {
        Self::new(reg.len())
    }

    pub fn set(&mut self, id: VarId, value: f64) -> &mut Self {
        if id.index() >= self.values.len() {
            self.values.resize(id.index() + 1, None);
        }
        self.values[id.index()] = Some(value);
        self
    }

    pub fn get(&self, id: VarId) -> Option<f64> {
        self.values.get(id.index()).copied().flatten()
    }
}

/// Sparse polynomial: monomial -> coefficient, graded-lex keyed so that
/// iteration (and therefore serialization) is deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Poly {
    terms: BTreeMap<Monomial, f64>,
}

impl Poly {
    pub fn zero() -> Self {
        Poly::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Poly::zero();
        p.add_term(Monomial::one(), c);
        p
    }

    pub fn var(id: VarId) -> Self {
        let mut p = Poly::zero();
        p.add_term(Monomial::var(id), 1.0);
        p
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        let mut p = Poly::zero();
        p.add_term(m, c);
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Largest total degree over variables accepted by `pred`.
    pub fn degree_where(&self, mut pred: impl FnMut(VarId) -> bool) -> u32 {
        self.terms
            .keys()
            .map(|m| m.degree_where(&mut pred))
            .max()
            .unwrap_or(0)
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        let new = self.terms.get(&m).copied().unwrap_or(0.0) + c;
        if new.abs() < COEFF_DROP_TOL {
            self.terms.remove(&m);
        } else {
            self.terms.insert(m, new);
        }
    }

    fn cleanup(&mut self) {
        self.terms.retain(|_, c| c.abs() >= COEFF_DROP_TOL);
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) += c;
        }
        out.cleanup();
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Poly {
        let mut out = Poly::zero();
        for (m, v) in &self.terms {
            out.terms.insert(m.clone(), v * c);
        }
        out.cleanup();
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                *out.terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        out.cleanup();
        out
    }

    /// Multiplies by a single monomial times a coefficient.
    pub fn mul_term(&self, m: &Monomial, c: f64) -> Poly {
        let mut out = Poly::zero();
        for (ma, ca) in &self.terms {
            out.terms.insert(ma.mul(m), ca * c);
        }
        out.cleanup();
        out
    }

    pub fn eval(&self, point: &Assignment) -> Result<f64, PolyError> {
        self.eval_named(point, None)
    }

    /// Evaluation with registry-aware error messages.
    pub fn eval_in(&self, point: &Assignment, reg: &VarRegistry) -> Result<f64, PolyError> {
        self.eval_named(point, Some(reg))
    }

    fn eval_named(&self, point: &Assignment, reg: Option<&VarRegistry>) -> Result<f64, PolyError> {
        let mut acc = 0.0;
        for (m, c) in &self.terms {
            let mut term = *c;
            for (v, e) in m.factors() {
                let x = point.get(v).ok_or_else(|| {
                    PolyError::MissingAssignment(match reg {
                        Some(r) => r.name(v).to_string(),
                        None => format!("var#{}", v.0),
                    })
                })?;
                term *= x.powi(e as i32);
            }
            acc += term;
        }
        Ok(acc)
    }

    /// Deterministic text form: graded-lex sorted monomials, coefficients
    /// at 17 significant digits.
    pub fn to_text(&self, reg: &VarRegistry) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        self.terms
            .iter()
            .map(|(m, c)| {
                if m.is_one() {
                    format!("{c:.16e}")
                } else {
                    format!("{c:.16e}*{}", m.to_text(reg))
                }
            })
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyalg::VarRegistry;

    #[test]
    fn eval_examples() {
        // p = x^2 + 2y at (x = 3, y = 1) -> 11
        let (x, y) = (VarId(0), VarId(1));
        let p = Poly::monomial(Monomial::var_pow(x, 2), 1.0).add(&Poly::var(y).scale(2.0));
        let mut pt = Assignment::new(2);
        pt.set(x, 3.0).set(y, 1.0);
        assert_eq!(p.eval(&pt).unwrap(), 11.0);
        assert_eq!(Poly::zero().eval(&pt).unwrap(), 0.0);
    }

    #[test]
    fn eval_error_names_the_variable() {
        let reg = VarRegistry::plant_only(2, 1);
        let p = Poly::var(reg.a_var(1, 1));
        let pt = Assignment::for_registry(&reg);
        let err = p.eval_in(&pt, &reg).unwrap_err();
        assert!(err.to_string().contains("A_1_1"), "{err}");
    }

    #[test]
    fn difference_of_squares() {
        let x = VarId(0);
        let a = Poly::var(x).add(&Poly::constant(1.0));
        let b = Poly::var(x).sub(&Poly::constant(1.0));
        let prod = a.mul(&b);
        let expect =
            Poly::monomial(Monomial::var_pow(x, 2), 1.0).add(&Poly::constant(-1.0));
        assert_eq!(prod, expect);
    }

    #[test]
    fn cancellation_dust_is_dropped() {
        let x = VarId(0);
        let p = Poly::var(x).scale(1.0 / 3.0);
        let q = p.scale(3.0).sub(&Poly::var(x));
        assert!(q.is_zero());
    }
}
