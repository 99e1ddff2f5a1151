//! Monomials as sparse exponent maps with a graded-lexicographic order.

use std::cmp::Ordering;

use smallvec::SmallVec;

use super::{binomial, VarId, VarRegistry};

/// Sparse monomial: sorted (variable, exponent) pairs, no zero exponents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Monomial {
    factors: SmallVec<[(u32, u32); 4]>,
}

impl Monomial {
    /// The constant monomial `1`.
    pub fn one() -> Self {
        Monomial {
            factors: SmallVec::new(),
        }
    }

    pub fn var(id: VarId) -> Self {
        Monomial {
            factors: smallvec::smallvec![(id.0, 1)],
        }
    }

    pub fn var_pow(id: VarId, exp: u32) -> Self {
        if exp == 0 {
            return Self::one();
        }
        Monomial {
            factors: smallvec::smallvec![(id.0, exp)],
        }
    }

    pub fn is_one(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.factors.iter().map(|&(_, e)| e).sum()
    }

    /// Total degree counting only variables accepted by `pred`.
    pub fn degree_where(&self, mut pred: impl FnMut(VarId) -> bool) -> u32 {
        self.factors
            .iter()
            .filter(|&&(v, _)| pred(VarId(v)))
            .map(|&(_, e)| e)
            .sum()
    }

    pub fn factors(&self) -> impl Iterator<Item = (VarId, u32)> + '_ {
        self.factors.iter().map(|&(v, e)| (VarId(v), e))
    }

    pub fn exponent_of(&self, id: VarId) -> u32 {
        self.factors
            .iter()
            .find(|&&(v, _)| v == id.0)
            .map_or(0, |&(_, e)| e)
    }

    /// Product of two monomials (merge of sorted exponent lists).
    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut out: SmallVec<[(u32, u32); 4]> = SmallVec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.factors.len() && j < other.factors.len() {
            let (va, ea) = self.factors[i];
            let (vb, eb) = other.factors[j];
            match va.cmp(&vb) {
                Ordering::Less => {
                    out.push((va, ea));
                    i += 1;
                }
                Ordering::Greater => {
                    out.push((vb, eb));
                    j += 1;
                }
                Ordering::Equal => {
                    out.push((va, ea + eb));
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.factors[i..]);
        out.extend_from_slice(&other.factors[j..]);
        Monomial { factors: out }
    }

    /// Splits into (part over `pred`-variables, remaining part).
    pub fn split(&self, mut pred: impl FnMut(VarId) -> bool) -> (Monomial, Monomial) {
        let mut yes = SmallVec::new();
        let mut no = SmallVec::new();
        for &(v, e) in &self.factors {
            if pred(VarId(v)) {
                yes.push((v, e));
            } else {
                no.push((v, e));
            }
        }
        (Monomial { factors: yes }, Monomial { factors: no })
    }

    pub fn to_text(&self, reg: &VarRegistry) -> String {
        if self.is_one() {
            return "1".to_string();
        }
        self.factors
            .iter()
            .map(|&(v, e)| {
                if e == 1 {
                    reg.name(VarId(v)).to_string()
                } else {
                    format!("{}^{}", reg.name(VarId(v)), e)
                }
            })
            .collect::<Vec<_>>()
            .join("*")
    }
}

/// Graded lexicographic: lower total degree first; within a degree, the
/// monomial with the higher exponent on the earliest differing variable
/// comes first. Degree truncation is therefore a prefix operation on any
/// sorted basis.
impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        match self.degree().cmp(&other.degree()) {
            Ordering::Equal => {}
            ord => return ord,
        }
        let (mut i, mut j) = (0, 0);
        while i < self.factors.len() && j < other.factors.len() {
            let (va, ea) = self.factors[i];
            let (vb, eb) = other.factors[j];
            match va.cmp(&vb) {
                // earlier variable present only on one side: that side has
                // the higher exponent there, so it sorts first
                Ordering::Less => return Ordering::Less,
                Ordering::Greater => return Ordering::Greater,
                Ordering::Equal => match ea.cmp(&eb) {
                    Ordering::Equal => {
                        i += 1;
                        j += 1;
                    }
                    // higher exponent on the shared earliest variable first
                    ord => return ord.reverse(),
                },
            }
        }
        debug_assert!(i == self.factors.len() && j == other.factors.len());
        Ordering::Equal
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials of total degree <= `k` over `vars`, in graded-lex order.
/// Returns exactly C(v+k, k) monomials; the first is the constant.
pub fn monomial_basis(vars: &[VarId], k: u32) -> Vec<Monomial> {
    let mut out = Vec::with_capacity(binomial(vars.len() + k as usize, k as usize));
    out.push(Monomial::one());
    let mut stack: Vec<(usize, u32, Monomial)> = Vec::new();
    for d in 1..=k {
        stack.push((0, d, Monomial::one()));
        while let Some((start, rem, prefix)) = stack.pop() {
            if rem == 0 {
                out.push(prefix);
                continue;
            }
            if start >= vars.len() {
                continue;
            }
            // push in reverse so higher exponents on vars[start] pop first
            for e in 0..=rem {
                let mut next = prefix.clone();
                if e > 0 {
                    next = next.mul(&Monomial::var_pow(vars[start], e));
                }
                stack.push((start + 1, rem - e, next));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyalg::VarRegistry;

    fn vars(n: usize) -> Vec<VarId> {
        (0..n).map(|i| VarId(i as u32)).collect()
    }

    #[test]
    fn basis_counts() {
        // 8 variables, k = 1: nine monomials
        assert_eq!(monomial_basis(&vars(8), 1).len(), 9);
        // any registry, k = 0: just the constant
        let b0 = monomial_basis(&vars(17), 0);
        assert_eq!(b0, vec![Monomial::one()]);
        // 54 variables, k = 2: the full-program Gram basis length
        assert_eq!(monomial_basis(&vars(54), 2).len(), 1540);
    }

    #[test]
    fn basis_count_matches_binomial_for_small_dims() {
        for v in [1usize, 2, 5, 13, 33, 60] {
            for k in 0u32..=3 {
                let b = monomial_basis(&vars(v), k);
                assert_eq!(b.len(), binomial(v + k as usize, k as usize), "v={v} k={k}");
                // graded-lex order is strictly increasing
                for w in b.windows(2) {
                    assert!(w[0] < w[1]);
                }
            }
        }
    }

    #[test]
    fn graded_lex_order_two_vars() {
        let reg = {
            let mut r = VarRegistry::plant_only(1, 1);
            r.add_decision("z");
            r
        };
        let b = monomial_basis(&[VarId(0), VarId(1)], 2);
        let names: Vec<String> = b.iter().map(|m| m.to_text(&reg)).collect();
        assert_eq!(
            names,
            vec!["1", "A_0_0", "B_0_0", "A_0_0^2", "A_0_0*B_0_0", "B_0_0^2"]
        );
    }

    #[test]
    fn truncation_is_a_prefix() {
        let v = vars(5);
        let b2 = monomial_basis(&v, 2);
        let b3 = monomial_basis(&v, 3);
        assert_eq!(&b3[..b2.len()], &b2[..]);
    }

    #[test]
    fn mul_merges_exponents() {
        let a = Monomial::var(VarId(0)).mul(&Monomial::var(VarId(2)));
        let b = Monomial::var_pow(VarId(0), 2);
        let c = a.mul(&b);
        assert_eq!(c.exponent_of(VarId(0)), 3);
        assert_eq!(c.exponent_of(VarId(2)), 1);
        assert_eq!(c.degree(), 4);
    }
}
