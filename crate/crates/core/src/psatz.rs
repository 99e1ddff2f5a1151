//! Compiles polynomial nonnegativity and polynomial-matrix PSD constraints
//! over semialgebraic sets into Gram-matrix variables plus coefficient-
//! matching equalities, and provides the SOC-as-PSD arrow encoding with its
//! sparse 2x2 decomposition.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::conic::{tri_index, Cone, ConeKind, ConicProgram, Solution, SparseRows};
use crate::polyalg::{binomial, monomial_basis, Monomial, Poly, PolyMatrix, VarId, VarRegistry};

static BLOCK_COUNTER: AtomicU64 = AtomicU64::new(0);

fn next_block_id() -> u64 {
    BLOCK_COUNTER.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Error)]
pub enum PsatzError {
    #[error("matrix entry ({row},{col}) has degree {deg}, above the 2k = {cap} truncation")]
    DegreeOverflow {
        row: usize,
        col: usize,
        deg: u32,
        cap: u32,
    },
    #[error("term is not affine in the decision scalars: {0}")]
    NonAffineDecision(String),
    #[error("matrix constraints (size {0}) paired with a matrix target (size {1}) are unsupported")]
    UnsupportedPairing(usize, usize),
    #[error("{0}")]
    Malformed(String),
}

/// Constraint region {x : g_j(x) >= 0 (PSD)} with an optional Archimedean
/// ball R - ||x||^2 appended as a scalar constraint.
#[derive(Debug, Clone)]
pub struct SemialgebraicSet {
    /// The ambient indeterminates the set lives over.
    pub vars: Vec<VarId>,
    pub constraints: Vec<PolyMatrix>,
    pub archimedean_radius: Option<f64>,
}

impl SemialgebraicSet {
    /// Unconstrained ambient space: WSOS over it degrades to plain SOS.
    pub fn unconstrained(vars: Vec<VarId>) -> Self {
        SemialgebraicSet {
            vars,
            constraints: Vec::new(),
            archimedean_radius: None,
        }
    }

    pub fn new(vars: Vec<VarId>, constraints: Vec<PolyMatrix>) -> Self {
        SemialgebraicSet {
            vars,
            constraints,
            archimedean_radius: None,
        }
    }

    /// Appends the ball polynomial R - ||x||^2 as a scalar constraint.
    pub fn with_archimedean_radius(mut self, r: f64) -> Self {
        let mut ball = Poly::constant(r);
        for &v in &self.vars {
            ball = ball.add(&Poly::monomial(Monomial::var_pow(v, 2), -1.0));
        }
        let mut pm = PolyMatrix::zeros(1, 1);
        pm.set_entry(0, 0, ball);
        self.constraints.push(pm);
        self.archimedean_radius = Some(r);
        self
    }
}

/// How a Gram block enters the weighted expansion.
#[derive(Debug, Clone)]
pub enum BlockRole {
    /// sigma_0: enters with weight one at the target's size.
    Leading,
    /// Scalar constraint g: the term is g * sigma with sigma at the
    /// target's size.
    ScalarWeight { g: Poly, constraint_index: usize },
    /// Matrix constraint g paired with a scalar target: <g, sigma>.
    MatrixPairing {
        g: PolyMatrix,
        constraint_index: usize,
    },
}

/// A Gram matrix variable: `vars` are the scaled-triangular decision
/// coordinates of a PSD block of side `r * basis.len()`, indexed
/// basis-major: Gram row (a, i) -> a * r + i.
#[derive(Debug, Clone)]
pub struct GramBlock {
    pub id: u64,
    pub r: usize,
    pub basis: Vec<Monomial>,
    pub vars: Vec<VarId>,
    pub role: BlockRole,
}

impl GramBlock {
    pub fn side(&self) -> usize {
        self.r * self.basis.len()
    }

    /// Matrix entry (p, q) of the Gram variable as a polynomial in the
    /// raw scaled-triangular decision coordinates.
    fn entry_poly(&self, p: usize, q: usize) -> Poly {
        let side = self.side();
        let (i, j) = if p >= q { (p, q) } else { (q, p) };
        let idx = tri_index(side, i, j);
        let scale = if i == j {
            1.0
        } else {
            std::f64::consts::FRAC_1_SQRT_2
        };
        Poly::monomial(Monomial::var(self.vars[idx]), scale)
    }

    /// The r x r polynomial matrix sigma(x) = (v (x) I_r)' Q (v (x) I_r),
    /// Gram entries left symbolic as decision variables.
    pub fn expansion(&self) -> PolyMatrix {
        let c = self.basis.len();
        let r = self.r;
        let side = self.side();
        let inv_sq2 = std::f64::consts::FRAC_1_SQRT_2;
        let mut out = PolyMatrix::zeros(r, r);
        for i in 0..r {
            for j in 0..r {
                let mut acc = Poly::zero();
                for a in 0..c {
                    let row_base = self.basis[a].clone();
                    for b in 0..c {
                        let (p, q) = (a * r + i, b * r + j);
                        let (hi, lo) = if p >= q { (p, q) } else { (q, p) };
                        let idx = tri_index(side, hi, lo);
                        let scale = if hi == lo { 1.0 } else { inv_sq2 };
                        let mono = row_base
                            .mul(&self.basis[b])
                            .mul(&Monomial::var(self.vars[idx]));
                        acc.add_term(mono, scale);
                    }
                }
                out.set_entry(i, j, acc);
            }
        }
        out
    }

    /// This block's contribution to the weighted expansion, at the size of
    /// the WSOS target.
    pub fn term(&self, target_r: usize) -> PolyMatrix {
        let sigma = self.expansion();
        match &self.role {
            BlockRole::Leading => sigma,
            BlockRole::ScalarWeight { g, .. } => {
                PolyMatrix::from_fn(target_r, target_r, |i, j| g.mul(sigma.entry(i, j)))
            }
            BlockRole::MatrixPairing { g, .. } => {
                let mut acc = Poly::zero();
                for i in 0..self.r {
                    for j in 0..self.r {
                        acc = acc.add(&g.entry(i, j).mul(sigma.entry(i, j)));
                    }
                }
                let mut pm = PolyMatrix::zeros(1, 1);
                pm.set_entry(0, 0, acc);
                pm
            }
        }
    }
}

/// The Gram blocks of one WSOS membership; `total()` is the weighted
/// expansion sigma_0 + sum_j <g_j, sigma_j>.
#[derive(Debug, Clone)]
pub struct WsosExpansion {
    pub r: usize,
    pub blocks: Vec<GramBlock>,
}

impl WsosExpansion {
    pub fn total(&self) -> PolyMatrix {
        let mut acc = PolyMatrix::zeros(self.r, self.r);
        for blk in &self.blocks {
            acc = acc.add(&blk.term(self.r)).expect("conformable expansion");
        }
        acc
    }

    pub fn max_gram_side(&self) -> usize {
        self.blocks.iter().map(GramBlock::side).max().unwrap_or(0)
    }
}

/// One WSOS-constrained target, kept for certificate reconstruction.
#[derive(Debug, Clone)]
pub struct WsosRecord {
    pub label: String,
    pub target: PolyMatrix,
    pub eps: f64,
    pub expansion: WsosExpansion,
}

/// Maximal Gram side r * C(v+k, k) of an order-k SOS membership for an
/// r x r matrix over v scalar variables.
pub fn gram_size(r: usize, v: usize, k: usize) -> usize {
    r * binomial(v + k, k)
}

/// Arrow matrix [tau, s'; s, tau I]; PSD at a point iff ||s|| <= tau there.
pub fn soc_arrow(s: &[Poly], tau: &Poly) -> PolyMatrix {
    let d = s.len() + 1;
    let mut m = PolyMatrix::zeros(d, d);
    m.set_entry(0, 0, tau.clone());
    for (i, si) in s.iter().enumerate() {
        m.set_entry(0, i + 1, si.clone());
        m.set_entry(i + 1, 0, si.clone());
        m.set_entry(i + 1, i + 1, tau.clone());
    }
    m
}

/// 2x2 decomposition of the arrow: blocks [tau, s_i; s_i, z_i] plus the
/// linking equality tau = sum_i z_i (returned as tau - sum z, to be
/// constrained to zero by the caller).
pub fn soc_sparse_blocks(s: &[Poly], tau: &Poly, z: &[Poly]) -> Result<(Vec<PolyMatrix>, Poly), PsatzError> {
    if s.len() != z.len() {
        return Err(PsatzError::Malformed(format!(
            "s has length {} but z has length {}",
            s.len(),
            z.len()
        )));
    }
    let mut blocks = Vec::with_capacity(s.len());
    for (si, zi) in s.iter().zip(z) {
        let mut m = PolyMatrix::zeros(2, 2);
        m.set_entry(0, 0, tau.clone());
        m.set_entry(0, 1, si.clone());
        m.set_entry(1, 0, si.clone());
        m.set_entry(1, 1, zi.clone());
        blocks.push(m);
    }
    let mut link = tau.clone();
    for zi in z {
        link = link.sub(zi);
    }
    Ok((blocks, link))
}

/// Accumulates decision variables, cone memberships and coefficient-
/// matching equality rows, then lowers everything to a [`ConicProgram`].
pub struct ProgramBuilder {
    pub reg: VarRegistry,
    free_vars: Vec<VarId>,
    nonneg_vars: Vec<VarId>,
    soc_blocks: Vec<Vec<VarId>>,
    psd_blocks: Vec<(usize, Vec<VarId>)>,
    rows: Vec<(Vec<(VarId, f64)>, f64)>,
    objective: Vec<(VarId, f64)>,
}

impl ProgramBuilder {
    pub fn new(reg: VarRegistry) -> Self {
        ProgramBuilder {
            reg,
            free_vars: Vec::new(),
            nonneg_vars: Vec::new(),
            soc_blocks: Vec::new(),
            psd_blocks: Vec::new(),
            rows: Vec::new(),
            objective: Vec::new(),
        }
    }

    pub fn free(&mut self, name: impl Into<String>) -> VarId {
        let id = self.reg.add_decision(name);
        self.free_vars.push(id);
        id
    }

    pub fn nonneg(&mut self, name: impl Into<String>) -> VarId {
        let id = self.reg.add_decision(name);
        self.nonneg_vars.push(id);
        id
    }

    pub fn soc(&mut self, prefix: &str, dim: usize) -> Vec<VarId> {
        let vars: Vec<VarId> = (0..dim)
            .map(|i| self.reg.add_decision(format!("{prefix}[{i}]")))
            .collect();
        self.soc_blocks.push(vars.clone());
        vars
    }

    /// Declares a PSD block of the given side; returns the scaled
    /// triangular coordinates in column-major lower order.
    pub fn psd(&mut self, prefix: &str, side: usize) -> Vec<VarId> {
        let mut vars = Vec::with_capacity(side * (side + 1) / 2);
        for j in 0..side {
            for i in j..side {
                vars.push(self.reg.add_decision(format!("{prefix}[{i},{j}]")));
            }
        }
        self.psd_blocks.push((side, vars.clone()));
        vars
    }

    /// Declares an SOS Gram block for an r x r matrix over `basis`.
    pub fn gram(&mut self, prefix: &str, r: usize, basis: Vec<Monomial>, role: BlockRole) -> GramBlock {
        let id = next_block_id();
        let side = r * basis.len();
        let vars = self.psd(&format!("{prefix}#{id}"), side);
        GramBlock {
            id,
            r,
            basis,
            vars,
            role,
        }
    }

    /// Adds one linear equality over decision scalars.
    pub fn equality(&mut self, terms: Vec<(VarId, f64)>, rhs: f64) {
        self.rows.push((terms, rhs));
    }

    /// Constrains a polynomial (affine in the decision scalars) to vanish
    /// identically in the indeterminates: one equality per monomial.
    pub fn constrain_poly_zero(&mut self, p: &Poly) -> Result<(), PsatzError> {
        let collected = collect_affine(p, &self.reg)?;
        for (_mono, (constant, terms)) in collected {
            self.rows.push((terms, -constant));
        }
        Ok(())
    }

    pub fn minimize(&mut self, objective: Vec<(VarId, f64)>) {
        self.objective = objective;
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Largest PSD side declared so far.
    pub fn max_psd_side(&self) -> usize {
        self.psd_blocks.iter().map(|(s, _)| *s).max().unwrap_or(0)
    }

    /// Lowers to the standard conic form. Column order: free, nonneg,
    /// SOC blocks, PSD blocks, each in declaration order.
    pub fn build(self) -> (ConicProgram, VarMap) {
        let total: usize = self.free_vars.len()
            + self.nonneg_vars.len()
            + self.soc_blocks.iter().map(Vec::len).sum::<usize>()
            + self.psd_blocks.iter().map(|(_, v)| v.len()).sum::<usize>();
        let mut col_of = vec![usize::MAX; self.reg.len()];
        let mut var_names = Vec::with_capacity(total);
        let mut cones = Vec::new();
        let mut ordered: Vec<(&[VarId], Cone)> = Vec::new();
        if !self.free_vars.is_empty() {
            ordered.push((&self.free_vars, Cone::new(ConeKind::Free, self.free_vars.len())));
        }
        if !self.nonneg_vars.is_empty() {
            ordered.push((
                &self.nonneg_vars,
                Cone::new(ConeKind::NonNeg, self.nonneg_vars.len()),
            ));
        }
        for blk in &self.soc_blocks {
            ordered.push((blk, Cone::new(ConeKind::Soc, blk.len())));
        }
        for (side, vars) in &self.psd_blocks {
            ordered.push((vars, Cone::new(ConeKind::PsdTri, *side)));
        }
        let mut next = 0;
        for (ids, cone) in ordered {
            for &id in ids {
                col_of[id.index()] = next;
                var_names.push(self.reg.name(id).to_string());
                next += 1;
            }
            cones.push(cone);
        }

        let mut a = SparseRows {
            rows: Vec::with_capacity(self.rows.len()),
        };
        let mut b = Vec::with_capacity(self.rows.len());
        for (terms, rhs) in &self.rows {
            let mut row: BTreeMap<usize, f64> = BTreeMap::new();
            for &(id, coef) in terms {
                let col = col_of[id.index()];
                debug_assert_ne!(col, usize::MAX, "undeclared decision variable in a row");
                *row.entry(col).or_insert(0.0) += coef;
            }
            a.rows.push(row.into_iter().filter(|&(_, v)| v != 0.0).collect());
            b.push(*rhs);
        }

        let mut c = vec![0.0; total];
        for (id, coef) in &self.objective {
            c[col_of[id.index()]] += coef;
        }

        (
            ConicProgram {
                c,
                a,
                b,
                cones,
                var_names,
            },
            VarMap {
                col_of,
                reg: self.reg,
            },
        )
    }
}

/// Maps registry decision variables to conic program coordinates.
#[derive(Debug, Clone)]
pub struct VarMap {
    col_of: Vec<usize>,
    pub reg: VarRegistry,
}

impl VarMap {
    pub fn column(&self, id: VarId) -> usize {
        self.col_of[id.index()]
    }

    pub fn value(&self, sol: &Solution, id: VarId) -> f64 {
        sol.x[self.col_of[id.index()]]
    }

    /// Evaluates a polynomial in decision scalars at the solved point;
    /// remaining indeterminates must not appear.
    pub fn eval_decision_poly(&self, sol: &Solution, p: &Poly) -> f64 {
        let mut acc = 0.0;
        for (mono, coef) in p.terms() {
            let mut term = coef;
            for (v, e) in mono.factors() {
                term *= self.value(sol, v).powi(e as i32);
            }
            acc += term;
        }
        acc
    }

    /// Substitutes solved decision values into a polynomial, leaving a
    /// numeric-coefficient polynomial over the indeterminates.
    pub fn substitute(&self, sol: &Solution, p: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (mono, coef) in p.terms() {
            let (dec, indet) = mono.split(|v| self.reg.is_decision(v));
            let mut c = coef;
            for (v, e) in dec.factors() {
                c *= self.value(sol, v).powi(e as i32);
            }
            out.add_term(indet, c);
        }
        out
    }
}

/// Splits an affine-in-decisions polynomial by indeterminate monomial:
/// monomial -> (constant part, linear decision terms).
#[allow(clippy::type_complexity)]
pub fn collect_affine(
    p: &Poly,
    reg: &VarRegistry,
) -> Result<BTreeMap<Monomial, (f64, Vec<(VarId, f64)>)>, PsatzError> {
    let mut out: BTreeMap<Monomial, (f64, Vec<(VarId, f64)>)> = BTreeMap::new();
    for (mono, coef) in p.terms() {
        let (dec, indet) = mono.split(|v| reg.is_decision(v));
        let entry = out.entry(indet).or_insert_with(|| (0.0, Vec::new()));
        match dec.degree() {
            0 => entry.0 += coef,
            1 => {
                let (var, _) = dec.factors().next().expect("degree-1 monomial");
                entry.1.push((var, coef));
            }
            _ => {
                return Err(PsatzError::NonAffineDecision(mono.to_text(reg)));
            }
        }
    }
    Ok(out)
}

/// Emits the Gram blocks of an order-k WSOS membership for an r x r matrix
/// over `set`, without tying them to a target: the caller combines
/// `expansion.total()` into its own equalities.
pub fn wsos_expansion(
    builder: &mut ProgramBuilder,
    label: &str,
    r: usize,
    set: &SemialgebraicSet,
    k: usize,
) -> Result<WsosExpansion, PsatzError> {
    let mut blocks = Vec::new();
    let basis0 = monomial_basis(&set.vars, k as u32);
    blocks.push(builder.gram(&format!("{label}.s0"), r, basis0, BlockRole::Leading));
    for (j, g) in set.constraints.iter().enumerate() {
        let gdeg = g.degree();
        if gdeg > 2 * k as u32 {
            // no admissible multiplier at this order
            continue;
        }
        let mult_deg = (2 * k as u32 - gdeg) / 2;
        let basis = monomial_basis(&set.vars, mult_deg);
        if g.nrows() == 1 {
            let role = BlockRole::ScalarWeight {
                g: g.entry(0, 0).clone(),
                constraint_index: j,
            };
            blocks.push(builder.gram(&format!("{label}.s{}", j + 1), r, basis, role));
        } else if r == 1 {
            let role = BlockRole::MatrixPairing {
                g: g.clone(),
                constraint_index: j,
            };
            blocks.push(builder.gram(
                &format!("{label}.s{}", j + 1),
                g.nrows(),
                basis,
                role,
            ));
        } else {
            return Err(PsatzError::UnsupportedPairing(g.nrows(), r));
        }
    }
    Ok(WsosExpansion { r, blocks })
}

/// Constrains `p - eps I` to lie in the order-k WSOS cone over `set`:
/// emits the Gram blocks and one coefficient-matching equality per
/// monomial of the union support.
pub fn wsos_constrain(
    builder: &mut ProgramBuilder,
    label: &str,
    p: &PolyMatrix,
    set: &SemialgebraicSet,
    k: usize,
    eps: f64,
) -> Result<WsosRecord, PsatzError> {
    let r = p.nrows();
    if p.ncols() != r {
        return Err(PsatzError::Malformed(format!(
            "WSOS target must be square, got {}x{}",
            r,
            p.ncols()
        )));
    }
    for i in 0..r {
        for j in 0..r {
            let deg = p.entry(i, j).degree_where(|v| !builder.reg.is_decision(v));
            if deg > 2 * k as u32 {
                return Err(PsatzError::DegreeOverflow {
                    row: i,
                    col: j,
                    deg,
                    cap: 2 * k as u32,
                });
            }
        }
    }
    let expansion = wsos_expansion(builder, label, r, set, k)?;
    let total = expansion.total();
    for i in 0..r {
        for j in i..r {
            let mut target = p.entry(i, j).clone();
            if i == j && eps != 0.0 {
                target = target.add(&Poly::constant(-eps));
            }
            let resid = target.sub(total.entry(i, j));
            builder.constrain_poly_zero(&resid)?;
        }
    }
    Ok(WsosRecord {
        label: label.to_string(),
        target: p.clone(),
        eps,
        expansion,
    })
}

/// Worst coefficient of the reconstructed residual
/// p - eps I - sigma_0 - sum <g_j, sigma_j> after substituting a solution.
pub fn wsos_residual(record: &WsosRecord, map: &VarMap, sol: &Solution) -> f64 {
    let total = record.expansion.total();
    let r = record.target.nrows();
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in i..r {
            let mut target = record.target.entry(i, j).clone();
            if i == j && record.eps != 0.0 {
                target = target.add(&Poly::constant(-record.eps));
            }
            let resid = map.substitute(sol, &target.sub(total.entry(i, j)));
            for (_m, c) in resid.terms() {
                worst = worst.max(c.abs());
            }
        }
    }
    worst
}

/// Debug dump of a compiled certificate: per-block basis listing and the
/// equality system in sparse-triplet text form.
pub fn dump_certificate(records: &[WsosRecord], prog: &ConicProgram, reg: &VarRegistry) -> String {
    let mut out = String::new();
    out.push_str("psatz-dump v1\n");
    for rec in records {
        out.push_str(&format!(
            "constraint {} size {} eps {:e}\n",
            rec.label,
            rec.target.nrows(),
            rec.eps
        ));
        for blk in &rec.expansion.blocks {
            out.push_str(&format!(
                "  block #{} r {} side {} basis",
                blk.id,
                blk.r,
                blk.side()
            ));
            for m in &blk.basis {
                out.push_str(&format!(" {}", m.to_text(reg)));
            }
            out.push('\n');
        }
    }
    out.push_str("equalities\n");
    for (i, row) in prog.a.rows.iter().enumerate() {
        for &(j, v) in row {
            out.push_str(&format!("{i} {j} {v:e}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{solve_with, SolveOptions, SolveStatus};
    use crate::polyalg::Assignment;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn scalar(p: Poly) -> PolyMatrix {
        let mut m = PolyMatrix::zeros(1, 1);
        m.set_entry(0, 0, p);
        m
    }

    fn solve_feasibility(builder: ProgramBuilder) -> (Solution, VarMap) {
        let (prog, map) = builder.build();
        let opts = SolveOptions {
            tol_feas: 1e-11,
            tol_gap: 1e-11,
            ..SolveOptions::default()
        };
        let sol = solve_with("reference", &prog, &opts).unwrap();
        (sol, map)
    }

    #[test]
    fn gram_sizes_reproduce_the_complexity_table() {
        assert_eq!(gram_size(3, 8, 2), 135);
        assert_eq!(gram_size(2, 8, 2), 90);
        assert_eq!(gram_size(1, 54, 2), 1540);
        // order-1 variants used by the worked example
        assert_eq!(gram_size(3, 8, 1), 27);
        assert_eq!(gram_size(2, 8, 1), 18);
        assert_eq!(gram_size(1, 62, 1), 63);
    }

    #[test]
    fn perfect_square_is_sos() {
        // p = x^2 over the unconstrained line, k = 1
        let mut reg = VarRegistry::plant_only(1, 1);
        let x = reg.a_var(0, 0);
        let _ = reg; // A_0_0 doubles as the scalar indeterminate
        let mut builder = ProgramBuilder::new(VarRegistry::plant_only(1, 1));
        let set = SemialgebraicSet::unconstrained(vec![x]);
        let p = scalar(Poly::monomial(Monomial::var_pow(x, 2), 1.0));
        let rec = wsos_constrain(&mut builder, "sq", &p, &set, 1, 0.0).unwrap();
        let (sol, map) = solve_feasibility(builder);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(wsos_residual(&rec, &map, &sol) < 1e-7);
    }

    #[test]
    fn putinar_form_on_the_half_line() {
        // p = x over {x >= 0}: sigma_0 = 0, sigma_1 = 1 is feasible
        let reg = VarRegistry::plant_only(1, 1);
        let x = reg.a_var(0, 0);
        let mut builder = ProgramBuilder::new(reg);
        let set = SemialgebraicSet::new(vec![x], vec![scalar(Poly::var(x))]);
        let p = scalar(Poly::var(x));
        let rec = wsos_constrain(&mut builder, "halfline", &p, &set, 1, 0.0).unwrap();
        let (sol, map) = solve_feasibility(builder);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(wsos_residual(&rec, &map, &sol) < 1e-7);
    }

    #[test]
    fn expansion_identity_on_sampled_points() {
        // p = 2x over {x >= 0}: the returned certificate, expanded and
        // evaluated at points of the set, reproduces p exactly
        let reg = VarRegistry::plant_only(1, 1);
        let x = reg.a_var(0, 0);
        let mut builder = ProgramBuilder::new(reg);
        let set = SemialgebraicSet::new(vec![x], vec![scalar(Poly::var(x))]);
        let p = scalar(Poly::var(x).scale(2.0));
        let rec = wsos_constrain(&mut builder, "twox", &p, &set, 1, 0.0).unwrap();
        let (sol, map) = solve_feasibility(builder);
        assert_eq!(sol.status, SolveStatus::Optimal);

        // reconstruct p - sigma_0 - g sigma_1 with solved Gram values and
        // evaluate at 50 random points of the set
        let total = rec.expansion.total();
        let resid = map.substitute(&sol, &p.entry(0, 0).sub(total.entry(0, 0)));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut pt = Assignment::new(map.reg.len());
            pt.set(x, rng.gen_range(0.0..5.0));
            assert!(resid.eval(&pt).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn degree_overflow_is_reported_with_the_entry() {
        let reg = VarRegistry::plant_only(1, 1);
        let x = reg.a_var(0, 0);
        let mut builder = ProgramBuilder::new(reg);
        let set = SemialgebraicSet::unconstrained(vec![x]);
        let p = scalar(Poly::monomial(Monomial::var_pow(x, 4), 1.0));
        let err = wsos_constrain(&mut builder, "quartic", &p, &set, 1, 0.0).unwrap_err();
        assert!(matches!(err, PsatzError::DegreeOverflow { deg: 4, cap: 2, .. }));
    }

    #[test]
    fn soundness_sampling_inside_the_ball() {
        // certify p = 1 + x^2 - eps over the Archimedean ball of radius 2;
        // sampled points of the set must evaluate nonnegative
        let reg = VarRegistry::plant_only(1, 1);
        let x = reg.a_var(0, 0);
        let mut builder = ProgramBuilder::new(reg);
        let set =
            SemialgebraicSet::unconstrained(vec![x]).with_archimedean_radius(2.0);
        let p = scalar(Poly::constant(1.0).add(&Poly::monomial(Monomial::var_pow(x, 2), 1.0)));
        let rec = wsos_constrain(&mut builder, "ball", &p, &set, 1, 1e-6).unwrap();
        let (sol, map) = solve_feasibility(builder);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(wsos_residual(&rec, &map, &sol) < 1e-6);
        let total = rec.expansion.total();
        let resid = map.substitute(&sol, &total.entry(0, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let v = rng.gen_range(-1.4..1.4); // inside x^2 <= 2
            let mut pt = Assignment::new(map.reg.len());
            pt.set(x, v);
            // expansion evaluates nonnegative on the set
            assert!(resid.eval(&pt).unwrap() >= -1e-6);
        }
    }

    fn arrow_is_psd(s: &[f64], tau: f64) -> bool {
        let d = s.len() + 1;
        let mut m = DMatrix::zeros(d, d);
        m[(0, 0)] = tau;
        for i in 0..s.len() {
            m[(0, i + 1)] = s[i];
            m[(i + 1, 0)] = s[i];
            m[(i + 1, i + 1)] = tau;
        }
        nalgebra::SymmetricEigen::new(m).eigenvalues.min() >= -1e-12
    }

    #[test]
    fn arrow_examples() {
        // s = 0, tau = 1: identity-like and PSD
        assert!(arrow_is_psd(&[0.0, 0.0], 1.0));
        // boundary: s = (3,4), tau = 5 has minimum eigenvalue zero
        let mut m: DMatrix<f64> = DMatrix::zeros(3, 3);
        m[(0, 0)] = 5.0;
        m[(0, 1)] = 3.0;
        m[(1, 0)] = 3.0;
        m[(0, 2)] = 4.0;
        m[(2, 0)] = 4.0;
        m[(1, 1)] = 5.0;
        m[(2, 2)] = 5.0;
        let eig = nalgebra::SymmetricEigen::new(m);
        assert!(eig.eigenvalues.min().abs() < 1e-12);

        // symbolic arrow pins the same structure
        let reg = VarRegistry::plant_only(1, 1);
        let x = reg.a_var(0, 0);
        let arrow = soc_arrow(&[Poly::var(x), Poly::constant(4.0)], &Poly::constant(5.0));
        let mut pt = Assignment::new(reg.len());
        pt.set(x, 3.0);
        let num = arrow.eval(&pt, &reg).unwrap();
        assert_eq!(num[(0, 1)], 3.0);
        assert_eq!(num[(1, 1)], 5.0);
    }

    fn sparse_feasible_by_conic_solve(s: &[f64], tau: f64) -> bool {
        // exists z: [tau, s_i; s_i, z_i] psd for all i, sum z = tau
        let reg = VarRegistry::plant_only(1, 1);
        let mut builder = ProgramBuilder::new(reg);
        let n = s.len();
        let mut blocks = Vec::new();
        for i in 0..n {
            blocks.push(builder.psd(&format!("blk{i}"), 2));
        }
        let sq2 = std::f64::consts::SQRT_2;
        for (i, vars) in blocks.iter().enumerate() {
            // coords (0,0), (1,0) scaled, (1,1)
            builder.equality(vec![(vars[0], 1.0)], tau);
            builder.equality(vec![(vars[1], 1.0)], sq2 * s[i]);
        }
        let link: Vec<(VarId, f64)> = blocks.iter().map(|v| (v[2], 1.0)).collect();
        builder.equality(link, tau);
        let (prog, _) = builder.build();
        let sol = solve_with("reference", &prog, &SolveOptions::default()).unwrap();
        matches!(sol.status, SolveStatus::Optimal | SolveStatus::NearOptimal)
    }

    #[test]
    fn sparse_blocks_examples() {
        // s = 0, tau = 0: all blocks zero with z = 0
        assert!(sparse_feasible_by_conic_solve(&[0.0, 0.0], 0.0));
        // s = (3,4), tau = 5: feasible with z = (9/5, 16/5)
        let z = [9.0 / 5.0, 16.0 / 5.0];
        for (i, &si) in [3.0, 4.0].iter().enumerate() {
            let m = nalgebra::dmatrix![5.0, si; si, z[i]];
            assert!(nalgebra::SymmetricEigen::new(m).eigenvalues.min() >= -1e-12);
        }
        assert!((z.iter().sum::<f64>() - 5.0).abs() < 1e-12);
        assert!(sparse_feasible_by_conic_solve(&[3.0, 4.0], 5.0));
    }

    #[test]
    fn cone_encodings_agree_on_random_samples() {
        // SOC membership <=> arrow PSD <=> sparse feasibility
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked_boundary = 0;
        for trial in 0..100 {
            let s: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let norm = (s[0] * s[0] + s[1] * s[1]).sqrt();
            let tau = if trial % 4 == 0 {
                checked_boundary += 1;
                norm // exact boundary
            } else {
                rng.gen_range(0.0..3.0)
            };
            let in_soc = tau + 1e-12 >= norm;
            assert_eq!(arrow_is_psd(&s, tau), in_soc, "arrow s={s:?} tau={tau}");
            let sparse = sparse_feasible_by_conic_solve(&s, tau);
            // conic feasibility tolerance: only assert strict cases and
            // boundary cases (which are feasible)
            if (tau - norm).abs() > 1e-6 || tau == norm {
                assert_eq!(sparse, in_soc, "sparse s={s:?} tau={tau}");
            }
        }
        assert!(checked_boundary >= 25);
    }

    #[test]
    fn sparse_block_symbolics() {
        let reg = VarRegistry::plant_only(1, 1);
        let x = reg.a_var(0, 0);
        let s = vec![Poly::var(x), Poly::constant(1.0)];
        let tau = Poly::constant(2.0);
        let z = vec![Poly::constant(1.5), Poly::constant(0.5)];
        let (blocks, link) = soc_sparse_blocks(&s, &tau, &z).unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(link.is_zero());
        let bad = soc_sparse_blocks(&s, &tau, &z[..1].to_vec());
        assert!(bad.is_err());
    }

    #[test]
    fn collect_affine_rejects_quadratic_decisions() {
        let mut reg = VarRegistry::plant_only(1, 1);
        let d = reg.add_decision("d");
        let p = Poly::monomial(Monomial::var_pow(d, 2), 1.0);
        assert!(collect_affine(&p, &reg).is_err());
    }

    #[test]
    fn block_ids_are_unique() {
        let reg = VarRegistry::plant_only(1, 1);
        let x = reg.a_var(0, 0);
        let mut builder = ProgramBuilder::new(reg);
        let set = SemialgebraicSet::unconstrained(vec![x]);
        let e1 = wsos_expansion(&mut builder, "a", 1, &set, 1).unwrap();
        let e2 = wsos_expansion(&mut builder, "b", 2, &set, 1).unwrap();
        assert_ne!(e1.blocks[0].id, e2.blocks[0].id);
    }
}
