//! Lowering onto the clarabel interior-point solver, used for the large
//! synthesis programs. Clarabel solves `min q'v  s.t.  G v + s = h, s in K`
//! with free `v`.
//!
//! Two lowerings are available. The primal embedding keeps our x as v and
//! adds selector rows `-I x + s = 0` per cone block. The dual embedding
//! solves `max b'y  s.t.  c - A'y in K*` instead, which avoids duplicating
//! the cone coordinates and is chosen automatically when they outnumber
//! the equality rows; our primal solution is then clarabel's constraint
//! dual.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, PSDTriangleConeT,
    SecondOrderConeT, SolverStatus, SupportedConeT, ZeroConeT,
};

use super::{Backend, ConeKind, ConicError, ConicProgram, Solution, SolveOptions, SolveStatus};

pub struct ClarabelBackend;

impl Backend for ClarabelBackend {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&self, prog: &ConicProgram, opts: &SolveOptions) -> Result<Solution, ConicError> {
        let cone_coords: usize = prog
            .cones
            .iter()
            .filter(|c| !matches!(c.kind, ConeKind::Free | ConeKind::Zero))
            .map(|c| c.len())
            .sum();
        if cone_coords > prog.num_rows() {
            solve_dual_form(prog, opts)
        } else {
            solve_primal_form(prog, opts)
        }
    }
}

/// Our PSD coordinates are the scaled lower triangle, column-major;
/// clarabel expects the scaled upper triangle, column-major. Both are
/// indexed by (i, j) pairs, so the map is a permutation.
fn psd_permutation(side: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(side * (side + 1) / 2);
    for j in 0..side {
        for i in j..side {
            // clarabel upper col-major position of entry (j, i), j <= i
            perm.push(i * (i + 1) / 2 + j);
        }
    }
    perm
}

fn settings(opts: &SolveOptions) -> Result<clarabel::solver::DefaultSettings<f64>, ConicError> {
    DefaultSettingsBuilder::default()
        .verbose(opts.verbose)
        .max_iter(opts.max_iter as u32)
        .tol_feas(opts.tol_feas)
        .tol_gap_abs(opts.tol_gap)
        .tol_gap_rel(opts.tol_gap)
        .direct_solve_method("faer".to_string())
        .build()
        .map_err(|e| ConicError::Malformed(format!("solver settings: {e}")))
}

fn solve_primal_form(prog: &ConicProgram, opts: &SolveOptions) -> Result<Solution, ConicError> {
    let n = prog.num_vars();
    let m = prog.num_rows();

    // rows: [A (zero cone, m rows)] then per cone block of x the selector
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(prog.a.nnz() + n);
    for (i, row) in prog.a.rows.iter().enumerate() {
        for &(j, v) in row {
            triplets.push((i, j, v));
        }
    }
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if m > 0 {
        cones.push(ZeroConeT(m));
    }
    let mut row = m;
    let mut off = 0;
    for cone in &prog.cones {
        let len = cone.len();
        match cone.kind {
            ConeKind::Free => {} // no rows; v is free already
            ConeKind::Zero => {
                for k in 0..len {
                    triplets.push((row + k, off + k, -1.0));
                }
                cones.push(ZeroConeT(len));
                row += len;
            }
            ConeKind::NonNeg => {
                for k in 0..len {
                    triplets.push((row + k, off + k, -1.0));
                }
                cones.push(NonnegativeConeT(len));
                row += len;
            }
            ConeKind::Soc => {
                for k in 0..len {
                    triplets.push((row + k, off + k, -1.0));
                }
                cones.push(SecondOrderConeT(len));
                row += len;
            }
            ConeKind::PsdTri => {
                let perm = psd_permutation(cone.dim);
                for (k, &p) in perm.iter().enumerate() {
                    triplets.push((row + p, off + k, -1.0));
                }
                cones.push(PSDTriangleConeT(cone.dim));
                row += len;
            }
        }
        off += len;
    }
    let total_rows = row;

    let mut h = vec![0.0; total_rows];
    h[..m].copy_from_slice(&prog.b);

    let g = csc_from_triplets(total_rows, n, &triplets);
    let p = CscMatrix::zeros((n, n));

    let mut solver = DefaultSolver::new(&p, &prog.c, &g, &h, &cones, settings(opts)?)
        .map_err(|e| ConicError::Malformed(format!("clarabel rejected the program: {e:?}")))?;
    solver.solve();

    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved => SolveStatus::NearOptimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::NumericalFailure,
    };
    // duals for the equality rows only; clarabel's z covers all rows
    let y: Vec<f64> = sol.z[..m].iter().map(|v| -v).collect();
    Ok(Solution {
        status,
        x: sol.x.clone(),
        y,
        obj: sol.obj_val,
        primal_residual: sol.r_prim,
        dual_residual: sol.r_dual,
        gap: sol.obj_val_dual - sol.obj_val,
        iterations: sol.iterations as usize,
    })
}

/// Dual embedding: variables are our equality multipliers y, constraints
/// c - A'y in K*. Clarabel's z recovers our x; infeasibility certificates
/// swap roles.
fn solve_dual_form(prog: &ConicProgram, opts: &SolveOptions) -> Result<Solution, ConicError> {
    let n = prog.num_vars();
    let m = prog.num_rows();

    // G = A' assembled row-per-x-coordinate; zero-cone x coords drop out
    // (their dual slack is unconstrained), so track kept rows.
    let mut row_of = vec![usize::MAX; n];
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut next_row = 0;
    {
        let mut off = 0;
        for cone in &prog.cones {
            let len = cone.len();
            match cone.kind {
                ConeKind::Zero => {}
                ConeKind::Free => {
                    for k in 0..len {
                        row_of[off + k] = next_row + k;
                    }
                    cones.push(ZeroConeT(len));
                    next_row += len;
                }
                ConeKind::NonNeg => {
                    for k in 0..len {
                        row_of[off + k] = next_row + k;
                    }
                    cones.push(NonnegativeConeT(len));
                    next_row += len;
                }
                ConeKind::Soc => {
                    for k in 0..len {
                        row_of[off + k] = next_row + k;
                    }
                    cones.push(SecondOrderConeT(len));
                    next_row += len;
                }
                ConeKind::PsdTri => {
                    let perm = psd_permutation(cone.dim);
                    for (k, &p) in perm.iter().enumerate() {
                        row_of[off + k] = next_row + p;
                    }
                    cones.push(PSDTriangleConeT(cone.dim));
                    next_row += len;
                }
            }
            off += len;
        }
    }
    let total_rows = next_row;

    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(prog.a.nnz());
    for (i, row) in prog.a.rows.iter().enumerate() {
        for &(j, v) in row {
            if row_of[j] != usize::MAX {
                triplets.push((row_of[j], i, v));
            }
        }
    }
    let mut h = vec![0.0; total_rows];
    for j in 0..n {
        if row_of[j] != usize::MAX {
            h[row_of[j]] = prog.c[j];
        }
    }
    let q: Vec<f64> = prog.b.iter().map(|v| -v).collect();
    let g = csc_from_triplets(total_rows, m, &triplets);
    let p = CscMatrix::zeros((m, m));

    let mut solver = DefaultSolver::new(&p, &q, &g, &h, &cones, settings(opts)?)
        .map_err(|e| ConicError::Malformed(format!("clarabel rejected the program: {e:?}")))?;
    solver.solve();

    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved => SolveStatus::NearOptimal,
        // roles swap under dualization
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Unbounded
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            SolveStatus::Infeasible
        }
        _ => SolveStatus::NumericalFailure,
    };
    let mut x = vec![0.0; n];
    for j in 0..n {
        if row_of[j] != usize::MAX {
            x[j] = sol.z[row_of[j]];
        }
    }
    let obj = prog.c.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(Solution {
        status,
        x,
        y: sol.x.clone(),
        obj,
        primal_residual: sol.r_dual,
        dual_residual: sol.r_prim,
        gap: sol.obj_val_dual - sol.obj_val,
        iterations: sol.iterations as usize,
    })
}

fn csc_from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cols];
    for &(i, j, v) in triplets {
        by_col[j].push((i, v));
    }
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    colptr.push(0);
    for col in &mut by_col {
        col.sort_by_key(|&(i, _)| i);
        for &(i, v) in col.iter() {
            rowval.push(i);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{solve_with, Cone, SparseRows};

    #[test]
    fn clarabel_agrees_with_reference_on_mixed_cones() {
        // min -x1 - x2 s.t. x1 + x2 <= 2 (slack), (t, x1, x2) in SOC with t = 1.5
        let prog = ConicProgram {
            c: vec![0.0, -1.0, -1.0, 0.0],
            a: SparseRows {
                rows: vec![vec![(1, 1.0), (2, 1.0), (3, 1.0)], vec![(0, 1.0)]],
            },
            b: vec![2.0, 1.5],
            cones: vec![Cone::new(ConeKind::Soc, 3), Cone::new(ConeKind::NonNeg, 1)],
            var_names: Vec::new(),
        };
        let opts = SolveOptions::default();
        let a = solve_with("clarabel", &prog, &opts).unwrap();
        let b = solve_with("reference", &prog, &opts).unwrap();
        assert_eq!(a.status, SolveStatus::Optimal);
        assert_eq!(b.status, SolveStatus::Optimal);
        assert!((a.obj - b.obj).abs() < 1e-5, "{} vs {}", a.obj, b.obj);
    }

    #[test]
    fn clarabel_psd_cone_convention_matches() {
        // min tr X s.t. X11 = 1, X22 = 2, X12 = 1 (scaled-triangular row)
        let s = std::f64::consts::SQRT_2;
        let prog = ConicProgram {
            c: vec![1.0, 0.0, 1.0],
            a: SparseRows {
                rows: vec![vec![(0, 1.0)], vec![(2, 1.0)], vec![(1, 1.0 / s)]],
            },
            b: vec![1.0, 2.0, 1.0],
            cones: vec![Cone::new(ConeKind::PsdTri, 2)],
            var_names: Vec::new(),
        };
        let sol = solve_with("clarabel", &prog, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.obj - 3.0).abs() < 1e-6);
        assert!((sol.x[1] - s).abs() < 1e-6, "off-diagonal coordinate");
    }

    #[test]
    fn dual_form_matches_primal_form() {
        // a mixed program exercised through both lowerings
        let s = std::f64::consts::SQRT_2;
        let prog = ConicProgram {
            c: vec![0.0, 1.0, 0.2, 1.0, -0.3, 0.0, 0.4],
            a: SparseRows {
                rows: vec![
                    vec![(0, 1.0), (1, 1.0), (4, 0.5)],
                    vec![(2, 1.0 / s), (5, 1.0)],
                    vec![(3, 1.0), (6, -1.0)],
                ],
            },
            b: vec![1.0, 0.4, 0.0],
            cones: vec![
                Cone::new(ConeKind::Free, 1),
                Cone::new(ConeKind::PsdTri, 2),
                Cone::new(ConeKind::Soc, 2),
                Cone::new(ConeKind::NonNeg, 1),
            ],
            var_names: Vec::new(),
        };
        let opts = SolveOptions::default();
        let a = solve_primal_form(&prog, &opts).unwrap();
        let b = solve_dual_form(&prog, &opts).unwrap();
        assert_eq!(a.status, SolveStatus::Optimal);
        assert_eq!(b.status, SolveStatus::Optimal);
        assert!((a.obj - b.obj).abs() < 1e-6, "{} vs {}", a.obj, b.obj);
        for (xa, xb) in a.x.iter().zip(&b.x) {
            assert!((xa - xb).abs() < 1e-5, "{xa} vs {xb}");
        }
        // equality duals agree too
        for (ya, yb) in a.y.iter().zip(&b.y) {
            assert!((ya - yb).abs() < 1e-5, "{ya} vs {yb}");
        }
    }

    #[test]
    fn dual_form_detects_infeasibility() {
        // x >= 0 with x = -1
        let prog = ConicProgram {
            c: vec![0.0],
            a: SparseRows {
                rows: vec![vec![(0, 1.0)]],
            },
            b: vec![-1.0],
            cones: vec![Cone::new(ConeKind::NonNeg, 1)],
            var_names: Vec::new(),
        };
        let sol = solve_dual_form(&prog, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }
}
