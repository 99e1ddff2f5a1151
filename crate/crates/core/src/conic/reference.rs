//! Reference conic backend: a primal-dual interior-point method on the
//! homogeneous self-dual embedding, with Nesterov-Todd scaling for the
//! symmetric-cone product and dense linear algebra per PSD block.
//!
//! Intended for desk-scale problems (PSD sides up to a few hundred,
//! KKT dimension in the low thousands); the clarabel backend covers the
//! large synthesis programs.

use nalgebra::{DMatrix, DVector};

use super::{
    tri_to_mat, mat_to_tri, Backend, ConeKind, ConicError, ConicProgram, Solution,
    SolveOptions, SolveStatus,
};

#[derive(Debug, Default, Clone)]
pub struct ReferenceSolver {}

impl Backend for ReferenceSolver {
    fn name(&self) -> &str {
        "reference"
    }

    fn solve(&self, prog: &ConicProgram, opts: &SolveOptions) -> Result<Solution, ConicError> {
        solve_hsde(prog, opts)
    }
}

/// Block view of the cone part of x. Free coordinates are tracked
/// separately: they carry no scaling and their dual is pinned at zero.
#[derive(Debug, Clone)]
enum Block {
    NonNeg { off: usize, dim: usize },
    Soc { off: usize, dim: usize },
    Psd { off: usize, side: usize },
}

impl Block {
    fn offset(&self) -> usize {
        match *self {
            Block::NonNeg { off, .. } | Block::Soc { off, .. } | Block::Psd { off, .. } => off,
        }
    }

    fn len(&self) -> usize {
        match *self {
            Block::NonNeg { dim, .. } => dim,
            Block::Soc { dim, .. } => dim,
            Block::Psd { side, .. } => side * (side + 1) / 2,
        }
    }

    fn barrier_degree(&self) -> usize {
        match *self {
            Block::NonNeg { dim, .. } => dim,
            Block::Soc { .. } => 1,
            Block::Psd { side, .. } => side,
        }
    }
}

/// Per-block NT scaling state. `lambda` is the scaled point W x = W^{-1} z.
enum Scaling {
    NonNeg { w: Vec<f64>, lambda: Vec<f64> },
    Soc { eta: f64, wbar: Vec<f64>, lambda: Vec<f64> },
    Psd { r: DMatrix<f64>, rinv: DMatrix<f64>, lambda: Vec<f64> },
}

fn soc_res(x: &[f64]) -> f64 {
    let t = x[0];
    let u2: f64 = x[1..].iter().map(|v| v * v).sum();
    (t * t - u2).max(0.0).sqrt()
}

fn compute_scaling(block: &Block, x: &[f64], z: &[f64]) -> Result<Scaling, ConicError> {
    match *block {
        Block::NonNeg { .. } => {
            let mut w = Vec::with_capacity(x.len());
            let mut lambda = Vec::with_capacity(x.len());
            for i in 0..x.len() {
                if x[i] <= 0.0 || z[i] <= 0.0 {
                    return Err(ConicError::Numerical("iterate left the orthant".into()));
                }
                w.push((x[i] / z[i]).sqrt());
                lambda.push((x[i] * z[i]).sqrt());
            }
            Ok(Scaling::NonNeg { w, lambda })
        }
        Block::Soc { dim, .. } => {
            let a = soc_res(x);
            let b = soc_res(z);
            if a <= 0.0 || b <= 0.0 {
                return Err(ConicError::Numerical("iterate left the cone".into()));
            }
            let xt: Vec<f64> = x.iter().map(|v| v / a).collect();
            let zt: Vec<f64> = z.iter().map(|v| v / b).collect();
            let dot: f64 = xt.iter().zip(&zt).map(|(p, q)| p * q).sum();
            let gamma = ((1.0 + dot) / 2.0).sqrt();
            let mut wbar = vec![0.0; dim];
            wbar[0] = (xt[0] + zt[0]) / (2.0 * gamma);
            for i in 1..dim {
                wbar[i] = (xt[i] - zt[i]) / (2.0 * gamma);
            }
            let eta = (a / b).sqrt();
            // W = (1/eta) H(J wbar) satisfies W x = W^{-1} z
            let mut jw = wbar.clone();
            for v in jw.iter_mut().skip(1) {
                *v = -*v;
            }
            let w = soc_w_matrix(1.0 / eta, &jw);
            let lambda: Vec<f64> = {
                let xv = DVector::from_column_slice(x);
                (w * xv).iter().copied().collect()
            };
            Ok(Scaling::Soc { eta, wbar, lambda })
        }
        Block::Psd { side, .. } => {
            let xm = tri_to_mat(side, x);
            let zm = tri_to_mat(side, z);
            let lx = nalgebra::Cholesky::new(xm)
                .ok_or_else(|| ConicError::Numerical("X block not positive definite".into()))?;
            let lz = nalgebra::Cholesky::new(zm)
                .ok_or_else(|| ConicError::Numerical("Z block not positive definite".into()))?;
            let lx = lx.l();
            let lz = lz.l();
            let m = lz.transpose() * &lx;
            let svd = nalgebra::SVD::new(m, true, true);
            let u = svd.u.as_ref().unwrap();
            let vt = svd.v_t.as_ref().unwrap();
            let sig = &svd.singular_values;
            if sig.iter().any(|&s| s <= 0.0) {
                return Err(ConicError::Numerical("degenerate NT scaling".into()));
            }
            let sig_isqrt = DMatrix::from_diagonal(&sig.map(|s| 1.0 / s.sqrt()));
            // X = R Sigma R^T, Z = R^{-T} Sigma R^{-1}
            let r = &lx * vt.transpose() * &sig_isqrt;
            let rinv_t = &lz * u * &sig_isqrt;
            let rinv = rinv_t.transpose();
            let lambda = sig.iter().copied().collect();
            Ok(Scaling::Psd { r, rinv, lambda })
        }
    }
}

fn soc_w_matrix(eta: f64, wbar: &[f64]) -> DMatrix<f64> {
    let d = wbar.len();
    let mut w = DMatrix::zeros(d, d);
    w[(0, 0)] = wbar[0];
    for i in 1..d {
        w[(0, i)] = wbar[i];
        w[(i, 0)] = wbar[i];
        for j in 1..d {
            w[(i, j)] = if i == j { 1.0 } else { 0.0 };
            w[(i, j)] += wbar[i] * wbar[j] / (1.0 + wbar[0]);
        }
    }
    w * eta
}

impl Scaling {
    /// W u, where W is the symmetric NT scaling with W x = W^{-1} z.
    fn apply_w(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Scaling::NonNeg { w, .. } => u.iter().zip(w).map(|(v, wi)| v / wi).collect(),
            Scaling::Soc { eta, wbar, .. } => {
                let mut jw = wbar.to_vec();
                for v in jw.iter_mut().skip(1) {
                    *v = -*v;
                }
                let w = soc_w_matrix(1.0 / *eta, &jw);
                (w * DVector::from_column_slice(u)).iter().copied().collect()
            }
            Scaling::Psd { rinv, .. } => {
                let side = rinv.nrows();
                let um = tri_to_mat(side, u);
                let out = rinv * um * rinv.transpose();
                mat_to_tri(&out.symmetric_part())
            }
        }
    }

    /// Inverse of the dual-side scaling map. For nonneg and SOC blocks the
    /// scaling is a symmetric W and this equals `apply_w`; for PSD blocks the
    /// two sides are adjoint conjugations and this is u -> svec(R^-T u R^-1).
    fn apply_phi_inv(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Scaling::NonNeg { .. } | Scaling::Soc { .. } => self.apply_w(u),
            Scaling::Psd { rinv, .. } => {
                let side = rinv.nrows();
                let um = tri_to_mat(side, u);
                let out = rinv.transpose() * um * rinv;
                mat_to_tri(&out.symmetric_part())
            }
        }
    }

    /// W^{-1} u.
    fn apply_winv(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Scaling::NonNeg { w, .. } => u.iter().zip(w).map(|(v, wi)| v * wi).collect(),
            Scaling::Soc { eta, wbar, .. } => {
                let winv = soc_w_matrix(*eta, wbar);
                (winv * DVector::from_column_slice(u))
                    .iter()
                    .copied()
                    .collect()
            }
            Scaling::Psd { r, .. } => {
                let side = r.nrows();
                let um = tri_to_mat(side, u);
                let out = r.transpose() * um * r;
                mat_to_tri(&out.symmetric_part())
            }
        }
    }

    /// lambda for PSD blocks is the diagonal; expand to svec coords.
    fn lambda_coords(&self, len: usize) -> Vec<f64> {
        match self {
            Scaling::NonNeg { lambda, .. } | Scaling::Soc { lambda, .. } => lambda.clone(),
            Scaling::Psd { lambda, .. } => {
                let side = lambda.len();
                let mut m = DMatrix::zeros(side, side);
                for i in 0..side {
                    m[(i, i)] = lambda[i];
                }
                let v = mat_to_tri(&m);
                debug_assert_eq!(v.len(), len);
                v
            }
        }
    }

    /// Jordan product u o v in the block's algebra (svec coords for PSD).
    fn jordan_mul(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            Scaling::NonNeg { .. } => u.iter().zip(v).map(|(a, b)| a * b).collect(),
            Scaling::Soc { .. } => {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let mut out = vec![0.0; u.len()];
                out[0] = dot;
                for i in 1..u.len() {
                    out[i] = u[0] * v[i] + v[0] * u[i];
                }
                out
            }
            Scaling::Psd { lambda, .. } => {
                let side = lambda.len();
                let um = tri_to_mat(side, u);
                let vm = tri_to_mat(side, v);
                let out = (&um * &vm + &vm * &um) * 0.5;
                mat_to_tri(&out)
            }
        }
    }

    /// Solves lambda o g = d.
    fn jordan_div_lambda(&self, d: &[f64]) -> Vec<f64> {
        match self {
            Scaling::NonNeg { lambda, .. } => d.iter().zip(lambda).map(|(a, l)| a / l).collect(),
            Scaling::Soc { lambda, .. } => {
                let l0 = lambda[0];
                let l1 = &lambda[1..];
                let l1_sq: f64 = l1.iter().map(|v| v * v).sum();
                let det = l0 * l0 - l1_sq;
                let l1_dot_d: f64 = l1.iter().zip(&d[1..]).map(|(a, b)| a * b).sum();
                let g0 = (l0 * d[0] - l1_dot_d) / det;
                let mut out = vec![0.0; d.len()];
                out[0] = g0;
                for i in 1..d.len() {
                    out[i] = (d[i] - g0 * lambda[i]) / l0;
                }
                out
            }
            Scaling::Psd { lambda, .. } => {
                let side = lambda.len();
                let dm = tri_to_mat(side, d);
                let mut gm = DMatrix::zeros(side, side);
                for i in 0..side {
                    for j in 0..side {
                        gm[(i, j)] = 2.0 * dm[(i, j)] / (lambda[i] + lambda[j]);
                    }
                }
                mat_to_tri(&gm)
            }
        }
    }

    /// Largest step alpha with lambda + alpha * u staying in the cone.
    fn max_step(&self, u: &[f64]) -> f64 {
        match self {
            Scaling::NonNeg { lambda, .. } => {
                let mut alpha = f64::INFINITY;
                for (l, du) in lambda.iter().zip(u) {
                    if *du < 0.0 {
                        alpha = alpha.min(-l / du);
                    }
                }
                alpha
            }
            Scaling::Soc { lambda, .. } => soc_max_step(lambda, u),
            Scaling::Psd { lambda, .. } => {
                let side = lambda.len();
                let um = tri_to_mat(side, u);
                let mut scaled = um;
                for i in 0..side {
                    for j in 0..side {
                        scaled[(i, j)] /= (lambda[i] * lambda[j]).sqrt();
                    }
                }
                let eig = nalgebra::SymmetricEigen::new(scaled);
                let min_ev = eig.eigenvalues.min();
                if min_ev < 0.0 {
                    -1.0 / min_ev
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Dense H = W^2 block for the KKT matrix.
    fn h_block(&self, len: usize) -> DMatrix<f64> {
        match self {
            Scaling::NonNeg { w, .. } => DMatrix::from_diagonal(&DVector::from_iterator(
                w.len(),
                w.iter().map(|v| 1.0 / (v * v)),
            )),
            Scaling::Soc { eta, wbar, .. } => {
                let mut jw = wbar.to_vec();
                for v in jw.iter_mut().skip(1) {
                    *v = -*v;
                }
                let w = soc_w_matrix(1.0 / *eta, &jw);
                &w * &w
            }
            Scaling::Psd { rinv, .. } => {
                // u -> svec(S mat(u) S), S = R^{-T} R^{-1}
                let s = rinv.transpose() * rinv;
                let side = rinv.nrows();
                let mut h = DMatrix::zeros(len, len);
                let mut basis = vec![0.0; len];
                for j in 0..len {
                    basis[j] = 1.0;
                    let um = tri_to_mat(side, &basis);
                    let img = mat_to_tri(&(&s * um * &s).symmetric_part());
                    for i in 0..len {
                        h[(i, j)] = img[i];
                    }
                    basis[j] = 0.0;
                }
                h.symmetric_part()
            }
        }
    }
}

fn soc_max_step(lambda: &[f64], u: &[f64]) -> f64 {
    // sup { a >= 0 : lambda + a u in SOC }
    let c = lambda[0] * lambda[0] - lambda[1..].iter().map(|v| v * v).sum::<f64>();
    let b = 2.0
        * (lambda[0] * u[0]
            - lambda[1..]
                .iter()
                .zip(&u[1..])
                .map(|(a, bb)| a * bb)
                .sum::<f64>());
    let a = u[0] * u[0] - u[1..].iter().map(|v| v * v).sum::<f64>();
    // roots of a t^2 + b t + c = 0; c > 0 for an interior lambda
    let mut alpha = f64::INFINITY;
    let disc = b * b - 4.0 * a * c;
    if a.abs() < 1e-300 {
        if b < 0.0 {
            alpha = alpha.min(-c / b);
        }
    } else if disc >= 0.0 {
        let sq = disc.sqrt();
        for root in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
            if root > 0.0 {
                alpha = alpha.min(root);
            }
        }
    }
    // the head must stay nonnegative as well
    if u[0] < 0.0 {
        alpha = alpha.min(-lambda[0] / u[0]);
    }
    alpha
}

struct State {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    tau: f64,
    kappa: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Zero-cone presolve: those coordinates are fixed, so drop their columns.
struct ZeroElim {
    keep: Vec<usize>,
    orig_vars: usize,
}

fn eliminate_zero_cols(prog: &ConicProgram) -> (ConicProgram, ZeroElim) {
    let mut keep = Vec::with_capacity(prog.num_vars());
    let mut cones = Vec::new();
    let mut off = 0;
    for cone in &prog.cones {
        if cone.kind != ConeKind::Zero {
            for j in 0..cone.len() {
                keep.push(off + j);
            }
            cones.push(*cone);
        }
        off += cone.len();
    }
    let mut col_map = vec![usize::MAX; prog.num_vars()];
    for (new, &old) in keep.iter().enumerate() {
        col_map[old] = new;
    }
    let rows = prog
        .a
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .filter(|&&(j, _)| col_map[j] != usize::MAX)
                .map(|&(j, v)| (col_map[j], v))
                .collect()
        })
        .collect();
    let reduced = ConicProgram {
        c: keep.iter().map(|&j| prog.c[j]).collect(),
        a: super::SparseRows { rows },
        b: prog.b.clone(),
        cones,
        var_names: Vec::new(),
    };
    (
        reduced,
        ZeroElim {
            keep,
            orig_vars: prog.num_vars(),
        },
    )
}

impl ZeroElim {
    fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.orig_vars];
        for (new, &old) in self.keep.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }
}

fn solve_hsde(orig: &ConicProgram, opts: &SolveOptions) -> Result<Solution, ConicError> {
    let (prog, elim) = eliminate_zero_cols(orig);
    let n = prog.num_vars();
    let m = prog.num_rows();

    // classify blocks; free coordinates carry no scaling
    let mut blocks = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    {
        let mut off = 0;
        for cone in &prog.cones {
            match cone.kind {
                ConeKind::Free => free.extend(off..off + cone.dim),
                ConeKind::NonNeg => blocks.push(Block::NonNeg { off, dim: cone.dim }),
                ConeKind::Soc => blocks.push(Block::Soc { off, dim: cone.dim }),
                ConeKind::PsdTri => blocks.push(Block::Psd { off, side: cone.dim }),
                ConeKind::Zero => unreachable!("eliminated in presolve"),
            }
            off += cone.len();
        }
    }
    let nu: usize = blocks.iter().map(Block::barrier_degree).sum();

    // initial point: cone identity, zero elsewhere
    let mut st = State {
        x: vec![0.0; n],
        y: vec![0.0; m],
        z: vec![0.0; n],
        tau: 1.0,
        kappa: 1.0,
    };
    for b in &blocks {
        match *b {
            Block::NonNeg { off, dim } => {
                for i in 0..dim {
                    st.x[off + i] = 1.0;
                    st.z[off + i] = 1.0;
                }
            }
            Block::Soc { off, .. } => {
                st.x[off] = 1.0;
                st.z[off] = 1.0;
            }
            Block::Psd { off, side } => {
                let mut idx = off;
                for j in 0..side {
                    for i in j..side {
                        let v = if i == j { 1.0 } else { 0.0 };
                        st.x[idx] = v;
                        st.z[idx] = v;
                        idx += 1;
                    }
                }
            }
        }
    }

    let norm_b = norm2(&prog.b).max(1.0);
    let norm_c = norm2(&prog.c).max(1.0);
    let mut best_near: Option<Solution> = None;

    for iter in 0..opts.max_iter {
        // HSDE residuals
        let ax = prog.a.mul_vec(&st.x);
        let aty = prog.a.tr_mul_vec(&st.y, n);
        let res_x: Vec<f64> = (0..m).map(|i| ax[i] - prog.b[i] * st.tau).collect();
        let res_z: Vec<f64> = (0..n)
            .map(|j| -aty[j] + prog.c[j] * st.tau - st.z[j])
            .collect();
        let res_tau = dot(&prog.b, &st.y) - dot(&prog.c, &st.x) - st.kappa;

        // termination metrics in unscaled space
        let inv_tau = 1.0 / st.tau;
        let pres = (0..m)
            .map(|i| ax[i] * inv_tau - prog.b[i])
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            / norm_b;
        let dres = (0..n)
            .map(|j| aty[j] * inv_tau + st.z[j] * inv_tau - prog.c[j])
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            / norm_c;
        let pobj = dot(&prog.c, &st.x) * inv_tau;
        let dobj = dot(&prog.b, &st.y) * inv_tau;
        let gap_abs = dot(&st.x, &st.z) * inv_tau * inv_tau;
        let relgap = gap_abs / pobj.abs().max(dobj.abs()).max(1.0);

        let make_solution = |status| {
            let x_full = elim.expand(&st.x.iter().map(|v| v * inv_tau).collect::<Vec<_>>());
            Solution {
                status,
                x: x_full,
                y: st.y.iter().map(|v| v * inv_tau).collect(),
                obj: pobj,
                primal_residual: pres,
                dual_residual: dres,
                gap: relgap,
                iterations: iter,
            }
        };

        if opts.verbose {
            eprintln!(
                "iter {iter:3}  pres {pres:9.2e}  dres {dres:9.2e}  relgap {relgap:9.2e}  tau {:9.2e}  kappa {:9.2e}",
                st.tau, st.kappa
            );
        }
        if pres <= opts.tol_feas && dres <= opts.tol_feas && relgap <= opts.tol_gap {
            return Ok(make_solution(SolveStatus::Optimal));
        }
        if pres <= opts.tol_feas * 100.0 && dres <= opts.tol_feas * 100.0 && relgap <= opts.tol_gap * 100.0
        {
            best_near = Some(make_solution(SolveStatus::NearOptimal));
        }

        // infeasibility certificates
        let by = dot(&prog.b, &st.y);
        if by > 0.0 {
            let cert_res = (0..n)
                .map(|j| aty[j] + st.z[j])
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if cert_res / by <= opts.tol_feas * norm_c {
                let scale = 1.0 / by;
                return Ok(Solution {
                    status: SolveStatus::Infeasible,
                    x: vec![0.0; elim.orig_vars],
                    y: st.y.iter().map(|v| v * scale).collect(),
                    obj: f64::INFINITY,
                    primal_residual: pres,
                    dual_residual: cert_res / by,
                    gap: relgap,
                    iterations: iter,
                });
            }
        }
        let cx = dot(&prog.c, &st.x);
        if cx < 0.0 {
            let ax_norm = norm2(&ax);
            if ax_norm / (-cx) <= opts.tol_feas * norm_b {
                let scale = 1.0 / (-cx);
                return Ok(Solution {
                    status: SolveStatus::Unbounded,
                    x: elim.expand(&st.x.iter().map(|v| v * scale).collect::<Vec<_>>()),
                    y: vec![0.0; m],
                    obj: f64::NEG_INFINITY,
                    primal_residual: ax_norm / (-cx),
                    dual_residual: dres,
                    gap: relgap,
                    iterations: iter,
                });
            }
        }

        // NT scalings
        let mut scalings = Vec::with_capacity(blocks.len());
        for b in &blocks {
            let xs = &st.x[b.offset()..b.offset() + b.len()];
            let zs = &st.z[b.offset()..b.offset() + b.len()];
            scalings.push(compute_scaling(b, xs, zs)?);
        }
        let mu = (dot(&st.x, &st.z) + st.tau * st.kappa) / (nu + 1) as f64;

        // assemble and factor the dense KKT [H Aᵀ; A -δI]
        let dim = n + m;
        let delta = 1e-10;
        let mut kkt = DMatrix::zeros(dim, dim);
        for j in &free {
            kkt[(*j, *j)] = delta;
        }
        for (b, s) in blocks.iter().zip(&scalings) {
            let h = s.h_block(b.len());
            let off = b.offset();
            for i in 0..b.len() {
                for j in 0..b.len() {
                    kkt[(off + i, off + j)] = h[(i, j)];
                }
            }
        }
        for (i, row) in prog.a.rows.iter().enumerate() {
            for &(j, v) in row {
                kkt[(n + i, j)] = v;
                kkt[(j, n + i)] = v;
            }
        }
        for i in 0..m {
            kkt[(n + i, n + i)] = -delta;
        }
        let factor = LdlFactor::new(kkt.clone())
            .ok_or_else(|| ConicError::Numerical("KKT factorization broke down".into()))?;

        // constant solve used by the dtau elimination: rhs (c, b)
        let solve_pair = |rx: &[f64], ry: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut rhs = DVector::zeros(dim);
            for j in 0..n {
                rhs[j] = rx[j];
            }
            for i in 0..m {
                rhs[n + i] = ry[i];
            }
            let sol = factor.solve_refined(&kkt, &rhs, 2);
            let dx = sol.as_slice()[..n].to_vec();
            // stored block solves for y with flipped sign
            let dy = sol.as_slice()[n..].iter().map(|v| -*v).collect();
            (dx, dy)
        };
        let (xbar, ybar) = solve_pair(&prog.c, &prog.b);
        let denom_base = dot(&prog.b, &ybar) - dot(&prog.c, &xbar) + st.kappa / st.tau;

        // one Newton direction for a given target (sigma) and corrector term
        let direction = |sigma: f64,
                             corr: Option<&(Vec<f64>, Vec<f64>, f64, f64)>|
         -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> {
            let one_minus = 1.0 - sigma;
            // scaled complementarity rhs per block
            let mut ds_all = vec![0.0; n];
            for (b, s) in blocks.iter().zip(&scalings) {
                let len = b.len();
                let off = b.offset();
                let lam = s.lambda_coords(len);
                let mut ds = s.jordan_mul(&lam, &lam).iter().map(|v| -v).collect::<Vec<_>>();
                if let Some((dxa, dza, _, _)) = corr {
                    let wdx = s.apply_w(&dxa[off..off + len]);
                    let widz = s.apply_winv(&dza[off..off + len]);
                    let prod = s.jordan_mul(&wdx, &widz);
                    for i in 0..len {
                        ds[i] -= prod[i];
                    }
                }
                // + sigma mu e
                match s {
                    Scaling::NonNeg { .. } => {
                        for v in ds.iter_mut() {
                            *v += sigma * mu;
                        }
                    }
                    Scaling::Soc { .. } => ds[0] += sigma * mu,
                    Scaling::Psd { lambda, .. } => {
                        let side = lambda.len();
                        let mut idx = 0;
                        for j in 0..side {
                            for i in j..side {
                                if i == j {
                                    ds[idx] += sigma * mu;
                                }
                                idx += 1;
                            }
                        }
                    }
                }
                // r2' contribution: phi_inv(lambda \ ds)
                let g = s.jordan_div_lambda(&ds);
                let wg = s.apply_phi_inv(&g);
                for i in 0..len {
                    ds_all[off + i] = wg[i];
                }
            }
            let dktau_rhs = match corr {
                None => -st.tau * st.kappa,
                Some((_, _, dtau_a, dkappa_a)) => {
                    -st.tau * st.kappa - dtau_a * dkappa_a + sigma * mu
                }
            };

            // rhs: r2' = -(1-sigma) res_z + W(lambda\ds); r1 = -(1-sigma) res_x
            let rx: Vec<f64> = (0..n)
                .map(|j| -one_minus * res_z[j] + ds_all[j])
                .collect();
            let ry: Vec<f64> = (0..m).map(|i| -one_minus * res_x[i]).collect();
            let (xhat, yhat) = solve_pair(&rx, &ry);
            let r3 = -one_minus * res_tau;
            let numer = r3 + dktau_rhs / st.tau + dot(&prog.c, &xhat) - dot(&prog.b, &yhat);
            if denom_base.abs() < 1e-300 {
                return None;
            }
            let dtau = numer / denom_base;
            let dx: Vec<f64> = (0..n).map(|j| xhat[j] + dtau * xbar[j]).collect();
            let dy: Vec<f64> = (0..m).map(|i| yhat[i] + dtau * ybar[i]).collect();
            let dkappa = (dktau_rhs - st.kappa * dtau) / st.tau;
            // dz = phi_inv(g) - H dx = phi_inv(g) - phi_inv(apply_w(dx));
            // zero on free coords
            let mut dz = vec![0.0; n];
            for (b, s) in blocks.iter().zip(&scalings) {
                let len = b.len();
                let off = b.offset();
                let wdx = s.apply_w(&dx[off..off + len]);
                let hdx = s.apply_phi_inv(&wdx);
                for i in 0..len {
                    dz[off + i] = ds_all[off + i] - hdx[i];
                }
            }
            Some((dx, dy, dz, dtau, dkappa))
        };

        // predictor
        let (dxa, _dya, dza, dtaua, dkappaa) = direction(0.0, None)
            .ok_or_else(|| ConicError::Numerical("singular HSDE step".into()))?;
        let alpha_aff = step_length(
            &blocks, &scalings, &dxa, &dza, st.tau, st.kappa, dtaua, dkappaa,
        );
        let sigma = (1.0 - alpha_aff).powi(3).clamp(1e-8, 0.999);

        // corrector
        let corr = (dxa.clone(), dza.clone(), dtaua, dkappaa);
        let (dx, dy, dz, dtau, dkappa) = direction(sigma, Some(&corr))
            .ok_or_else(|| ConicError::Numerical("singular HSDE step".into()))?;
        let alpha = 0.99
            * step_length(
                &blocks, &scalings, &dx, &dz, st.tau, st.kappa, dtau, dkappa,
            );
        let alpha = alpha.min(1.0);
        if !alpha.is_finite() || alpha <= 1e-13 {
            break;
        }
        for j in 0..n {
            st.x[j] += alpha * dx[j];
        }
        for i in 0..m {
            st.y[i] += alpha * dy[i];
        }
        for j in 0..n {
            st.z[j] += alpha * dz[j];
        }
        st.tau += alpha * dtau;
        st.kappa += alpha * dkappa;
    }

    if let Some(sol) = best_near {
        return Ok(sol);
    }
    Err(ConicError::Numerical(
        "no convergence within the iteration budget".into(),
    ))
}

#[allow(clippy::too_many_arguments)]
fn step_length(
    blocks: &[Block],
    scalings: &[Scaling],
    dx: &[f64],
    dz: &[f64],
    tau: f64,
    kappa: f64,
    dtau: f64,
    dkappa: f64,
) -> f64 {
    let mut alpha: f64 = 1.0;
    for (b, s) in blocks.iter().zip(scalings) {
        let off = b.offset();
        let len = b.len();
        let wdx = s.apply_w(&dx[off..off + len]);
        let widz = s.apply_winv(&dz[off..off + len]);
        alpha = alpha.min(s.max_step(&wdx));
        alpha = alpha.min(s.max_step(&widz));
    }
    if dtau < 0.0 {
        alpha = alpha.min(-tau / dtau);
    }
    if dkappa < 0.0 {
        alpha = alpha.min(-kappa / dkappa);
    }
    alpha
}

/// Dense LDL^T without pivoting; adequate for the regularized quasidefinite
/// KKT matrices assembled above. Solutions are polished by iterative
/// refinement against the unregularized matrix.
struct LdlFactor {
    l: DMatrix<f64>,
    d: DVector<f64>,
}

impl LdlFactor {
    fn new(mut a: DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        let mut d = DVector::zeros(n);
        for k in 0..n {
            let mut dk = a[(k, k)];
            for j in 0..k {
                dk -= a[(k, j)] * a[(k, j)] * d[j];
            }
            if dk == 0.0 || !dk.is_finite() {
                return None;
            }
            d[k] = dk;
            for i in k + 1..n {
                let mut v = a[(i, k)];
                for j in 0..k {
                    v -= a[(i, j)] * a[(k, j)] * d[j];
                }
                a[(i, k)] = v / dk;
            }
        }
        Some(LdlFactor { l: a, d })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.d.len();
        let mut x = rhs.clone();
        for i in 0..n {
            for j in 0..i {
                let v = self.l[(i, j)] * x[j];
                x[i] -= v;
            }
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let v = self.l[(j, i)] * x[j];
                x[i] -= v;
            }
        }
        x
    }

    fn solve_refined(&self, a: &DMatrix<f64>, rhs: &DVector<f64>, rounds: usize) -> DVector<f64> {
        let mut x = self.solve(rhs);
        for _ in 0..rounds {
            let res = rhs - a * &x;
            let corr = self.solve(&res);
            x += corr;
        }
        x
    }
}
