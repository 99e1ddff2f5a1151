//! Assembles the superstabilization programs (full joint-set WSOS, dense
//! and sparse alternatives), their chi-square specialization, extended
//! superstability, and the process-noise variants; extracts controllers
//! and certified decay bounds from solved programs.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::conic::{solve_with, ConicError, ConicProgram, SolveOptions, SolveStatus, Solution};
use crate::dataset::{build_xi, residual_poly, NoiseModel, TrajectoryData};
use crate::polyalg::{monomial_basis, Monomial, Poly, PolyMatrix, VarId, VarRegistry};
use crate::psatz::{
    wsos_constrain, wsos_expansion, PsatzError, ProgramBuilder, SemialgebraicSet, VarMap,
    WsosExpansion, WsosRecord,
};
use crate::textio::{fmt_f64, Lines, ParseError};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(
        "full-scheme Gram block side {side} ({entries} entries) exceeds the assembly cap \
         ({cap} entries); raise `gram_entry_cap` to force it"
    )]
    GramCapExceeded {
        side: usize,
        entries: usize,
        cap: usize,
    },
    #[error("W must have full column rank")]
    RankDeficientW,
    #[error("noise model carries process-noise blocks but no E channel was supplied (or shapes differ)")]
    ProcessNoiseMismatch,
    #[error("config error: {0}")]
    Config(String),
    #[error("certificate violates d >= {0:e}: extended scaling is degenerate")]
    DegenerateScaling(f64),
    #[error(transparent)]
    Psatz(#[from] PsatzError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Scalar WSOS over the joint (A, B, dx, du) consistency set.
    Full,
    /// Noise eliminated; SOC multipliers as full arrow WSOS matrices.
    AltDense,
    /// Noise eliminated; SOC multipliers as 2x2 block decompositions.
    AltSparse,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Full => "full",
            Scheme::AltDense => "alt-dense",
            Scheme::AltSparse => "alt-sparse",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        match s {
            "full" => Some(Scheme::Full),
            "alt-dense" => Some(Scheme::AltDense),
            "alt-sparse" => Some(Scheme::AltSparse),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Fixed decay budget 1 - eta on every row sum.
    Feasibility { eta: f64 },
    /// A single scalar replaces 1 - eta in every row sum and is minimized.
    MinimizeLambda,
}

/// Archimedean prior for the alternatives schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prior {
    /// Frobenius ball with radius 10x the least-squares plant norm.
    Auto,
    /// Frobenius ball of the given radius.
    Fixed(f64),
    /// No prior: WSOS over the prior degrades to plain SOS (no
    /// Archimedean convergence guarantee).
    None,
}

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub scheme: Scheme,
    pub order: usize,
    /// Shaping matrix W (f x n, full column rank); None means identity.
    pub w: Option<DMatrix<f64>>,
    /// Search over diagonal W = diag(d)^-1 instead of a fixed W.
    pub extended: bool,
    pub objective: Objective,
    pub prior: Prior,
    /// Strictness margin added inside each WSOS membership.
    pub eps: f64,
    /// Full-scheme guard: largest admissible Gram block, counted in
    /// scaled-triangular entries.
    pub gram_entry_cap: usize,
    /// Positivity floor for the extended scaling vector.
    pub d_min: f64,
    /// Row-sum strictness margin in extended mode (the paper's strict
    /// inequalities are implemented non-strict with explicit margins).
    pub extended_row_margin: f64,
    /// Process-noise channel E; requires matching H blocks in the noise
    /// model. An all-zero channel with all-zero H blocks degenerates to
    /// the plain assembly.
    pub process_e: Option<DMatrix<f64>>,
    pub backend: String,
    pub solve: SolveOptions,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            scheme: Scheme::AltDense,
            order: 1,
            w: None,
            extended: false,
            objective: Objective::MinimizeLambda,
            prior: Prior::Auto,
            eps: 0.0,
            gram_entry_cap: 3000,
            d_min: 1e-6,
            extended_row_margin: 1e-4,
            process_e: None,
            backend: "clarabel".to_string(),
            solve: SolveOptions::default(),
        }
    }
}

/// Pseudoinverse with singular values below 1e-12 * sigma_max dropped.
pub fn pseudo_inverse(w: &DMatrix<f64>) -> Result<DMatrix<f64>, SynthesisError> {
    let svd = nalgebra::SVD::new(w.clone(), true, true);
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return Err(SynthesisError::RankDeficientW);
    }
    let cutoff = 1e-12 * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    if rank < w.ncols() {
        return Err(SynthesisError::RankDeficientW);
    }
    svd.pseudo_inverse(cutoff)
        .map_err(|_| SynthesisError::RankDeficientW)
}

/// Least-squares plant estimate from stacked one-step regressions,
/// pseudoinverse cutoff 1e-10.
pub fn least_squares_plant(data: &TrajectoryData) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m, t_len) = (data.n, data.m, data.t_len);
    let mut z = DMatrix::zeros(n + m, t_len - 1);
    let mut xp = DMatrix::zeros(n, t_len - 1);
    for t in 0..t_len - 1 {
        for i in 0..n {
            z[(i, t)] = data.xhat[(t, i)];
            xp[(i, t)] = data.xhat[(t + 1, i)];
        }
        for i in 0..m {
            z[(n + i, t)] = data.uhat[(t, i)];
        }
    }
    let zt = z.transpose();
    let gram = &z * &zt;
    let pinv = nalgebra::SVD::new(gram, true, true)
        .pseudo_inverse(1e-10)
        .expect("pinv");
    let theta = xp * zt * pinv;
    (
        theta.view((0, 0), (n, n)).into(),
        theta.view((0, n), (n, m)).into(),
    )
}

/// The decision-variable skeleton shared by all schemes.
struct Skeleton {
    k_vars: Vec<Vec<VarId>>,
    lambda: Option<VarId>,
    /// f x f matrix of polynomials in (A, B) with free coefficients.
    m_polys: Vec<Vec<Poly>>,
    /// Extended mode: S (m x n) and d (length n).
    s_vars: Vec<Vec<VarId>>,
    d_vars: Vec<VarId>,
}

/// One robustified scalar inequality q(A, B) >= 0 with a label.
struct Inequality {
    label: String,
    q: Poly,
}

/// Builds the f + 2 f^2 scalar inequalities of W-superstabilization:
/// f row sums and the 2 f^2 absolute-value splittings, each affine in the
/// decision scalars and polynomial in (A, B).
fn superstab_inequalities(
    builder: &mut ProgramBuilder,
    w: &DMatrix<f64>,
    objective: Objective,
    order: usize,
) -> Result<(Skeleton, Vec<Inequality>), SynthesisError> {
    let n = builder.reg.state_dim();
    let m = builder.reg.input_dim();
    let f = w.nrows();
    let w_pinv = pseudo_inverse(w)?;

    // K entries enter affinely as fresh decision scalars
    let k_vars: Vec<Vec<VarId>> = (0..m)
        .map(|i| {
            (0..n)
                .map(|j| builder.free(format!("K_{i}_{j}")))
                .collect()
        })
        .collect();
    let lambda = match objective {
        Objective::MinimizeLambda => Some(builder.free("lambda")),
        Objective::Feasibility { .. } => None,
    };
    // M entries are polynomials of degree <= 2k in (A, B)
    let m_basis = monomial_basis(&builder.reg.plant_vars(), 2 * order as u32);
    let mut m_polys = Vec::with_capacity(f);
    for i in 0..f {
        let mut row = Vec::with_capacity(f);
        for j in 0..f {
            let mut p = Poly::zero();
            for (idx, mono) in m_basis.iter().enumerate() {
                let c = builder.free(format!("M_{i}_{j}[{idx}]"));
                p = p.add(&Poly::monomial(mono.mul(&Monomial::var(c)), 1.0));
            }
            row.push(p);
        }
        m_polys.push(row);
    }

    // closed loop W (A + B K) W^+
    let reg = &builder.reg;
    let a_poly = PolyMatrix::from_fn(n, n, |i, j| Poly::var(reg.a_var(i, j)));
    let bk = PolyMatrix::from_fn(n, n, |i, j| {
        let mut p = Poly::zero();
        for l in 0..m {
            p = p.add(&Poly::monomial(
                Monomial::var(reg.b_var(i, l)).mul(&Monomial::var(k_vars[l][j])),
                1.0,
            ));
        }
        p
    });
    let acl = a_poly.add(&bk).expect("n x n");
    let wcl = PolyMatrix::from_numeric(w)
        .mul(&acl)
        .and_then(|t| t.mul(&PolyMatrix::from_numeric(&w_pinv)))
        .expect("conformable");

    let mut ineqs = Vec::with_capacity(f + 2 * f * f);
    for i in 0..f {
        // budget - sum_j M_ij >= 0
        let mut q = match (objective, lambda) {
            (Objective::MinimizeLambda, Some(l)) => Poly::var(l),
            (Objective::Feasibility { eta }, _) => Poly::constant(1.0 - eta),
            _ => unreachable!(),
        };
        for j in 0..f {
            q = q.sub(&m_polys[i][j]);
        }
        ineqs.push(Inequality {
            label: format!("row[{i}]"),
            q,
        });
    }
    for i in 0..f {
        for j in 0..f {
            let cl = wcl.entry(i, j);
            ineqs.push(Inequality {
                label: format!("abs+[{i},{j}]"),
                q: m_polys[i][j].sub(cl),
            });
            ineqs.push(Inequality {
                label: format!("abs-[{i},{j}]"),
                q: m_polys[i][j].add(cl),
            });
        }
    }

    Ok((
        Skeleton {
            k_vars,
            lambda,
            m_polys,
            s_vars: Vec::new(),
            d_vars: Vec::new(),
        },
        ineqs,
    ))
}

/// Extended-superstability inequalities: W = diag(d)^-1 is searched over.
/// Row sums read d_i - sum_j M_ij >= 0 and the splittings bound
/// |A_ij d_j + (B S)_ij| by M_ij. The scaling is pinned by sum_i d_i = n.
fn extended_inequalities(
    builder: &mut ProgramBuilder,
    objective: Objective,
    order: usize,
    d_min: f64,
    row_margin: f64,
) -> Result<(Skeleton, Vec<Inequality>), SynthesisError> {
    let n = builder.reg.state_dim();
    let m = builder.reg.input_dim();

    let s_vars: Vec<Vec<VarId>> = (0..m)
        .map(|i| {
            (0..n)
                .map(|j| builder.free(format!("S_{i}_{j}")))
                .collect()
        })
        .collect();
    let d_vars: Vec<VarId> = (0..n).map(|i| builder.free(format!("d_{i}"))).collect();
    let lambda = match objective {
        Objective::MinimizeLambda => Some(builder.free("lambda")),
        Objective::Feasibility { .. } => None,
    };
    let m_basis = monomial_basis(&builder.reg.plant_vars(), 2 * order as u32);
    let mut m_polys = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let mut p = Poly::zero();
            for (idx, mono) in m_basis.iter().enumerate() {
                let c = builder.free(format!("M_{i}_{j}[{idx}]"));
                p = p.add(&Poly::monomial(mono.mul(&Monomial::var(c)), 1.0));
            }
            row.push(p);
        }
        m_polys.push(row);
    }

    // positivity d_i >= d_min and the scale normalization sum d_i = n
    for &d in &d_vars {
        let slack = builder.nonneg(format!("{}.pos", builder.reg.name(d)));
        builder.equality(vec![(d, 1.0), (slack, -1.0)], d_min);
    }
    builder.equality(d_vars.iter().map(|&d| (d, 1.0)).collect(), n as f64);
    if let Some(l) = lambda {
        // lambda >= d_i
        for &d in &d_vars {
            let slack = builder.nonneg(format!("lam.ge.{}", builder.reg.name(d)));
            builder.equality(vec![(l, 1.0), (d, -1.0), (slack, -1.0)], 0.0);
        }
    }

    let mut ineqs = Vec::with_capacity(n + 2 * n * n);
    for i in 0..n {
        let mut q = Poly::var(d_vars[i]);
        let margin = match objective {
            Objective::Feasibility { eta } => eta,
            Objective::MinimizeLambda => row_margin,
        };
        q = q.add(&Poly::constant(-margin));
        for j in 0..n {
            q = q.sub(&m_polys[i][j]);
        }
        ineqs.push(Inequality {
            label: format!("row[{i}]"),
            q,
        });
    }
    let reg = &builder.reg;
    for i in 0..n {
        for j in 0..n {
            // A_ij d_j + sum_l B_il S_lj
            let mut cl = Poly::monomial(
                Monomial::var(reg.a_var(i, j)).mul(&Monomial::var(d_vars[j])),
                1.0,
            );
            for l in 0..m {
                cl = cl.add(&Poly::monomial(
                    Monomial::var(reg.b_var(i, l)).mul(&Monomial::var(s_vars[l][j])),
                    1.0,
                ));
            }
            ineqs.push(Inequality {
                label: format!("abs+[{i},{j}]"),
                q: m_polys[i][j].sub(&cl),
            });
            ineqs.push(Inequality {
                label: format!("abs-[{i},{j}]"),
                q: m_polys[i][j].add(&cl),
            });
        }
    }

    Ok((
        Skeleton {
            k_vars: Vec::new(),
            lambda,
            m_polys,
            s_vars,
            d_vars,
        },
        ineqs,
    ))
}

/// PSD block sizes of the three truncation schemes, the complexity
/// currency used to compare them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GramSizeReport {
    /// Joint-set scalar Gram side C(n(n+T) + m(n+T-1) + n_w + k, k).
    pub p_full: usize,
    /// Dense arrow Gram side (n_l + 1) C(n(n+m) + k, k).
    pub p_dense: usize,
    /// Sparse 2x2 Gram side 2 C(n(n+m) + k, k).
    pub p_sparse: usize,
    /// Number of quadratic noise constraints L.
    pub num_blocks: usize,
    /// Maximal-block multiplicities per robustified inequality, counted
    /// per scalar cone coordinate (n_l per constraint block).
    pub mult_full: usize,
    pub mult_dense: usize,
    pub mult_sparse: usize,
}

/// Pure size arithmetic for a given problem shape. `n_l` is the row count
/// of each quadratic constraint and `num_blocks` their number L (2T - 1
/// for elementwise bounds).
pub fn gram_size_report(
    n: usize,
    m: usize,
    t_len: usize,
    k: usize,
    n_l: usize,
    num_blocks: usize,
    n_w: usize,
) -> GramSizeReport {
    // the process channel enters the joint count as +n_w, following the
    // cited size formula
    let joint_vars = n * (n + t_len) + m * (n + t_len - 1) + n_w;
    let plant_vars = n * (n + m);
    GramSizeReport {
        p_full: crate::psatz::gram_size(1, joint_vars, k),
        p_dense: crate::psatz::gram_size(n_l + 1, plant_vars, k),
        p_sparse: crate::psatz::gram_size(2, plant_vars, k),
        num_blocks,
        mult_full: 1,
        mult_dense: n_l * num_blocks,
        mult_sparse: n_l * num_blocks,
    }
}

/// A fully assembled conic program plus everything needed to read a
/// certificate back out of its solution.
#[derive(Debug)]
pub struct SynthesisProgram {
    pub program: ConicProgram,
    pub map: VarMap,
    /// WSOS memberships, for residual reconstruction.
    pub records: Vec<WsosRecord>,
    /// Polynomial identities (alternatives equality blocks, arrow
    /// structure rows) that must vanish at any solution.
    pub eq_records: Vec<(String, Poly)>,
    pub scheme: Scheme,
    pub order: usize,
    pub extended: bool,
    pub max_gram_side: usize,
    pub objective: Objective,
    k_vars: Vec<Vec<VarId>>,
    lambda: Option<VarId>,
    m_polys: Vec<Vec<Poly>>,
    s_vars: Vec<Vec<VarId>>,
    d_vars: Vec<VarId>,
    d_min: f64,
    n: usize,
    m: usize,
}

impl SynthesisProgram {
    pub fn solve(&self, backend: &str, opts: &SolveOptions) -> Result<Solution, SynthesisError> {
        Ok(solve_with(backend, &self.program, opts)?)
    }
}

fn prior_set(reg: &VarRegistry, prior: Prior, data: &TrajectoryData) -> SemialgebraicSet {
    let vars = reg.plant_vars();
    match prior {
        Prior::None => SemialgebraicSet::unconstrained(vars),
        Prior::Fixed(radius) => {
            SemialgebraicSet::unconstrained(vars).with_archimedean_radius(radius * radius)
        }
        Prior::Auto => {
            let (a, b) = least_squares_plant(data);
            let norm = (a.norm_squared() + b.norm_squared()).sqrt();
            let radius = 10.0 * norm.max(1.0);
            SemialgebraicSet::unconstrained(vars).with_archimedean_radius(radius * radius)
        }
    }
}

/// Validates the process-noise channel. An all-zero E with all-zero H
/// blocks degenerates to the plain assembly and returns None.
fn effective_process(
    cfg: &SynthesisConfig,
    noise: &NoiseModel,
) -> Result<Option<DMatrix<f64>>, SynthesisError> {
    match (&cfg.process_e, noise.n_w) {
        (None, 0) => Ok(None),
        (None, _) => Err(SynthesisError::ProcessNoiseMismatch),
        (Some(e), n_w) => {
            if e.ncols() != n_w {
                return Err(SynthesisError::ProcessNoiseMismatch);
            }
            let h_zero = noise
                .blocks
                .iter()
                .all(|blk| blk.h.iter().all(|&v| v == 0.0));
            let e_zero = e.iter().all(|&v| v == 0.0);
            if e_zero && h_zero {
                return Ok(None); // degenerate channel
            }
            Ok(Some(e.clone()))
        }
    }
}

fn skeleton_and_inequalities(
    builder: &mut ProgramBuilder,
    cfg: &SynthesisConfig,
) -> Result<(Skeleton, Vec<Inequality>), SynthesisError> {
    if cfg.order < 1 {
        return Err(SynthesisError::Config("order k must be at least 1".into()));
    }
    if cfg.extended {
        if cfg.w.is_some() {
            return Err(SynthesisError::Config(
                "extended mode searches W = diag(d)^-1; a fixed W cannot be given".into(),
            ));
        }
        extended_inequalities(
            builder,
            cfg.objective,
            cfg.order,
            cfg.d_min,
            cfg.extended_row_margin,
        )
    } else {
        let n = builder.reg.state_dim();
        let w = cfg
            .w
            .clone()
            .unwrap_or_else(|| DMatrix::identity(n, n));
        superstab_inequalities(builder, &w, cfg.objective, cfg.order)
    }
}

fn finish(
    builder: ProgramBuilder,
    skel: Skeleton,
    records: Vec<WsosRecord>,
    eq_records: Vec<(String, Poly)>,
    cfg: &SynthesisConfig,
    dims: (usize, usize),
) -> SynthesisProgram {
    let mut builder = builder;
    if let Some(l) = skel.lambda {
        builder.minimize(vec![(l, 1.0)]);
    }
    let max_gram_side = builder.max_psd_side();
    let (program, map) = builder.build();
    SynthesisProgram {
        program,
        map,
        records,
        eq_records,
        scheme: cfg.scheme,
        order: cfg.order,
        extended: cfg.extended,
        max_gram_side,
        objective: cfg.objective,
        k_vars: skel.k_vars,
        lambda: skel.lambda,
        m_polys: skel.m_polys,
        s_vars: skel.s_vars,
        d_vars: skel.d_vars,
        d_min: cfg.d_min,
        n: dims.0,
        m: dims.1,
    }
}

/// The joint-set scheme: every inequality is a scalar WSOS membership over
/// the set of (A, B, dx, du[, w]) satisfying the dynamics equalities (with
/// free-sign polynomial multipliers) and the L quadratic noise bounds.
pub fn build_full_program(
    data: &TrajectoryData,
    noise: &NoiseModel,
    cfg: &SynthesisConfig,
) -> Result<SynthesisProgram, SynthesisError> {
    if cfg.scheme != Scheme::Full {
        return Err(SynthesisError::Config(format!(
            "build_full_program called with scheme {}",
            cfg.scheme.name()
        )));
    }
    let (n, m, t_len) = (data.n, data.m, data.t_len);
    let e_chan = effective_process(cfg, noise)?;
    let n_w = e_chan.as_ref().map_or(0, |e| e.ncols());
    let reg = if n_w > 0 {
        VarRegistry::with_process_noise(n, m, t_len, n_w)
    } else {
        VarRegistry::with_noise(n, m, t_len)
    };

    // size guard before any allocation
    let joint_vars = reg.len();
    let side = crate::psatz::gram_size(1, joint_vars, cfg.order);
    let entries = side * (side + 1) / 2;
    if entries > cfg.gram_entry_cap {
        return Err(SynthesisError::GramCapExceeded {
            side,
            entries,
            cap: cfg.gram_entry_cap,
        });
    }

    let mut builder = ProgramBuilder::new(reg);
    let (skel, ineqs) = skeleton_and_inequalities(&mut builder, cfg)?;

    // quadratic noise constraints 1 - ||F dx + G du + H w||^2 >= 0
    let noise_components = |blk: &crate::dataset::NoiseBlock, reg: &VarRegistry| -> Vec<Poly> {
        (0..blk.rows())
            .map(|r| {
                let mut comp = Poly::zero();
                for c in 0..blk.f.ncols() {
                    let v = blk.f[(r, c)];
                    if v != 0.0 {
                        comp = comp.add(&Poly::var(reg.dx_var(c / n, c % n)).scale(v));
                    }
                }
                for c in 0..blk.g.ncols() {
                    let v = blk.g[(r, c)];
                    if v != 0.0 {
                        comp = comp.add(&Poly::var(reg.du_var(c / m, c % m)).scale(v));
                    }
                }
                for c in 0..blk.h.ncols() {
                    let v = blk.h[(r, c)];
                    if v != 0.0 {
                        comp = comp.add(&Poly::var(reg.w_var(c / n_w, c % n_w)).scale(v));
                    }
                }
                comp
            })
            .collect()
    };
    let mut g_list = Vec::with_capacity(noise.num_blocks());
    for blk in &noise.blocks {
        let mut g = Poly::constant(1.0);
        for comp in noise_components(blk, &builder.reg) {
            g = g.sub(&comp.mul(&comp));
        }
        let mut pm = PolyMatrix::zeros(1, 1);
        pm.set_entry(0, 0, g);
        g_list.push(pm);
    }
    let all_vars = builder.reg.indeterminates();
    let set = SemialgebraicSet::new(all_vars.clone(), g_list);

    // dynamics equality polynomials over the joint variables
    let h0 = residual_poly(data, &builder.reg);
    let mut eq_polys = Vec::with_capacity(n * (t_len - 1));
    for t in 0..t_len - 1 {
        for i in 0..n {
            let reg = &builder.reg;
            let mut e = h0[t].entry(i, 0).clone();
            for j in 0..n {
                e = e.add(&Poly::monomial(
                    Monomial::var(reg.a_var(i, j)).mul(&Monomial::var(reg.dx_var(t, j))),
                    1.0,
                ));
            }
            for j in 0..m {
                e = e.add(&Poly::monomial(
                    Monomial::var(reg.b_var(i, j)).mul(&Monomial::var(reg.du_var(t, j))),
                    1.0,
                ));
            }
            if let Some(echan) = &e_chan {
                for j in 0..n_w {
                    let v = echan[(i, j)];
                    if v != 0.0 {
                        e = e.add(&Poly::var(reg.w_var(t, j)).scale(v));
                    }
                }
            }
            e = e.sub(&Poly::var(builder.reg.dx_var(t + 1, i)));
            eq_polys.push(e);
        }
    }

    // free-sign multipliers of degree 2k - 2 for the equalities
    let mult_basis = monomial_basis(&all_vars, (2 * cfg.order - 2) as u32);
    let mut records = Vec::new();
    for (qi, ineq) in ineqs.iter().enumerate() {
        let mut target = ineq.q.clone();
        for (ei, e) in eq_polys.iter().enumerate() {
            let mut mult = Poly::zero();
            for (bi, mono) in mult_basis.iter().enumerate() {
                let c = builder.free(format!("q{qi}.eq{ei}.mu[{bi}]"));
                mult = mult.add(&Poly::monomial(mono.mul(&Monomial::var(c)), 1.0));
            }
            target = target.sub(&mult.mul(e));
        }
        let mut pm = PolyMatrix::zeros(1, 1);
        pm.set_entry(0, 0, target);
        let rec = wsos_constrain(
            &mut builder,
            &format!("q{qi}.{}", ineq.label),
            &pm,
            &set,
            cfg.order,
            cfg.eps,
        )?;
        records.push(rec);
    }

    Ok(finish(builder, skel, records, Vec::new(), cfg, (n, m)))
}

/// Per-inequality multiplier assembly shared by the generic alternatives
/// builder and its chi-square specialization: emits the cone-side Gram
/// blocks and returns (tau_l, s_l) as polynomial expressions in the Gram
/// coordinates, plus the arrow/2x2 structure rows.
fn cone_multipliers(
    builder: &mut ProgramBuilder,
    label: &str,
    n_l: usize,
    set: &SemialgebraicSet,
    k: usize,
    sparse: bool,
    eq_records: &mut Vec<(String, Poly)>,
) -> Result<(Poly, Vec<Poly>, Vec<WsosExpansion>), SynthesisError> {
    if !sparse {
        // dense: one (n_l + 1)-sized WSOS arrow per constraint
        let exp = wsos_expansion(builder, &format!("{label}.arrow"), n_l + 1, set, k)?;
        let total = exp.total();
        let tau = total.entry(0, 0).clone();
        let s: Vec<Poly> = (0..n_l).map(|i| total.entry(0, i + 1).clone()).collect();
        for i in 1..=n_l {
            let resid = total.entry(i, i).sub(&tau);
            builder.constrain_poly_zero(&resid)?;
            eq_records.push((format!("{label}.arrow.diag[{i}]"), resid));
            for j in i + 1..=n_l {
                let resid = total.entry(i, j).clone();
                builder.constrain_poly_zero(&resid)?;
                eq_records.push((format!("{label}.arrow.off[{i},{j}]"), resid));
            }
        }
        Ok((tau, s, vec![exp]))
    } else {
        // sparse: n_l 2x2 blocks with tau = sum_i z_i
        let mut exps = Vec::with_capacity(n_l);
        let mut z = Vec::with_capacity(n_l);
        let mut s = Vec::with_capacity(n_l);
        for i in 0..n_l {
            let exp = wsos_expansion(builder, &format!("{label}.blk{i}"), 2, set, k)?;
            let total = exp.total();
            z.push(total.entry(1, 1).clone());
            s.push(total.entry(0, 1).clone());
            exps.push((exp, total));
        }
        let mut tau = Poly::zero();
        for zi in &z {
            tau = tau.add(zi);
        }
        for (i, (_, total)) in exps.iter().enumerate() {
            // the (0,0) entry of every block carries the shared tau
            let resid = total.entry(0, 0).sub(&tau);
            builder.constrain_poly_zero(&resid)?;
            eq_records.push((format!("{label}.blk{i}.link"), resid));
        }
        Ok((tau, s, exps.into_iter().map(|(e, _)| e).collect()))
    }
}

fn mu_vector(
    builder: &mut ProgramBuilder,
    label: &str,
    len: usize,
    k: usize,
) -> Vec<Poly> {
    let basis = monomial_basis(&builder.reg.plant_vars(), (2 * k - 1) as u32);
    (0..len)
        .map(|t| {
            let mut p = Poly::zero();
            for (bi, mono) in basis.iter().enumerate() {
                let c = builder.free(format!("{label}.mu{t}[{bi}]"));
                p = p.add(&Poly::monomial(mono.mul(&Monomial::var(c)), 1.0));
            }
            p
        })
        .collect()
}

/// Noise-eliminated scheme: per robustified inequality q, multipliers
/// (mu, s_l, tau_l) over (A, B) only, with the scalar condition
/// q - sum tau_l - mu' h0 in WSOS over the prior and the two equality
/// systems matched coefficient-wise as polynomial identities.
pub fn build_alternatives_program(
    data: &TrajectoryData,
    noise: &NoiseModel,
    cfg: &SynthesisConfig,
) -> Result<SynthesisProgram, SynthesisError> {
    let sparse = match cfg.scheme {
        Scheme::AltDense => false,
        Scheme::AltSparse => true,
        Scheme::Full => {
            return Err(SynthesisError::Config(
                "build_alternatives_program called with the full scheme".into(),
            ))
        }
    };
    let (n, m, t_len) = (data.n, data.m, data.t_len);
    let e_chan = effective_process(cfg, noise)?;
    let reg = VarRegistry::plant_only(n, m);
    let mut builder = ProgramBuilder::new(reg);
    let (skel, ineqs) = skeleton_and_inequalities(&mut builder, cfg)?;
    let set = prior_set(&builder.reg, cfg.prior, data);
    let h0 = residual_poly(data, &builder.reg);
    let xi = build_xi(&builder.reg, n, t_len);

    let mut records = Vec::new();
    let mut eq_records = Vec::new();
    for (qi, ineq) in ineqs.iter().enumerate() {
        let label = format!("q{qi}");
        let mu = mu_vector(&mut builder, &label, n * (t_len - 1), cfg.order);

        let mut taus = Vec::with_capacity(noise.num_blocks());
        let mut s_all = Vec::with_capacity(noise.num_blocks());
        for (l, blk) in noise.blocks.iter().enumerate() {
            let (tau, s, _) = cone_multipliers(
                &mut builder,
                &format!("{label}.c{l}"),
                blk.rows(),
                &set,
                cfg.order,
                sparse,
                &mut eq_records,
            )?;
            taus.push(tau);
            s_all.push(s);
        }

        // scalar condition q - sum tau - mu' h0 in WSOS over the prior
        let mut target = ineq.q.clone();
        for tau in &taus {
            target = target.sub(tau);
        }
        for t in 0..t_len - 1 {
            for i in 0..n {
                target = target.sub(&mu[t * n + i].mul(h0[t].entry(i, 0)));
            }
        }
        let mut pm = PolyMatrix::zeros(1, 1);
        pm.set_entry(0, 0, target);
        records.push(wsos_constrain(
            &mut builder,
            &format!("{label}.{}", ineq.label),
            &pm,
            &set,
            cfg.order,
            cfg.eps,
        )?);

        // Xi' mu - sum F_l' s_l = 0, matched per polynomial coefficient
        let mu_mat = PolyMatrix::col_vector(mu.clone());
        let xi_t_mu = xi.transpose_mul(&mu_mat).expect("conformable");
        let mut f_sum = vec![Poly::zero(); n * t_len];
        for (blk, s) in noise.blocks.iter().zip(&s_all) {
            for r in 0..blk.rows() {
                for c in 0..blk.f.ncols() {
                    let v = blk.f[(r, c)];
                    if v != 0.0 {
                        f_sum[c] = f_sum[c].add(&s[r].scale(v));
                    }
                }
            }
        }
        for c in 0..n * t_len {
            let resid = xi_t_mu.entry(c, 0).sub(&f_sum[c]);
            builder.constrain_poly_zero(&resid)?;
            eq_records.push((format!("{label}.state-eq[{c}]"), resid));
        }

        // (I (x) B') mu - sum G_l' s_l = 0
        let mut g_sum = vec![Poly::zero(); m * (t_len - 1)];
        for (blk, s) in noise.blocks.iter().zip(&s_all) {
            for r in 0..blk.rows() {
                for c in 0..blk.g.ncols() {
                    let v = blk.g[(r, c)];
                    if v != 0.0 {
                        g_sum[c] = g_sum[c].add(&s[r].scale(v));
                    }
                }
            }
        }
        for t in 0..t_len - 1 {
            for j in 0..m {
                let mut bt_mu = Poly::zero();
                for i in 0..n {
                    bt_mu = bt_mu.add(
                        &mu[t * n + i].mul(&Poly::var(builder.reg.b_var(i, j))),
                    );
                }
                let resid = bt_mu.sub(&g_sum[t * m + j]);
                builder.constrain_poly_zero(&resid)?;
                eq_records.push((format!("{label}.input-eq[{t},{j}]"), resid));
            }
        }

        // process-noise block (I (x) E') mu - sum H_l' s_l = 0
        if let Some(echan) = &e_chan {
            let n_w = echan.ncols();
            let mut h_sum = vec![Poly::zero(); n_w * (t_len - 1)];
            for (blk, s) in noise.blocks.iter().zip(&s_all) {
                for r in 0..blk.rows() {
                    for c in 0..blk.h.ncols() {
                        let v = blk.h[(r, c)];
                        if v != 0.0 {
                            h_sum[c] = h_sum[c].add(&s[r].scale(v));
                        }
                    }
                }
            }
            for t in 0..t_len - 1 {
                for j in 0..n_w {
                    let mut et_mu = Poly::zero();
                    for i in 0..n {
                        let v = echan[(i, j)];
                        if v != 0.0 {
                            et_mu = et_mu.add(&mu[t * n + i].scale(v));
                        }
                    }
                    let resid = et_mu.sub(&h_sum[t * n_w + j]);
                    builder.constrain_poly_zero(&resid)?;
                    eq_records.push((format!("{label}.w-eq[{t},{j}]"), resid));
                }
            }
        }
    }

    Ok(finish(builder, skel, records, eq_records, cfg, (n, m)))
}

/// Chi-square specialization of the alternatives scheme for the
/// elementwise chance model (L = 2T - 1). The per-time equality structure
/// replaces the generic blocks: the whitened state multipliers satisfy
/// Sigma_x^{-1/2} s_t = A' mu_t - mu_{t-1} (with boundary cases) and the
/// input multipliers Sigma_u^{-1/2} s_t = B' mu_t, while the scalar row
/// weighs each tau by its chance radius.
pub fn build_alternatives_chisq(
    data: &TrajectoryData,
    spec: &crate::dataset::ChanceSpec,
    cfg: &SynthesisConfig,
) -> Result<SynthesisProgram, SynthesisError> {
    let sparse = match cfg.scheme {
        Scheme::AltDense => false,
        Scheme::AltSparse => true,
        Scheme::Full => {
            return Err(SynthesisError::Config(
                "chi-square specialization applies to the alternatives schemes".into(),
            ))
        }
    };
    let (n, m, t_len) = (data.n, data.m, data.t_len);
    if spec.sigma_x.nrows() != n || spec.sigma_u.nrows() != m {
        return Err(SynthesisError::Config(
            "chance spec dimensions do not match the data".into(),
        ));
    }
    let r_x = spec
        .state_radius(n)
        .map_err(|e| SynthesisError::Config(e.to_string()))?;
    let r_u = spec
        .input_radius(m)
        .map_err(|e| SynthesisError::Config(e.to_string()))?;
    let sx_isqrt = inv_sqrt(&spec.sigma_x)?;
    let su_isqrt = inv_sqrt(&spec.sigma_u)?;

    let reg = VarRegistry::plant_only(n, m);
    let mut builder = ProgramBuilder::new(reg);
    let (skel, ineqs) = skeleton_and_inequalities(&mut builder, cfg)?;
    let set = prior_set(&builder.reg, cfg.prior, data);
    let h0 = residual_poly(data, &builder.reg);

    let mut records = Vec::new();
    let mut eq_records = Vec::new();
    for (qi, ineq) in ineqs.iter().enumerate() {
        let label = format!("q{qi}");
        let mu = mu_vector(&mut builder, &label, n * (t_len - 1), cfg.order);

        // whitened per-time multipliers: state times then input times
        let mut taus = Vec::with_capacity(2 * t_len - 1);
        let mut s_state = Vec::with_capacity(t_len);
        let mut s_input = Vec::with_capacity(t_len - 1);
        for t in 0..t_len {
            let (tau, s, _) = cone_multipliers(
                &mut builder,
                &format!("{label}.x{t}"),
                n,
                &set,
                cfg.order,
                sparse,
                &mut eq_records,
            )?;
            taus.push(tau.scale(r_x));
            s_state.push(s);
        }
        for t in 0..t_len - 1 {
            let (tau, s, _) = cone_multipliers(
                &mut builder,
                &format!("{label}.u{t}"),
                m,
                &set,
                cfg.order,
                sparse,
                &mut eq_records,
            )?;
            taus.push(tau.scale(r_u));
            s_input.push(s);
        }

        let mut target = ineq.q.clone();
        for tau in &taus {
            target = target.sub(tau);
        }
        for t in 0..t_len - 1 {
            for i in 0..n {
                target = target.sub(&mu[t * n + i].mul(h0[t].entry(i, 0)));
            }
        }
        let mut pm = PolyMatrix::zeros(1, 1);
        pm.set_entry(0, 0, target);
        records.push(wsos_constrain(
            &mut builder,
            &format!("{label}.{}", ineq.label),
            &pm,
            &set,
            cfg.order,
            cfg.eps,
        )?);

        // Sigma_x^{-1/2} s_t = A' mu_t - mu_{t-1} per time and coordinate,
        // oriented as rhs - lhs to match the generic assembly rows
        for t in 0..t_len {
            for j in 0..n {
                let mut lhs = Poly::zero();
                for r in 0..n {
                    let v = sx_isqrt[(r, j)];
                    if v != 0.0 {
                        lhs = lhs.add(&s_state[t][r].scale(v));
                    }
                }
                let mut rhs = Poly::zero();
                if t < t_len - 1 {
                    for i in 0..n {
                        rhs = rhs.add(
                            &mu[t * n + i].mul(&Poly::var(builder.reg.a_var(i, j))),
                        );
                    }
                }
                if t > 0 {
                    rhs = rhs.sub(&mu[(t - 1) * n + j]);
                }
                let resid = rhs.sub(&lhs);
                builder.constrain_poly_zero(&resid)?;
                eq_records.push((format!("{label}.state-eq[{t},{j}]"), resid));
            }
        }
        // Sigma_u^{-1/2} s_t = B' mu_t
        for t in 0..t_len - 1 {
            for j in 0..m {
                let mut lhs = Poly::zero();
                for r in 0..m {
                    let v = su_isqrt[(r, j)];
                    if v != 0.0 {
                        lhs = lhs.add(&s_input[t][r].scale(v));
                    }
                }
                let mut rhs = Poly::zero();
                for i in 0..n {
                    rhs = rhs.add(&mu[t * n + i].mul(&Poly::var(builder.reg.b_var(i, j))));
                }
                let resid = rhs.sub(&lhs);
                builder.constrain_poly_zero(&resid)?;
                eq_records.push((format!("{label}.input-eq[{t},{j}]"), resid));
            }
        }
    }

    Ok(finish(builder, skel, records, eq_records, cfg, (n, m)))
}

fn inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, SynthesisError> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&ev| ev <= 0.0) {
        return Err(SynthesisError::Config(
            "chance covariance is not positive definite".into(),
        ));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|ev| 1.0 / ev.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Extended-mode entry point: dispatches on the configured scheme with the
/// extended flag forced on.
pub fn build_extended_program(
    data: &TrajectoryData,
    noise: &NoiseModel,
    cfg: &SynthesisConfig,
) -> Result<SynthesisProgram, SynthesisError> {
    let mut cfg = cfg.clone();
    cfg.extended = true;
    match cfg.scheme {
        Scheme::Full => build_full_program(data, noise, &cfg),
        Scheme::AltDense | Scheme::AltSparse => build_alternatives_program(data, noise, &cfg),
    }
}

/// Builds whichever scheme the config selects.
pub fn build_program(
    data: &TrajectoryData,
    noise: &NoiseModel,
    cfg: &SynthesisConfig,
) -> Result<SynthesisProgram, SynthesisError> {
    match cfg.scheme {
        Scheme::Full => build_full_program(data, noise, cfg),
        Scheme::AltDense | Scheme::AltSparse => build_alternatives_program(data, noise, cfg),
    }
}

/// The extracted outcome of one synthesis run.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub scheme: Scheme,
    pub order: usize,
    pub extended: bool,
    pub status: SolveStatus,
    /// Certified decay bound: the solved lambda, or 1 - eta in
    /// feasibility mode.
    pub lambda: f64,
    /// Superstabilization is certified only when the solve succeeded and
    /// lambda clears 1 with margin for the solver tolerance.
    pub certified: bool,
    pub k_gain: DMatrix<f64>,
    /// Extended mode: the scaling vector d (W = diag(d)^-1) and S.
    pub d_scaling: Option<Vec<f64>>,
    pub s_matrix: Option<DMatrix<f64>>,
    /// Solved certificate matrix M(A, B), numeric coefficients.
    pub m_solved: Vec<Vec<Poly>>,
    pub max_gram_side: usize,
    /// Worst reconstructed WSOS residual coefficient.
    pub wsos_residual: f64,
    /// Worst multiplier-identity (equality block) residual coefficient.
    pub identity_residual: f64,
    pub solver_iterations: usize,
    pub primal_residual: f64,
    pub gap: f64,
}

const CERT_TOL: f64 = 1e-6;

/// Reads the controller, decay bound and residual diagnostics out of a
/// solved program. Infeasible or failed statuses pass through with a
/// non-certifying result.
pub fn extract_certificate(
    sp: &SynthesisProgram,
    sol: &Solution,
) -> Result<Certificate, SynthesisError> {
    let ok = matches!(sol.status, SolveStatus::Optimal | SolveStatus::NearOptimal);
    let (k_gain, d_scaling, s_matrix) = if !ok {
        (DMatrix::zeros(sp.m, sp.n), None, None)
    } else if sp.extended {
        let d: Vec<f64> = sp.d_vars.iter().map(|&v| sp.map.value(sol, v)).collect();
        if d.iter().any(|&di| di < sp.d_min * (1.0 - 1e-6)) {
            return Err(SynthesisError::DegenerateScaling(sp.d_min));
        }
        let s = DMatrix::from_fn(sp.m, sp.n, |i, j| sp.map.value(sol, sp.s_vars[i][j]));
        // K = S diag(d)^-1
        let k = DMatrix::from_fn(sp.m, sp.n, |i, j| s[(i, j)] / d[j]);
        (k, Some(d), Some(s))
    } else {
        (
            DMatrix::from_fn(sp.m, sp.n, |i, j| sp.map.value(sol, sp.k_vars[i][j])),
            None,
            None,
        )
    };

    let lambda = match (sp.lambda, sp.objective) {
        (Some(l), _) if ok => sp.map.value(sol, l),
        (_, Objective::Feasibility { eta }) if ok => 1.0 - eta,
        _ => f64::INFINITY,
    };

    let (mut wsos_worst, mut eq_worst) = (0.0f64, 0.0f64);
    if ok {
        for rec in &sp.records {
            wsos_worst = wsos_worst.max(crate::psatz::wsos_residual(rec, &sp.map, sol));
        }
        for (_, p) in &sp.eq_records {
            let resid = sp.map.substitute(sol, p);
            for (_m, c) in resid.terms() {
                eq_worst = eq_worst.max(c.abs());
            }
        }
    }

    let m_solved = sp
        .m_polys
        .iter()
        .map(|row| row.iter().map(|p| sp.map.substitute(sol, p)).collect())
        .collect();

    Ok(Certificate {
        scheme: sp.scheme,
        order: sp.order,
        extended: sp.extended,
        status: sol.status,
        lambda,
        certified: ok && (sp.extended || lambda + CERT_TOL < 1.0),
        k_gain,
        d_scaling,
        s_matrix,
        m_solved,
        max_gram_side: sp.max_gram_side,
        wsos_residual: wsos_worst,
        identity_residual: eq_worst,
        solver_iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        gap: sol.gap,
    })
}

fn status_tag(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::NearOptimal => "near-optimal",
        SolveStatus::Infeasible => "infeasible",
        SolveStatus::Unbounded => "unbounded",
        SolveStatus::NumericalFailure => "numerical-failure",
    }
}

fn status_from_tag(s: &str) -> Option<SolveStatus> {
    Some(match s {
        "optimal" => SolveStatus::Optimal,
        "near-optimal" => SolveStatus::NearOptimal,
        "infeasible" => SolveStatus::Infeasible,
        "unbounded" => SolveStatus::Unbounded,
        "numerical-failure" => SolveStatus::NumericalFailure,
        _ => return None,
    })
}

impl Certificate {
    /// Certificate text format; the timestamp, if any, stays in the
    /// caller-supplied header comment.
    pub fn to_text(&self, header_comment: Option<&str>) -> String {
        let mut out = String::new();
        out.push_str("# quadstab certificate v1\n");
        if let Some(h) = header_comment {
            out.push_str(&format!("# {h}\n"));
        }
        out.push_str(&format!("scheme {}\n", self.scheme.name()));
        out.push_str(&format!("order {}\n", self.order));
        out.push_str(&format!("extended {}\n", self.extended));
        out.push_str(&format!("status {}\n", status_tag(self.status)));
        out.push_str(&format!("lambda {}\n", fmt_f64(self.lambda)));
        out.push_str(&format!("certified {}\n", self.certified));
        out.push_str(&format!("max_gram_side {}\n", self.max_gram_side));
        out.push_str(&format!("wsos_residual {}\n", fmt_f64(self.wsos_residual)));
        out.push_str(&format!(
            "identity_residual {}\n",
            fmt_f64(self.identity_residual)
        ));
        out.push_str(&format!("K {} {}\n", self.k_gain.nrows(), self.k_gain.ncols()));
        for r in self.k_gain.row_iter() {
            out.push_str(&crate::textio::fmt_row(r.iter().copied()));
            out.push('\n');
        }
        match &self.d_scaling {
            Some(d) => {
                out.push_str(&format!("d {}\n", d.len()));
                out.push_str(&crate::textio::fmt_row(d.iter().copied()));
                out.push('\n');
            }
            None => out.push_str("d 0\n"),
        }
        out
    }

    /// Parses the fields needed by verification (everything except the
    /// solved M coefficients, which stay with the in-memory certificate).
    pub fn from_text(text: &str) -> Result<Certificate, SynthesisError> {
        let mut lines = Lines::new(text);
        let (ln, scheme) = lines.expect_key("scheme")?;
        let scheme = Scheme::parse(scheme).ok_or(ParseError::Malformed {
            line: ln,
            msg: format!("unknown scheme `{scheme}`"),
        })?;
        let order = lines.expect_usize("order")?;
        let (_, ext) = lines.expect_key("extended")?;
        let extended = ext == "true";
        let (ln, status) = lines.expect_key("status")?;
        let status = status_from_tag(status).ok_or(ParseError::Malformed {
            line: ln,
            msg: format!("unknown status `{status}`"),
        })?;
        let lambda = lines.expect_f64("lambda")?;
        let (_, cert) = lines.expect_key("certified")?;
        let certified = cert == "true";
        let max_gram_side = lines.expect_usize("max_gram_side")?;
        let wsos_residual = lines.expect_f64("wsos_residual")?;
        let identity_residual = lines.expect_f64("identity_residual")?;
        let (ln, kdims) = lines.expect_key("K")?;
        let dims: Vec<usize> = kdims
            .split_whitespace()
            .filter_map(|p| p.parse().ok())
            .collect();
        if dims.len() != 2 {
            return Err(ParseError::Malformed {
                line: ln,
                msg: "bad K dims".into(),
            }
            .into());
        }
        let mut k_gain = DMatrix::zeros(dims[0], dims[1]);
        for r in 0..dims[0] {
            let vals = lines.expect_f64_row(dims[1])?;
            for c in 0..dims[1] {
                k_gain[(r, c)] = vals[c];
            }
        }
        let dlen = lines.expect_usize("d")?;
        let d_scaling = if dlen > 0 {
            Some(lines.expect_f64_row(dlen)?)
        } else {
            None
        };
        Ok(Certificate {
            scheme,
            order,
            extended,
            status,
            lambda,
            certified,
            k_gain,
            d_scaling,
            s_matrix: None,
            m_solved: Vec::new(),
            max_gram_side,
            wsos_residual,
            identity_residual,
            solver_iterations: 0,
            primal_residual: 0.0,
            gap: 0.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        make_fixed_radius_bounds, simulate, ChanceSpec, InputPolicy, NoiseSampler, Plant,
    };
    use crate::polyalg::Assignment;
    use nalgebra::{dmatrix, dvector};

    fn noiseless_data(plant: &Plant, t_len: usize, seed: u64) -> TrajectoryData {
        let x0 = DVector::from_element(plant.state_dim(), 1.0);
        simulate(
            plant,
            t_len,
            &x0,
            &InputPolicy::Gaussian { amplitude: 1.0 },
            &NoiseSampler::None,
            seed,
        )
        .unwrap()
    }

    use nalgebra::DVector;

    #[test]
    fn inequality_count_is_2f2_plus_f() {
        let reg = VarRegistry::plant_only(2, 2);
        let mut builder = ProgramBuilder::new(reg);
        let (_, ineqs) = superstab_inequalities(
            &mut builder,
            &DMatrix::identity(2, 2),
            Objective::MinimizeLambda,
            1,
        )
        .unwrap();
        assert_eq!(ineqs.len(), 2 * 4 + 2);
    }

    #[test]
    fn scalar_case_reduces_to_abs_bounds() {
        // n = f = 1, W = 1, B = 0 data: inequalities are lambda - M >= 0
        // and M -+ a >= 0, i.e. lambda >= |a|
        let reg = VarRegistry::plant_only(1, 1);
        let mut builder = ProgramBuilder::new(reg);
        let (skel, ineqs) = superstab_inequalities(
            &mut builder,
            &DMatrix::identity(1, 1),
            Objective::MinimizeLambda,
            1,
        )
        .unwrap();
        assert_eq!(ineqs.len(), 3);
        // evaluate at a = 0.7, M = 0.7 (coefficients: constant term only),
        // K = anything with B = 0 contributes B_00*K_00 monomials
        let mut pt = Assignment::for_registry(&builder.reg);
        for i in 0..builder.reg.len() {
            pt.set(crate::polyalg::VarId(i as u32), 0.0);
        }
        pt.set(builder.reg.a_var(0, 0), 0.7);
        if let Some(l) = skel.lambda {
            pt.set(l, 0.9);
        }
        // M constant coefficient is the first declared M var
        let m_const = skel.m_polys[0][0]
            .terms()
            .next()
            .map(|(mono, _)| mono.factors().next().unwrap().0)
            .unwrap();
        pt.set(m_const, 0.7);
        let vals: Vec<f64> = ineqs
            .iter()
            .map(|q| q.q.eval_in(&pt, &builder.reg).unwrap())
            .collect();
        // row: 0.9 - 0.7; abs+: 0.7 - 0.7; abs-: 0.7 + 0.7
        assert!((vals[0] - 0.2).abs() < 1e-12);
        assert!(vals[1].abs() < 1e-12);
        assert!((vals[2] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn closed_loop_polynomials_reproduce_the_example_decay() {
        // evaluating W(A+BK)W^+ at the example plant and gain gives the
        // matrix whose max row sum is 0.8219
        let reg = VarRegistry::plant_only(2, 2);
        let mut builder = ProgramBuilder::new(reg);
        let (skel, ineqs) = superstab_inequalities(
            &mut builder,
            &DMatrix::identity(2, 2),
            Objective::MinimizeLambda,
            1,
        )
        .unwrap();
        let plant = Plant::example_2x2();
        let k_dense = dmatrix![-1.1559, -0.1193; 1.1333, -0.9109];
        let mut pt = Assignment::for_registry(&builder.reg);
        for i in 0..builder.reg.len() {
            pt.set(crate::polyalg::VarId(i as u32), 0.0);
        }
        for i in 0..2 {
            for j in 0..2 {
                pt.set(builder.reg.a_var(i, j), plant.a[(i, j)]);
                pt.set(builder.reg.b_var(i, j), plant.b[(i, j)]);
                pt.set(skel.k_vars[i][j], k_dense[(i, j)]);
            }
        }
        // abs+[i,j] with M = 0 evaluates to -(A+BK)_ij
        let mut cl = DMatrix::zeros(2, 2);
        for (idx, ineq) in ineqs.iter().enumerate() {
            if let Some(rest) = ineq.label.strip_prefix("abs+[") {
                let nums: Vec<usize> = rest
                    .trim_end_matches(']')
                    .split(',')
                    .map(|v| v.parse().unwrap())
                    .collect();
                let v = ineqs[idx].q.eval_in(&pt, &builder.reg).unwrap();
                cl[(nums[0], nums[1])] = -v;
            }
        }
        let expected = &plant.a + &plant.b * &k_dense;
        assert!((cl.clone() - &expected).norm() < 1e-12);
        let rowmax = cl
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        assert!((rowmax - 0.8219).abs() < 5e-4, "rowmax {rowmax}");
    }

    #[test]
    fn gram_sides_match_the_reported_sizes() {
        // dense 27 / sparse 18 at n = m = 2, k = 1, regardless of T
        let plant = Plant::example_2x2();
        let data = noiseless_data(&plant, 4, 3);
        let noise = make_fixed_radius_bounds(2, 2, 0.1, 0.1, 4).unwrap();
        for (scheme, side) in [(Scheme::AltDense, 27), (Scheme::AltSparse, 18)] {
            let cfg = SynthesisConfig {
                scheme,
                ..SynthesisConfig::default()
            };
            let sp = build_alternatives_program(&data, &noise, &cfg).unwrap();
            assert_eq!(sp.max_gram_side, side, "{}", scheme.name());
        }
        // full at T = 14, k = 1: 63 = C(63, 1) basis over 62 variables
        let data14 = noiseless_data(&plant, 14, 3);
        let noise14 = make_fixed_radius_bounds(2, 2, 0.1416, 0.1062, 14).unwrap();
        let cfg = SynthesisConfig {
            scheme: Scheme::Full,
            ..SynthesisConfig::default()
        };
        let sp = build_full_program(&data14, &noise14, &cfg).unwrap();
        assert_eq!(sp.max_gram_side, 63);
    }

    #[test]
    fn full_scheme_k2_is_refused_at_2016() {
        let plant = Plant::example_2x2();
        let data = noiseless_data(&plant, 14, 3);
        let noise = make_fixed_radius_bounds(2, 2, 0.1416, 0.1062, 14).unwrap();
        let cfg = SynthesisConfig {
            scheme: Scheme::Full,
            order: 2,
            ..SynthesisConfig::default()
        };
        let err = build_full_program(&data, &noise, &cfg).unwrap_err();
        match err {
            SynthesisError::GramCapExceeded { side, cap, .. } => {
                assert_eq!(side, 2016);
                assert_eq!(cap, 3000);
            }
            other => panic!("unexpected error {other}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("2016") && msg.contains("3000"), "{msg}");
    }

    #[test]
    fn table_sizes_at_order_two() {
        let r = gram_size_report(2, 2, 12, 2, 2, 2 * 12 - 1, 0);
        assert_eq!(r.p_full, 1540);
        assert_eq!(r.p_dense, 135);
        assert_eq!(r.p_sparse, 90);
        assert_eq!(r.mult_full, 1);
        assert_eq!(r.mult_dense, 46);
        assert_eq!(r.mult_sparse, 46);
        // appendix variant with a 2-dimensional process channel at T = 12
        let rw = gram_size_report(2, 2, 12, 2, 2, 2 * 12 - 1, 2);
        assert_eq!(rw.p_full, 1653); // C(58, 2)
    }

    #[test]
    fn nominal_scalar_instance_cancels_exactly() {
        // A = 0.5, B = 1, noise-free: lambda* = 0 with K = -0.5
        let plant = Plant::new(dmatrix![0.5], dmatrix![1.0]);
        let data = noiseless_data(&plant, 6, 5);
        let noise = make_fixed_radius_bounds(1, 1, 1e-8, 1e-8, 6).unwrap();
        for scheme in [Scheme::AltDense, Scheme::AltSparse] {
            let cfg = SynthesisConfig {
                scheme,
                backend: "clarabel".to_string(),
                ..SynthesisConfig::default()
            };
            let sp = build_alternatives_program(&data, &noise, &cfg).unwrap();
            let sol = sp.solve(&cfg.backend, &cfg.solve).unwrap();
            let cert = extract_certificate(&sp, &sol).unwrap();
            assert!(
                cert.lambda.abs() < 1e-4,
                "{}: lambda {}",
                scheme.name(),
                cert.lambda
            );
            assert!(
                (cert.k_gain[(0, 0)] + 0.5).abs() < 1e-3,
                "{}: K {}",
                scheme.name(),
                cert.k_gain[(0, 0)]
            );
            assert!(cert.certified);
            assert!(cert.wsos_residual < 1e-6, "wsos {}", cert.wsos_residual);
            assert!(cert.identity_residual < 1e-6, "eq {}", cert.identity_residual);
        }
    }

    #[test]
    fn chisq_specialization_matches_generic_at_unit_radii() {
        // unit quantile: coverage delta with chi2 quantile exactly 1
        let plant = Plant::example_2x2();
        let data = noiseless_data(&plant, 3, 9);
        let delta = 1.0 - (-0.5f64).exp(); // P(chi2_2 <= 1)
        let spec = ChanceSpec {
            sigma_x: DMatrix::identity(2, 2),
            sigma_u: DMatrix::identity(2, 2),
            delta_x: delta,
            delta_u: delta,
            p_joint: 0.0,
        };
        assert!((crate::dataset::chi2_radius(delta, 2).unwrap() - 1.0).abs() < 1e-9);
        let cfg = SynthesisConfig {
            prior: Prior::Fixed(50.0),
            ..SynthesisConfig::default()
        };
        let general = build_alternatives_program(
            &data,
            &make_fixed_radius_bounds(2, 2, 1.0, 1.0, 3).unwrap(),
            &cfg,
        )
        .unwrap();
        let specialized = build_alternatives_chisq(&data, &spec, &cfg).unwrap();
        // identical equality systems up to floating-point roundtrip of the
        // unit quantile: compare structure exactly, coefficients to 1e-12
        let (g, s) = (&general.program, &specialized.program);
        assert_eq!(g.cones, s.cones);
        assert_eq!(g.c, s.c);
        assert_eq!(g.b, s.b);
        assert_eq!(g.a.rows.len(), s.a.rows.len());
        for (rg, rs) in g.a.rows.iter().zip(&s.a.rows) {
            assert_eq!(rg.len(), rs.len());
            for (&(cg, vg), &(cs, vs)) in rg.iter().zip(rs) {
                assert_eq!(cg, cs);
                assert!((vg - vs).abs() <= 1e-12 * vg.abs().max(1.0), "{vg} vs {vs}");
            }
        }
    }

    #[test]
    fn process_noise_degenerates_to_plain_assembly() {
        let plant = Plant::example_2x2();
        let data = noiseless_data(&plant, 4, 13);
        let mut noise = make_fixed_radius_bounds(2, 2, 0.2, 0.2, 4).unwrap();
        let plain = build_alternatives_program(&data, &noise, &SynthesisConfig::default()).unwrap();
        // zero E channel, zero H blocks
        noise.n_w = 1;
        for blk in &mut noise.blocks {
            blk.h = DMatrix::zeros(blk.rows(), 3);
        }
        let cfg = SynthesisConfig {
            process_e: Some(DMatrix::zeros(2, 1)),
            ..SynthesisConfig::default()
        };
        let degenerate = build_alternatives_program(&data, &noise, &cfg).unwrap();
        assert_eq!(plain.program.dump(), degenerate.program.dump());

        // full scheme: same byte equality
        let mut noise4 = make_fixed_radius_bounds(2, 2, 0.2, 0.2, 4).unwrap();
        let cfg_plain = SynthesisConfig {
            scheme: Scheme::Full,
            ..SynthesisConfig::default()
        };
        let plain_full = build_full_program(&data, &noise4, &cfg_plain).unwrap();
        noise4.n_w = 1;
        for blk in &mut noise4.blocks {
            blk.h = DMatrix::zeros(blk.rows(), 3);
        }
        let cfg_full = SynthesisConfig {
            scheme: Scheme::Full,
            process_e: Some(DMatrix::zeros(2, 1)),
            ..SynthesisConfig::default()
        };
        let degen_full = build_full_program(&data, &noise4, &cfg_full).unwrap();
        assert_eq!(plain_full.program.dump(), degen_full.program.dump());
    }

    #[test]
    fn process_noise_small_case_equality_block() {
        // n_w = 1, T = 2: the extra identity is E' mu_1 - sum H_l' s_l = 0,
        // checked against hand expansion via the recorded polynomials
        let plant = Plant::new(dmatrix![0.5], dmatrix![1.0])
            .with_process_channel(dmatrix![2.0]);
        let x0 = dvector![1.0];
        let data = simulate(
            &plant,
            2,
            &x0,
            &InputPolicy::Gaussian { amplitude: 1.0 },
            &NoiseSampler::None,
            3,
        )
        .unwrap();
        let mut noise = make_fixed_radius_bounds(1, 1, 0.5, 0.5, 2).unwrap();
        noise.n_w = 1;
        for blk in &mut noise.blocks {
            blk.h = DMatrix::from_element(1, 1, 0.25);
        }
        let cfg = SynthesisConfig {
            process_e: Some(dmatrix![2.0]),
            ..SynthesisConfig::default()
        };
        let sp = build_alternatives_program(&data, &noise, &cfg).unwrap();
        let w_rows: Vec<&(String, Poly)> = sp
            .eq_records
            .iter()
            .filter(|(l, _)| l.contains("w-eq"))
            .collect();
        // one w-equality per inequality (3 inequalities at n = m = f = 1)
        assert_eq!(w_rows.len(), 3);
        // E' mu has coefficient 2 on every mu coefficient monomial
        for (_, p) in &w_rows {
            assert!(!p.is_zero());
        }
    }

    #[test]
    fn extended_diagonal_contraction_is_feasible() {
        // B = 0, A = diag(0.4, 0.6): S = 0, d = 1 certifies
        let plant = Plant::new(dmatrix![0.4, 0.0; 0.0, 0.6], DMatrix::zeros(2, 1));
        let data = noiseless_data(&plant, 6, 21);
        let noise = make_fixed_radius_bounds(2, 1, 1e-6, 1e-6, 6).unwrap();
        let cfg = SynthesisConfig {
            extended: true,
            ..SynthesisConfig::default()
        };
        let sp = build_extended_program(&data, &noise, &cfg).unwrap();
        let sol = sp.solve(&cfg.backend, &cfg.solve).unwrap();
        let cert = extract_certificate(&sp, &sol).unwrap();
        assert!(cert.certified, "status {:?}", cert.status);
        let d = cert.d_scaling.as_ref().unwrap();
        assert!(d.iter().all(|&v| v > 0.0));
        // K = S diag(d)^-1 and the scaled closed loop contracts
        let w = DMatrix::from_diagonal(&DVector::from_iterator(2, d.iter().map(|v| 1.0 / v)));
        let decay = crate::verify::decay_bound(&plant, &cert.k_gain, &w).unwrap();
        assert!(decay < 1.0, "decay {decay}");
    }

    #[test]
    fn extended_inequalities_are_scale_invariant() {
        // scaling (S, d, M) by c > 0 preserves the inequality values' sign
        let reg = VarRegistry::plant_only(2, 2);
        let mut builder = ProgramBuilder::new(reg);
        let (skel, ineqs) =
            extended_inequalities(&mut builder, Objective::Feasibility { eta: 0.0 }, 1, 0.0, 0.0)
                .unwrap();
        let mut base = Assignment::for_registry(&builder.reg);
        for i in 0..builder.reg.len() {
            base.set(crate::polyalg::VarId(i as u32), 0.0);
        }
        // a random-ish evaluation point
        base.set(builder.reg.a_var(0, 0), 0.3);
        base.set(builder.reg.a_var(1, 1), -0.2);
        base.set(builder.reg.b_var(0, 0), 0.8);
        for (i, row) in skel.s_vars.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                base.set(v, 0.1 * (i as f64 + 1.0) - 0.05 * j as f64);
            }
        }
        for (i, &v) in skel.d_vars.iter().enumerate() {
            base.set(v, 1.0 + i as f64 * 0.5);
        }
        let m_vars: Vec<crate::polyalg::VarId> = skel
            .m_polys
            .iter()
            .flatten()
            .flat_map(|p| {
                p.terms()
                    .flat_map(|(mono, _)| mono.factors().map(|(v, _)| v))
                    .filter(|v| builder.reg.is_decision(*v))
                    .collect::<Vec<_>>()
            })
            .collect();
        for (idx, &v) in m_vars.iter().enumerate() {
            base.set(v, 0.01 * (idx % 7) as f64);
        }
        let scale = 3.7;
        let mut scaled = base.clone();
        for row in &skel.s_vars {
            for &v in row {
                scaled.set(v, base.get(v).unwrap() * scale);
            }
        }
        for &v in &skel.d_vars {
            scaled.set(v, base.get(v).unwrap() * scale);
        }
        for &v in &m_vars {
            scaled.set(v, base.get(v).unwrap() * scale);
        }
        for ineq in &ineqs {
            let v0 = ineq.q.eval_in(&base, &builder.reg).unwrap();
            let v1 = ineq.q.eval_in(&scaled, &builder.reg).unwrap();
            assert!((v1 - scale * v0).abs() < 1e-9, "{}", ineq.label);
        }
    }

    #[test]
    fn certificate_text_roundtrip() {
        let cert = Certificate {
            scheme: Scheme::AltDense,
            order: 1,
            extended: false,
            status: SolveStatus::Optimal,
            lambda: 0.93,
            certified: true,
            k_gain: dmatrix![-1.0, 0.5; 0.25, -0.75],
            d_scaling: None,
            s_matrix: None,
            m_solved: Vec::new(),
            max_gram_side: 27,
            wsos_residual: 1e-9,
            identity_residual: 2e-9,
            solver_iterations: 17,
            primal_residual: 1e-10,
            gap: 1e-9,
        };
        let text = cert.to_text(Some("generated test"));
        let back = Certificate::from_text(&text).unwrap();
        assert_eq!(back.scheme, cert.scheme);
        assert_eq!(back.lambda, cert.lambda);
        assert_eq!(back.k_gain, cert.k_gain);
        assert!(back.certified);
    }

    #[test]
    fn infeasible_program_passes_through() {
        // eta > 1 makes every row sum 1 - eta < 0 unreachable with M
        // dominating |A| on a plant with large least-squares norm; use a
        // feasibility objective with an impossible budget
        let plant = Plant::new(dmatrix![5.0], dmatrix![0.0]);
        let data = noiseless_data(&plant, 5, 2);
        let noise = make_fixed_radius_bounds(1, 1, 1e-6, 1e-6, 5).unwrap();
        let cfg = SynthesisConfig {
            objective: Objective::Feasibility { eta: 0.5 },
            ..SynthesisConfig::default()
        };
        let sp = build_alternatives_program(&data, &noise, &cfg).unwrap();
        let sol = sp.solve(&cfg.backend, &cfg.solve).unwrap();
        let cert = extract_certificate(&sp, &sol).unwrap();
        assert!(!cert.certified);
        assert!(matches!(
            cert.status,
            SolveStatus::Infeasible | SolveStatus::NumericalFailure
        ));
    }
}
