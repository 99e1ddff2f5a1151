//! Trajectory generation and ingestion: noisy rollouts, the residuals h0,
//! the Xi matrix, and quadratic noise-constraint data (F, G, H blocks),
//! including chi-square chance radii and energy bounds.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::polyalg::{Poly, PolyMatrix, VarRegistry};
use crate::textio::{fmt_row, Lines, ParseError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("simulation diverged at step {step}: non-finite state (open-loop blowup?)")]
    Diverged { step: usize },
    #[error("covariance is singular or not positive definite")]
    SingularCovariance,
    #[error("matrix is not positive semidefinite (eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("coverage probability must lie strictly inside (0,1), got {0}")]
    BadCoverage(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// A candidate (A, B) pair, optionally with a process-noise channel E.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: Option<DMatrix<f64>>,
}

impl Plant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "A must be square");
        assert_eq!(a.nrows(), b.nrows(), "B row count must match A");
        Plant { a, b, e: None }
    }

    pub fn with_process_channel(mut self, e: DMatrix<f64>) -> Self {
        assert_eq!(e.nrows(), self.a.nrows());
        self.e = Some(e);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// The 2-state 2-input example plant used throughout the test suite.
    pub fn example_2x2() -> Self {
        Plant::new(
            nalgebra::dmatrix![0.6863, 0.3968; 0.3456, 1.0388],
            nalgebra::dmatrix![0.4170, 0.0001; 0.7203, 0.3023],
        )
    }
}

/// Everything the generator knew: clean signals, realized noise, seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub plant: Plant,
    pub x_clean: DMatrix<f64>,
    pub u_clean: DMatrix<f64>,
    pub dx: DMatrix<f64>,
    pub du: DMatrix<f64>,
    pub w: Option<DMatrix<f64>>,
    pub seed: u64,
    pub sampler: String,
}

/// Observed sequences; rows are time samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryData {
    pub n: usize,
    pub m: usize,
    pub t_len: usize,
    /// T x n observed states.
    pub xhat: DMatrix<f64>,
    /// (T-1) x m observed inputs.
    pub uhat: DMatrix<f64>,
    pub ground_truth: Option<GroundTruth>,
}

impl TrajectoryData {
    pub fn xhat_at(&self, t: usize) -> DVector<f64> {
        self.xhat.row(t).transpose()
    }

    pub fn uhat_at(&self, t: usize) -> DVector<f64> {
        self.uhat.row(t).transpose()
    }
}

/// How exploration inputs are drawn during simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum InputPolicy {
    Zero,
    /// i.i.d. standard Gaussian inputs scaled by `amplitude`.
    Gaussian { amplitude: f64 },
}

/// Measurement-noise distribution for the rollout.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSampler {
    None,
    /// dx_t ~ N(0, sigma_x^2 I), du_t ~ N(0, sigma_u^2 I).
    Gaussian { sigma_x: f64, sigma_u: f64 },
    /// dx_t, du_t drawn uniformly from L2 balls of the given radii.
    UniformBall { eps_x: f64, eps_u: f64 },
}

impl NoiseSampler {
    fn tag(&self) -> String {
        match self {
            NoiseSampler::None => "none".into(),
            NoiseSampler::Gaussian { sigma_x, sigma_u } => {
                format!("gaussian {sigma_x} {sigma_u}")
            }
            NoiseSampler::UniformBall { eps_x, eps_u } => format!("uniform-ball {eps_x} {eps_u}"),
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let g: f64 = rng.sample(StandardNormal);
        g * sigma
    })
}

fn uniform_ball_vec(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    // direction from a Gaussian, length from the radial cdf
    let g = gaussian_vec(rng, dim, 1.0);
    let norm = g.norm();
    if norm == 0.0 {
        return DVector::zeros(dim);
    }
    let u: f64 = rng.gen_range(0.0..1.0f64);
    let r = radius * u.powf(1.0 / dim as f64);
    g * (r / norm)
}

/// Rolls the plant out for `t_len` samples and corrupts the observations.
/// Identical seeds reproduce identical data bit-for-bit.
pub fn simulate(
    plant: &Plant,
    t_len: usize,
    x0: &DVector<f64>,
    policy: &InputPolicy,
    sampler: &NoiseSampler,
    seed: u64,
) -> Result<TrajectoryData, DatasetError> {
    assert!(t_len >= 2, "horizon must cover at least two samples");
    let n = plant.state_dim();
    let m = plant.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut u_clean = DMatrix::zeros(t_len - 1, m);
    for t in 0..t_len - 1 {
        let u = match policy {
            InputPolicy::Zero => DVector::zeros(m),
            InputPolicy::Gaussian { amplitude } => gaussian_vec(&mut rng, m, *amplitude),
        };
        u_clean.row_mut(t).copy_from(&u.transpose());
    }

    let n_w = plant.e.as_ref().map_or(0, |e| e.ncols());
    let w = if n_w > 0 {
        // unit-variance process noise through the E channel
        let mut wm = DMatrix::zeros(t_len - 1, n_w);
        for t in 0..t_len - 1 {
            wm.row_mut(t)
                .copy_from(&gaussian_vec(&mut rng, n_w, 1.0).transpose());
        }
        Some(wm)
    } else {
        None
    };

    let mut x_clean = DMatrix::zeros(t_len, n);
    x_clean.row_mut(0).copy_from(&x0.transpose());
    for t in 0..t_len - 1 {
        let xt = x_clean.row(t).transpose();
        let ut = u_clean.row(t).transpose();
        let mut next = &plant.a * xt + &plant.b * ut;
        if let (Some(e), Some(wm)) = (&plant.e, &w) {
            next += e * wm.row(t).transpose();
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Diverged { step: t + 1 });
        }
        x_clean.row_mut(t + 1).copy_from(&next.transpose());
    }

    let mut dx = DMatrix::zeros(t_len, n);
    let mut du = DMatrix::zeros(t_len - 1, m);
    match sampler {
        NoiseSampler::None => {}
        NoiseSampler::Gaussian { sigma_x, sigma_u } => {
            for t in 0..t_len {
                dx.row_mut(t)
                    .copy_from(&gaussian_vec(&mut rng, n, *sigma_x).transpose());
            }
            for t in 0..t_len - 1 {
                du.row_mut(t)
                    .copy_from(&gaussian_vec(&mut rng, m, *sigma_u).transpose());
            }
        }
        NoiseSampler::UniformBall { eps_x, eps_u } => {
            for t in 0..t_len {
                dx.row_mut(t)
                    .copy_from(&uniform_ball_vec(&mut rng, n, *eps_x).transpose());
            }
            for t in 0..t_len - 1 {
                du.row_mut(t)
                    .copy_from(&uniform_ball_vec(&mut rng, m, *eps_u).transpose());
            }
        }
    }

    Ok(TrajectoryData {
        n,
        m,
        t_len,
        xhat: &x_clean + &dx,
        uhat: &u_clean + &du,
        ground_truth: Some(GroundTruth {
            plant: plant.clone(),
            x_clean,
            u_clean,
            dx,
            du,
            w,
            seed,
            sampler: sampler.tag(),
        }),
    })
}

/// Residuals h0_t = xhat_{t+1} - A xhat_t - B uhat_t as n-vectors of
/// polynomials affine in (A, B), for t = 0..T-2.
pub fn residual_poly(data: &TrajectoryData, reg: &VarRegistry) -> Vec<PolyMatrix> {
    let n = data.n;
    let m = data.m;
    let mut out = Vec::with_capacity(data.t_len - 1);
    for t in 0..data.t_len - 1 {
        let mut h = PolyMatrix::zeros(n, 1);
        for i in 0..n {
            let mut p = Poly::constant(data.xhat[(t + 1, i)]);
            for j in 0..n {
                let c = -data.xhat[(t, j)];
                if c != 0.0 {
                    p = p.add(&Poly::var(reg.a_var(i, j)).scale(c));
                }
            }
            for j in 0..m {
                let c = -data.uhat[(t, j)];
                if c != 0.0 {
                    p = p.add(&Poly::var(reg.b_var(i, j)).scale(c));
                }
            }
            h.set_entry(i, 0, p);
        }
        out.push(h);
    }
    out
}

/// Xi = [(I_{T-1} (x) A), 0] + [0, -I_{n(T-1)}], shape n(T-1) x nT.
pub fn build_xi(reg: &VarRegistry, n: usize, t_len: usize) -> PolyMatrix {
    let rows = n * (t_len - 1);
    let cols = n * t_len;
    let mut xi = PolyMatrix::zeros(rows, cols);
    for t in 0..t_len - 1 {
        for i in 0..n {
            for j in 0..n {
                xi.set_entry(t * n + i, t * n + j, Poly::var(reg.a_var(i, j)));
            }
            xi.set_entry(t * n + i, (t + 1) * n + i, Poly::constant(-1.0));
        }
    }
    xi
}

/// Regularized lower incomplete gamma P(a, x), series for x < a+1 and
/// continued fraction otherwise.
fn gammp(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    let gln = ln_gamma(a);
    if x < a + 1.0 {
        // series expansion
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - gln).exp()
    } else {
        // Lentz continued fraction for Q(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = (-x + a * x.ln() - gln).exp() * h;
        1.0 - q
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7
    const COF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COF[0];
    for (i, &c) in COF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Square root of the chi-square quantile at cumulative probability
/// `coverage` with `f` degrees of freedom, found by bisection on the
/// regularized incomplete gamma to 1e-10.
pub fn chi2_radius(coverage: f64, f: usize) -> Result<f64, DatasetError> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(DatasetError::BadCoverage(coverage));
    }
    let a = f as f64 / 2.0;
    let cdf = |q: f64| gammp(a, q / 2.0);
    let mut hi = 1.0;
    while cdf(hi) < coverage {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(DatasetError::BadCoverage(coverage));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < coverage {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 * hi.max(1.0) {
            break;
        }
    }
    // Newton polish on the cdf; the chi-square density is analytic
    let mut q = 0.5 * (lo + hi);
    for _ in 0..4 {
        let pdf = ((a - 1.0) * (q / 2.0).ln() - q / 2.0 - ln_gamma(a)).exp() / 2.0;
        if !pdf.is_finite() || pdf <= 0.0 {
            break;
        }
        let step = (cdf(q) - coverage) / pdf;
        let next = q - step;
        if next > 0.0 && next.is_finite() {
            q = next;
        } else {
            break;
        }
    }
    Ok(q.sqrt())
}

/// Per-sample chance-constraint description for Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ChanceSpec {
    pub sigma_x: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
    pub delta_x: f64,
    pub delta_u: f64,
    pub p_joint: f64,
}

impl ChanceSpec {
    /// Isotropic spec at the joint coverage target: per-sample coverages are
    /// p_joint^{1/(2T-1)} for both channels.
    pub fn isotropic(
        n: usize,
        m: usize,
        sigma_x: f64,
        sigma_u: f64,
        p_joint: f64,
        t_len: usize,
    ) -> Self {
        let delta = p_joint.powf(1.0 / (2 * t_len - 1) as f64);
        ChanceSpec {
            sigma_x: DMatrix::identity(n, n) * sigma_x * sigma_x,
            sigma_u: DMatrix::identity(m, m) * sigma_u * sigma_u,
            delta_x: delta,
            delta_u: delta,
            p_joint,
        }
    }

    /// sqrt(eps(delta_x; n)), the per-sample whitened state radius.
    pub fn state_radius(&self, n: usize) -> Result<f64, DatasetError> {
        chi2_radius(self.delta_x, n)
    }

    pub fn input_radius(&self, m: usize) -> Result<f64, DatasetError> {
        chi2_radius(self.delta_u, m)
    }
}

/// Energy-bound description:
/// J = dx_T' Q_T dx_T + sum_t (dx_t' Q dx_t + du_t' R du_t) <= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_t: DMatrix<f64>,
}

/// One quadratic constraint ||F dx + G du + H w||_2 <= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBlock {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl NoiseBlock {
    pub fn rows(&self) -> usize {
        self.f.nrows()
    }
}

/// The L quadratic noise constraints; H blocks have zero columns when no
/// process noise is modeled.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub blocks: Vec<NoiseBlock>,
    pub n: usize,
    pub m: usize,
    pub t_len: usize,
    pub n_w: usize,
}

impl NoiseModel {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// ||F dx + G du + H w|| per block, on stacked time-major noise vectors.
    pub fn block_norms(
        &self,
        dx: &DVector<f64>,
        du: &DVector<f64>,
        w: Option<&DVector<f64>>,
    ) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|blk| {
                let mut v = &blk.f * dx + &blk.g * du;
                if let Some(w) = w {
                    if blk.h.ncols() > 0 {
                        v += &blk.h * w;
                    }
                }
                v.norm()
            })
            .collect()
    }

    pub fn is_satisfied(
        &self,
        dx: &DVector<f64>,
        du: &DVector<f64>,
        w: Option<&DVector<f64>>,
        tol: f64,
    ) -> bool {
        self.block_norms(dx, du, w).iter().all(|&r| r <= 1.0 + tol)
    }
}

/// Stacks a trajectory's recorded noise into time-major vectors.
pub fn stack_noise(gt: &GroundTruth) -> (DVector<f64>, DVector<f64>, Option<DVector<f64>>) {
    let flatten = |m: &DMatrix<f64>| {
        DVector::from_iterator(
            m.nrows() * m.ncols(),
            m.row_iter()
                .flat_map(|r| r.iter().copied().collect::<Vec<_>>()),
        )
    };
    (
        flatten(&gt.dx),
        flatten(&gt.du),
        gt.w.as_ref().map(flatten),
    )
}

fn inv_sqrt_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, DatasetError> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&ev| ev <= 0.0) {
        return Err(DatasetError::SingularCovariance);
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|ev| 1.0 / ev.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, DatasetError> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let floor = -1e-10;
    if let Some(&ev) = eig.eigenvalues.iter().find(|&&ev| ev < floor) {
        return Err(DatasetError::NotPsd(ev));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|ev| ev.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Elementwise (per-sample) noise bounds: L = 2T-1 blocks. State blocks
/// come first (t = 0..T-1), then input blocks (t = 0..T-2); each block is
/// F = Sigma^{-1/2}/r placed at its sample's columns, unit right-hand side.
pub fn make_elementwise_bounds(
    sigma_x: &DMatrix<f64>,
    sigma_u: &DMatrix<f64>,
    radius_x: f64,
    radius_u: f64,
    t_len: usize,
) -> Result<NoiseModel, DatasetError> {
    assert!(radius_x > 0.0 && radius_u > 0.0, "radii must be positive");
    let n = sigma_x.nrows();
    let m = sigma_u.nrows();
    let fx = inv_sqrt_pd(sigma_x)? / radius_x;
    let fu = inv_sqrt_pd(sigma_u)? / radius_u;
    let mut blocks = Vec::with_capacity(2 * t_len - 1);
    for t in 0..t_len {
        let mut f = DMatrix::zeros(n, n * t_len);
        f.view_mut((0, t * n), (n, n)).copy_from(&fx);
        blocks.push(NoiseBlock {
            f,
            g: DMatrix::zeros(n, m * (t_len - 1)),
            h: DMatrix::zeros(n, 0),
        });
    }
    for t in 0..t_len - 1 {
        let mut g = DMatrix::zeros(m, m * (t_len - 1));
        g.view_mut((0, t * m), (m, m)).copy_from(&fu);
        blocks.push(NoiseBlock {
            f: DMatrix::zeros(m, n * t_len),
            g,
            h: DMatrix::zeros(m, 0),
        });
    }
    Ok(NoiseModel {
        blocks,
        n,
        m,
        t_len,
        n_w: 0,
    })
}

/// Fixed per-sample radii with identity covariance shape.
pub fn make_fixed_radius_bounds(
    n: usize,
    m: usize,
    eps_x: f64,
    eps_u: f64,
    t_len: usize,
) -> Result<NoiseModel, DatasetError> {
    make_elementwise_bounds(
        &DMatrix::identity(n, n),
        &DMatrix::identity(m, m),
        eps_x,
        eps_u,
        t_len,
    )
}

/// Chance-constraint bounds from a [`ChanceSpec`]: radii are the
/// chi-square quantile roots for the per-sample coverages.
pub fn make_chance_bounds(spec: &ChanceSpec, t_len: usize) -> Result<NoiseModel, DatasetError> {
    let n = spec.sigma_x.nrows();
    let m = spec.sigma_u.nrows();
    make_elementwise_bounds(
        &spec.sigma_x,
        &spec.sigma_u,
        spec.state_radius(n)?,
        spec.input_radius(m)?,
        t_len,
    )
}

/// Single energy block: F stacks sqrt(Q) per time and sqrt(Q_T) at T,
/// G stacks sqrt(R); then ||F dx + G du||^2 equals the cost J.
pub fn make_energy_bound(
    spec: &EnergySpec,
    n: usize,
    m: usize,
    t_len: usize,
) -> Result<NoiseModel, DatasetError> {
    let sq = sqrt_psd(&spec.q)?;
    let sr = sqrt_psd(&spec.r)?;
    let sqt = sqrt_psd(&spec.q_t)?;
    if sq.nrows() != n || sqt.nrows() != n || sr.nrows() != m {
        return Err(DatasetError::Dimension(
            "energy spec dimensions do not match (n, m)".into(),
        ));
    }
    let rows = n * t_len + m * (t_len - 1);
    let mut f = DMatrix::zeros(rows, n * t_len);
    let mut g = DMatrix::zeros(rows, m * (t_len - 1));
    let mut r0 = 0;
    for t in 0..t_len - 1 {
        f.view_mut((r0, t * n), (n, n)).copy_from(&sq);
        r0 += n;
    }
    f.view_mut((r0, (t_len - 1) * n), (n, n)).copy_from(&sqt);
    r0 += n;
    for t in 0..t_len - 1 {
        g.view_mut((r0, t * m), (m, m)).copy_from(&sr);
        r0 += m;
    }
    Ok(NoiseModel {
        blocks: vec![NoiseBlock {
            f,
            g,
            h: DMatrix::zeros(rows, 0),
        }],
        n,
        m,
        t_len,
        n_w: 0,
    })
}

/// A trajectory bundled with its noise description; the unit of exchange
/// between the generate and synthesize commands.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: TrajectoryData,
    pub noise: NoiseModel,
}

fn write_matrix(out: &mut String, key: &str, m: &DMatrix<f64>) {
    out.push_str(&format!("{key} {} {}\n", m.nrows(), m.ncols()));
    for r in m.row_iter() {
        out.push_str(&fmt_row(r.iter().copied()));
        out.push('\n');
    }
}

fn read_matrix(lines: &mut Lines, key: &str) -> Result<DMatrix<f64>, ParseError> {
    let (ln, dims) = lines.expect_key(key)?;
    let parts: Vec<usize> = dims
        .split_whitespace()
        .filter_map(|p| p.parse().ok())
        .collect();
    if parts.len() != 2 {
        return Err(ParseError::Malformed {
            line: ln,
            msg: format!("bad matrix dims `{dims}`"),
        });
    }
    let (rows, cols) = (parts[0], parts[1]);
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let vals = lines.expect_f64_row(cols)?;
        for c in 0..cols {
            m[(r, c)] = vals[c];
        }
    }
    Ok(m)
}

impl Dataset {
    /// Serializes to the dataset text format. The generation timestamp, if
    /// any, is confined to a comment header line supplied by the caller.
    pub fn to_text(&self, header_comment: Option<&str>) -> String {
        let d = &self.data;
        let mut out = String::new();
        out.push_str("# quadstab dataset v1\n");
        if let Some(h) = header_comment {
            out.push_str(&format!("# {h}\n"));
        }
        out.push_str(&format!("n {}\n", d.n));
        out.push_str(&format!("m {}\n", d.m));
        out.push_str(&format!("T {}\n", d.t_len));
        write_matrix(&mut out, "xhat", &d.xhat);
        write_matrix(&mut out, "uhat", &d.uhat);
        let nm = &self.noise;
        out.push_str(&format!("noise_model {} {}\n", nm.num_blocks(), nm.n_w));
        for blk in &nm.blocks {
            write_matrix(&mut out, "F", &blk.f);
            write_matrix(&mut out, "G", &blk.g);
            if nm.n_w > 0 {
                write_matrix(&mut out, "H", &blk.h);
            }
        }
        match &d.ground_truth {
            None => out.push_str("ground_truth absent\n"),
            Some(gt) => {
                out.push_str("ground_truth present\n");
                out.push_str(&format!("seed {}\n", gt.seed));
                out.push_str(&format!("sampler {}\n", gt.sampler));
                write_matrix(&mut out, "A", &gt.plant.a);
                write_matrix(&mut out, "B", &gt.plant.b);
                match &gt.plant.e {
                    Some(e) => write_matrix(&mut out, "E", e),
                    None => out.push_str("E 0 0\n"),
                }
                write_matrix(&mut out, "x_clean", &gt.x_clean);
                write_matrix(&mut out, "u_clean", &gt.u_clean);
                write_matrix(&mut out, "dx", &gt.dx);
                write_matrix(&mut out, "du", &gt.du);
                match &gt.w {
                    Some(w) => write_matrix(&mut out, "w", w),
                    None => out.push_str("w 0 0\n"),
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let mut lines = Lines::new(text);
        let n = lines.expect_usize("n")?;
        let m = lines.expect_usize("m")?;
        let t_len = lines.expect_usize("T")?;
        let xhat = read_matrix(&mut lines, "xhat")?;
        let uhat = read_matrix(&mut lines, "uhat")?;
        let (ln, nm_spec) = lines.expect_key("noise_model")?;
        let parts: Vec<usize> = nm_spec
            .split_whitespace()
            .filter_map(|p| p.parse().ok())
            .collect();
        if parts.len() != 2 {
            return Err(ParseError::Malformed {
                line: ln,
                msg: format!("bad noise_model header `{nm_spec}`"),
            }
            .into());
        }
        let (num_blocks, n_w) = (parts[0], parts[1]);
        let mut blocks = Vec::with_capacity(num_blocks);
        for _ in 0..num_blocks {
            let f = read_matrix(&mut lines, "F")?;
            let g = read_matrix(&mut lines, "G")?;
            let h = if n_w > 0 {
                read_matrix(&mut lines, "H")?
            } else {
                DMatrix::zeros(f.nrows(), 0)
            };
            blocks.push(NoiseBlock { f, g, h });
        }
        let (_, gt_tag) = lines.expect_key("ground_truth")?;
        let ground_truth = if gt_tag == "present" {
            let seed = lines.expect_usize("seed")? as u64;
            let (_, sampler) = lines.expect_key("sampler")?;
            let sampler = sampler.to_string();
            let a = read_matrix(&mut lines, "A")?;
            let b = read_matrix(&mut lines, "B")?;
            let e = read_matrix(&mut lines, "E")?;
            let x_clean = read_matrix(&mut lines, "x_clean")?;
            let u_clean = read_matrix(&mut lines, "u_clean")?;
            let dx = read_matrix(&mut lines, "dx")?;
            let du = read_matrix(&mut lines, "du")?;
            let w = read_matrix(&mut lines, "w")?;
            let mut plant = Plant::new(a, b);
            if e.nrows() > 0 {
                plant = plant.with_process_channel(e);
            }
            Some(GroundTruth {
                plant,
                x_clean,
                u_clean,
                dx,
                du,
                w: if w.nrows() > 0 { Some(w) } else { None },
                seed,
                sampler,
            })
        } else {
            None
        };
        Ok(Dataset {
            data: TrajectoryData {
                n,
                m,
                t_len,
                xhat,
                uhat,
                ground_truth,
            },
            noise: NoiseModel {
                blocks,
                n,
                m,
                t_len,
                n_w,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyalg::Assignment;

    fn assign_plant(reg: &VarRegistry, plant: &Plant) -> Assignment {
        let mut pt = Assignment::for_registry(reg);
        let n = plant.state_dim();
        let m = plant.input_dim();
        for i in 0..n {
            for j in 0..n {
                pt.set(reg.a_var(i, j), plant.a[(i, j)]);
            }
        }
        for i in 0..n {
            for j in 0..m {
                pt.set(reg.b_var(i, j), plant.b[(i, j)]);
            }
        }
        pt
    }

    #[test]
    fn zero_plant_zero_noise_gives_zero_tail() {
        let plant = Plant::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2));
        let x0 = nalgebra::dvector![1.0, -2.0];
        let data = simulate(
            &plant,
            5,
            &x0,
            &InputPolicy::Gaussian { amplitude: 1.0 },
            &NoiseSampler::None,
            3,
        )
        .unwrap();
        for t in 1..5 {
            assert_eq!(data.xhat.row(t).norm(), 0.0);
        }
        let gt = data.ground_truth.as_ref().unwrap();
        assert_eq!(data.xhat, gt.x_clean);
    }

    #[test]
    fn noiseless_example_plant_satisfies_residual_identity() {
        let plant = Plant::example_2x2();
        let x0 = nalgebra::dvector![1.0, 1.0];
        let data = simulate(
            &plant,
            8,
            &x0,
            &InputPolicy::Gaussian { amplitude: 1.0 },
            &NoiseSampler::None,
            11,
        )
        .unwrap();
        for t in 0..7 {
            let r = data.xhat_at(t + 1) - &plant.a * data.xhat_at(t) - &plant.b * data.uhat_at(t);
            assert!(r.norm() < 1e-12);
        }
    }

    #[test]
    fn identical_seed_reproduces_identical_data() {
        let plant = Plant::example_2x2();
        let x0 = nalgebra::dvector![0.5, -0.5];
        let run = || {
            simulate(
                &plant,
                14,
                &x0,
                &InputPolicy::Gaussian { amplitude: 1.0 },
                &NoiseSampler::Gaussian {
                    sigma_x: 0.04,
                    sigma_u: 0.03,
                },
                42,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gaussian_sampler_hits_requested_std() {
        // empirical per-coordinate std within 5% over 10^4+ samples
        let plant = Plant::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2));
        let x0 = nalgebra::dvector![0.0, 0.0];
        let mut sx = Vec::new();
        let mut su = Vec::new();
        for seed in 0..700 {
            let data = simulate(
                &plant,
                9,
                &x0,
                &InputPolicy::Zero,
                &NoiseSampler::Gaussian {
                    sigma_x: 0.04,
                    sigma_u: 0.03,
                },
                seed,
            )
            .unwrap();
            let gt = data.ground_truth.unwrap();
            sx.extend(gt.dx.iter().copied());
            su.extend(gt.du.iter().copied());
        }
        let std = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!(sx.len() >= 10_000);
        assert!((std(&sx) / 0.04 - 1.0).abs() < 0.05, "std_x = {}", std(&sx));
        assert!((std(&su) / 0.03 - 1.0).abs() < 0.05, "std_u = {}", std(&su));
    }

    #[test]
    fn divergence_is_reported() {
        let plant = Plant::new(DMatrix::identity(1, 1) * 1e200, DMatrix::zeros(1, 1));
        let x0 = nalgebra::dvector![1.0];
        let err =
            simulate(&plant, 4, &x0, &InputPolicy::Zero, &NoiseSampler::None, 0).unwrap_err();
        assert!(matches!(err, DatasetError::Diverged { .. }));
    }

    #[test]
    fn residual_poly_matches_numeric_oracle() {
        let plant = Plant::example_2x2();
        let x0 = nalgebra::dvector![1.0, -1.0];
        let data = simulate(
            &plant,
            6,
            &x0,
            &InputPolicy::Gaussian { amplitude: 1.0 },
            &NoiseSampler::Gaussian {
                sigma_x: 0.1,
                sigma_u: 0.1,
            },
            7,
        )
        .unwrap();
        let reg = VarRegistry::plant_only(2, 2);
        let h = residual_poly(&data, &reg);
        let cand = Plant::new(
            nalgebra::dmatrix![0.3, -0.2; 0.8, 0.1],
            nalgebra::dmatrix![1.0, 0.4; -0.3, 0.2],
        );
        let pt = assign_plant(&reg, &cand);
        for (t, ht) in h.iter().enumerate() {
            let got = ht.eval(&pt, &reg).unwrap();
            let want =
                data.xhat_at(t + 1) - &cand.a * data.xhat_at(t) - &cand.b * data.uhat_at(t);
            assert!((got.column(0) - want).norm() < 1e-12);
        }

        // noiseless data evaluated at the generating plant: identically zero
        let clean = simulate(
            &plant,
            6,
            &x0,
            &InputPolicy::Gaussian { amplitude: 1.0 },
            &NoiseSampler::None,
            9,
        )
        .unwrap();
        let hc = residual_poly(&clean, &reg);
        let pt = assign_plant(&reg, &plant);
        for ht in &hc {
            assert!(ht.eval(&pt, &reg).unwrap().norm() < 1e-12);
        }

        // identically zero data: zero polynomials
        let zero = TrajectoryData {
            n: 2,
            m: 2,
            t_len: 3,
            xhat: DMatrix::zeros(3, 2),
            uhat: DMatrix::zeros(2, 2),
            ground_truth: None,
        };
        for ht in residual_poly(&zero, &reg) {
            for i in 0..2 {
                assert!(ht.entry(i, 0).is_zero());
            }
        }
    }

    #[test]
    fn xi_smallest_case_and_banded_structure() {
        let reg = VarRegistry::plant_only(1, 1);
        let xi = build_xi(&reg, 1, 2);
        assert_eq!((xi.nrows(), xi.ncols()), (1, 2));
        assert_eq!(xi.entry(0, 0), &Poly::var(reg.a_var(0, 0)));
        assert_eq!(xi.entry(0, 1), &Poly::constant(-1.0));

        // A = I turns Xi into the banded difference operator [I, -I, 0, ..]
        let reg2 = VarRegistry::plant_only(2, 1);
        let xi2 = build_xi(&reg2, 2, 3);
        let mut pt = Assignment::for_registry(&reg2);
        for i in 0..2 {
            for j in 0..2 {
                pt.set(reg2.a_var(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let num = xi2.eval(&pt, &reg2).unwrap();
        for t in 0..2 {
            for i in 0..2 {
                for j in 0..6 {
                    let want = if j == t * 2 + i {
                        1.0
                    } else if j == (t + 1) * 2 + i {
                        -1.0
                    } else {
                        0.0
                    };
                    assert_eq!(num[(t * 2 + i, j)], want);
                }
            }
        }
    }

    #[test]
    fn consistency_identity_on_noisy_data() {
        // Xi dx + (I (x) B) du + h0(A*, B*) = 0 by construction
        let plant = Plant::example_2x2();
        let x0 = nalgebra::dvector![1.0, 2.0];
        let data = simulate(
            &plant,
            10,
            &x0,
            &InputPolicy::Gaussian { amplitude: 1.0 },
            &NoiseSampler::Gaussian {
                sigma_x: 0.04,
                sigma_u: 0.03,
            },
            5,
        )
        .unwrap();
        let gt = data.ground_truth.as_ref().unwrap();
        let (dx, du, _) = stack_noise(gt);
        let reg = VarRegistry::plant_only(2, 2);
        let pt = assign_plant(&reg, &plant);
        let xi = build_xi(&reg, 2, 10).eval(&pt, &reg).unwrap();
        let h = residual_poly(&data, &reg);
        let mut resid = xi * dx;
        for t in 0..9 {
            let r = &plant.b * du.rows(t * 2, 2) + h[t].eval(&pt, &reg).unwrap().column(0);
            for i in 0..2 {
                resid[t * 2 + i] += r[i];
            }
        }
        assert!(resid.norm() < 1e-10, "residual {}", resid.norm());
    }

    #[test]
    fn chi2_radius_reference_values() {
        // closed form for f = 2: sqrt(-2 ln(1 - coverage))
        for cov in [0.5, 0.9, 0.9981] {
            let got = chi2_radius(cov, 2).unwrap();
            let want = (-2.0 * (1.0 - cov).ln()).sqrt();
            assert!((got - want).abs() < 1e-9, "cov {cov}: {got} vs {want}");
        }
        // the worked example: radii 0.1416 and 0.1062
        let delta = 0.95f64.powf(1.0 / 27.0);
        let r = chi2_radius(delta, 2).unwrap();
        assert!((0.04 * r - 0.1416).abs() < 1e-3);
        assert!((0.03 * r - 0.1062).abs() < 1e-3);
        assert!((r - 3.5399).abs() < 1e-3);
        // f = 1 against the two-sided normal quantile
        let r1 = chi2_radius(0.95, 1).unwrap();
        assert!((r1 - 1.9600).abs() < 5e-4, "{r1}");
        // coverage -> 0+ gives radius -> 0
        assert!(chi2_radius(1e-12, 2).unwrap() < 1e-5);
        assert!(chi2_radius(0.0, 2).is_err());
        assert!(chi2_radius(1.0, 2).is_err());
    }

    #[test]
    fn elementwise_bounds_match_raw_inequalities() {
        let t_len = 14;
        let delta = 0.95f64.powf(1.0 / 27.0);
        let r = chi2_radius(delta, 2).unwrap();
        let nm = make_fixed_radius_bounds(2, 2, 0.04 * r, 0.03 * r, t_len).unwrap();
        assert_eq!(nm.num_blocks(), 27);
        for blk in &nm.blocks {
            assert_eq!(blk.rows(), 2);
        }
        // F block is I/0.1416 (state) and G block is I/0.1062 (input)
        assert!((nm.blocks[0].f[(0, 0)] - 1.0 / 0.1416).abs() < 0.01);
        assert!((nm.blocks[t_len].g[(0, 0)] - 1.0 / 0.1062).abs() < 0.01);

        let tiny = make_fixed_radius_bounds(2, 2, 0.1, 0.1, 2).unwrap();
        assert_eq!(tiny.num_blocks(), 3);

        // membership iff all raw per-sample norms hold
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let dx = DVector::from_fn(2 * t_len, |_, _| rng.gen_range(-0.1..0.1));
            let du = DVector::from_fn(2 * (t_len - 1), |_, _| rng.gen_range(-0.1..0.1));
            let raw_ok = (0..t_len).all(|t| dx.rows(2 * t, 2).norm() <= 0.04 * r)
                && (0..t_len - 1).all(|t| du.rows(2 * t, 2).norm() <= 0.03 * r);
            assert_eq!(nm.is_satisfied(&dx, &du, None, 0.0), raw_ok);
        }
    }

    #[test]
    fn chance_coverage_matches_target() {
        // fraction of Gaussian samples satisfying one per-sample bound
        let delta = 0.95f64.powf(1.0 / 27.0);
        let r = 0.04 * chi2_radius(delta, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let trials = 100_000;
        let mut hits = 0usize;
        for _ in 0..trials {
            let g = gaussian_vec(&mut rng, 2, 0.04);
            if g.norm() <= r {
                hits += 1;
            }
        }
        let frac = hits as f64 / trials as f64;
        assert!((frac - delta).abs() < 0.005, "coverage {frac} vs {delta}");
    }

    #[test]
    fn energy_bound_is_the_quadratic_form() {
        let t_len = 5;
        let (n, m) = (2, 2);
        // identity choices: J = ||dx||^2 + ||du||^2
        let spec = EnergySpec {
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(m, m),
            q_t: DMatrix::identity(n, n),
        };
        let nm = make_energy_bound(&spec, n, m, t_len).unwrap();
        assert_eq!(nm.num_blocks(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dx = DVector::from_fn(n * t_len, |_, _| rng.gen_range(-1.0..1.0));
        let du = DVector::from_fn(m * (t_len - 1), |_, _| rng.gen_range(-1.0..1.0));
        let r0 = nm.block_norms(&dx, &du, None)[0];
        assert!((r0 * r0 - (dx.norm_squared() + du.norm_squared())).abs() < 1e-10);

        // only input energy constrained
        let spec2 = EnergySpec {
            q: DMatrix::zeros(n, n),
            r: DMatrix::identity(m, m),
            q_t: DMatrix::zeros(n, n),
        };
        let nm2 = make_energy_bound(&spec2, n, m, t_len).unwrap();
        let r2 = nm2.block_norms(&dx, &du, None)[0];
        assert!((r2 * r2 - du.norm_squared()).abs() < 1e-10);

        // random PSD triple: quadratic-form oracle
        let rand_psd = |rng: &mut ChaCha8Rng, d: usize| {
            let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            &a * a.transpose()
        };
        let spec3 = EnergySpec {
            q: rand_psd(&mut rng, n),
            r: rand_psd(&mut rng, m),
            q_t: rand_psd(&mut rng, n),
        };
        let nm3 = make_energy_bound(&spec3, n, m, t_len).unwrap();
        let r3 = nm3.block_norms(&dx, &du, None)[0];
        let mut j = dx
            .rows((t_len - 1) * n, n)
            .dot(&(&spec3.q_t * dx.rows((t_len - 1) * n, n)));
        for t in 0..t_len - 1 {
            j += dx.rows(t * n, n).dot(&(&spec3.q * dx.rows(t * n, n)));
            j += du.rows(t * m, m).dot(&(&spec3.r * du.rows(t * m, m)));
        }
        assert!((r3 * r3 - j).abs() < 1e-10);

        // PSD violation is rejected
        let bad = EnergySpec {
            q: -DMatrix::identity(n, n),
            r: DMatrix::identity(m, m),
            q_t: DMatrix::identity(n, n),
        };
        assert!(make_energy_bound(&bad, n, m, t_len).is_err());
    }

    #[test]
    fn recorded_noise_satisfies_residual_recursion() {
        // dx_{t+1} = A* dx_t + B* du_t + h0_t(A*, B*) for simulated data
        let plant = Plant::example_2x2();
        let x0 = nalgebra::dvector![0.3, -0.7];
        let data = simulate(
            &plant,
            12,
            &x0,
            &InputPolicy::Gaussian { amplitude: 1.0 },
            &NoiseSampler::Gaussian {
                sigma_x: 0.04,
                sigma_u: 0.03,
            },
            77,
        )
        .unwrap();
        let reg = VarRegistry::plant_only(2, 2);
        let pt = assign_plant(&reg, &plant);
        let h = residual_poly(&data, &reg);
        let gt = data.ground_truth.as_ref().unwrap();
        for t in 0..11 {
            let lhs = gt.dx.row(t + 1).transpose();
            let rhs = &plant.a * gt.dx.row(t).transpose()
                + &plant.b * gt.du.row(t).transpose()
                + h[t].eval(&pt, &reg).unwrap().column(0);
            assert!((lhs - rhs).norm() < 1e-10);
        }
    }

    #[test]
    fn dataset_text_roundtrip() {
        let plant = Plant::example_2x2();
        let x0 = nalgebra::dvector![1.0, 0.0];
        let data = simulate(
            &plant,
            4,
            &x0,
            &InputPolicy::Gaussian { amplitude: 1.0 },
            &NoiseSampler::Gaussian {
                sigma_x: 0.04,
                sigma_u: 0.03,
            },
            99,
        )
        .unwrap();
        let noise = make_fixed_radius_bounds(2, 2, 0.14, 0.11, 4).unwrap();
        let ds = Dataset { data, noise };
        let text = ds.to_text(Some("generated 2000-01-01T00:00:00Z"));
        let back = Dataset::from_text(&text).unwrap();
        assert_eq!(back, ds);
        // bytes are stable apart from the header comment
        assert_eq!(back.to_text(None), ds.to_text(None));
    }
}
