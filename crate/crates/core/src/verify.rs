//! Independent certificate verification: decay-bound computation, a convex
//! membership oracle for the consistency set, sampling of data-consistent
//! plants, and Monte Carlo studies.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::conic::{
    solve_with, Cone, ConeKind, ConicError, ConicProgram, SolveOptions, SolveStatus, SparseRows,
};
use crate::dataset::{
    make_fixed_radius_bounds, simulate, InputPolicy, NoiseModel, NoiseSampler, Plant,
    TrajectoryData,
};
use crate::synthesis::{
    build_program, extract_certificate, pseudo_inverse, Certificate, Scheme, SynthesisConfig,
    SynthesisError,
};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("W must have full column rank")]
    RankDeficientW,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

/// Max absolute row sum of W (A + B K) W^+, the certified contraction rate
/// of the polyhedral Lyapunov function ||W x||_inf.
pub fn decay_bound(
    plant: &Plant,
    k_gain: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<f64, VerifyError> {
    if k_gain.nrows() != plant.input_dim() || k_gain.ncols() != plant.state_dim() {
        return Err(VerifyError::Dimension(format!(
            "K is {}x{}, expected {}x{}",
            k_gain.nrows(),
            k_gain.ncols(),
            plant.input_dim(),
            plant.state_dim()
        )));
    }
    let w_pinv = pseudo_inverse(w).map_err(|_| VerifyError::RankDeficientW)?;
    let acl = &plant.a + &plant.b * k_gain;
    let wcl = w * acl * w_pinv;
    Ok(wcl
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// Outcome of a consistency-set membership query.
#[derive(Debug, Clone)]
pub struct MembershipResult {
    pub feasible: bool,
    /// Smallest max-block-norm achievable; feasible iff <= 1 (+tol).
    pub best_norm: f64,
    /// Slack 1 - best_norm when feasible, deficit best_norm - 1 otherwise.
    pub margin: f64,
    pub witness: Option<(DVector<f64>, DVector<f64>, Option<DVector<f64>>)>,
}

/// For a fixed candidate (A, B) the consistency conditions are convex in
/// the noise: a conic feasibility over zero and second-order cones. Solves
/// min t s.t. dynamics equalities hold and every block norm is <= t; the
/// candidate is data-consistent iff the optimum is <= 1.
pub fn membership_oracle(
    candidate: &Plant,
    data: &TrajectoryData,
    noise: &NoiseModel,
    opts: &SolveOptions,
) -> Result<MembershipResult, VerifyError> {
    let (n, m, t_len) = (data.n, data.m, data.t_len);
    if candidate.state_dim() != n || candidate.input_dim() != m {
        return Err(VerifyError::Dimension(
            "candidate dimensions do not match the data".into(),
        ));
    }
    let n_w = noise.n_w;
    if n_w > 0 && candidate.e.as_ref().map_or(true, |e| e.ncols() != n_w) {
        return Err(VerifyError::Dimension(
            "noise model expects a process channel the candidate lacks".into(),
        ));
    }

    // layout: [dx (nT), du (m(T-1)), w (n_w (T-1)), t] free, then one SOC
    // block (t, F dx + G du + H w) per noise constraint
    let nx = n * t_len;
    let nu = m * (t_len - 1);
    let nw = n_w * (t_len - 1);
    let t_col = nx + nu + nw;
    let free_len = t_col + 1;
    let mut cones = vec![Cone::new(ConeKind::Free, free_len)];
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut b = Vec::new();

    // dynamics: A dx_t + B du_t + E w_t - dx_{t+1} = -h0_t(A, B)
    for t in 0..t_len - 1 {
        for i in 0..n {
            let mut row = Vec::new();
            for j in 0..n {
                row.push((t * n + j, candidate.a[(i, j)]));
            }
            row.push(((t + 1) * n + i, -1.0));
            for j in 0..m {
                row.push((nx + t * m + j, candidate.b[(i, j)]));
            }
            if let Some(e) = &candidate.e {
                for j in 0..n_w {
                    if e[(i, j)] != 0.0 {
                        row.push((nx + nu + t * n_w + j, e[(i, j)]));
                    }
                }
            }
            let h0 = data.xhat[(t + 1, i)]
                - (0..n)
                    .map(|j| candidate.a[(i, j)] * data.xhat[(t, j)])
                    .sum::<f64>()
                - (0..m)
                    .map(|j| candidate.b[(i, j)] * data.uhat[(t, j)])
                    .sum::<f64>();
            rows.push(row);
            b.push(-h0);
        }
    }

    let mut col = free_len;
    for blk in &noise.blocks {
        let d = blk.rows() + 1;
        cones.push(Cone::new(ConeKind::Soc, d));
        // head = t
        rows.push(vec![(col, 1.0), (t_col, -1.0)]);
        b.push(0.0);
        for r in 0..blk.rows() {
            let mut row = vec![(col + 1 + r, 1.0)];
            for c in 0..blk.f.ncols() {
                if blk.f[(r, c)] != 0.0 {
                    row.push((c, -blk.f[(r, c)]));
                }
            }
            for c in 0..blk.g.ncols() {
                if blk.g[(r, c)] != 0.0 {
                    row.push((nx + c, -blk.g[(r, c)]));
                }
            }
            for c in 0..blk.h.ncols() {
                if blk.h[(r, c)] != 0.0 {
                    row.push((nx + nu + c, -blk.h[(r, c)]));
                }
            }
            rows.push(row);
            b.push(0.0);
        }
        col += d;
    }

    let mut c = vec![0.0; col];
    c[t_col] = 1.0;
    let prog = ConicProgram {
        c,
        a: SparseRows { rows },
        b,
        cones,
        var_names: Vec::new(),
    };
    let sol = solve_with("reference", &prog, opts)?;
    if !matches!(
        sol.status,
        SolveStatus::Optimal | SolveStatus::NearOptimal
    ) {
        return Err(VerifyError::Conic(ConicError::Numerical(format!(
            "membership solve ended with {:?}",
            sol.status
        ))));
    }
    let best = sol.obj;
    let feasible = best <= 1.0 + 1e-7;
    let witness = if feasible {
        let dx = DVector::from_column_slice(&sol.x[..nx]);
        let du = DVector::from_column_slice(&sol.x[nx..nx + nu]);
        let w = if nw > 0 {
            Some(DVector::from_column_slice(&sol.x[nx + nu..nx + nu + nw]))
        } else {
            None
        };
        Some((dx, du, w))
    } else {
        None
    };
    Ok(MembershipResult {
        feasible,
        best_norm: best,
        margin: 1.0 - best,
        witness,
    })
}

/// Sampling statistics for [`sample_consistent_plants`].
#[derive(Debug, Clone)]
pub struct SampleStats {
    pub requested: usize,
    pub accepted: usize,
    pub proposals: usize,
    pub final_step: f64,
}

/// Proposes plants by perturbing the least-squares estimate with shrinking
/// Gaussian steps and keeps those the membership oracle accepts.
pub fn sample_consistent_plants(
    data: &TrajectoryData,
    noise: &NoiseModel,
    count: usize,
    seed: u64,
    workers: usize,
) -> Result<(Vec<Plant>, SampleStats), VerifyError> {
    let (a_ls, b_ls) = crate::synthesis::least_squares_plant(data);
    let (n, m) = (data.n, data.m);
    let opts = SolveOptions::default();
    let mut accepted: Vec<Plant> = Vec::with_capacity(count);
    let mut proposals = 0usize;
    let mut step = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // the LS center itself is usually consistent; try it first
    let center = Plant::new(a_ls.clone(), b_ls.clone());
    if membership_oracle(&center, data, noise, &opts)?.feasible {
        accepted.push(center);
    }
    proposals += 1;

    let max_rounds = 40;
    for _round in 0..max_rounds {
        if accepted.len() >= count {
            break;
        }
        let batch = (count - accepted.len()).max(4).min(32);
        let cands: Vec<Plant> = (0..batch)
            .map(|_| {
                let da = DMatrix::from_fn(n, n, |_, _| {
                    let g: f64 = rng.sample(StandardNormal);
                    g * step
                });
                let db = DMatrix::from_fn(n, m, |_, _| {
                    let g: f64 = rng.sample(StandardNormal);
                    g * step
                });
                Plant::new(&a_ls + da, &b_ls + db)
            })
            .collect();
        proposals += batch;
        let results = crate::par::map_indexed(cands.len(), workers, |i| {
            membership_oracle(&cands[i], data, noise, &opts)
                .map(|r| r.feasible)
                .unwrap_or(false)
        });
        let before = accepted.len();
        for (cand, ok) in cands.into_iter().zip(results) {
            if ok && accepted.len() < count {
                accepted.push(cand);
            }
        }
        if accepted.len() == before {
            step *= 0.6; // nothing accepted: shrink toward the LS center
            if step < 1e-5 {
                break;
            }
        }
    }
    let stats = SampleStats {
        requested: count,
        accepted: accepted.len(),
        proposals,
        final_step: step,
    };
    Ok((accepted, stats))
}

/// Protocol for a Monte Carlo robust-stabilization study.
#[derive(Debug, Clone)]
pub struct McProtocol {
    pub n: usize,
    pub m: usize,
    pub t_len: usize,
    /// Uniform-ball noise radii used both to corrupt the data and as the
    /// per-sample bounds handed to synthesis.
    pub eps_x: f64,
    pub eps_u: f64,
    pub input_amplitude: f64,
    /// (scheme, extended) pairs to run per trial.
    pub schemes: Vec<(Scheme, bool)>,
    pub order: usize,
    pub backend: String,
}

impl Default for McProtocol {
    fn default() -> Self {
        // mirrors the randomized 2-state 2-input experiment
        McProtocol {
            n: 2,
            m: 2,
            t_len: 14,
            eps_x: 0.225,
            eps_u: 0.1,
            input_amplitude: 1.0,
            schemes: vec![(Scheme::AltDense, false), (Scheme::AltSparse, false)],
            order: 1,
            backend: "clarabel".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub extended: bool,
    pub lambda: f64,
    pub certified: bool,
    /// Ground-truth closed-loop decay under the extracted gain.
    pub gt_decay: f64,
    pub gt_stabilized: bool,
    /// Certified and the realized noise obeys the bounds, but the true
    /// closed loop is not superstable: must never happen.
    pub soundness_violation: bool,
    pub solve_ms: u128,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub trials: usize,
    pub outcomes: Vec<TrialOutcome>,
}

impl StudyReport {
    pub fn tally(&self) -> Vec<(String, usize, usize, f64, f64)> {
        let mut keys: Vec<(Scheme, bool)> = Vec::new();
        for o in &self.outcomes {
            if !keys.contains(&(o.scheme, o.extended)) {
                keys.push((o.scheme, o.extended));
            }
        }
        keys.iter()
            .map(|&(scheme, extended)| {
                let rows: Vec<&TrialOutcome> = self
                    .outcomes
                    .iter()
                    .filter(|o| o.scheme == scheme && o.extended == extended)
                    .collect();
                let certified = rows.iter().filter(|o| o.certified).count();
                let stabilized = rows.iter().filter(|o| o.gt_stabilized).count();
                let lambdas: Vec<f64> = rows
                    .iter()
                    .filter(|o| o.certified)
                    .map(|o| o.lambda)
                    .collect();
                let mean_lambda = if lambdas.is_empty() {
                    f64::NAN
                } else {
                    lambdas.iter().sum::<f64>() / lambdas.len() as f64
                };
                let mean_ms = rows.iter().map(|o| o.solve_ms as f64).sum::<f64>()
                    / rows.len().max(1) as f64;
                let name = if extended {
                    format!("{}+ext", scheme.name())
                } else {
                    scheme.name().to_string()
                };
                (name, certified, stabilized, mean_lambda, mean_ms)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# quadstab monte-carlo report v1\n");
        out.push_str(&format!("trials {}\n", self.trials));
        out.push_str("scheme certified gt_stable mean_lambda mean_solve_ms\n");
        for (name, certified, stabilized, mean_lambda, mean_ms) in self.tally() {
            out.push_str(&format!(
                "{name} {certified} {stabilized} {mean_lambda:.6} {mean_ms:.1}\n"
            ));
        }
        out.push_str("trial seed scheme lambda certified gt_decay violation error\n");
        for o in &self.outcomes {
            out.push_str(&format!(
                "{} {} {} {:.6} {} {:.6} {} {}\n",
                o.trial,
                o.seed,
                if o.extended {
                    format!("{}+ext", o.scheme.name())
                } else {
                    o.scheme.name().to_string()
                },
                o.lambda,
                o.certified,
                o.gt_decay,
                o.soundness_violation,
                o.error.as_deref().unwrap_or("-")
            ));
        }
        out
    }
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(trial as u64 + 1)
}

/// Runs `trials` independent randomized synthesis trials; failures are
/// logged per trial and never abort the study. The tally is merged by
/// trial index, so worker count does not change the report.
pub fn monte_carlo_study(
    protocol: &McProtocol,
    trials: usize,
    seed: u64,
    workers: usize,
) -> StudyReport {
    let per_trial: Vec<Vec<TrialOutcome>> = crate::par::map_indexed(trials, workers, |trial| {
        let tseed = trial_seed(seed, trial);
        let mut rng = ChaCha8Rng::seed_from_u64(tseed);
        let plant = Plant::new(
            DMatrix::from_fn(protocol.n, protocol.n, |_, _| rng.sample(StandardNormal)),
            DMatrix::from_fn(protocol.n, protocol.m, |_, _| rng.sample(StandardNormal)),
        );
        let x0 = DVector::from_fn(protocol.n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = match simulate(
            &plant,
            protocol.t_len,
            &x0,
            &InputPolicy::Gaussian {
                amplitude: protocol.input_amplitude,
            },
            &NoiseSampler::UniformBall {
                eps_x: protocol.eps_x,
                eps_u: protocol.eps_u,
            },
            tseed.wrapping_add(1),
        ) {
            Ok(d) => d,
            Err(e) => {
                return protocol
                    .schemes
                    .iter()
                    .map(|&(scheme, extended)| TrialOutcome {
                        trial,
                        seed: tseed,
                        scheme,
                        extended,
                        lambda: f64::INFINITY,
                        certified: false,
                        gt_decay: f64::INFINITY,
                        gt_stabilized: false,
                        soundness_violation: false,
                        solve_ms: 0,
                        error: Some(format!("simulation: {e}")),
                    })
                    .collect();
            }
        };
        let noise =
            make_fixed_radius_bounds(protocol.n, protocol.m, protocol.eps_x, protocol.eps_u, protocol.t_len)
                .expect("radii positive");
        protocol
            .schemes
            .iter()
            .map(|&(scheme, extended)| {
                let cfg = SynthesisConfig {
                    scheme,
                    extended,
                    order: protocol.order,
                    backend: protocol.backend.clone(),
                    ..SynthesisConfig::default()
                };
                let started = std::time::Instant::now();
                let run = || -> Result<Certificate, SynthesisError> {
                    let sp = build_program(&data, &noise, &cfg)?;
                    let sol = sp.solve(&cfg.backend, &cfg.solve)?;
                    extract_certificate(&sp, &sol)
                };
                match run() {
                    Ok(cert) => {
                        let w = match &cert.d_scaling {
                            Some(d) => DMatrix::from_diagonal(&DVector::from_iterator(
                                d.len(),
                                d.iter().map(|v| 1.0 / v),
                            )),
                            None => DMatrix::identity(protocol.n, protocol.n),
                        };
                        let gt_decay =
                            decay_bound(&plant, &cert.k_gain, &w).unwrap_or(f64::INFINITY);
                        let gt_stabilized = cert.certified && gt_decay < 1.0;
                        // extended certificates bound the decay by 1, not by lambda
                        let bound = if extended { 1.0 } else { cert.lambda };
                        let soundness_violation = cert.certified && gt_decay > bound + 1e-3;
                        TrialOutcome {
                            trial,
                            seed: tseed,
                            scheme,
                            extended,
                            lambda: cert.lambda,
                            certified: cert.certified,
                            gt_decay,
                            gt_stabilized,
                            soundness_violation,
                            solve_ms: started.elapsed().as_millis(),
                            error: None,
                        }
                    }
                    Err(e) => TrialOutcome {
                        trial,
                        seed: tseed,
                        scheme,
                        extended,
                        lambda: f64::INFINITY,
                        certified: false,
                        gt_decay: f64::INFINITY,
                        gt_stabilized: false,
                        soundness_violation: false,
                        solve_ms: started.elapsed().as_millis(),
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    StudyReport {
        trials,
        outcomes: per_trial.into_iter().flatten().collect(),
    }
}

/// Directly solved finite superstabilization LP for a single known plant:
/// min lambda s.t. sum_j M_ij <= lambda, |[W(A+BK)W^+]_ij| <= M_ij.
/// Independent oracle for the nominal (noise-free) limit of the schemes.
pub fn nominal_superstab_lp(plant: &Plant, w: &DMatrix<f64>) -> Result<f64, VerifyError> {
    let n = plant.state_dim();
    let m = plant.input_dim();
    let f = w.nrows();
    let w_pinv = pseudo_inverse(w).map_err(|_| VerifyError::RankDeficientW)?;
    let waw = w * &plant.a * &w_pinv;
    let wb = w * &plant.b;
    // columns: [lambda, K (m*n col-major), M (f*f col-major)] free,
    // then 2 f^2 + f nonneg slacks
    let n_free = 1 + m * n + f * f;
    let k_col = |p: usize, q: usize| 1 + q * m + p;
    let m_col = |i: usize, j: usize| 1 + m * n + j * f + i;
    let mut rows = Vec::new();
    let mut b = Vec::new();
    let mut slack = n_free;
    for i in 0..f {
        for j in 0..f {
            // (W B K W^+)_ij = sum_{p,q} wb[i,p] K[p,q] w_pinv[q,j]
            let mut base: Vec<(usize, f64)> = Vec::new();
            for p in 0..m {
                for q in 0..n {
                    let coef = wb[(i, p)] * w_pinv[(q, j)];
                    if coef != 0.0 {
                        base.push((k_col(p, q), coef));
                    }
                }
            }
            // M_ij - cl_ij - s+ = waw_ij ; M_ij + cl_ij - s- = -waw_ij
            let mut row_p = vec![(m_col(i, j), 1.0), (slack, -1.0)];
            row_p.extend(base.iter().map(|&(c, v)| (c, -v)));
            rows.push(row_p);
            b.push(waw[(i, j)]);
            slack += 1;
            let mut row_m = vec![(m_col(i, j), 1.0), (slack, -1.0)];
            row_m.extend(base.iter().copied());
            rows.push(row_m);
            b.push(-waw[(i, j)]);
            slack += 1;
        }
    }
    for i in 0..f {
        let mut row = vec![(0, 1.0), (slack, -1.0)];
        for j in 0..f {
            row.push((m_col(i, j), -1.0));
        }
        rows.push(row);
        b.push(0.0);
        slack += 1;
    }
    let total = slack;
    let mut c = vec![0.0; total];
    c[0] = 1.0;
    let prog = ConicProgram {
        c,
        a: SparseRows { rows },
        b,
        cones: vec![
            Cone::new(ConeKind::Free, n_free),
            Cone::new(ConeKind::NonNeg, total - n_free),
        ],
        var_names: Vec::new(),
    };
    let sol = solve_with("reference", &prog, &SolveOptions::default())?;
    if !matches!(sol.status, SolveStatus::Optimal | SolveStatus::NearOptimal) {
        return Err(VerifyError::Conic(ConicError::Numerical(format!(
            "nominal LP ended with {:?}",
            sol.status
        ))));
    }
    Ok(sol.obj)
}
