//! Standard-form conic programs and the solver backend contract.
//!
//! A program is `min c'x  s.t.  A x = b,  x in K` where `K` is an ordered
//! product of zero, free, nonnegative, second-order and PSD cones. PSD cones
//! of side `d` occupy `d(d+1)/2` scaled lower-triangular coordinates
//! (column-major, off-diagonals multiplied by sqrt(2)); certificate files
//! expose these raw coordinates, so the convention is fixed here.

mod clarabel_backend;
mod proj;
mod reference;

pub use proj::{project_nonneg, project_psd, project_soc};
pub use reference::ReferenceSolver;

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use thiserror::Error;

use crate::textio::{fmt_f64, Lines, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    /// Coordinates pinned to zero.
    Zero,
    /// Unconstrained coordinates.
    Free,
    /// Componentwise nonnegative.
    NonNeg,
    /// Second-order cone `{(t, u) : t >= ||u||_2}`; dimension counts t.
    Soc,
    /// PSD cone of side `d`, stored as d(d+1)/2 scaled triangular coords.
    PsdTri,
}

impl ConeKind {
    fn tag(self) -> &'static str {
        match self {
            ConeKind::Zero => "zero",
            ConeKind::Free => "free",
            ConeKind::NonNeg => "nonneg",
            ConeKind::Soc => "soc",
            ConeKind::PsdTri => "psd",
        }
    }
}

/// One cone in the ordered list. For `PsdTri`, `dim` is the matrix side;
/// all other kinds use `dim` as the coordinate count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cone {
    pub kind: ConeKind,
    pub dim: usize,
}

impl Cone {
    pub fn new(kind: ConeKind, dim: usize) -> Self {
        Cone { kind, dim }
    }

    /// Number of coordinates the cone occupies in `x`.
    pub fn len(&self) -> usize {
        match self.kind {
            ConeKind::PsdTri => self.dim * (self.dim + 1) / 2,
            _ => self.dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sparse row-major equality system.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }

    /// y^T A accumulated into a dense vector of length `n`.
    pub fn tr_mul_vec(&self, y: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (i, row) in self.rows.iter().enumerate() {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for &(j, v) in row {
                out[j] += yi * v;
            }
        }
        out
    }
}

/// Standard-form conic program. `var_names` maps coordinates back to Gram
/// entries and decision scalars for diagnostics and certificate files.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub c: Vec<f64>,
    pub a: SparseRows,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
    pub var_names: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("unknown backend `{requested}`; available: {available}")]
    UnknownBackend { requested: String, available: String },
    #[error("backend `{0}` is already registered")]
    DuplicateBackend(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

impl ConicProgram {
    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        let cone_len: usize = self.cones.iter().map(Cone::len).sum();
        if cone_len != self.c.len() {
            return Err(ConicError::Malformed(format!(
                "cone coordinates sum to {cone_len} but x has length {}",
                self.c.len()
            )));
        }
        if self.a.rows.len() != self.b.len() {
            return Err(ConicError::Malformed(format!(
                "{} rows in A but {} entries in b",
                self.a.rows.len(),
                self.b.len()
            )));
        }
        if !self.var_names.is_empty() && self.var_names.len() != self.c.len() {
            return Err(ConicError::Malformed(
                "variable-name map length differs from x".into(),
            ));
        }
        for (i, row) in self.a.rows.iter().enumerate() {
            for &(j, v) in row {
                if j >= self.c.len() {
                    return Err(ConicError::Malformed(format!(
                        "row {i} references column {j} out of {}",
                        self.c.len()
                    )));
                }
                if !v.is_finite() {
                    return Err(ConicError::Malformed(format!("row {i} has non-finite entry")));
                }
            }
        }
        Ok(())
    }

    /// Largest PSD side in the cone list, 0 if none.
    pub fn max_psd_side(&self) -> usize {
        self.cones
            .iter()
            .filter(|c| c.kind == ConeKind::PsdTri)
            .map(|c| c.dim)
            .max()
            .unwrap_or(0)
    }

    /// Sparse-triplet text dump. Deterministic; no timestamps, so dumps of
    /// identical programs are byte-identical.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        s.push_str("conic-program v1\n");
        s.push_str(&format!(
            "dims {} {} {}\n",
            self.num_vars(),
            self.num_rows(),
            self.cones.len()
        ));
        for cone in &self.cones {
            s.push_str(&format!("cone {} {}\n", cone.kind.tag(), cone.dim));
        }
        s.push_str("c\n");
        for (j, v) in self.c.iter().enumerate() {
            if *v != 0.0 {
                s.push_str(&format!("{j} {}\n", fmt_f64(*v)));
            }
        }
        s.push_str("A\n");
        for (i, row) in self.a.rows.iter().enumerate() {
            for &(j, v) in row {
                s.push_str(&format!("{i} {j} {}\n", fmt_f64(v)));
            }
        }
        s.push_str("b\n");
        for (i, v) in self.b.iter().enumerate() {
            if *v != 0.0 {
                s.push_str(&format!("{i} {}\n", fmt_f64(*v)));
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn load(text: &str) -> Result<Self, ConicError> {
        let mut lines = Lines::new(text);
        let (ln, header) = lines
            .next_line()
            .ok_or_else(|| ParseError::Eof("header".into()))?;
        if header != "conic-program v1" {
            return Err(ParseError::Expected {
                line: ln,
                expected: "conic-program v1".into(),
                found: header.into(),
            }
            .into());
        }
        let (ln, dims) = lines.expect_key("dims")?;
        let parts: Vec<usize> = dims
            .split_whitespace()
            .map(|p| p.parse().unwrap_or(usize::MAX))
            .collect();
        if parts.len() != 3 || parts.contains(&usize::MAX) {
            return Err(ParseError::Malformed {
                line: ln,
                msg: format!("bad dims `{dims}`"),
            }
            .into());
        }
        let (nvars, nrows, ncones) = (parts[0], parts[1], parts[2]);
        let mut cones = Vec::with_capacity(ncones);
        for _ in 0..ncones {
            let (ln, spec) = lines.expect_key("cone")?;
            let mut it = spec.split_whitespace();
            let kind = match it.next() {
                Some("zero") => ConeKind::Zero,
                Some("free") => ConeKind::Free,
                Some("nonneg") => ConeKind::NonNeg,
                Some("soc") => ConeKind::Soc,
                Some("psd") => ConeKind::PsdTri,
                other => {
                    return Err(ParseError::Malformed {
                        line: ln,
                        msg: format!("unknown cone kind {other:?}"),
                    }
                    .into())
                }
            };
            let dim: usize = it
                .next()
                .and_then(|d| d.parse().ok())
                .ok_or(ParseError::Malformed {
                    line: ln,
                    msg: "missing cone dimension".into(),
                })?;
            cones.push(Cone::new(kind, dim));
        }
        let mut c = vec![0.0; nvars];
        let mut a = SparseRows {
            rows: vec![Vec::new(); nrows],
        };
        let mut b = vec![0.0; nrows];
        lines.expect_key("c")?;
        enum Section {
            C,
            A,
            B,
        }
        let mut section = Section::C;
        loop {
            let (ln, line) = lines
                .next_line()
                .ok_or_else(|| ParseError::Eof("end".into()))?;
            match line {
                "A" => {
                    section = Section::A;
                    continue;
                }
                "b" => {
                    section = Section::B;
                    continue;
                }
                "end" => break,
                _ => {}
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || ParseError::Malformed {
                line: ln,
                msg: format!("bad triplet `{line}`"),
            };
            match section {
                Section::C => {
                    if fields.len() != 2 {
                        return Err(bad().into());
                    }
                    let j: usize = fields[0].parse().map_err(|_| bad())?;
                    c[j] = fields[1].parse().map_err(|_| bad())?;
                }
                Section::A => {
                    if fields.len() != 3 {
                        return Err(bad().into());
                    }
                    let i: usize = fields[0].parse().map_err(|_| bad())?;
                    let j: usize = fields[1].parse().map_err(|_| bad())?;
                    let v: f64 = fields[2].parse().map_err(|_| bad())?;
                    a.rows[i].push((j, v));
                }
                Section::B => {
                    if fields.len() != 2 {
                        return Err(bad().into());
                    }
                    let i: usize = fields[0].parse().map_err(|_| bad())?;
                    b[i] = fields[1].parse().map_err(|_| bad())?;
                }
            }
        }
        let prog = ConicProgram {
            c,
            a,
            b,
            cones,
            var_names: Vec::new(),
        };
        prog.validate()?;
        Ok(prog)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NearOptimal,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// Dual multipliers for the equality rows.
    pub y: Vec<f64>,
    pub obj: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol_feas: f64,
    pub tol_gap: f64,
    pub max_iter: usize,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol_feas: 1e-8,
            tol_gap: 1e-8,
            max_iter: 200,
            verbose: false,
        }
    }
}

/// Solver backend contract: deterministic given identical inputs/options,
/// never returns garbage silently (failures carry a status).
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn solve(&self, prog: &ConicProgram, opts: &SolveOptions) -> Result<Solution, ConicError>;
}

fn registry() -> &'static Mutex<BTreeMap<String, Box<dyn Backend>>> {
    static REG: OnceLock<Mutex<BTreeMap<String, Box<dyn Backend>>>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut map: BTreeMap<String, Box<dyn Backend>> = BTreeMap::new();
        map.insert(
            "reference".to_string(),
            Box::new(reference::ReferenceSolver::default()),
        );
        map.insert(
            "clarabel".to_string(),
            Box::new(clarabel_backend::ClarabelBackend),
        );
        Mutex::new(map)
    })
}

/// Registers a backend under a new name.
pub fn backend_register(name: &str, backend: Box<dyn Backend>) -> Result<(), ConicError> {
    let mut reg = registry().lock().unwrap();
    if reg.contains_key(name) {
        return Err(ConicError::DuplicateBackend(name.to_string()));
    }
    reg.insert(name.to_string(), backend);
    Ok(())
}

pub fn backend_names() -> Vec<String> {
    registry().lock().unwrap().keys().cloned().collect()
}

/// Solves with the named backend. `"reference"` and `"clarabel"` are always
/// available.
pub fn solve_with(
    backend: &str,
    prog: &ConicProgram,
    opts: &SolveOptions,
) -> Result<Solution, ConicError> {
    prog.validate()?;
    let reg = registry().lock().unwrap();
    let solver = reg.get(backend).ok_or_else(|| ConicError::UnknownBackend {
        requested: backend.to_string(),
        available: reg.keys().cloned().collect::<Vec<_>>().join(", "),
    })?;
    solver.solve(prog, opts)
}

/// Scaled-triangular index of matrix entry (i, j), i >= j, for side `d`.
pub fn tri_index(d: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < d);
    // column j starts after columns 0..j of lengths d, d-1, ...
    j * (2 * d - j + 1) / 2 + (i - j)
}

/// Expands scaled-triangular coordinates into a dense symmetric matrix.
pub fn tri_to_mat(d: usize, coords: &[f64]) -> nalgebra::DMatrix<f64> {
    let mut m = nalgebra::DMatrix::zeros(d, d);
    let s = std::f64::consts::SQRT_2;
    let mut idx = 0;
    for j in 0..d {
        for i in j..d {
            let v = coords[idx];
            if i == j {
                m[(i, j)] = v;
            } else {
                m[(i, j)] = v / s;
                m[(j, i)] = v / s;
            }
            idx += 1;
        }
    }
    m
}

/// Inverse of [`tri_to_mat`].
pub fn mat_to_tri(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let s = std::f64::consts::SQRT_2;
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        for i in j..d {
            if i == j {
                out.push(m[(i, j)]);
            } else {
                out.push(m[(i, j)] * s);
            }
        }
    }
    out
}
