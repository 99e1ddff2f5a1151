//! Variable registry: the ordered universe of scalar indeterminates a
//! polynomial may mention.

use std::fmt;

/// Index into a [`VarRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub u32);

impl VarId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// What a registry variable stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarGroup {
    /// Entry (row, col) of the unknown state matrix A.
    AEntry { row: usize, col: usize },
    /// Entry (row, col) of the unknown input matrix B.
    BEntry { row: usize, col: usize },
    /// State-noise coordinate at (time, coord), time in `0..T`.
    DxEntry { time: usize, coord: usize },
    /// Input-noise coordinate at (time, coord), time in `0..T-1`.
    DuEntry { time: usize, coord: usize },
    /// Process-noise coordinate at (time, coord), time in `0..T-1`.
    WEntry { time: usize, coord: usize },
    /// Auxiliary decision scalar (controller gains, Gram entries, ...).
    Decision,
}

#[derive(Debug, Clone)]
struct VarInfo {
    name: String,
    group: VarGroup,
}

/// Ordered list of scalar variables. The fixed ordering is: vec(A)
/// column-major, vec(B) column-major, Δx time-major, Δu time-major,
/// w time-major, then decision scalars in declaration order.
#[derive(Debug, Clone)]
pub struct VarRegistry {
    vars: Vec<VarInfo>,
    n: usize,
    m: usize,
    horizon: Option<usize>,
    n_w: usize,
    decision_start: usize,
}

impl VarRegistry {
    /// Registry holding only the plant indeterminates (A, B). Used by the
    /// alternatives schemes, where noise has been eliminated.
    pub fn plant_only(n: usize, m: usize) -> Self {
        Self::build(n, m, None, 0)
    }

    /// Registry holding (A, B, Δx, Δu) for a horizon of `t_len` samples.
    pub fn with_noise(n: usize, m: usize, t_len: usize) -> Self {
        Self::build(n, m, Some(t_len), 0)
    }

    /// Registry holding (A, B, Δx, Δu, w) with an `n_w`-dimensional
    /// process-noise channel.
    pub fn with_process_noise(n: usize, m: usize, t_len: usize, n_w: usize) -> Self {
        Self::build(n, m, Some(t_len), n_w)
    }

    fn build(n: usize, m: usize, horizon: Option<usize>, n_w: usize) -> Self {
        assert!(n >= 1 && m >= 1, "plant dimensions must be positive");
        let mut vars = Vec::new();
        for col in 0..n {
            for row in 0..n {
                vars.push(VarInfo {
                    name: format!("A_{row}_{col}"),
                    group: VarGroup::AEntry { row, col },
                });
            }
        }
        for col in 0..m {
            for row in 0..n {
                vars.push(VarInfo {
                    name: format!("B_{row}_{col}"),
                    group: VarGroup::BEntry { row, col },
                });
            }
        }
        if let Some(t_len) = horizon {
            assert!(t_len >= 2, "horizon must be at least 2");
            for time in 0..t_len {
                for coord in 0..n {
                    vars.push(VarInfo {
                        name: format!("dx_{time}_{coord}"),
                        group: VarGroup::DxEntry { time, coord },
                    });
                }
            }
            for time in 0..t_len - 1 {
                for coord in 0..m {
                    vars.push(VarInfo {
                        name: format!("du_{time}_{coord}"),
                        group: VarGroup::DuEntry { time, coord },
                    });
                }
            }
            for time in 0..t_len.saturating_sub(1) {
                for coord in 0..n_w {
                    vars.push(VarInfo {
                        name: format!("w_{time}_{coord}"),
                        group: VarGroup::WEntry { time, coord },
                    });
                }
            }
        }
        let decision_start = vars.len();
        VarRegistry {
            vars,
            n,
            m,
            horizon,
            n_w,
            decision_start,
        }
    }

    /// Appends a decision scalar; names must be unique.
    pub fn add_decision(&mut self, name: impl Into<String>) -> VarId {
        let name = name.into();
        debug_assert!(
            self.vars.iter().all(|v| v.name != name),
            "duplicate variable name {name}"
        );
        self.vars.push(VarInfo {
            name,
            group: VarGroup::Decision,
        });
        VarId((self.vars.len() - 1) as u32)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn name(&self, id: VarId) -> &str {
        &self.vars[id.index()].name
    }

    pub fn group(&self, id: VarId) -> VarGroup {
        self.vars[id.index()].group
    }

    pub fn is_decision(&self, id: VarId) -> bool {
        id.index() >= self.decision_start
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> Option<usize> {
        self.horizon
    }

    pub fn process_noise_dim(&self) -> usize {
        self.n_w
    }

    /// A-entry variable, column-major layout.
    pub fn a_var(&self, row: usize, col: usize) -> VarId {
        debug_assert!(row < self.n && col < self.n);
        VarId((col * self.n + row) as u32)
    }

    /// B-entry variable (B is n x m), column-major layout after the A block.
    pub fn b_var(&self, row: usize, col: usize) -> VarId {
        debug_assert!(row < self.n && col < self.m);
        VarId((self.n * self.n + col * self.n + row) as u32)
    }

    pub fn dx_var(&self, time: usize, coord: usize) -> VarId {
        let t_len = self.horizon.expect("registry has no noise block");
        debug_assert!(time < t_len && coord < self.n);
        VarId((self.n * self.n + self.n * self.m + time * self.n + coord) as u32)
    }

    pub fn du_var(&self, time: usize, coord: usize) -> VarId {
        let t_len = self.horizon.expect("registry has no noise block");
        debug_assert!(time < t_len - 1 && coord < self.m);
        let base = self.n * self.n + self.n * self.m + t_len * self.n;
        VarId((base + time * self.m + coord) as u32)
    }

    pub fn w_var(&self, time: usize, coord: usize) -> VarId {
        let t_len = self.horizon.expect("registry has no noise block");
        debug_assert!(time < t_len - 1 && coord < self.n_w);
        let base = self.n * self.n + self.n * self.m + t_len * self.n + (t_len - 1) * self.m;
        VarId((base + time * self.n_w + coord) as u32)
    }

    /// All non-decision variables, in registry order.
    pub fn indeterminates(&self) -> Vec<VarId> {
        (0..self.decision_start).map(|i| VarId(i as u32)).collect()
    }

    /// The plant variables (A then B), in registry order.
    pub fn plant_vars(&self) -> Vec<VarId> {
        (0..self.n * self.n + self.n * self.m)
            .map(|i| VarId(i as u32))
            .collect()
    }

    pub fn decision_vars(&self) -> Vec<VarId> {
        (self.decision_start..self.vars.len())
            .map(|i| VarId(i as u32))
            .collect()
    }
}

impl fmt::Display for VarRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "registry(n={}, m={}, T={:?}, n_w={}, vars={})",
            self.n,
            self.m,
            self.horizon,
            self.n_w,
            self.vars.len()
        )
    }
}
