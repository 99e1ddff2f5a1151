//! Superstabilizing controller synthesis for discrete-time linear systems
//! identified from input/state data corrupted by quadratically bounded
//! errors-in-variables noise.
//!
//! The pipeline: generate or ingest noisy trajectories ([`dataset`]), compile
//! polynomial nonnegativity over the data-consistency set into conic programs
//! ([`polyalg`], [`psatz`], [`synthesis`]), solve them ([`conic`]), and verify
//! the extracted gains independently ([`verify`]).

use openblas_src as _; // links the system BLAS used by the clarabel backend

pub mod conic;
pub mod dataset;
pub mod polyalg;
pub mod psatz;
pub mod synthesis;
pub mod verify;

mod par;
pub mod textio;

pub use conic::{ConeKind, ConicProgram, SolveOptions, SolveStatus, Solution};
pub use dataset::{ChanceSpec, EnergySpec, NoiseModel, Plant, TrajectoryData};
pub use polyalg::{Monomial, Poly, PolyMatrix, VarGroup, VarId, VarRegistry};
pub use synthesis::{Certificate, Scheme, SynthesisConfig};
