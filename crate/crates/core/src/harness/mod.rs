//! Data generators, reference oracles and accuracy metrics shared by the
//! tests and the bench command.

pub mod bench;
pub mod data;
pub mod metrics;
pub mod oracle;

pub use bench::{run, Algo, BenchReport, BenchSpec, Row, StreamSource};
pub use data::{generate, read_trace, Dataset, ZipfTable};
pub use metrics::{calibrate_kll, ks_error, mre, phi_grid, rank_error, recall, rel_err};
