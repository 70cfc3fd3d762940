//! Tiled sparse matrix storage and sparse-times-dense multiplication, in
//! memory or streaming the sparse matrix from storage.

pub mod apps;
pub mod dense;
pub mod error;
pub mod format;
pub mod generators;
pub mod kernel;
pub mod sem;
pub mod storage;

pub use dense::DenseMatrix;
pub use error::{Error, Result};
pub use format::{TiledSparseMatrix, ValueKind};
pub use kernel::{spmm, KernelConfig};
pub use sem::{spmm_sem, SemConfig};
