//! Graph and matrix applications driven by SpMM: PageRank, a subspace
//! iteration eigensolver and multiplicative-update NMF.
//!
//! Each application talks to the sparse matrix through [`SpmmEngine`], so the
//! same driver runs against the in-memory kernel or the semi-external engine.

pub mod eigen;
pub mod nmf;
pub mod pagerank;
pub mod trace;

use std::borrow::Cow;
use std::sync::{Arc, Mutex};

use crate::dense::{DenseMatrix, RowIntervals, VerticalPartitionPlan};
use crate::error::{Error, Result};
use crate::format::header::MatrixHeader;
use crate::format::matrix::{scan_entries, TiledSparseMatrix};
use crate::format::tile::Entry;
use crate::kernel::{spmm, KernelConfig};
use crate::sem::{spmm_large_dense, spmm_sem_in_memory, SemConfig};
use crate::storage::{ReadSource, Store};

pub use eigen::{check_symmetric, subspace_iteration, EigenConfig, EigenResult, Residency};
pub use nmf::{nmf, NmfConfig, NmfResult};
pub use pagerank::{out_degrees, pagerank, PageRankConfig, PageRankResult};
pub use trace::{Trace, TraceRow};

/// Sparse operand of an application.
pub trait SpmmEngine: Sync {
    fn header(&self) -> &MatrixHeader;

    /// `A · input`, with the result in memory.
    fn multiply(&self, input: &DenseMatrix) -> Result<DenseMatrix>;

    /// `A · X` where `X` is the dense image `in_name` in `store`; the result is
    /// written as the dense image `out_name`.
    fn multiply_stored(&self, store: &dyn Store, in_name: &str, out_name: &str) -> Result<()> {
        let x = DenseMatrix::read_image(&*store.open(in_name)?)?;
        let y = self.multiply(&x)?;
        let mut sink = store.create(out_name)?;
        y.write_image(&mut sink)
    }

    /// Every stored entry, in an unspecified order.
    fn for_each_entry(&self, f: &mut dyn FnMut(Entry)) -> Result<()>;

    fn n_rows(&self) -> usize {
        self.header().n_rows as usize
    }

    fn n_cols(&self) -> usize {
        self.header().n_cols as usize
    }
}

/// Give `input` row intervals compatible with the matrix tile size.
fn aligned(input: &DenseMatrix, t: usize) -> Cow<'_, DenseMatrix> {
    if input.intervals().check_tile_size(t).is_ok() {
        Cow::Borrowed(input)
    } else {
        Cow::Owned(input.clone().with_intervals(RowIntervals::for_tile_size(t)))
    }
}

/// The whole image resident in memory.
pub struct InMemoryEngine<'a> {
    matrix: &'a TiledSparseMatrix,
    cfg: KernelConfig,
}

impl<'a> InMemoryEngine<'a> {
    pub fn new(matrix: &'a TiledSparseMatrix, cfg: KernelConfig) -> Self {
        Self { matrix, cfg }
    }
}

impl SpmmEngine for InMemoryEngine<'_> {
    fn header(&self) -> &MatrixHeader {
        self.matrix.header()
    }

    fn multiply(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        let x = aligned(input, self.header().t());
        let y = spmm(self.matrix, &x, &self.cfg)?;
        Ok(y.with_intervals(input.intervals()))
    }

    fn for_each_entry(&self, f: &mut dyn FnMut(Entry)) -> Result<()> {
        self.matrix.for_each_entry(f);
        Ok(())
    }
}

/// Cumulative I/O of a [`SemEngine`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineIo {
    pub multiplies: u64,
    pub sparse_bytes_read: u64,
    pub bytes_written: u64,
}

/// The image stays on storage and is streamed on every multiplication.
pub struct SemEngine {
    source: Arc<dyn ReadSource>,
    header: MatrixHeader,
    cfg: SemConfig,
    io: Mutex<EngineIo>,
}

impl SemEngine {
    pub fn new(source: Arc<dyn ReadSource>, cfg: SemConfig) -> Result<Self> {
        let header = MatrixHeader::read_from(&*source)?;
        Ok(Self {
            source,
            header,
            cfg,
            io: Mutex::new(EngineIo::default()),
        })
    }

    pub fn io(&self) -> EngineIo {
        *self.io.lock().unwrap()
    }

    fn record(&self, read: u64, written: u64) {
        let mut io = self.io.lock().unwrap();
        io.multiplies += 1;
        io.sparse_bytes_read += read;
        io.bytes_written += written;
    }
}

impl SpmmEngine for SemEngine {
    fn header(&self) -> &MatrixHeader {
        &self.header
    }

    fn multiply(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        let x = aligned(input, self.header.t());
        let (y, report) = spmm_sem_in_memory(&*self.source, &x, &self.cfg)?;
        self.record(report.sparse_bytes_read, report.bytes_written());
        Ok(y.with_intervals(input.intervals()))
    }

    fn multiply_stored(&self, store: &dyn Store, in_name: &str, out_name: &str) -> Result<()> {
        let meta = crate::dense::DenseImageMeta::read_from(&*store.open(in_name)?)?;
        let plan = VerticalPartitionPlan::new(meta.cols, meta.cols)?;
        let r = spmm_large_dense(&*self.source, store, in_name, out_name, &plan, &self.cfg)?;
        let written = r.pass_payload_bytes + r.interleave_bytes;
        self.record(r.sparse_bytes_read, written);
        Ok(())
    }

    fn for_each_entry(&self, f: &mut dyn FnMut(Entry)) -> Result<()> {
        scan_entries(&*self.source, f)?;
        Ok(())
    }
}

/// `A · input` computed in vertical passes of at most `mem_cols` columns.
/// Every output column depends only on the matching input column, so the
/// result does not depend on `mem_cols`.
pub fn multiply_in_passes(
    engine: &dyn SpmmEngine,
    input: &DenseMatrix,
    mem_cols: usize,
) -> Result<DenseMatrix> {
    let plan = VerticalPartitionPlan::new(input.cols(), mem_cols)?;
    if plan.num_passes() == 1 {
        return engine.multiply(input);
    }
    let mut out = DenseMatrix::zeros(engine.n_rows(), input.cols()).with_intervals(input.intervals());
    for cols in plan.passes() {
        let start = cols.start;
        let part = engine.multiply(&input.columns(cols))?;
        out.set_columns(start, &part)?;
    }
    Ok(out)
}

/// Per-column entry counts of the engine's matrix.
pub fn column_counts(engine: &dyn SpmmEngine) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; engine.n_cols()];
    engine.for_each_entry(&mut |e| counts[e.col as usize] += 1)?;
    Ok(counts)
}

pub(crate) fn require_square(engine: &dyn SpmmEngine, what: &str) -> Result<usize> {
    let (n, m) = (engine.n_rows(), engine.n_cols());
    if n != m {
        return Err(Error::shape(format!("{what} needs a square matrix, got {n}x{m}")));
    }
    Ok(n)
}
