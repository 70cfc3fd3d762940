//! In-memory SpMM over a tiled image.
//!
//! Work is dispatched from a global queue of tile rows. Each task is a band
//! of contiguous tile rows multiplied into a worker-local buffer, walking the
//! band's tiles in super-block order, and the buffer is then written to the
//! output in one piece. Every output row is produced by exactly one task, and
//! inside a task its contributions are accumulated in ascending tile-column
//! order, then in storage order inside each tile, so results do not depend on
//! thread count or scheduling.

use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::dense::{DenseMatrix, ELEM_BYTES};
use crate::error::{Error, Result};
use crate::format::header::{read_u16, MatrixHeader, ValueKind};
use crate::format::matrix::TiledSparseMatrix;
use crate::format::tile::{TileRecord, TileRecords, ROW_FLAG};

pub const DEFAULT_CACHE_BYTES: usize = 512 << 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelConfig {
    /// Effective per-worker cache budget.
    pub cache_bytes: usize,
    pub threads: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            cache_bytes: DEFAULT_CACHE_BYTES,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

impl KernelConfig {
    pub fn with_threads(threads: usize) -> Self {
        Self {
            threads,
            ..Self::default()
        }
    }

    /// Tile rows per large task: `cache / (2·p·c·t)`, at least 1 and at most
    /// the number of tile rows.
    pub fn tile_rows_per_task(&self, p: usize, t: usize, num_tile_rows: usize) -> usize {
        let per = self.cache_bytes / (2 * p.max(1) * ELEM_BYTES * t.max(1));
        per.max(1).min(num_tile_rows.max(1))
    }

    /// Super-block side in rows.
    pub fn super_block_rows(&self, p: usize, t: usize, num_tile_rows: usize) -> usize {
        self.tile_rows_per_task(p, t, num_tile_rows) * t
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::invalid("threads", "must be at least 1"));
        }
        if self.cache_bytes == 0 {
            return Err(Error::invalid("cache_bytes", "must be positive"));
        }
        Ok(())
    }
}

/// One dispatched task, as seen by a recording queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchRecord {
    pub tile_rows: Range<usize>,
    /// Tile rows left in the queue just before this dispatch.
    pub remaining_before: usize,
}

/// Global queue of tile-row ids handed out in ascending order.
#[derive(Debug)]
pub struct TaskQueue {
    total: usize,
    tile_rows_per_task: usize,
    threshold: usize,
    cursor: AtomicUsize,
    aborted: AtomicBool,
    log: Option<Mutex<Vec<DispatchRecord>>>,
}

impl TaskQueue {
    pub fn new(total: usize, tile_rows_per_task: usize, threads: usize) -> Self {
        Self {
            total,
            tile_rows_per_task: tile_rows_per_task.max(1),
            threshold: threads,
            cursor: AtomicUsize::new(0),
            aborted: AtomicBool::new(false),
            log: None,
        }
    }

    /// A queue that keeps a log of every dispatch.
    pub fn recording(total: usize, tile_rows_per_task: usize, threads: usize) -> Self {
        Self {
            log: Some(Mutex::new(Vec::new())),
            ..Self::new(total, tile_rows_per_task, threads)
        }
    }

    pub fn tile_rows_per_task(&self) -> usize {
        self.tile_rows_per_task
    }

    /// Next band: `tile_rows_per_task` ids while more than `threads` remain,
    /// then single tile rows.
    pub fn get_tile_rows(&self) -> Option<Range<usize>> {
        let mut cur = self.cursor.load(Ordering::Relaxed);
        loop {
            if cur >= self.total || self.aborted.load(Ordering::Relaxed) {
                return None;
            }
            let remaining = self.total - cur;
            let size = if remaining <= self.threshold {
                1
            } else {
                self.tile_rows_per_task.min(remaining)
            };
            match self.cursor.compare_exchange_weak(
                cur,
                cur + size,
                Ordering::AcqRel,
                Ordering::Relaxed,
            ) {
                Ok(_) => {
                    if let Some(log) = &self.log {
                        log.lock().unwrap().push(DispatchRecord {
                            tile_rows: cur..cur + size,
                            remaining_before: remaining,
                        });
                    }
                    return Some(cur..cur + size);
                }
                Err(actual) => cur = actual,
            }
        }
    }

    pub fn abort(&self) {
        self.aborted.store(true, Ordering::Relaxed);
    }

    /// Dispatch log sorted by first tile row.
    pub fn dispatched(&self) -> Vec<DispatchRecord> {
        let mut log = self
            .log
            .as_ref()
            .map(|l| l.lock().unwrap().clone())
            .unwrap_or_default();
        log.sort_by_key(|r| r.tile_rows.start);
        log
    }
}

/// Receives finished bands of output rows.
pub trait RowSink: Sync {
    /// `rows` holds whole rows of width `p` starting at global row `first_row`.
    fn write_rows(&self, first_row: usize, rows: &[f64]) -> Result<()>;
}

/// `out_row += nz · in_row`, branch-free over the row so it vectorizes.
#[inline(always)]
pub fn inner_product_accumulate(nz: f64, in_row: &[f64], out_row: &mut [f64]) {
    let n = out_row.len().min(in_row.len());
    let (out_row, in_row) = (&mut out_row[..n], &in_row[..n]);
    for (o, &i) in out_row.iter_mut().zip(in_row) {
        *o += nz * i;
    }
}

#[inline(always)]
fn accumulate_ones(in_row: &[f64], out_row: &mut [f64]) {
    let n = out_row.len().min(in_row.len());
    let (out_row, in_row) = (&mut out_row[..n], &in_row[..n]);
    for (o, &i) in out_row.iter_mut().zip(in_row) {
        *o += i;
    }
}

/// `out += tile · in` where `input` starts at the tile's first column row
/// and `out` at the tile's first row.
fn multiply_tile(rec: &TileRecord<'_>, input: &[f64], out: &mut [f64], p: usize) {
    let binary = rec.kind == ValueKind::Binary;
    let mut out_off = 0usize;
    let mut vi = 0usize;
    for w in rec.scsr.chunks_exact(2) {
        let w = u16::from_le_bytes([w[0], w[1]]);
        if w & ROW_FLAG != 0 {
            out_off = (w & !ROW_FLAG) as usize * p;
        } else {
            let in_off = w as usize * p;
            let src = &input[in_off..in_off + p];
            let dst = &mut out[out_off..out_off + p];
            if binary {
                accumulate_ones(src, dst);
            } else {
                inner_product_accumulate(rec.value(vi), src, dst);
            }
            vi += 1;
        }
    }
    for i in 0..rec.num_coo as usize {
        let r = read_u16(rec.coo, 4 * i) as usize * p;
        let c = read_u16(rec.coo, 4 * i + 2) as usize * p;
        let src = &input[c..c + p];
        let dst = &mut out[r..r + p];
        if binary {
            accumulate_ones(src, dst);
        } else {
            inner_product_accumulate(rec.value(vi), src, dst);
        }
        vi += 1;
    }
}

/// Visit the non-empty tiles of a band in super-block order: tile-column
/// blocks of width `step` outermost, then tile rows, then tile columns inside
/// the block. `f` receives the band-relative tile row.
///
/// `bytes` holds the band's records contiguously; records must already be
/// validated.
pub fn visit_band<'a>(
    header: &MatrixHeader,
    band: &Range<usize>,
    bytes: &'a [u8],
    step: usize,
    mut f: impl FnMut(usize, &TileRecord<'a>),
) {
    let step = step.max(1);
    let mut rows: Vec<std::iter::Peekable<TileRecords<'a>>> = Vec::with_capacity(band.len());
    let mut off = 0usize;
    for tr in band.clone() {
        let len = header.tile_rows[tr].len as usize;
        rows.push(TileRecords::new(&bytes[off..off + len], header.value_kind).peekable());
        off += len;
    }
    let ntc = header.num_tile_cols();
    let mut k = 0;
    while k < ntc {
        let block_end = (k + step) as u32;
        for (i, recs) in rows.iter_mut().enumerate() {
            while let Some(Ok(rec)) = recs.peek() {
                if rec.tile_col >= block_end {
                    break;
                }
                let rec = *rec;
                recs.next();
                f(i, &rec);
            }
        }
        k += step;
    }
}

/// Multiply one band of tile rows into `out_buf` (band rows × p, zeroed).
pub fn mul_tile_rows(
    header: &MatrixHeader,
    band: &Range<usize>,
    bytes: &[u8],
    input: &DenseMatrix,
    out_buf: &mut [f64],
    step: usize,
) {
    let p = input.cols();
    let t = header.t();
    let data = input.as_slice();
    visit_band(header, band, bytes, step, |i, rec| {
        let row0 = i * t * p;
        let height = header.tile_row_height(band.start + i);
        let col0 = rec.tile_col as usize * t;
        let width = header.tile_col_width(rec.tile_col as usize);
        multiply_tile(
            rec,
            &data[col0 * p..(col0 + width) * p],
            &mut out_buf[row0..row0 + height * p],
            p,
        );
    });
}

pub(crate) fn check_shapes(header: &MatrixHeader, input: &DenseMatrix) -> Result<()> {
    if input.cols() == 0 {
        return Err(Error::invalid("p", "dense matrix has no columns"));
    }
    if header.n_cols != input.rows() as u64 {
        return Err(Error::shape(format!(
            "sparse matrix is {}x{} but dense input has {} rows",
            header.n_rows,
            header.n_cols,
            input.rows()
        )));
    }
    input.intervals().check_tile_size(header.t())
}

/// Writes bands straight into a preallocated in-memory output.
pub struct MemoryRowSink<'a> {
    chunks: Vec<Mutex<&'a mut [f64]>>,
    chunk_rows: usize,
    p: usize,
}

impl<'a> MemoryRowSink<'a> {
    pub fn new(out: &'a mut DenseMatrix, chunk_rows: usize) -> Self {
        let p = out.cols();
        let chunks = out
            .as_mut_slice()
            .chunks_mut(chunk_rows * p)
            .map(Mutex::new)
            .collect();
        Self {
            chunks,
            chunk_rows,
            p,
        }
    }
}

impl RowSink for MemoryRowSink<'_> {
    fn write_rows(&self, first_row: usize, rows: &[f64]) -> Result<()> {
        let mut row = first_row;
        let mut rest = rows;
        while !rest.is_empty() {
            let ci = row / self.chunk_rows;
            let within = row % self.chunk_rows;
            let mut chunk = self.chunks[ci].lock().unwrap();
            let avail = chunk.len() - within * self.p;
            let n = avail.min(rest.len());
            chunk[within * self.p..within * self.p + n].copy_from_slice(&rest[..n]);
            rest = &rest[n..];
            row += n / self.p;
        }
        Ok(())
    }
}

/// Run the kernel with a caller-provided queue and sink.
pub fn spmm_with(
    m: &TiledSparseMatrix,
    input: &DenseMatrix,
    cfg: &KernelConfig,
    queue: &TaskQueue,
    sink: &dyn RowSink,
) -> Result<()> {
    cfg.validate()?;
    let header = m.header();
    check_shapes(header, input)?;
    let p = input.cols();
    let t = header.t();
    let step = queue.tile_rows_per_task();
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..cfg.threads {
            s.spawn(|| {
                let mut out_buf: Vec<f64> = Vec::new();
                while let Some(band) = queue.get_tile_rows() {
                    let rows = header.band_rows(&band);
                    out_buf.clear();
                    out_buf.resize(band.len() * t * p, 0.0);
                    mul_tile_rows(header, &band, m.band_bytes(&band), input, &mut out_buf, step);
                    if let Err(e) = sink.write_rows(rows.start, &out_buf[..rows.len() * p]) {
                        first_err.lock().unwrap().get_or_insert(e);
                        queue.abort();
                    }
                }
            });
        }
    });
    match first_err.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// `m · input`, fully in memory.
pub fn spmm(m: &TiledSparseMatrix, input: &DenseMatrix, cfg: &KernelConfig) -> Result<DenseMatrix> {
    check_shapes(m.header(), input)?;
    let header = m.header();
    let per_task = cfg.tile_rows_per_task(input.cols(), header.t(), header.num_tile_rows());
    let queue = TaskQueue::new(header.num_tile_rows(), per_task, cfg.threads);
    let mut out = DenseMatrix::zeros(m.n_rows(), input.cols()).with_intervals(input.intervals());
    {
        let sink = MemoryRowSink::new(&mut out, header.t());
        spmm_with(m, input, cfg, &queue, &sink)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::convert::{convert_to_vec, ConvertOptions};
    use crate::format::tile::Entry;
    use crate::format::ValueKind;

    fn image(n: u64, t: u32, edges: &[(u64, u64, f64)], kind: ValueKind) -> TiledSparseMatrix {
        let opts = ConvertOptions {
            n_rows: Some(n),
            n_cols: Some(n),
            tile_size: t,
            value_kind: kind,
            ..ConvertOptions::default()
        };
        let list = edges.iter().map(|&(u, v, w)| Ok(Entry::new(u, v, w)));
        TiledSparseMatrix::from_bytes(convert_to_vec(list, &opts).unwrap().0).unwrap()
    }

    #[test]
    fn identity_times_b() {
        let edges: Vec<_> = (0..40).map(|i| (i, i, 1.0)).collect();
        let m = image(40, 16, &edges, ValueKind::Binary);
        let b = DenseMatrix::random(40, 3, 5);
        let out = spmm(&m, &b, &KernelConfig::with_threads(3)).unwrap();
        assert_eq!(out.as_slice(), b.as_slice());
    }

    #[test]
    fn hand_multiplication() {
        let m = image(
            4,
            16,
            &[(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 3, 1.0)],
            ValueKind::Binary,
        );
        let x = DenseMatrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = spmm(&m, &x, &KernelConfig::with_threads(2)).unwrap();
        assert_eq!(y.as_slice(), &[2.0, 1.0, 4.0, 4.0]);
    }

    #[test]
    fn weighted_values() {
        let m = image(3, 2, &[(0, 2, 2.5), (2, 0, -1.0), (2, 1, 4.0)], ValueKind::Float64);
        let x = DenseMatrix::from_vec(3, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let y = spmm(&m, &x, &KernelConfig::with_threads(1)).unwrap();
        assert_eq!(y.as_slice(), &[7.5, 75.0, 0.0, 0.0, 7.0, 70.0]);
    }

    #[test]
    fn shape_errors() {
        let m = image(4, 16, &[(0, 1, 1.0)], ValueKind::Binary);
        let cfg = KernelConfig::with_threads(1);
        assert!(matches!(spmm(&m, &DenseMatrix::zeros(5, 1), &cfg), Err(Error::Shape(_))));
        assert!(spmm(&m, &DenseMatrix::zeros(4, 0), &cfg).is_err());
    }

    #[test]
    fn inner_product_cases() {
        let mut out = [4.0];
        inner_product_accumulate(1.0, &[3.0], &mut out);
        assert_eq!(out, [7.0]);
        let mut out = [0.5; 8];
        inner_product_accumulate(2.0, &[1.0; 8], &mut out);
        assert_eq!(out, [2.5; 8]);
    }

    #[test]
    fn empty_band_leaves_buffer_zero() {
        let m = image(32, 16, &[(20, 1, 1.0)], ValueKind::Binary);
        let x = DenseMatrix::random(32, 2, 1);
        let mut buf = vec![0.0; 16 * 2];
        mul_tile_rows(m.header(), &(0..1), m.band_bytes(&(0..1)), &x, &mut buf, 1);
        assert!(buf.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn super_block_visit_order() {
        // Every tile of a 2-tile-row x 4-tile-column band is non-empty.
        let mut edges = Vec::new();
        for tr in 0..2u64 {
            for tc in 0..4u64 {
                edges.push((tr * 4, tc * 4, 1.0));
            }
        }
        let m = image(16, 4, &edges, ValueKind::Binary);
        let band = 0..2;
        let mut seen = Vec::new();
        visit_band(m.header(), &band, m.band_bytes(&band), 2, |i, rec| {
            seen.push((i, rec.tile_col as usize))
        });
        assert_eq!(
            seen,
            [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (0, 3), (1, 2), (1, 3)]
        );
    }

    #[test]
    fn tiles_accumulate_in_column_order() {
        // Row 0 gets contributions from tiles in tile columns 0, 1 and 2.
        let m = image(12, 4, &[(0, 1, 1.0), (0, 5, 1.0), (0, 9, 1.0)], ValueKind::Binary);
        let x = DenseMatrix::from_fn(12, 1, |r, _| [1e16, -1e16, 1.0][r / 4]);
        let y = spmm(&m, &x, &KernelConfig::with_threads(1)).unwrap();
        // ((1e16 + -1e16) + 1.0) in column order; any other order would lose the 1.
        assert_eq!(y.get(0, 0), 1.0);
    }

    #[test]
    fn task_sizes_follow_schedule() {
        let q = TaskQueue::recording(20, 3, 4);
        let mut got = Vec::new();
        while let Some(r) = q.get_tile_rows() {
            got.push(r.len());
        }
        assert_eq!(got, [3, 3, 3, 3, 3, 3, 1, 1]);
        let log = q.dispatched();
        assert_eq!(log.len(), 8);
        assert!(log.iter().all(|d| d.tile_rows.len() == if d.remaining_before > 4 { 3 } else { 1 }));
        assert!(log.windows(2).all(|w| w[0].tile_rows.end == w[1].tile_rows.start));
    }

    #[test]
    fn tile_rows_per_task_formula() {
        let cfg = KernelConfig {
            cache_bytes: 512 << 10,
            threads: 1,
        };
        assert_eq!(cfg.tile_rows_per_task(1, 16384, 100), 2);
        assert_eq!(cfg.tile_rows_per_task(8, 16384, 100), 1);
        assert_eq!(cfg.tile_rows_per_task(1, 1024, 100), 32);
        assert_eq!(cfg.tile_rows_per_task(1, 1024, 5), 5);
        assert_eq!(cfg.super_block_rows(2, 1024, 100), 16 * 1024);
    }
}
