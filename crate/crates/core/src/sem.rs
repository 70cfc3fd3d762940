//! Semi-external-memory SpMM.
//!
//! The sparse image stays on storage and is streamed one band of tile rows
//! at a time; the dense input (or one vertical partition of it) is resident.
//! Each worker double-buffers its reads through a helper I/O thread, so the
//! next band is in flight while the current one is multiplied. Finished bands
//! go through a write coalescer that emits rows in ascending order in large
//! merged writes.
//!
//! The arithmetic is the in-memory kernel's ([`crate::kernel::mul_tile_rows`]),
//! so results are bit-identical to [`crate::kernel::spmm`].

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};

use crate::dense::{
    decode_f64s, dense_header, encode_f64s, load_vertical_partition, DenseImageMeta, DenseMatrix,
    VerticalPartitionPlan, DENSE_HEADER_LEN, ELEM_BYTES,
};
use crate::error::{Error, Result};
use crate::format::header::MatrixHeader;
use crate::format::matrix::validate_tile_row;
use crate::kernel::{check_shapes, mul_tile_rows, KernelConfig, RowSink, TaskQueue};
use crate::storage::{CountingSource, IoCounters, MemSink, ReadSource, Store, WriteSink};

pub const DEFAULT_MERGE_THRESHOLD: usize = 8 << 20;
pub const DEFAULT_BUFFER_BUDGET: usize = 64 << 20;
pub const FIXED_OVERHEAD: usize = 32 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SemConfig {
    pub kernel: KernelConfig,
    /// Minimum size of every non-final output write.
    pub merge_threshold: usize,
    /// Per-thread buffer budget (ε).
    pub buffer_budget: usize,
    /// Allowance for bookkeeping outside the tracked buffers.
    pub fixed_overhead: usize,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self {
            kernel: KernelConfig::default(),
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            buffer_budget: DEFAULT_BUFFER_BUDGET,
            fixed_overhead: FIXED_OVERHEAD,
        }
    }
}

impl SemConfig {
    pub fn with_threads(threads: usize) -> Self {
        Self {
            kernel: KernelConfig::with_threads(threads),
            ..Self::default()
        }
    }

    /// Tracked-memory ceiling for a run with `dense_bytes` of resident input.
    pub fn memory_limit(&self, dense_bytes: u64) -> u64 {
        dense_bytes
            + (self.kernel.threads * self.buffer_budget) as u64
            + self.fixed_overhead as u64
    }
}

/// Memory model of one semi-external multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoPlan {
    pub n: u64,
    pub p: u64,
    /// Dense element bytes.
    pub c: u64,
    /// Sparse image bytes (E).
    pub sparse_bytes: u64,
    /// Memory budget (M).
    pub memory: u64,
    /// Bytes devoted to resident dense columns (M′).
    pub dense_memory: u64,
    /// Per-thread buffer budget (ε).
    pub buffer_budget: u64,
    pub threads: u64,
}

impl IoPlan {
    /// Smallest workable budget: one resident column plus the thread buffers.
    pub fn min_memory(n: u64, c: u64, threads: u64, buffer_budget: u64) -> u64 {
        n * c + threads * buffer_budget
    }

    /// The engine's plan: every byte of `memory` not needed for thread
    /// buffers and fixed overhead holds dense columns.
    pub fn for_budget(
        n: u64,
        p: u64,
        sparse_bytes: u64,
        memory: u64,
        cfg: &SemConfig,
    ) -> Result<Self> {
        let c = ELEM_BYTES as u64;
        let threads = cfg.kernel.threads as u64;
        let eps = cfg.buffer_budget as u64;
        let reserved = threads * eps + cfg.fixed_overhead as u64;
        let needed = Self::min_memory(n, c, threads, eps) + cfg.fixed_overhead as u64;
        if memory < needed {
            return Err(Error::Budget {
                needed,
                limit: memory,
            });
        }
        Ok(Self {
            n,
            p,
            c,
            sparse_bytes,
            memory,
            dense_memory: memory - reserved,
            buffer_budget: eps,
            threads,
        })
    }

    /// Dense columns resident per pass, `floor(M′ / (n·c))` capped at `p`.
    pub fn cols_in_memory(&self) -> u64 {
        (self.dense_memory / (self.n * self.c).max(1)).min(self.p.max(1))
    }

    pub fn passes(&self) -> u64 {
        self.p.div_ceil(self.cols_in_memory().max(1))
    }

    pub fn partition_plan(&self) -> Result<VerticalPartitionPlan> {
        VerticalPartitionPlan::new(self.p as usize, self.cols_in_memory() as usize)
    }
}

/// Predicted sparse bytes read: passes × (E − (M − M′)), with the pass count
/// rounded up when M′ does not divide the dense matrix.
pub fn predicted_io(plan: &IoPlan) -> Result<u64> {
    if plan.dense_memory > plan.memory {
        return Err(Error::invalid(
            "dense_memory",
            format!("M' = {} exceeds M = {}", plan.dense_memory, plan.memory),
        ));
    }
    if plan.dense_memory < plan.n * plan.c {
        return Err(Error::Budget {
            needed: plan.n * plan.c,
            limit: plan.dense_memory,
        });
    }
    let cached = plan.memory - plan.dense_memory;
    Ok(plan.passes() * plan.sparse_bytes.saturating_sub(cached))
}

/// Running count of engine-owned buffer bytes against a ceiling.
#[derive(Debug)]
pub struct MemTracker {
    limit: u64,
    current: AtomicU64,
    peak: AtomicU64,
}

impl MemTracker {
    pub fn new(limit: u64) -> Self {
        Self {
            limit,
            current: AtomicU64::new(0),
            peak: AtomicU64::new(0),
        }
    }

    pub fn alloc(&self, bytes: u64) -> Result<()> {
        let now = self.current.fetch_add(bytes, Ordering::AcqRel) + bytes;
        self.peak.fetch_max(now, Ordering::AcqRel);
        if now > self.limit {
            self.current.fetch_sub(bytes, Ordering::AcqRel);
            return Err(Error::Budget {
                needed: now,
                limit: self.limit,
            });
        }
        Ok(())
    }

    pub fn free(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::AcqRel);
    }

    pub fn current(&self) -> u64 {
        self.current.load(Ordering::Acquire)
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::Acquire)
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolStats {
    /// Buffers allocated because the pool was empty.
    pub fresh: u64,
    /// Pooled buffers grown to fit a larger request.
    pub resizes: u64,
    /// Requests served by a pooled buffer without growth.
    pub reuses: u64,
    pub high_water_bytes: u64,
}

impl PoolStats {
    fn merge(&mut self, o: &PoolStats) {
        self.fresh += o.fresh;
        self.resizes += o.resizes;
        self.reuses += o.reuses;
        self.high_water_bytes += o.high_water_bytes;
    }
}

/// Per-worker set of reusable read buffers.
#[derive(Debug, Default)]
pub struct BufferPool {
    free: Vec<Vec<u8>>,
    held_bytes: u64,
    stats: PoolStats,
}

impl BufferPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// A buffer of exactly `len` bytes. Prefers a pooled buffer that already
    /// fits, otherwise grows the largest pooled one; allocates only when the
    /// pool is empty.
    pub fn acquire(&mut self, len: usize, tracker: &MemTracker) -> Result<Vec<u8>> {
        let pick = self
            .free
            .iter()
            .enumerate()
            .filter(|(_, b)| b.capacity() >= len)
            .min_by_key(|(_, b)| b.capacity())
            .or_else(|| self.free.iter().enumerate().max_by_key(|(_, b)| b.capacity()))
            .map(|(i, _)| i);
        let mut buf = match pick {
            Some(i) => self.free.swap_remove(i),
            None => {
                self.stats.fresh += 1;
                Vec::new()
            }
        };
        let before = buf.capacity();
        if before >= len {
            if pick.is_some() {
                self.stats.reuses += 1;
            }
        } else {
            tracker.alloc((len - before) as u64)?;
            buf.reserve_exact(len - buf.len());
            if pick.is_some() {
                self.stats.resizes += 1;
            }
            self.held_bytes += (buf.capacity() - before) as u64;
            // reserve_exact may round up; account for the real capacity
            let extra = buf.capacity() - before - (len - before);
            if extra > 0 {
                tracker.alloc(extra as u64)?;
            }
            self.stats.high_water_bytes = self.stats.high_water_bytes.max(self.held_bytes);
        }
        buf.resize(len, 0);
        Ok(buf)
    }

    pub fn release(&mut self, buf: Vec<u8>) {
        self.free.push(buf);
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    /// Drop every pooled buffer and return the bytes to the tracker.
    pub fn drain(&mut self, tracker: &MemTracker) {
        for b in self.free.drain(..) {
            let _ = b;
        }
        tracker.free(self.held_bytes);
        self.held_bytes = 0;
    }
}

/// Read the records of a band of tile rows into `buf`.
pub fn read_tile_rows(
    src: &dyn ReadSource,
    header: &MatrixHeader,
    band: &Range<usize>,
    buf: &mut Vec<u8>,
) -> Result<()> {
    let range = header.band_bytes(band);
    let len = (range.end - range.start) as usize;
    buf.resize(len, 0);
    if len > 0 {
        src.read_at(range.start, buf)?;
    }
    Ok(())
}

fn validate_band(header: &MatrixHeader, band: &Range<usize>, bytes: &[u8]) -> Result<()> {
    let mut off = 0usize;
    for tr in band.clone() {
        let e = header.tile_rows[tr];
        let len = e.len as usize;
        validate_tile_row(header, tr, &bytes[off..off + len], e.offset, |_| {})?;
        off += len;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WriteStats {
    /// Size of every write issued to the sink, in order.
    pub write_sizes: Vec<u64>,
    /// Dense payload bytes (header excluded).
    pub payload_bytes: u64,
    pub header_bytes: u64,
}

struct CoalescerState<'w> {
    sink: &'w mut dyn WriteSink,
    next_row: usize,
    pending: BTreeMap<usize, Vec<f64>>,
    pending_bytes: u64,
    merge: Vec<u8>,
    stats: WriteStats,
    aborted: bool,
}

/// Orders finished bands by row and merges them into large sequential
/// writes of a dense image.
///
/// Bands that arrive ahead of the next row are parked. Parked bytes stay
/// under the merge threshold: a writer that would exceed it waits for the
/// earlier rows, unless nothing is parked yet.
pub struct WriteCoalescer<'w, 't> {
    state: Mutex<CoalescerState<'w>>,
    advanced: Condvar,
    n_rows: usize,
    p: usize,
    threshold: usize,
    tracker: &'t MemTracker,
}

impl<'w, 't> WriteCoalescer<'w, 't> {
    pub fn new(
        sink: &'w mut dyn WriteSink,
        n_rows: usize,
        p: usize,
        threshold: usize,
        tracker: &'t MemTracker,
    ) -> Result<Self> {
        let header = dense_header(n_rows as u64, p as u64);
        let cap = threshold.max(DENSE_HEADER_LEN) + DENSE_HEADER_LEN;
        tracker.alloc(cap as u64)?;
        let mut merge = Vec::with_capacity(cap);
        merge.extend_from_slice(&header);
        Ok(Self {
            state: Mutex::new(CoalescerState {
                sink,
                next_row: 0,
                pending: BTreeMap::new(),
                pending_bytes: 0,
                merge,
                stats: WriteStats {
                    header_bytes: DENSE_HEADER_LEN as u64,
                    ..WriteStats::default()
                },
                aborted: false,
            }),
            advanced: Condvar::new(),
            n_rows,
            p,
            threshold: threshold.max(1),
            tracker,
        })
    }

    fn emit(&self, st: &mut CoalescerState<'_>, rows: &[f64]) -> Result<()> {
        let mut rest = rows;
        while !rest.is_empty() {
            let room = (self.threshold.saturating_sub(st.merge.len()) / ELEM_BYTES).max(1);
            let take = room.min(rest.len());
            encode_f64s(&rest[..take], &mut st.merge);
            st.stats.payload_bytes += (take * ELEM_BYTES) as u64;
            rest = &rest[take..];
            if st.merge.len() >= self.threshold {
                let bytes = std::mem::take(&mut st.merge);
                st.sink.append(&bytes)?;
                st.stats.write_sizes.push(bytes.len() as u64);
                st.merge = bytes;
                st.merge.clear();
            }
        }
        st.next_row += rows.len() / self.p;
        Ok(())
    }

    /// Release writers waiting for rows that will never arrive.
    pub fn abort(&self) {
        self.state.lock().unwrap().aborted = true;
        self.advanced.notify_all();
    }

    /// Flush the final batch and make the image durable.
    pub fn finish(self) -> Result<WriteStats> {
        let mut st = self.state.into_inner().unwrap();
        if st.next_row != self.n_rows || !st.pending.is_empty() {
            return Err(Error::corrupt(
                (DENSE_HEADER_LEN + st.next_row * self.p * ELEM_BYTES) as u64,
                format!(
                    "written row ranges stop at row {} of {}",
                    st.next_row, self.n_rows
                ),
            ));
        }
        if !st.merge.is_empty() {
            let bytes = std::mem::take(&mut st.merge);
            st.sink.append(&bytes)?;
            st.stats.write_sizes.push(bytes.len() as u64);
        }
        st.sink.finish()?;
        let cap = self.threshold.max(DENSE_HEADER_LEN) + DENSE_HEADER_LEN;
        self.tracker.free(cap as u64);
        Ok(st.stats)
    }
}

impl RowSink for WriteCoalescer<'_, '_> {
    fn write_rows(&self, first_row: usize, rows: &[f64]) -> Result<()> {
        let bytes = std::mem::size_of_val(rows) as u64;
        let mut st = self.state.lock().unwrap();
        while first_row != st.next_row
            && !st.aborted
            && !st.pending.is_empty()
            && st.pending_bytes + bytes > self.threshold as u64
        {
            st = self.advanced.wait(st).unwrap();
        }
        if st.aborted {
            // the run has already failed; the rows are not needed
            return Ok(());
        }
        if first_row < st.next_row || st.pending.contains_key(&first_row) {
            return Err(Error::corrupt(
                (DENSE_HEADER_LEN + first_row * self.p * ELEM_BYTES) as u64,
                format!("rows starting at {first_row} written twice"),
            ));
        }
        if first_row != st.next_row {
            self.tracker.alloc(bytes)?;
            st.pending_bytes += bytes;
            st.pending.insert(first_row, rows.to_vec());
            return Ok(());
        }
        self.emit(&mut st, rows)?;
        loop {
            let next = st.next_row;
            let Some(rows) = st.pending.remove(&next) else {
                break;
            };
            let bytes = std::mem::size_of_val(rows.as_slice()) as u64;
            st.pending_bytes -= bytes;
            self.emit(&mut st, &rows)?;
            self.tracker.free(bytes);
        }
        self.advanced.notify_all();
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SemReport {
    /// Sparse image bytes read, header included.
    pub sparse_bytes_read: u64,
    pub sparse_reads: u64,
    pub writes: WriteStats,
    pub pool: PoolStats,
    pub tasks: u64,
    pub peak_tracked_bytes: u64,
    pub memory_limit: u64,
}

impl SemReport {
    pub fn bytes_written(&self) -> u64 {
        self.writes.write_sizes.iter().sum()
    }
}

/// Semi-external `spm · input`, writing the dense result image to `sink`.
///
/// `tracker` defaults to the limit from [`SemConfig::memory_limit`] for the
/// resident input.
pub fn spmm_sem(
    spm: &dyn ReadSource,
    input: &DenseMatrix,
    cfg: &SemConfig,
    sink: &mut dyn WriteSink,
) -> Result<SemReport> {
    let tracker = MemTracker::new(cfg.memory_limit(input.size_bytes()));
    tracker.alloc(input.size_bytes())?;
    let report = spmm_sem_tracked(spm, input, cfg, sink, &tracker, None);
    tracker.free(input.size_bytes());
    report
}

/// [`spmm_sem`] with an explicit tracker and, optionally, a caller-owned
/// (for example recording) task queue.
pub fn spmm_sem_tracked(
    spm: &dyn ReadSource,
    input: &DenseMatrix,
    cfg: &SemConfig,
    sink: &mut dyn WriteSink,
    tracker: &MemTracker,
    queue: Option<&TaskQueue>,
) -> Result<SemReport> {
    cfg.kernel.validate()?;
    let counters = IoCounters::new();
    let src = CountingSource::new(spm, Arc::clone(&counters));
    let header = MatrixHeader::read_from(&src)?;
    check_shapes(&header, input)?;
    let p = input.cols();
    let t = header.t();
    let ntr = header.num_tile_rows();
    let per_task = cfg.kernel.tile_rows_per_task(p, t, ntr);
    let own_queue;
    let queue = match queue {
        Some(q) => q,
        None => {
            own_queue = TaskQueue::new(ntr, per_task, cfg.kernel.threads);
            &own_queue
        }
    };
    let step = queue.tile_rows_per_task();

    let coalescer = WriteCoalescer::new(
        sink,
        header.n_rows as usize,
        p,
        cfg.merge_threshold,
        tracker,
    )?;
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    let pool_stats: Mutex<PoolStats> = Mutex::new(PoolStats::default());
    let tasks = AtomicU64::new(0);
    let fail = |e: Error| {
        first_err.lock().unwrap().get_or_insert(e);
        queue.abort();
        coalescer.abort();
    };

    std::thread::scope(|s| {
        for _ in 0..cfg.kernel.threads {
            s.spawn(|| {
                let mut pool = BufferPool::new();
                let (req_tx, req_rx) = mpsc::channel::<(Range<usize>, Vec<u8>)>();
                let (resp_tx, resp_rx) = mpsc::channel::<(Range<usize>, Result<Vec<u8>>)>();
                let src = &src;
                let header = &header;
                s.spawn(move || {
                    for (band, mut buf) in req_rx {
                        let r = read_tile_rows(src, header, &band, &mut buf).map(|_| buf);
                        if resp_tx.send((band, r)).is_err() {
                            break;
                        }
                    }
                });

                let band_len = |band: &Range<usize>| {
                    let r = header.band_bytes(band);
                    (r.end - r.start) as usize
                };
                let issue = |pool: &mut BufferPool| -> Result<bool> {
                    match queue.get_tile_rows() {
                        None => Ok(false),
                        Some(band) => {
                            let buf = pool.acquire(band_len(&band), tracker)?;
                            req_tx.send((band, buf)).expect("I/O thread gone");
                            Ok(true)
                        }
                    }
                };

                let out_cap = per_task.max(step) * t * p;
                let mut out_buf: Vec<f64> = Vec::new();
                let out_tracked = match tracker.alloc((out_cap * ELEM_BYTES) as u64) {
                    Ok(()) => {
                        out_buf.reserve_exact(out_cap);
                        true
                    }
                    Err(e) => {
                        fail(e);
                        false
                    }
                };

                let mut inflight = 0usize;
                if out_tracked {
                    match issue(&mut pool) {
                        Ok(true) => inflight += 1,
                        Ok(false) => {}
                        Err(e) => fail(e),
                    }
                }
                while inflight > 0 {
                    let (band, bytes) = resp_rx.recv().expect("I/O thread gone");
                    inflight -= 1;
                    match issue(&mut pool) {
                        Ok(true) => inflight += 1,
                        Ok(false) => {}
                        Err(e) => fail(e),
                    }
                    let bytes = match bytes {
                        Ok(b) => b,
                        Err(e) => {
                            fail(e);
                            continue;
                        }
                    };
                    let result = validate_band(header, &band, &bytes).and_then(|_| {
                        let rows = header.band_rows(&band);
                        out_buf.clear();
                        out_buf.resize(band.len() * t * p, 0.0);
                        mul_tile_rows(header, &band, &bytes, input, &mut out_buf, step);
                        coalescer.write_rows(rows.start, &out_buf[..rows.len() * p])
                    });
                    pool.release(bytes);
                    tasks.fetch_add(1, Ordering::Relaxed);
                    if let Err(e) = result {
                        fail(e);
                    }
                }
                drop(req_tx);
                pool_stats.lock().unwrap().merge(&pool.stats());
                pool.drain(tracker);
                if out_tracked {
                    tracker.free((out_cap * ELEM_BYTES) as u64);
                }
            });
        }
    });

    if let Some(e) = first_err.into_inner().unwrap() {
        return Err(e);
    }
    let writes = coalescer.finish()?;
    Ok(SemReport {
        sparse_bytes_read: counters.bytes_read(),
        sparse_reads: counters.reads(),
        writes,
        pool: pool_stats.into_inner().unwrap(),
        tasks: tasks.load(Ordering::Relaxed),
        peak_tracked_bytes: tracker.peak(),
        memory_limit: tracker.limit(),
    })
}

/// [`spmm_sem`] with the result collected in memory.
pub fn spmm_sem_in_memory(
    spm: &dyn ReadSource,
    input: &DenseMatrix,
    cfg: &SemConfig,
) -> Result<(DenseMatrix, SemReport)> {
    let mut sink = MemSink::new();
    let report = spmm_sem(spm, input, cfg, &mut sink)?;
    let out = DenseMatrix::from_image(&sink.into_bytes())?.with_intervals(input.intervals());
    Ok((out, report))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LargeDenseReport {
    pub passes: Vec<SemReport>,
    pub sparse_bytes_read: u64,
    pub dense_bytes_read: u64,
    /// Payload bytes written by the multiplication passes.
    pub pass_payload_bytes: u64,
    /// Bytes written while interleaving per-pass results into the final image.
    pub interleave_bytes: u64,
    pub peak_tracked_bytes: u64,
}

fn part_name(out_name: &str, k: usize) -> String {
    format!("{out_name}.pass{k}")
}

/// Multiply an on-storage dense matrix too wide for memory, one vertical
/// partition per pass. Each pass writes its columns as a separate image;
/// with more than one pass these are interleaved into the final row-major
/// image `out_name` and removed.
pub fn spmm_large_dense(
    spm: &dyn ReadSource,
    store: &dyn Store,
    in_name: &str,
    out_name: &str,
    plan: &VerticalPartitionPlan,
    cfg: &SemConfig,
) -> Result<LargeDenseReport> {
    let dense_in = store.open(in_name)?;
    let meta = DenseImageMeta::read_from(&*dense_in)?;
    if meta.cols != plan.total_cols {
        return Err(Error::shape(format!(
            "plan covers {} columns, dense input has {}",
            plan.total_cols, meta.cols
        )));
    }
    let part_bytes = (meta.rows * plan.cols_per_pass * ELEM_BYTES) as u64;
    let tracker = MemTracker::new(cfg.memory_limit(part_bytes));
    let dense_counters = IoCounters::new();
    let counted_in = CountingSource::new(&*dense_in, Arc::clone(&dense_counters));
    let mut report = LargeDenseReport::default();
    let single = plan.num_passes() == 1;

    for (k, cols) in plan.passes().enumerate() {
        let need = (meta.rows * cols.len() * ELEM_BYTES) as u64;
        tracker.alloc(need)?;
        let part = load_vertical_partition(&counted_in, cols, Some(part_bytes))?;
        let name = if single {
            out_name.to_owned()
        } else {
            part_name(out_name, k)
        };
        let mut sink = store.create(&name)?;
        let r = spmm_sem_tracked(spm, &part, cfg, &mut sink, &tracker, None);
        drop(part);
        tracker.free(need);
        let r = r?;
        report.sparse_bytes_read += r.sparse_bytes_read;
        report.pass_payload_bytes += r.writes.payload_bytes;
        report.passes.push(r);
    }
    report.dense_bytes_read = dense_counters.bytes_read();

    if !single {
        let n = report
            .passes
            .first()
            .map_or(0, |r| (r.writes.payload_bytes / (plan.cols_per_pass * ELEM_BYTES) as u64) as usize);
        report.interleave_bytes =
            interleave_parts(store, out_name, n, plan, cfg.merge_threshold, &tracker)?;
        for k in 0..plan.num_passes() {
            store.remove(&part_name(out_name, k))?;
        }
    }
    report.peak_tracked_bytes = tracker.peak();
    Ok(report)
}

/// Merge per-pass column images into one row-major image, streaming row
/// blocks sized so the block buffers stay near the merge threshold.
fn interleave_parts(
    store: &dyn Store,
    out_name: &str,
    n: usize,
    plan: &VerticalPartitionPlan,
    merge_threshold: usize,
    tracker: &MemTracker,
) -> Result<u64> {
    let total = plan.total_cols;
    let parts: Vec<_> = (0..plan.num_passes())
        .map(|k| store.open(&part_name(out_name, k)))
        .collect::<Result<_>>()?;
    let block_rows = (merge_threshold / (total.max(1) * ELEM_BYTES)).max(1);
    let buf_bytes = (2 * block_rows * total * ELEM_BYTES) as u64;
    tracker.alloc(buf_bytes)?;
    let mut sink = store.create(out_name)?;
    let mut written = 0u64;
    let head = dense_header(n as u64, total as u64);
    sink.append(&head)?;
    written += head.len() as u64;
    let mut rows_buf = vec![0.0f64; block_rows * total];
    let mut raw = Vec::new();
    let mut part_vals = Vec::new();
    let mut encoded = Vec::with_capacity(block_rows * total * ELEM_BYTES);
    let mut r = 0;
    while r < n {
        let nr = block_rows.min(n - r);
        for (k, src) in parts.iter().enumerate() {
            let cols = plan.pass(k);
            let w = cols.len();
            raw.resize(nr * w * ELEM_BYTES, 0);
            src.read_at((DENSE_HEADER_LEN + r * w * ELEM_BYTES) as u64, &mut raw)?;
            part_vals.resize(nr * w, 0.0);
            decode_f64s(&raw, &mut part_vals);
            for i in 0..nr {
                rows_buf[i * total + cols.start..i * total + cols.end]
                    .copy_from_slice(&part_vals[i * w..(i + 1) * w]);
            }
        }
        encoded.clear();
        encode_f64s(&rows_buf[..nr * total], &mut encoded);
        sink.append(&encoded)?;
        written += encoded.len() as u64;
        r += nr;
    }
    sink.finish()?;
    tracker.free(buf_bytes);
    Ok(written)
}
