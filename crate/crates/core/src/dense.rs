//! Row-major dense matrices, their on-storage image, vertical partitioning
//! and the small dense kernels the applications need.
//!
//! Reductions over rows always run over fixed-size row chunks whose partial
//! results are combined in chunk order, so every entry of a result depends
//! only on its own input columns and never on thread count or on which other
//! columns were computed alongside it.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::format::header::{read_u32, read_u64, DEFAULT_TILE_SIZE};
use crate::storage::{ReadSource, WriteSink};

pub const DENSE_MAGIC: [u8; 8] = *b"DENSEF64";
pub const DENSE_VERSION: u32 = 1;
pub const DENSE_HEADER_LEN: usize = 8 + 4 + 8 + 8;
/// Element width in bytes.
pub const ELEM_BYTES: usize = 8;

const REDUCE_CHUNK: usize = 1024;

/// Default epsilon added to denominators by [`hadamard_scale`].
pub const DEFAULT_DIV_GUARD: f64 = 1e-12;

/// Logical horizontal striping of a dense matrix into `2^i`-row intervals,
/// each owned by one placement domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowIntervals {
    size: usize,
    /// Round-robin domain count; `None` maps interval `i` to domain `i`.
    domains: Option<usize>,
}

impl RowIntervals {
    pub fn new(size: usize, domains: Option<usize>) -> Result<Self> {
        if !size.is_power_of_two() {
            return Err(Error::invalid(
                "row_interval_size",
                format!("{size} is not a power of two"),
            ));
        }
        if domains == Some(0) {
            return Err(Error::invalid("domains", "must be positive"));
        }
        Ok(Self { size, domains })
    }

    /// Smallest power of two that is at least `4·t`.
    pub fn for_tile_size(t: usize) -> Self {
        Self {
            size: (4 * t).next_power_of_two(),
            domains: None,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn interval_of(&self, row: usize) -> usize {
        row / self.size
    }

    pub fn domain_of(&self, interval: usize) -> usize {
        match self.domains {
            None => interval,
            Some(d) => interval % d,
        }
    }

    pub fn count(&self, n_rows: usize) -> usize {
        n_rows.div_ceil(self.size)
    }

    pub fn rows(&self, interval: usize, n_rows: usize) -> Range<usize> {
        let start = interval * self.size;
        start.min(n_rows)..((interval + 1) * self.size).min(n_rows)
    }

    /// Tiles of size `t` must never straddle two intervals.
    pub fn check_tile_size(&self, t: usize) -> Result<()> {
        if !self.size.is_multiple_of(t) {
            return Err(Error::invalid(
                "row_interval_size",
                format!("{} is not a multiple of tile size {t}", self.size),
            ));
        }
        Ok(())
    }
}

impl Default for RowIntervals {
    fn default() -> Self {
        Self::for_tile_size(DEFAULT_TILE_SIZE as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    intervals: RowIntervals,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            intervals: RowIntervals::default(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            intervals: RowIntervals::default(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            data,
            intervals: RowIntervals::default(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// Entries uniform in `[0, 1)` from a seeded generator.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(rows, cols, |_, _| rng.random::<f64>())
    }

    pub fn with_intervals(mut self, intervals: RowIntervals) -> Self {
        self.intervals = intervals;
        self
    }

    pub fn intervals(&self) -> RowIntervals {
        self.intervals
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn size_bytes(&self) -> u64 {
        (self.data.len() * ELEM_BYTES) as u64
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Copy of a contiguous column range.
    pub fn columns(&self, range: Range<usize>) -> DenseMatrix {
        let w = range.len();
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[range.clone()]);
        }
        DenseMatrix {
            rows: self.rows,
            cols: w,
            data,
            intervals: self.intervals,
        }
    }

    pub fn set_columns(&mut self, start: usize, part: &DenseMatrix) -> Result<()> {
        if part.rows != self.rows || start + part.cols > self.cols {
            return Err(Error::shape(format!(
                "cannot place {}x{} at column {start} of {}x{}",
                part.rows, part.cols, self.rows, self.cols
            )));
        }
        for r in 0..self.rows {
            let cols = self.cols;
            self.data[r * cols + start..r * cols + start + part.cols].copy_from_slice(part.row(r));
        }
        Ok(())
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Serialize as a dense image.
    pub fn to_image(&self) -> Vec<u8> {
        let mut out = dense_header(self.rows as u64, self.cols as u64);
        out.reserve(self.data.len() * ELEM_BYTES);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_image(bytes: &[u8]) -> Result<Self> {
        let (rows, cols) = parse_dense_header(bytes)?;
        let want = DENSE_HEADER_LEN as u64 + rows * cols * ELEM_BYTES as u64;
        if bytes.len() as u64 != want {
            return Err(Error::corrupt(
                bytes.len() as u64,
                format!("dense image holds {} bytes, expected {want}", bytes.len()),
            ));
        }
        let data = bytes[DENSE_HEADER_LEN..]
            .chunks_exact(ELEM_BYTES)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DenseMatrix::from_vec(rows as usize, cols as usize, data)
    }

    pub fn write_image(&self, sink: &mut dyn WriteSink) -> Result<()> {
        sink.append(&self.to_image())?;
        sink.finish()
    }

    pub fn read_image(src: &dyn ReadSource) -> Result<Self> {
        let meta = DenseImageMeta::read_from(src)?;
        load_vertical_partition(src, 0..meta.cols, None)
    }
}

pub fn dense_header(rows: u64, cols: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(DENSE_HEADER_LEN);
    out.extend_from_slice(&DENSE_MAGIC);
    out.extend_from_slice(&DENSE_VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out
}

fn parse_dense_header(bytes: &[u8]) -> Result<(u64, u64)> {
    if bytes.len() < DENSE_HEADER_LEN {
        return Err(Error::corrupt(bytes.len() as u64, "truncated dense header"));
    }
    if bytes[..8] != DENSE_MAGIC {
        return Err(Error::corrupt(0, "bad dense magic"));
    }
    let version = read_u32(bytes, 8);
    if version != DENSE_VERSION {
        return Err(Error::corrupt(8, format!("unsupported dense version {version}")));
    }
    Ok((read_u64(bytes, 12), read_u64(bytes, 20)))
}

/// Dimensions of a dense image on storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseImageMeta {
    pub rows: usize,
    pub cols: usize,
}

impl DenseImageMeta {
    pub fn read_from(src: &dyn ReadSource) -> Result<Self> {
        let mut head = [0u8; DENSE_HEADER_LEN];
        if src.len() < DENSE_HEADER_LEN as u64 {
            return Err(Error::corrupt(src.len(), "truncated dense header"));
        }
        src.read_at(0, &mut head)?;
        let (rows, cols) = parse_dense_header(&head)?;
        let want = DENSE_HEADER_LEN as u64 + rows * cols * ELEM_BYTES as u64;
        if src.len() != want {
            return Err(Error::corrupt(
                src.len(),
                format!("dense image holds {} bytes, expected {want}", src.len()),
            ));
        }
        Ok(Self {
            rows: rows as usize,
            cols: cols as usize,
        })
    }
}

/// Split of `total_cols` columns into passes of at most `cols_per_pass`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerticalPartitionPlan {
    pub total_cols: usize,
    pub cols_per_pass: usize,
}

impl VerticalPartitionPlan {
    pub fn new(total_cols: usize, cols_per_pass: usize) -> Result<Self> {
        if cols_per_pass == 0 {
            return Err(Error::invalid("mem_cols", "must be at least 1"));
        }
        Ok(Self {
            total_cols,
            cols_per_pass: cols_per_pass.min(total_cols.max(1)),
        })
    }

    pub fn num_passes(&self) -> usize {
        self.total_cols.div_ceil(self.cols_per_pass)
    }

    pub fn pass(&self, k: usize) -> Range<usize> {
        let start = k * self.cols_per_pass;
        start..(start + self.cols_per_pass).min(self.total_cols)
    }

    pub fn passes(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.num_passes()).map(|k| self.pass(k))
    }
}

/// Rows per read when a full-width partition is loaded.
const LOAD_BLOCK_ROWS: usize = 4096;

/// Load columns `cols` of an on-storage dense image. Full-width loads read
/// contiguous row blocks; narrower ones read each row's segment, so every
/// needed byte is read exactly once and in ascending offset order.
pub fn load_vertical_partition(
    src: &dyn ReadSource,
    cols: Range<usize>,
    budget: Option<u64>,
) -> Result<DenseMatrix> {
    let meta = DenseImageMeta::read_from(src)?;
    if cols.start > cols.end || cols.end > meta.cols {
        return Err(Error::invalid(
            "col_range",
            format!("{cols:?} outside [0, {})", meta.cols),
        ));
    }
    let width = cols.len();
    let needed = (meta.rows * width * ELEM_BYTES) as u64;
    if let Some(limit) = budget {
        if needed > limit {
            return Err(Error::Budget { needed, limit });
        }
    }
    let mut data = vec![0.0f64; meta.rows * width];
    let row_bytes = meta.cols * ELEM_BYTES;
    let mut buf = Vec::new();
    if width == meta.cols {
        let mut r = 0;
        while r < meta.rows {
            let nr = LOAD_BLOCK_ROWS.min(meta.rows - r);
            buf.resize(nr * row_bytes, 0);
            src.read_at((DENSE_HEADER_LEN + r * row_bytes) as u64, &mut buf)?;
            decode_f64s(&buf, &mut data[r * width..(r + nr) * width]);
            r += nr;
        }
    } else if width > 0 {
        buf.resize(width * ELEM_BYTES, 0);
        for r in 0..meta.rows {
            let off = DENSE_HEADER_LEN + r * row_bytes + cols.start * ELEM_BYTES;
            src.read_at(off as u64, &mut buf)?;
            decode_f64s(&buf, &mut data[r * width..(r + 1) * width]);
        }
    }
    DenseMatrix::from_vec(meta.rows, width, data)
}

pub(crate) fn decode_f64s(bytes: &[u8], out: &mut [f64]) {
    for (o, c) in out.iter_mut().zip(bytes.chunks_exact(ELEM_BYTES)) {
        *o = f64::from_le_bytes(c.try_into().unwrap());
    }
}

pub(crate) fn encode_f64s(values: &[f64], out: &mut Vec<u8>) {
    out.reserve(values.len() * ELEM_BYTES);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// `Aᵀ·B` for `A: n×p`, `B: n×q`.
pub fn transpose_multiply(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "transpose_multiply: {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (p, q) = (a.cols, b.cols);
    let partials: Vec<Vec<f64>> = (0..a.rows.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![0.0; p * q];
            let rows = chunk * REDUCE_CHUNK..((chunk + 1) * REDUCE_CHUNK).min(a.rows);
            for r in rows {
                let ar = a.row(r);
                let br = b.row(r);
                for (i, &x) in ar.iter().enumerate() {
                    for (o, &y) in acc[i * q..(i + 1) * q].iter_mut().zip(br) {
                        *o += x * y;
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; p * q];
    for part in &partials {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
    DenseMatrix::from_vec(p, q, out)
}

/// `A·B` for `A: n×k`, `B: k×m`.
pub fn multiply(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "multiply: {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let m = b.cols;
    let mut out = vec![0.0; a.rows * m];
    if m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(|(r, orow)| {
            for (l, &x) in a.row(r).iter().enumerate() {
                for (o, &y) in orow.iter_mut().zip(b.row(l)) {
                    *o += x * y;
                }
            }
        });
    }
    DenseMatrix::from_vec(a.rows, m, out)
}

/// Scalar multiplicative update `x · num / (den + eps)`.
#[inline]
pub fn hadamard_scale(x: f64, num: f64, den: f64, eps: f64) -> f64 {
    x * num / (den + eps)
}

/// Elementwise [`hadamard_scale`] applied in place to `x`.
pub fn hadamard_scale_in_place(
    x: &mut DenseMatrix,
    num: &DenseMatrix,
    den: &DenseMatrix,
    eps: f64,
) -> Result<()> {
    if x.shape() != num.shape() || x.shape() != den.shape() {
        return Err(Error::shape(format!(
            "hadamard_scale: {:?}, {:?}, {:?}",
            x.shape(),
            num.shape(),
            den.shape()
        )));
    }
    x.data
        .par_iter_mut()
        .zip(num.data.par_iter().zip(den.data.par_iter()))
        .for_each(|(x, (&n, &d))| *x = hadamard_scale(*x, n, d, eps));
    Ok(())
}

pub fn frobenius_norm(a: &DenseMatrix) -> f64 {
    a.data
        .chunks(REDUCE_CHUNK)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Columns whose residual norm falls below this fraction of their original
/// norm are treated as linearly dependent.
pub const QR_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct QrResult {
    /// `n × r` with orthonormal columns.
    pub q: DenseMatrix,
    /// `r × b`, so that `Q·R` reconstructs the input.
    pub r: DenseMatrix,
    /// Input columns dropped as dependent.
    pub dropped: Vec<usize>,
}

/// Modified Gram-Schmidt QR with one re-orthogonalization sweep.
pub fn mgs_qr(a: &DenseMatrix) -> QrResult {
    let n = a.rows;
    let b = a.cols;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut dropped = Vec::new();
    for j in 0..b {
        let mut v = a.column(j);
        let orig = norm(&v);
        let mut rcol = vec![0.0; basis.len()];
        for _ in 0..2 {
            for (i, q) in basis.iter().enumerate() {
                let d = dot(q, &v);
                rcol[i] += d;
                for (x, y) in v.iter_mut().zip(q) {
                    *x -= d * y;
                }
            }
        }
        let nv = norm(&v);
        if orig == 0.0 || nv <= QR_RANK_TOL * orig {
            dropped.push(j);
            coeffs.push(rcol);
            continue;
        }
        for x in &mut v {
            *x /= nv;
        }
        rcol.push(nv);
        basis.push(v);
        coeffs.push(rcol);
    }
    let rank = basis.len();
    let q = DenseMatrix::from_fn(n, rank, |r, c| basis[c][r]);
    let r = DenseMatrix::from_fn(rank, b, |i, j| coeffs[j].get(i).copied().unwrap_or(0.0));
    QrResult { q, r, dropped }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{CountingSource, IoCounters, MemSource};

    #[test]
    fn transpose_multiply_identity() {
        let b = DenseMatrix::random(3, 5, 1);
        let c = transpose_multiply(&DenseMatrix::identity(3), &b).unwrap();
        assert_eq!(c, b);
        assert!(transpose_multiply(&DenseMatrix::zeros(2, 2), &b).is_err());
    }

    #[test]
    fn multiply_matches_hand_result() {
        let a = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DenseMatrix::from_vec(2, 1, vec![5.0, 6.0]).unwrap();
        assert_eq!(multiply(&a, &b).unwrap().as_slice(), &[17.0, 39.0]);
        assert!(multiply(&b, &b).is_err());
    }

    #[test]
    fn transpose_multiply_is_column_local() {
        let a = DenseMatrix::random(3000, 6, 2);
        let full = transpose_multiply(&a, &a).unwrap();
        let part = transpose_multiply(&a.columns(2..4), &a.columns(1..5)).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(part.get(i, j).to_bits(), full.get(i + 2, j + 1).to_bits());
            }
        }
    }

    #[test]
    fn hadamard_scalar() {
        assert_eq!(hadamard_scale(2.0, 6.0, 3.0, 0.0), 4.0);
        assert_eq!(hadamard_scale(2.0, 0.0, 0.0, DEFAULT_DIV_GUARD), 0.0);
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let a = DenseMatrix::random(100, 4, 7);
        let qr = mgs_qr(&a);
        assert!(qr.dropped.is_empty());
        let qtq = transpose_multiply(&qr.q, &qr.q).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((qtq.get(i, j) - want).abs() <= 1e-12);
            }
        }
        let recon = multiply(&qr.q, &qr.r).unwrap();
        let diff = DenseMatrix::from_fn(100, 4, |r, c| recon.get(r, c) - a.get(r, c));
        assert!(frobenius_norm(&diff) <= 1e-10 * frobenius_norm(&a));
    }

    #[test]
    fn qr_drops_dependent_columns() {
        let base = DenseMatrix::random(50, 2, 3);
        let a = DenseMatrix::from_fn(50, 3, |r, c| match c {
            2 => base.get(r, 0) * 2.0 - base.get(r, 1),
            _ => base.get(r, c),
        });
        let qr = mgs_qr(&a);
        assert_eq!(qr.dropped, [2]);
        assert_eq!(qr.q.cols(), 2);
    }

    #[test]
    fn intervals() {
        let iv = RowIntervals::for_tile_size(16);
        assert_eq!(iv.size(), 64);
        assert_eq!(iv.interval_of(130), 2);
        assert_eq!(iv.count(130), 3);
        assert_eq!(iv.rows(2, 130), 128..130);
        assert_eq!(iv.domain_of(5), 5);
        let rr = RowIntervals::new(64, Some(2)).unwrap();
        assert_eq!(rr.domain_of(5), 1);
        assert!(rr.check_tile_size(16).is_ok());
        assert!(rr.check_tile_size(128).is_err());
        assert!(RowIntervals::new(48, None).is_err());
        assert_eq!(RowIntervals::for_tile_size(16384).size(), 65536);
    }

    #[test]
    fn plan_arithmetic() {
        let plan = VerticalPartitionPlan::new(32, 8).unwrap();
        assert_eq!(plan.num_passes(), 4);
        assert_eq!(plan.pass(2), 16..24);
        let single = VerticalPartitionPlan::new(32, 32).unwrap();
        assert_eq!(single.passes().collect::<Vec<_>>(), [0..32]);
        let ragged = VerticalPartitionPlan::new(10, 4).unwrap();
        assert_eq!(ragged.passes().collect::<Vec<_>>(), [0..4, 4..8, 8..10]);
        assert!(VerticalPartitionPlan::new(4, 0).is_err());
    }

    #[test]
    fn vertical_partitions_reassemble() {
        let m = DenseMatrix::random(64, 32, 11);
        let counters = IoCounters::new();
        let src = CountingSource::new(MemSource::new(m.to_image()), counters.clone());
        let plan = VerticalPartitionPlan::new(32, 8).unwrap();
        let mut out = DenseMatrix::zeros(64, 32);
        counters.reset();
        for cols in plan.passes() {
            let part = load_vertical_partition(&src, cols.clone(), None).unwrap();
            out.set_columns(cols.start, &part).unwrap();
        }
        assert_eq!(out.to_image(), m.to_image());
        // every payload byte exactly once, plus one header read per pass
        assert_eq!(
            counters.bytes_read(),
            m.size_bytes() + 4 * DENSE_HEADER_LEN as u64
        );
        assert!(matches!(
            load_vertical_partition(&src, 0..8, Some(64 * 8 * 8 - 1)),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn truncated_image_rejected() {
        let mut img = DenseMatrix::random(4, 3, 1).to_image();
        img.pop();
        assert!(DenseMatrix::from_image(&img).is_err());
        assert!(DenseMatrix::read_image(&MemSource::new(img)).is_err());
    }
}
