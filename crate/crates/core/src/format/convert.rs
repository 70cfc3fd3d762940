//! Edge stream to tiled image conversion.
//!
//! Edges are sorted by (tile row, tile col, row, col), spilling sorted runs
//! to temporary files once the in-memory run exceeds the sort budget, then
//! merged and encoded tile by tile. The body is written sequentially right
//! after the space reserved for the header, and the header is written last,
//! so every output byte is written once and the edge source is read once.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::format::header::{
    num_tiles, validate_tile_size, MatrixHeader, TileRowExtent, ValueKind, DEFAULT_TILE_SIZE,
};
use crate::format::tile::{encode_tile, Entry};
use crate::storage::WriteSink;

const SPILL_ENTRY_LEN: usize = 24;
const WRITE_CHUNK: usize = 8 << 20;

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    /// Source-matrix dimensions; inferred as max id + 1 when absent.
    pub n_rows: Option<u64>,
    pub n_cols: Option<u64>,
    pub tile_size: u32,
    pub value_kind: ValueKind,
    /// Emit the image of the transposed matrix.
    pub transpose: bool,
    /// In-memory sort budget in bytes before runs spill to disk.
    pub sort_budget: usize,
    pub spill_dir: Option<PathBuf>,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            n_rows: None,
            n_cols: None,
            tile_size: DEFAULT_TILE_SIZE,
            value_kind: ValueKind::Binary,
            transpose: false,
            sort_budget: 256 << 20,
            spill_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvertReport {
    pub header: MatrixHeader,
    pub edges_in: u64,
    pub nnz: u64,
    pub duplicates_dropped: u64,
    pub spilled_runs: usize,
    pub bytes_written: u64,
}

type SortKey = (u64, u64, u64, u64);

fn sort_key(e: &Entry, shift: u32) -> SortKey {
    (e.row >> shift, e.col >> shift, e.row, e.col)
}

struct SpillRun {
    reader: BufReader<File>,
}

impl SpillRun {
    fn write(entries: &[Entry], dir: Option<&PathBuf>) -> Result<Self> {
        let file = match dir {
            Some(d) => tempfile::tempfile_in(d)?,
            None => tempfile::tempfile()?,
        };
        let mut w = BufWriter::new(file);
        for e in entries {
            w.write_all(&e.row.to_le_bytes())?;
            w.write_all(&e.col.to_le_bytes())?;
            w.write_all(&e.value.to_le_bytes())?;
        }
        let mut file = w.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(0))?;
        Ok(Self {
            reader: BufReader::new(file),
        })
    }

    fn next(&mut self) -> Result<Option<Entry>> {
        let mut buf = [0u8; SPILL_ENTRY_LEN];
        match self.reader.read_exact(&mut buf) {
            Ok(()) => Ok(Some(Entry::new(
                u64::from_le_bytes(buf[0..8].try_into().unwrap()),
                u64::from_le_bytes(buf[8..16].try_into().unwrap()),
                f64::from_le_bytes(buf[16..24].try_into().unwrap()),
            ))),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

/// K-way merge over spilled runs plus the final in-memory run.
struct Merger {
    shift: u32,
    runs: Vec<SpillRun>,
    memory: std::vec::IntoIter<Entry>,
    heads: Vec<Option<Entry>>,
    heap: BinaryHeap<Reverse<(SortKey, usize)>>,
}

impl Merger {
    fn new(runs: Vec<SpillRun>, memory: Vec<Entry>, shift: u32) -> Result<Self> {
        let mut m = Self {
            shift,
            heads: vec![None; runs.len() + 1],
            runs,
            memory: memory.into_iter(),
            heap: BinaryHeap::new(),
        };
        for i in 0..m.heads.len() {
            m.refill(i)?;
        }
        Ok(m)
    }

    fn refill(&mut self, i: usize) -> Result<()> {
        let next = if i < self.runs.len() {
            self.runs[i].next()?
        } else {
            self.memory.next()
        };
        if let Some(e) = next {
            self.heap.push(Reverse((sort_key(&e, self.shift), i)));
        }
        self.heads[i] = next;
        Ok(())
    }

    fn next(&mut self) -> Result<Option<Entry>> {
        let Some(Reverse((_, i))) = self.heap.pop() else {
            return Ok(None);
        };
        let e = self.heads[i].take().expect("heap entry without head");
        self.refill(i)?;
        Ok(Some(e))
    }
}

/// Buffers the body and writes it sequentially starting at `offset`.
struct BodyWriter<'a> {
    sink: &'a mut dyn WriteSink,
    offset: u64,
    buf: Vec<u8>,
    written: u64,
}

impl BodyWriter<'_> {
    fn push(&mut self, bytes: &[u8]) -> Result<()> {
        self.buf.extend_from_slice(bytes);
        if self.buf.len() >= WRITE_CHUNK {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if !self.buf.is_empty() {
            self.sink.write_at(self.offset, &self.buf)?;
            self.offset += self.buf.len() as u64;
            self.written += self.buf.len() as u64;
            self.buf.clear();
        }
        Ok(())
    }
}

/// Convert an edge stream into a tiled image written to `sink`.
pub fn convert<I>(edges: I, opts: &ConvertOptions, sink: &mut dyn WriteSink) -> Result<ConvertReport>
where
    I: IntoIterator<Item = Result<Entry>>,
{
    let t = opts.tile_size;
    validate_tile_size(t)?;
    let shift = t.trailing_zeros();
    let run_cap = (opts.sort_budget / std::mem::size_of::<Entry>()).max(1);

    let mut runs = Vec::new();
    let mut current: Vec<Entry> = Vec::new();
    let mut edges_in = 0u64;
    let (mut max_row, mut max_col) = (None::<u64>, None::<u64>);
    for e in edges {
        let e = e?;
        if let Some(n) = opts.n_rows {
            if e.row >= n {
                return Err(Error::IdOutOfRange { id: e.row, dim: n });
            }
        }
        if let Some(m) = opts.n_cols {
            if e.col >= m {
                return Err(Error::IdOutOfRange { id: e.col, dim: m });
            }
        }
        max_row = max_row.max(Some(e.row));
        max_col = max_col.max(Some(e.col));
        edges_in += 1;
        let value = match opts.value_kind {
            ValueKind::Binary => 1.0,
            ValueKind::Float64 => e.value,
        };
        let e = if opts.transpose {
            Entry::new(e.col, e.row, value)
        } else {
            Entry::new(e.row, e.col, value)
        };
        current.push(e);
        if current.len() >= run_cap {
            current.sort_unstable_by_key(|e| sort_key(e, shift));
            runs.push(SpillRun::write(&current, opts.spill_dir.as_ref())?);
            current.clear();
        }
    }
    current.sort_unstable_by_key(|e| sort_key(e, shift));

    let src_rows = opts.n_rows.unwrap_or(max_row.map_or(0, |r| r + 1));
    let src_cols = opts.n_cols.unwrap_or(max_col.map_or(0, |c| c + 1));
    let (n_rows, n_cols) = if opts.transpose {
        (src_cols, src_rows)
    } else {
        (src_rows, src_cols)
    };

    let spilled_runs = runs.len();
    let mut merger = Merger::new(runs, current, shift)?;

    let ntr = num_tiles(n_rows, t);
    let header_len = MatrixHeader::encoded_len_for(ntr);
    let mut body = BodyWriter {
        sink,
        offset: header_len,
        buf: Vec::new(),
        written: 0,
    };
    let mut extents = vec![TileRowExtent::default(); ntr as usize];
    let mut pos = header_len;
    let mut next_tr = 0usize;
    let mut tile: Vec<Entry> = Vec::new();
    let mut tile_id: Option<(u64, u64)> = None;
    let mut prev: Option<(u64, u64)> = None;
    let mut nnz = 0u64;
    let mut duplicates_dropped = 0u64;
    let tmask = u64::from(t) - 1;

    let flush_tile = |tile: &mut Vec<Entry>,
                          id: (u64, u64),
                          body: &mut BodyWriter<'_>,
                          extents: &mut [TileRowExtent],
                          next_tr: &mut usize,
                          pos: &mut u64|
     -> Result<()> {
        let tr = id.0 as usize;
        while *next_tr <= tr {
            extents[*next_tr] = TileRowExtent { offset: *pos, len: 0 };
            *next_tr += 1;
        }
        if let Some(rec) = encode_tile(id.1 as u32, tile, t, opts.value_kind)? {
            body.push(&rec)?;
            extents[tr].len += rec.len() as u64;
            *pos += rec.len() as u64;
        }
        tile.clear();
        Ok(())
    };

    while let Some(e) = merger.next()? {
        if prev == Some((e.row, e.col)) {
            if opts.value_kind == ValueKind::Float64 {
                let (row, col) = if opts.transpose { (e.col, e.row) } else { (e.row, e.col) };
                return Err(Error::DuplicateEdge { row, col });
            }
            duplicates_dropped += 1;
            continue;
        }
        prev = Some((e.row, e.col));
        let id = (e.row >> shift, e.col >> shift);
        if tile_id != Some(id) {
            if let Some(old) = tile_id {
                flush_tile(&mut tile, old, &mut body, &mut extents, &mut next_tr, &mut pos)?;
            }
            tile_id = Some(id);
        }
        tile.push(Entry::new(e.row & tmask, e.col & tmask, e.value));
        nnz += 1;
    }
    if let Some(old) = tile_id {
        flush_tile(&mut tile, old, &mut body, &mut extents, &mut next_tr, &mut pos)?;
    }
    while next_tr < ntr as usize {
        extents[next_tr] = TileRowExtent { offset: pos, len: 0 };
        next_tr += 1;
    }
    body.flush()?;
    let body_written = body.written;

    let header = MatrixHeader {
        n_rows,
        n_cols,
        tile_size: t,
        value_kind: opts.value_kind,
        tile_rows: extents,
    };
    let head = header.encode();
    sink.write_at(0, &head)?;
    sink.finish()?;

    Ok(ConvertReport {
        header,
        edges_in,
        nnz,
        duplicates_dropped,
        spilled_runs,
        bytes_written: body_written + head.len() as u64,
    })
}

/// Convenience wrapper converting into an in-memory image.
pub fn convert_to_vec<I>(edges: I, opts: &ConvertOptions) -> Result<(Vec<u8>, ConvertReport)>
where
    I: IntoIterator<Item = Result<Entry>>,
{
    let mut sink = crate::storage::MemSink::new();
    let report = convert(edges, opts, &mut sink)?;
    Ok((sink.into_bytes(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::matrix::TiledSparseMatrix;
    use crate::format::tile::TileRecord;

    fn edges(list: &[(u64, u64)]) -> Vec<Result<Entry>> {
        list.iter().map(|&(u, v)| Ok(Entry::new(u, v, 1.0))).collect()
    }

    fn opts(n: u64, t: u32) -> ConvertOptions {
        ConvertOptions {
            n_rows: Some(n),
            n_cols: Some(n),
            tile_size: t,
            ..ConvertOptions::default()
        }
    }

    #[test]
    fn empty_matrix() {
        let (bytes, report) = convert_to_vec(edges(&[]), &opts(16, 16)).unwrap();
        assert_eq!(report.header.num_tile_rows(), 1);
        assert_eq!(report.header.tile_rows[0].len, 0);
        assert_eq!(bytes.len() as u64, MatrixHeader::encoded_len_for(1));
        let m = TiledSparseMatrix::from_bytes(bytes).unwrap();
        assert_eq!(m.nnz(), 0);
    }

    #[test]
    fn three_edges_single_tile() {
        let (bytes, report) =
            convert_to_vec(edges(&[(5, 2), (0, 3), (0, 1)]), &opts(16, 16)).unwrap();
        assert_eq!(report.nnz, 3);
        assert_eq!(report.bytes_written, bytes.len() as u64);
        let m = TiledSparseMatrix::from_bytes(bytes).unwrap();
        let recs: Vec<TileRecord<'_>> = m.records(0).collect();
        assert_eq!(recs.len(), 1);
        assert_eq!((recs[0].nnz_scsr, recs[0].num_coo), (2, 1));
        let got: Vec<(u64, u64)> = m.entries().iter().map(|e| (e.row, e.col)).collect();
        assert_eq!(got, [(0, 1), (0, 3), (5, 2)]);
    }

    #[test]
    fn out_of_range_and_duplicates() {
        assert!(matches!(
            convert_to_vec(edges(&[(16, 0)]), &opts(16, 16)),
            Err(Error::IdOutOfRange { id: 16, dim: 16 })
        ));
        let (_, r) = convert_to_vec(edges(&[(1, 2), (1, 2), (3, 4)]), &opts(16, 16)).unwrap();
        assert_eq!((r.nnz, r.duplicates_dropped), (2, 1));

        let weighted = ConvertOptions {
            value_kind: ValueKind::Float64,
            ..opts(16, 16)
        };
        assert!(matches!(
            convert_to_vec(edges(&[(1, 2), (1, 2)]), &weighted),
            Err(Error::DuplicateEdge { row: 1, col: 2 })
        ));
    }

    #[test]
    fn transpose_and_inferred_dims() {
        let o = ConvertOptions {
            tile_size: 4,
            transpose: true,
            ..ConvertOptions::default()
        };
        let (bytes, r) = convert_to_vec(edges(&[(0, 9), (2, 1)]), &o).unwrap();
        assert_eq!((r.header.n_rows, r.header.n_cols), (10, 3));
        let m = TiledSparseMatrix::from_bytes(bytes).unwrap();
        let got: Vec<(u64, u64)> = m.entries().iter().map(|e| (e.row, e.col)).collect();
        assert_eq!(got, [(1, 2), (9, 0)]);
        assert_eq!(m.header().num_tile_rows(), 3);
    }

    #[test]
    fn spilled_runs_match_in_memory() {
        let list: Vec<(u64, u64)> = (0..5000u64)
            .map(|i| ((i * 7919) % 300, (i * 104729) % 280))
            .collect();
        let (a, ra) = convert_to_vec(edges(&list), &opts(300, 64)).unwrap();
        let small = ConvertOptions {
            sort_budget: 40 * 24,
            ..opts(300, 64)
        };
        let (b, rb) = convert_to_vec(edges(&list), &small).unwrap();
        assert_eq!(ra.spilled_runs, 0);
        assert!(rb.spilled_runs > 10);
        assert_eq!(a, b);
    }
}
