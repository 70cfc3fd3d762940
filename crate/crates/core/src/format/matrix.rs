use std::ops::Range;

use crate::error::{Error, Result};
use crate::format::header::{MatrixHeader, ValueKind};
use crate::format::tile::{Entry, TileRecord, TileRecords, TileStats};
use crate::storage::ReadSource;

/// Validate the records of tile row `tr` held in `bytes`, which start at
/// image offset `base`. Calls `f` on every record once it checks out.
pub fn validate_tile_row<'a>(
    header: &MatrixHeader,
    tr: usize,
    bytes: &'a [u8],
    base: u64,
    mut f: impl FnMut(&TileRecord<'a>),
) -> Result<()> {
    let height = header.tile_row_height(tr);
    let ntc = header.num_tile_cols();
    let mut offset = base;
    let mut prev: Option<u32> = None;
    for rec in TileRecords::new(bytes, header.value_kind) {
        let rec = rec.map_err(|e| Error::corrupt(offset, e.to_string()))?;
        let tc = rec.tile_col as usize;
        if tc >= ntc || prev.is_some_and(|p| rec.tile_col <= p) {
            return Err(Error::corrupt(
                offset,
                format!("tile row {tr}: tile column {tc} out of order or range"),
            ));
        }
        if rec.nnz() == 0 {
            return Err(Error::corrupt(offset, "empty tile record"));
        }
        rec.validate(height, header.tile_col_width(tc))
            .map_err(|e| Error::corrupt(offset, e.to_string()))?;
        f(&rec);
        prev = Some(rec.tile_col);
        offset += u64::from(rec.record_len);
    }
    Ok(())
}

/// A whole sparse image resident in memory, validated on load.
#[derive(Debug, Clone)]
pub struct TiledSparseMatrix {
    header: MatrixHeader,
    image: Vec<u8>,
}

impl TiledSparseMatrix {
    pub fn from_bytes(image: Vec<u8>) -> Result<Self> {
        let header = MatrixHeader::decode(&image)?;
        if header.image_len() != image.len() as u64 {
            return Err(Error::corrupt(
                image.len() as u64,
                format!(
                    "image holds {} bytes but index describes {}",
                    image.len(),
                    header.image_len()
                ),
            ));
        }
        let m = Self { header, image };
        for tr in 0..m.header.num_tile_rows() {
            let base = m.header.tile_rows[tr].offset;
            validate_tile_row(&m.header, tr, m.tile_row_bytes(tr), base, |_| {})?;
        }
        Ok(m)
    }

    pub fn read(src: &dyn ReadSource) -> Result<Self> {
        let mut image = vec![0u8; src.len() as usize];
        src.read_at(0, &mut image)?;
        Self::from_bytes(image)
    }

    pub fn header(&self) -> &MatrixHeader {
        &self.header
    }

    pub fn n_rows(&self) -> usize {
        self.header.n_rows as usize
    }

    pub fn n_cols(&self) -> usize {
        self.header.n_cols as usize
    }

    pub fn value_kind(&self) -> ValueKind {
        self.header.value_kind
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.image
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.image
    }

    pub fn tile_row_bytes(&self, tr: usize) -> &[u8] {
        let e = self.header.tile_rows[tr];
        &self.image[e.offset as usize..(e.offset + e.len) as usize]
    }

    pub fn band_bytes(&self, band: &Range<usize>) -> &[u8] {
        let r = self.header.band_bytes(band);
        &self.image[r.start as usize..r.end as usize]
    }

    pub fn records(&self, tr: usize) -> impl Iterator<Item = TileRecord<'_>> {
        // Validated on load.
        TileRecords::new(self.tile_row_bytes(tr), self.header.value_kind).map(|r| r.unwrap())
    }

    /// Visit every non-zero with global coordinates, tile row by tile row.
    pub fn for_each_entry(&self, mut f: impl FnMut(Entry)) {
        let t = self.header.tile_size as u64;
        for tr in 0..self.header.num_tile_rows() {
            for rec in self.records(tr) {
                let r0 = tr as u64 * t;
                let c0 = u64::from(rec.tile_col) * t;
                rec.for_each(|r, c, v| f(Entry::new(r0 + r as u64, c0 + c as u64, v)));
            }
        }
    }

    /// All non-zeros sorted by (row, col).
    pub fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::with_capacity(self.nnz());
        self.for_each_entry(|e| out.push(e));
        out.sort_by_key(|e| (e.row, e.col));
        out
    }

    pub fn nnz(&self) -> usize {
        (0..self.header.num_tile_rows())
            .flat_map(|tr| self.records(tr))
            .map(|r| r.nnz())
            .sum()
    }

    /// Number of non-zeros in every column.
    pub fn column_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_cols()];
        self.for_each_entry(|e| counts[e.col as usize] += 1);
        counts
    }
}

/// Stream every tile row of an image held in `src` through `f`, one tile row
/// resident at a time. Each record is validated before `f` sees it.
pub fn scan_source(
    src: &dyn ReadSource,
    mut f: impl FnMut(&MatrixHeader, usize, &TileRecord<'_>),
) -> Result<MatrixHeader> {
    let header = MatrixHeader::read_from(src)?;
    let mut buf = Vec::new();
    for tr in 0..header.num_tile_rows() {
        let e = header.tile_rows[tr];
        buf.resize(e.len as usize, 0);
        src.read_at(e.offset, &mut buf)?;
        validate_tile_row(&header, tr, &buf, e.offset, |rec| f(&header, tr, rec))?;
    }
    Ok(header)
}

/// Stream every non-zero (global coordinates) of an image in `src`.
pub fn scan_entries(src: &dyn ReadSource, mut f: impl FnMut(Entry)) -> Result<MatrixHeader> {
    scan_source(src, |h, tr, rec| {
        let t = u64::from(h.tile_size);
        let r0 = tr as u64 * t;
        let c0 = u64::from(rec.tile_col) * t;
        rec.for_each(|r, c, v| f(Entry::new(r0 + r as u64, c0 + c as u64, v)));
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSummary {
    pub tile_row: usize,
    pub tile_col: usize,
    pub stats: TileStats,
    pub record_len: u64,
    pub index_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixStats {
    pub n_rows: u64,
    pub n_cols: u64,
    pub tile_size: u32,
    pub value_kind: ValueKind,
    pub tiles: Vec<TileSummary>,
    pub aggregate: TileStats,
    pub header_bytes: u64,
    pub record_bytes: u64,
    pub file_bytes: u64,
}

/// Read-only scan collecting per-tile and aggregate statistics.
pub fn matrix_stats(src: &dyn ReadSource) -> Result<MatrixStats> {
    let mut tiles = Vec::new();
    let header = scan_source(src, |h, tr, rec| {
        let tc = rec.tile_col as usize;
        tiles.push(TileSummary {
            tile_row: tr,
            tile_col: tc,
            stats: rec.stats(h.tile_col_width(tc)),
            record_len: u64::from(rec.record_len),
            index_len: rec.index_len() as u64,
        });
    })?;
    let mut aggregate = TileStats {
        c: header.value_kind.width() as u64,
        ..TileStats::default()
    };
    for t in &tiles {
        aggregate.accumulate(&t.stats);
    }
    let header_bytes = header.encoded_len();
    let record_bytes = tiles.iter().map(|t| t.record_len).sum();
    Ok(MatrixStats {
        n_rows: header.n_rows,
        n_cols: header.n_cols,
        tile_size: header.tile_size,
        value_kind: header.value_kind,
        tiles,
        aggregate,
        header_bytes,
        record_bytes,
        file_bytes: src.len(),
    })
}
