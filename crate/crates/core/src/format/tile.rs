//! SCSR+COO tile records.
//!
//! Record layout (little endian):
//!
//! ```text
//! tile_col_id: u32 | record_len: u32 | nnz_scsr: u32 | num_coo: u32
//! SCSR rows: [row header u16 (MSB set)] [col u16 (MSB clear)]...   (rows with >= 2 entries)
//! COO pairs: [row u16] [col u16]...                                 (rows with exactly 1 entry)
//! values:    f64 per entry, SCSR order then COO order (absent for Binary)
//! ```

use crate::error::{Error, Result};
use crate::format::header::{read_f64, read_u16, read_u32, ValueKind};

pub const RECORD_HEADER_LEN: usize = 16;
pub(crate) const ROW_FLAG: u16 = 0x8000;
const ID_MASK: u16 = 0x7fff;

/// One non-zero. Coordinates are tile-relative inside this module and
/// global elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: u64,
    pub col: u64,
    pub value: f64,
}

impl Entry {
    pub fn new(row: u64, col: u64, value: f64) -> Self {
        Self { row, col, value }
    }
}

/// Per-tile storage statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TileStats {
    /// Non-empty rows.
    pub nnr: u64,
    /// Non-empty columns.
    pub nnc: u64,
    pub nnz: u64,
    /// Value width in bytes.
    pub c: u64,
}

impl TileStats {
    pub fn accumulate(&mut self, other: &TileStats) {
        self.nnr += other.nnr;
        self.nnc += other.nnc;
        self.nnz += other.nnz;
        self.c = other.c;
    }
}

/// Borrowed view of one encoded tile record.
#[derive(Debug, Clone, Copy)]
pub struct TileRecord<'a> {
    pub tile_col: u32,
    pub record_len: u32,
    pub nnz_scsr: u32,
    pub num_coo: u32,
    pub kind: ValueKind,
    /// SCSR row headers and column entries.
    pub scsr: &'a [u8],
    /// COO (row, col) pairs.
    pub coo: &'a [u8],
    /// Value region; empty for Binary.
    pub values: &'a [u8],
}

impl<'a> TileRecord<'a> {
    /// Split the record at the front of `bytes`. Only layout is checked here;
    /// call [`TileRecord::validate`] before trusting the ids.
    pub fn parse(bytes: &'a [u8], kind: ValueKind) -> Result<Self> {
        if bytes.len() < RECORD_HEADER_LEN {
            return Err(Error::MalformedTile(format!(
                "{} bytes left, record header needs {RECORD_HEADER_LEN}",
                bytes.len()
            )));
        }
        let tile_col = read_u32(bytes, 0);
        let record_len = read_u32(bytes, 4);
        let nnz_scsr = read_u32(bytes, 8);
        let num_coo = read_u32(bytes, 12);
        let len = record_len as usize;
        if len < RECORD_HEADER_LEN {
            return Err(Error::MalformedTile(format!("record_len {len} too small")));
        }
        if len > bytes.len() {
            return Err(Error::MalformedTile(format!(
                "truncated record: record_len {len}, only {} bytes available",
                bytes.len()
            )));
        }
        let nnz = nnz_scsr as usize + num_coo as usize;
        let value_len = nnz * kind.width();
        let body = len - RECORD_HEADER_LEN;
        let coo_len = 4 * num_coo as usize;
        if body < value_len + coo_len {
            return Err(Error::MalformedTile(format!(
                "truncated value region: {body} body bytes cannot hold {nnz} entries"
            )));
        }
        let index_len = body - value_len;
        let scsr_len = index_len - coo_len;
        if !scsr_len.is_multiple_of(2) {
            return Err(Error::MalformedTile("odd SCSR region length".into()));
        }
        let body = &bytes[RECORD_HEADER_LEN..len];
        Ok(TileRecord {
            tile_col,
            record_len,
            nnz_scsr,
            num_coo,
            kind,
            scsr: &body[..scsr_len],
            coo: &body[scsr_len..index_len],
            values: &body[index_len..],
        })
    }

    pub fn nnz(&self) -> usize {
        self.nnz_scsr as usize + self.num_coo as usize
    }

    pub fn index_len(&self) -> usize {
        self.scsr.len() + self.coo.len()
    }

    #[inline]
    pub(crate) fn value(&self, i: usize) -> f64 {
        match self.kind {
            ValueKind::Binary => 1.0,
            ValueKind::Float64 => read_f64(self.values, 8 * i),
        }
    }

    /// Check every structural rule against a tile of `rows` x `cols` (smaller
    /// than the tile size for ragged edge tiles). Returns the number of SCSR rows.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<usize> {
        let malformed = |m: String| Err(Error::MalformedTile(m));
        let mut scsr_rows: Vec<u16> = Vec::new();
        let mut cols_in_row = 0usize;
        let mut prev_col: Option<u16> = None;
        let mut col_entries = 0usize;
        for i in 0..self.scsr.len() / 2 {
            let w = read_u16(self.scsr, 2 * i);
            if w & ROW_FLAG != 0 {
                let row = w & ID_MASK;
                if let Some(&prev) = scsr_rows.last() {
                    if cols_in_row < 2 {
                        return malformed(format!("SCSR row {prev} has {cols_in_row} entries"));
                    }
                    if row <= prev {
                        return malformed(format!("SCSR row {row} follows row {prev}"));
                    }
                }
                if row as usize >= rows {
                    return malformed(format!("row id {row} >= {rows}"));
                }
                scsr_rows.push(row);
                cols_in_row = 0;
                prev_col = None;
            } else {
                if scsr_rows.is_empty() {
                    return malformed("column entry before any row header".into());
                }
                if w as usize >= cols {
                    return malformed(format!("column id {w} >= {cols}"));
                }
                if prev_col.is_some_and(|p| w <= p) {
                    return malformed(format!("column {w} not ascending"));
                }
                prev_col = Some(w);
                cols_in_row += 1;
                col_entries += 1;
            }
        }
        if let Some(&last) = scsr_rows.last() {
            if cols_in_row < 2 {
                return malformed(format!("SCSR row {last} has {cols_in_row} entries"));
            }
        }
        if col_entries != self.nnz_scsr as usize {
            return malformed(format!(
                "nnz_scsr {} but {col_entries} column entries",
                self.nnz_scsr
            ));
        }

        let mut scsr_iter = scsr_rows.iter().peekable();
        let mut prev_row: Option<u16> = None;
        for i in 0..self.num_coo as usize {
            let row = read_u16(self.coo, 4 * i);
            let col = read_u16(self.coo, 4 * i + 2);
            if row as usize >= rows {
                return malformed(format!("COO row id {row} >= {rows}"));
            }
            if col as usize >= cols {
                return malformed(format!("column id {col} >= {cols}"));
            }
            if prev_row.is_some_and(|p| row <= p) {
                return malformed(format!("COO row {row} not strictly ascending"));
            }
            while scsr_iter.peek().is_some_and(|&&r| r < row) {
                scsr_iter.next();
            }
            if scsr_iter.peek().is_some_and(|&&r| r == row) {
                return malformed(format!("COO row {row} also stored as SCSR"));
            }
            prev_row = Some(row);
        }
        if let ValueKind::Float64 = self.kind {
            if self.values.len() != 8 * self.nnz() {
                return malformed("value region length mismatch".into());
            }
        }
        Ok(scsr_rows.len())
    }

    /// Visit entries in storage order (SCSR rows, then COO pairs) with
    /// tile-relative ids.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, f64)) {
        let mut row = 0usize;
        let mut vi = 0usize;
        for i in 0..self.scsr.len() / 2 {
            let w = read_u16(self.scsr, 2 * i);
            if w & ROW_FLAG != 0 {
                row = (w & ID_MASK) as usize;
            } else {
                f(row, w as usize, self.value(vi));
                vi += 1;
            }
        }
        for i in 0..self.num_coo as usize {
            let r = read_u16(self.coo, 4 * i) as usize;
            let c = read_u16(self.coo, 4 * i + 2) as usize;
            f(r, c, self.value(vi));
            vi += 1;
        }
    }

    /// Entries sorted by (row, col), tile-relative.
    pub fn decode(&self) -> Vec<Entry> {
        let mut out = Vec::with_capacity(self.nnz());
        self.for_each(|r, c, v| out.push(Entry::new(r as u64, c as u64, v)));
        // SCSR and COO rows are each sorted and disjoint; a stable sort on row
        // interleaves them without disturbing column order.
        out.sort_by_key(|e| e.row);
        out
    }

    pub fn stats(&self, cols: usize) -> TileStats {
        let mut seen = vec![false; cols];
        let mut nnc = 0u64;
        let mut scsr_rows = 0u64;
        for i in 0..self.scsr.len() / 2 {
            let w = read_u16(self.scsr, 2 * i);
            if w & ROW_FLAG != 0 {
                scsr_rows += 1;
            } else if !std::mem::replace(&mut seen[w as usize], true) {
                nnc += 1;
            }
        }
        for i in 0..self.num_coo as usize {
            let c = read_u16(self.coo, 4 * i + 2) as usize;
            if !std::mem::replace(&mut seen[c], true) {
                nnc += 1;
            }
        }
        TileStats {
            nnr: scsr_rows + u64::from(self.num_coo),
            nnc,
            nnz: self.nnz() as u64,
            c: self.kind.width() as u64,
        }
    }
}

/// Encode tile-relative entries, sorted by (row, col) with no duplicates,
/// into one record. Returns `None` for an empty tile.
pub fn encode_tile(
    tile_col: u32,
    entries: &[Entry],
    t: u32,
    kind: ValueKind,
) -> Result<Option<Vec<u8>>> {
    if entries.is_empty() {
        return Ok(None);
    }
    let t = u64::from(t);
    for w in entries.windows(2) {
        if (w[0].row, w[0].col) >= (w[1].row, w[1].col) {
            return Err(Error::MalformedTile(format!(
                "entries not strictly sorted at ({}, {})",
                w[1].row, w[1].col
            )));
        }
    }
    if let Some(e) = entries.iter().find(|e| e.row >= t || e.col >= t) {
        return Err(Error::MalformedTile(format!(
            "entry ({}, {}) outside a {t}x{t} tile",
            e.row, e.col
        )));
    }

    let mut scsr = Vec::new();
    let mut coo = Vec::new();
    let mut scsr_values = Vec::new();
    let mut coo_values = Vec::new();
    let mut nnz_scsr = 0u32;
    let mut num_coo = 0u32;
    for run in entries.chunk_by(|a, b| a.row == b.row) {
        let row = run[0].row as u16;
        if run.len() == 1 {
            coo.extend_from_slice(&row.to_le_bytes());
            coo.extend_from_slice(&(run[0].col as u16).to_le_bytes());
            coo_values.push(run[0].value);
            num_coo += 1;
        } else {
            scsr.extend_from_slice(&(row | ROW_FLAG).to_le_bytes());
            for e in run {
                scsr.extend_from_slice(&(e.col as u16).to_le_bytes());
                scsr_values.push(e.value);
            }
            nnz_scsr += run.len() as u32;
        }
    }

    let nnz = entries.len();
    let len = RECORD_HEADER_LEN + scsr.len() + coo.len() + nnz * kind.width();
    let record_len = u32::try_from(len)
        .map_err(|_| Error::MalformedTile(format!("record of {len} bytes exceeds u32")))?;
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&tile_col.to_le_bytes());
    out.extend_from_slice(&record_len.to_le_bytes());
    out.extend_from_slice(&nnz_scsr.to_le_bytes());
    out.extend_from_slice(&num_coo.to_le_bytes());
    out.extend_from_slice(&scsr);
    out.extend_from_slice(&coo);
    if kind == ValueKind::Float64 {
        for v in scsr_values.iter().chain(&coo_values) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), len);
    Ok(Some(out))
}

/// Decode a single record into tile-relative entries sorted by (row, col).
pub fn decode_tile(record: &[u8], t: u32, kind: ValueKind) -> Result<Vec<Entry>> {
    let rec = TileRecord::parse(record, kind)?;
    if rec.record_len as usize != record.len() {
        return Err(Error::MalformedTile(format!(
            "record_len {} but {} bytes given",
            rec.record_len,
            record.len()
        )));
    }
    rec.validate(t as usize, t as usize)?;
    Ok(rec.decode())
}

/// Iterator over the records of one tile row.
pub struct TileRecords<'a> {
    bytes: &'a [u8],
    kind: ValueKind,
}

impl<'a> TileRecords<'a> {
    pub fn new(bytes: &'a [u8], kind: ValueKind) -> Self {
        Self { bytes, kind }
    }
}

impl<'a> Iterator for TileRecords<'a> {
    type Item = Result<TileRecord<'a>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.bytes.is_empty() {
            return None;
        }
        match TileRecord::parse(self.bytes, self.kind) {
            Ok(rec) => {
                self.bytes = &self.bytes[rec.record_len as usize..];
                Some(Ok(rec))
            }
            Err(e) => {
                self.bytes = &[];
                Some(Err(e))
            }
        }
    }
}

/// Bytes of the index region a tile with these stats occupies.
pub fn index_bytes(scsr_rows: u64, nnz_scsr: u64, num_coo: u64) -> u64 {
    2 * scsr_rows + 2 * nnz_scsr + 4 * num_coo
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(r: u64, c: u64) -> Entry {
        Entry::new(r, c, 1.0)
    }

    #[test]
    fn three_edge_layout() {
        let entries = [e(0, 1), e(0, 3), e(5, 2)];
        let rec = encode_tile(0, &entries, 16, ValueKind::Binary).unwrap().unwrap();
        let expect: Vec<u8> = [
            0u32.to_le_bytes().as_slice(),
            &26u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &0x8000u16.to_le_bytes(),
            &1u16.to_le_bytes(),
            &3u16.to_le_bytes(),
            &5u16.to_le_bytes(),
            &2u16.to_le_bytes(),
        ]
        .concat();
        assert_eq!(rec, expect);
        let decoded = decode_tile(&rec, 16, ValueKind::Binary).unwrap();
        assert_eq!(decoded, entries);
    }

    #[test]
    fn single_coo_entry() {
        let rec = encode_tile(3, &[e(7, 7)], 16, ValueKind::Binary)
            .unwrap()
            .unwrap();
        let parsed = TileRecord::parse(&rec, ValueKind::Binary).unwrap();
        assert_eq!((parsed.nnz_scsr, parsed.num_coo, parsed.tile_col), (0, 1, 3));
        assert_eq!(decode_tile(&rec, 16, ValueKind::Binary).unwrap(), [e(7, 7)]);
    }

    #[test]
    fn empty_tile_has_no_record() {
        assert!(encode_tile(0, &[], 16, ValueKind::Binary).unwrap().is_none());
    }

    #[test]
    fn values_follow_scsr_then_coo_order() {
        let entries = [
            Entry::new(1, 4, 10.0),
            Entry::new(2, 0, 20.0),
            Entry::new(2, 5, 30.0),
        ];
        let rec = encode_tile(0, &entries, 8, ValueKind::Float64)
            .unwrap()
            .unwrap();
        let parsed = TileRecord::parse(&rec, ValueKind::Float64).unwrap();
        let vals: Vec<f64> = (0..3).map(|i| parsed.value(i)).collect();
        assert_eq!(vals, [20.0, 30.0, 10.0]);
        assert_eq!(decode_tile(&rec, 8, ValueKind::Float64).unwrap(), entries);
    }

    fn raw(words: &[u16], nnz_scsr: u32, num_coo: u32) -> Vec<u8> {
        let len = (RECORD_HEADER_LEN + 2 * words.len()) as u32;
        let mut out = Vec::new();
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&nnz_scsr.to_le_bytes());
        out.extend_from_slice(&num_coo.to_le_bytes());
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    #[test]
    fn malformed_records() {
        let bin = ValueKind::Binary;
        // column before any row header
        assert!(decode_tile(&raw(&[1, 2], 2, 0), 16, bin).is_err());
        // SCSR row with a single entry belongs in COO
        assert!(decode_tile(&raw(&[0x8000, 1], 1, 0), 16, bin).is_err());
        // descending columns
        assert!(decode_tile(&raw(&[0x8000, 3, 1], 2, 0), 16, bin).is_err());
        // column id >= t
        assert!(decode_tile(&raw(&[0x8000, 1, 16], 2, 0), 16, bin).is_err());
        // COO row duplicating an SCSR row
        assert!(decode_tile(&raw(&[0x8000, 1, 2, 0, 5], 2, 1), 16, bin).is_err());
        // count mismatch
        assert!(decode_tile(&raw(&[0x8000, 1, 2], 3, 0), 16, bin).is_err());
        // truncated value region
        let mut rec = encode_tile(0, &[Entry::new(1, 1, 2.0)], 16, ValueKind::Float64)
            .unwrap()
            .unwrap();
        rec.truncate(rec.len() - 3);
        assert!(decode_tile(&rec, 16, ValueKind::Float64).is_err());
        // the well-formed variant passes
        assert!(decode_tile(&raw(&[0x8000, 1, 2, 3, 5], 2, 1), 16, bin).is_ok());
    }

    #[test]
    fn stats_count_rows_and_columns() {
        let entries = [e(0, 1), e(0, 3), e(5, 2), e(6, 3)];
        let rec = encode_tile(0, &entries, 16, ValueKind::Binary).unwrap().unwrap();
        let parsed = TileRecord::parse(&rec, ValueKind::Binary).unwrap();
        let s = parsed.stats(16);
        assert_eq!(s, TileStats { nnr: 3, nnc: 3, nnz: 4, c: 0 });
        assert_eq!(parsed.index_len() as u64, 2 * s.nnr + 2 * s.nnz);
    }

    fn tile_entries(t: u32, max: usize) -> impl Strategy<Value = Vec<Entry>> {
        prop::collection::btree_set((0..u64::from(t), 0..u64::from(t)), 0..max).prop_map(|set| {
            set.into_iter()
                .enumerate()
                .map(|(i, (r, c))| Entry::new(r, c, i as f64 * 0.5 - 3.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn round_trip(entries in tile_entries(64, 500), weighted in any::<bool>()) {
            let kind = if weighted { ValueKind::Float64 } else { ValueKind::Binary };
            let entries: Vec<Entry> = if weighted {
                entries
            } else {
                entries.into_iter().map(|x| Entry::new(x.row, x.col, 1.0)).collect()
            };
            match encode_tile(2, &entries, 64, kind).unwrap() {
                None => prop_assert!(entries.is_empty()),
                Some(rec) => {
                    let decoded = decode_tile(&rec, 64, kind).unwrap();
                    prop_assert_eq!(&decoded, &entries);
                    let again = encode_tile(2, &decoded, 64, kind).unwrap().unwrap();
                    prop_assert_eq!(again, rec.clone());

                    let parsed = TileRecord::parse(&rec, kind).unwrap();
                    let scsr_rows = parsed.validate(64, 64).unwrap() as u64;
                    let s = parsed.stats(64);
                    prop_assert_eq!(
                        parsed.index_len() as u64,
                        index_bytes(scsr_rows, u64::from(parsed.nnz_scsr), u64::from(parsed.num_coo))
                    );
                    prop_assert_eq!(parsed.index_len() as u64, 2 * s.nnr + 2 * s.nnz);
                }
            }
        }
    }
}
