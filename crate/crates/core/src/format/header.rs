use std::ops::Range;

use crate::error::{Error, Result};
use crate::storage::ReadSource;

pub const MAGIC: [u8; 8] = *b"SCSRTILE";
pub const VERSION: u32 = 1;
pub const DEFAULT_TILE_SIZE: u32 = 16384;
pub const MAX_TILE_SIZE: u32 = 32768;

/// Bytes before the tile-row index.
pub const FIXED_HEADER_LEN: usize = 8 + 4 + 8 + 8 + 4 + 4 + 8;
const INDEX_ENTRY_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    /// No stored values, every non-zero is 1.
    Binary,
    Float64,
}

impl ValueKind {
    /// Bytes per stored value.
    pub fn width(self) -> usize {
        match self {
            ValueKind::Binary => 0,
            ValueKind::Float64 => 8,
        }
    }

    fn code(self) -> u32 {
        match self {
            ValueKind::Binary => 0,
            ValueKind::Float64 => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ValueKind::Binary),
            1 => Some(ValueKind::Float64),
            _ => None,
        }
    }
}

/// Location of one tile row's records inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TileRowExtent {
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixHeader {
    pub n_rows: u64,
    pub n_cols: u64,
    pub tile_size: u32,
    pub value_kind: ValueKind,
    pub tile_rows: Vec<TileRowExtent>,
}

pub fn validate_tile_size(t: u32) -> Result<()> {
    if !t.is_power_of_two() || t > MAX_TILE_SIZE {
        return Err(Error::invalid(
            "tile_size",
            format!("{t} is not a power of two in [1, {MAX_TILE_SIZE}]"),
        ));
    }
    Ok(())
}

pub fn num_tiles(dim: u64, t: u32) -> u64 {
    dim.div_ceil(u64::from(t))
}

impl MatrixHeader {
    pub fn encoded_len_for(num_tile_rows: u64) -> u64 {
        FIXED_HEADER_LEN as u64 + INDEX_ENTRY_LEN as u64 * num_tile_rows
    }

    pub fn encoded_len(&self) -> u64 {
        Self::encoded_len_for(self.tile_rows.len() as u64)
    }

    pub fn num_tile_rows(&self) -> usize {
        self.tile_rows.len()
    }

    pub fn num_tile_cols(&self) -> usize {
        num_tiles(self.n_cols, self.tile_size) as usize
    }

    pub fn t(&self) -> usize {
        self.tile_size as usize
    }

    /// Number of matrix rows covered by tile row `tr` (the last one may be short).
    pub fn tile_row_height(&self, tr: usize) -> usize {
        let start = tr as u64 * u64::from(self.tile_size);
        (self.n_rows - start).min(u64::from(self.tile_size)) as usize
    }

    pub fn tile_col_width(&self, tc: usize) -> usize {
        let start = tc as u64 * u64::from(self.tile_size);
        (self.n_cols - start).min(u64::from(self.tile_size)) as usize
    }

    /// Global row range of a band of tile rows.
    pub fn band_rows(&self, band: &Range<usize>) -> Range<usize> {
        let t = self.t();
        let start = band.start * t;
        let end = (band.end * t).min(self.n_rows as usize);
        start..end
    }

    /// Contiguous byte range holding the records of a band of tile rows.
    pub fn band_bytes(&self, band: &Range<usize>) -> Range<u64> {
        if band.is_empty() {
            return 0..0;
        }
        let first = self.tile_rows[band.start];
        let last = self.tile_rows[band.end - 1];
        first.offset..last.offset + last.len
    }

    /// Total image length implied by the index.
    pub fn image_len(&self) -> u64 {
        self.tile_rows
            .last()
            .map_or(self.encoded_len(), |e| e.offset + e.len)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len() as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.n_rows.to_le_bytes());
        out.extend_from_slice(&self.n_cols.to_le_bytes());
        out.extend_from_slice(&self.tile_size.to_le_bytes());
        out.extend_from_slice(&self.value_kind.code().to_le_bytes());
        out.extend_from_slice(&(self.tile_rows.len() as u64).to_le_bytes());
        for e in &self.tile_rows {
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.len.to_le_bytes());
        }
        out
    }

    /// Parse the fixed part; returns the header with an empty index and the
    /// number of tile rows still to be read.
    fn decode_fixed(bytes: &[u8]) -> Result<(MatrixHeader, u64)> {
        if bytes.len() < FIXED_HEADER_LEN {
            return Err(Error::corrupt(bytes.len() as u64, "truncated header"));
        }
        if bytes[..8] != MAGIC {
            return Err(Error::corrupt(0, "bad magic"));
        }
        let version = read_u32(bytes, 8);
        if version != VERSION {
            return Err(Error::corrupt(8, format!("unsupported version {version}")));
        }
        let n_rows = read_u64(bytes, 12);
        let n_cols = read_u64(bytes, 20);
        let tile_size = read_u32(bytes, 28);
        let kind_code = read_u32(bytes, 32);
        let ntr = read_u64(bytes, 36);
        if validate_tile_size(tile_size).is_err() {
            return Err(Error::corrupt(28, format!("invalid tile size {tile_size}")));
        }
        let value_kind = ValueKind::from_code(kind_code)
            .ok_or_else(|| Error::corrupt(32, format!("unknown value kind {kind_code}")))?;
        if ntr != num_tiles(n_rows, tile_size) {
            return Err(Error::corrupt(
                36,
                format!("tile row count {ntr} does not match {n_rows} rows"),
            ));
        }
        let header = MatrixHeader {
            n_rows,
            n_cols,
            tile_size,
            value_kind,
            tile_rows: Vec::new(),
        };
        Ok((header, ntr))
    }

    fn decode_index(&mut self, ntr: u64, index: &[u8]) -> Result<()> {
        let mut expect = Self::encoded_len_for(ntr);
        let mut rows = Vec::with_capacity(ntr as usize);
        for i in 0..ntr as usize {
            let at = i * INDEX_ENTRY_LEN;
            let e = TileRowExtent {
                offset: read_u64(index, at),
                len: read_u64(index, at + 8),
            };
            if e.offset != expect {
                return Err(Error::corrupt(
                    (FIXED_HEADER_LEN + at) as u64,
                    format!("tile row {i} starts at {} (expected {expect})", e.offset),
                ));
            }
            expect += e.len;
            rows.push(e);
        }
        self.tile_rows = rows;
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<MatrixHeader> {
        let (mut header, ntr) = Self::decode_fixed(bytes)?;
        let total = Self::encoded_len_for(ntr);
        if (bytes.len() as u64) < total {
            return Err(Error::corrupt(bytes.len() as u64, "truncated tile-row index"));
        }
        header.decode_index(ntr, &bytes[FIXED_HEADER_LEN..total as usize])?;
        Ok(header)
    }

    /// Read and validate the header of an image held by `src`.
    pub fn read_from(src: &dyn ReadSource) -> Result<MatrixHeader> {
        let mut fixed = [0u8; FIXED_HEADER_LEN];
        if src.len() < FIXED_HEADER_LEN as u64 {
            return Err(Error::corrupt(src.len(), "truncated header"));
        }
        src.read_at(0, &mut fixed)?;
        let (mut header, ntr) = Self::decode_fixed(&fixed)?;
        let index_len = ntr * INDEX_ENTRY_LEN as u64;
        if src.len() < FIXED_HEADER_LEN as u64 + index_len {
            return Err(Error::corrupt(src.len(), "truncated tile-row index"));
        }
        let mut index = vec![0u8; index_len as usize];
        src.read_at(FIXED_HEADER_LEN as u64, &mut index)?;
        header.decode_index(ntr, &index)?;
        if header.image_len() != src.len() {
            return Err(Error::corrupt(
                src.len(),
                format!(
                    "image holds {} bytes but index describes {}",
                    src.len(),
                    header.image_len()
                ),
            ));
        }
        Ok(header)
    }
}

pub(crate) fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

pub(crate) fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub(crate) fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub(crate) fn read_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MatrixHeader {
        let base = MatrixHeader::encoded_len_for(3);
        MatrixHeader {
            n_rows: 40,
            n_cols: 20,
            tile_size: 16,
            value_kind: ValueKind::Float64,
            tile_rows: vec![
                TileRowExtent { offset: base, len: 30 },
                TileRowExtent { offset: base + 30, len: 0 },
                TileRowExtent { offset: base + 30, len: 12 },
            ],
        }
    }

    #[test]
    fn encode_decode() {
        let h = sample();
        let bytes = h.encode();
        assert_eq!(bytes.len() as u64, h.encoded_len());
        assert_eq!(MatrixHeader::decode(&bytes).unwrap(), h);
        assert_eq!(h.tile_row_height(2), 8);
        assert_eq!(h.num_tile_cols(), 2);
        assert_eq!(h.tile_col_width(1), 4);
        assert_eq!(h.band_rows(&(1..3)), 16..40);
        assert_eq!(h.band_bytes(&(0..3)), base_len(&h)..base_len(&h) + 42);
    }

    fn base_len(h: &MatrixHeader) -> u64 {
        h.encoded_len()
    }

    #[test]
    fn rejects_gaps_and_bad_fields() {
        let mut h = sample();
        h.tile_rows[1].offset += 1;
        assert!(MatrixHeader::decode(&h.encode()).is_err());

        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(MatrixHeader::decode(&bytes).is_err());

        let mut h = sample();
        h.tile_size = 24;
        assert!(MatrixHeader::decode(&h.encode()).is_err());

        let mut h = sample();
        h.tile_rows.pop();
        assert!(MatrixHeader::decode(&h.encode()).is_err());
    }

    #[test]
    fn tile_size_limits() {
        assert!(validate_tile_size(16384).is_ok());
        assert!(validate_tile_size(32768).is_ok());
        assert!(validate_tile_size(65536).is_err());
        assert!(validate_tile_size(3).is_err());
        assert!(validate_tile_size(0).is_err());
    }
}
