//! The tiled SCSR+COO sparse matrix image.
//!
//! An image is a header (dimensions, tile size, value kind and a per-tile-row
//! byte index) followed by the tile rows in order. Each tile row is a
//! sequence of tile records in ascending tile-column order; empty tiles have
//! no record. All integers are little endian.

pub mod convert;
pub mod edges;
pub mod header;
pub mod matrix;
pub mod size;
pub mod tile;

pub use convert::{convert, convert_to_vec, ConvertOptions, ConvertReport};
pub use edges::{write_edge_list, EdgeListReader, MatrixMarketReader};
pub use header::{MatrixHeader, TileRowExtent, ValueKind, DEFAULT_TILE_SIZE, MAX_TILE_SIZE};
pub use matrix::{matrix_stats, scan_entries, scan_source, MatrixStats, TiledSparseMatrix, TileSummary};
pub use size::{dcsc_size, scsr_dcsc_ratio, scsr_index_size, scsr_size};
pub use tile::{decode_tile, encode_tile, Entry, TileRecord, TileStats};
