//! Default values for every tunable flag.
//!
//! | flag              | default          |
//! |-------------------|------------------|
//! | `--tile-size`     | 16384            |
//! | `--cache-bytes`   | 512 KiB          |
//! | `--merge-bytes`   | 8 MiB            |
//! | `--sort-budget`   | 256 MiB          |
//! | `--threads`       | available cores  |
//! | `--damping`       | 0.85             |
//! | pagerank `--iters`| 30               |
//! | eigen `--block`   | 4                |
//! | eigen `--tol`     | 1e-6             |
//! | eigen `--max-iters` | 1000           |
//! | nmf `--k`         | 16               |
//! | nmf `--iters`     | 50               |
//! | `--seed`          | 1                |

pub const TILE_SIZE: u32 = tilespmm::format::DEFAULT_TILE_SIZE;
pub const CACHE_BYTES: usize = tilespmm::kernel::DEFAULT_CACHE_BYTES;
pub const MERGE_BYTES: usize = tilespmm::sem::DEFAULT_MERGE_THRESHOLD;
pub const SORT_BUDGET: usize = 256 << 20;
pub const DAMPING: f64 = 0.85;
pub const PAGERANK_ITERS: usize = 30;
pub const EIGEN_BLOCK: usize = 4;
pub const EIGEN_TOL: f64 = 1e-6;
pub const EIGEN_MAX_ITERS: usize = 1000;
pub const NMF_RANK: usize = 16;
pub const NMF_ITERS: usize = 50;
pub const SEED: u64 = 1;

pub fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
