//! Analytic tile storage sizes (index + values, per-record header excluded).

use crate::format::tile::TileStats;

/// `2·nnr + (2 + c)·nnz`
pub fn scsr_size(stats: &TileStats) -> u64 {
    2 * stats.nnr + (2 + stats.c) * stats.nnz
}

/// Index component of [`scsr_size`], i.e. the value for `c = 0`.
pub fn scsr_index_size(stats: &TileStats) -> u64 {
    2 * stats.nnr + 2 * stats.nnz
}

/// `(2 + 2 + 4)·nnc + (2 + c)·nnz`, the doubly compressed sparse column size.
pub fn dcsc_size(stats: &TileStats) -> u64 {
    8 * stats.nnc + (2 + stats.c) * stats.nnz
}

pub fn scsr_dcsc_ratio(stats: &TileStats) -> f64 {
    scsr_size(stats) as f64 / dcsc_size(stats) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formula_values() {
        let s = TileStats { nnr: 3, nnc: 3, nnz: 10, c: 0 };
        assert_eq!(scsr_size(&s), 26);
        assert_eq!(dcsc_size(&s), 44);
        let w = TileStats { c: 8, ..s };
        assert_eq!(scsr_size(&w), 6 + 100);
        assert_eq!(scsr_index_size(&w), 26);
    }

    proptest! {
        #[test]
        fn binary_ratio_band(t in 1u64..=32768, nnr in 1u64..=32768, frac in 0.0f64..=1.0) {
            let nnr = nnr.min(t);
            let nnz = nnr + ((nnr * t - nnr) as f64 * frac) as u64;
            let s = TileStats { nnr, nnc: nnr, nnz, c: 0 };
            let r = scsr_dcsc_ratio(&s);
            prop_assert!((0.4..1.0).contains(&r), "ratio {r} for {s:?}");
        }
    }
}
