use std::collections::BTreeMap;

use proptest::prelude::*;
use tilespmm::format::{
    convert_to_vec, matrix_stats, scsr_index_size, ConvertOptions, Entry, TiledSparseMatrix,
    ValueKind,
};
use tilespmm::storage::MemSource;

fn edges_strategy() -> impl Strategy<Value = (u64, u64, Vec<(u64, u64, f64)>)> {
    (1u64..300, 1u64..300).prop_flat_map(|(n, m)| {
        (
            Just(n),
            Just(m),
            prop::collection::vec((0..n, 0..m, 0.5f64..10.0), 0..600),
        )
    })
}

fn tile_strategy() -> impl Strategy<Value = u32> {
    prop::sample::select(vec![1u32, 2, 4, 8, 16, 64, 256])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn binary_round_trip((n, m, raw) in edges_strategy(), t in tile_strategy(), transpose in any::<bool>()) {
        let opts = ConvertOptions {
            n_rows: Some(n),
            n_cols: Some(m),
            tile_size: t,
            transpose,
            ..ConvertOptions::default()
        };
        let (img, report) = convert_to_vec(raw.iter().map(|&(r, c, _)| Ok(Entry::new(r, c, 1.0))), &opts).unwrap();
        let mut want: Vec<(u64, u64)> = raw
            .iter()
            .map(|&(r, c, _)| if transpose { (c, r) } else { (r, c) })
            .collect();
        want.sort_unstable();
        want.dedup();
        let m = TiledSparseMatrix::from_bytes(img.clone()).unwrap();
        let got: Vec<_> = m.entries().iter().map(|e| (e.row, e.col)).collect();
        prop_assert_eq!(&got, &want);
        prop_assert_eq!(report.nnz as usize, want.len());
        prop_assert_eq!(report.duplicates_dropped as usize, raw.len() - want.len());
        prop_assert_eq!(report.bytes_written, img.len() as u64);
        if transpose {
            prop_assert_eq!((m.n_rows() as u64, m.n_cols() as u64), (m.header().n_rows, n));
        }
    }

    #[test]
    fn size_law_holds((n, m, raw) in edges_strategy(), t in tile_strategy(), weighted in any::<bool>()) {
        let kind = if weighted { ValueKind::Float64 } else { ValueKind::Binary };
        let uniq: BTreeMap<(u64, u64), f64> = raw.iter().map(|&(r, c, v)| ((r, c), v)).collect();
        let opts = ConvertOptions {
            n_rows: Some(n),
            n_cols: Some(m),
            tile_size: t,
            value_kind: kind,
            ..ConvertOptions::default()
        };
        let (img, _) = convert_to_vec(uniq.iter().map(|(&(r, c), &v)| Ok(Entry::new(r, c, v))), &opts).unwrap();
        let stats = matrix_stats(&MemSource::new(img.clone())).unwrap();
        prop_assert_eq!(stats.file_bytes, img.len() as u64);
        prop_assert_eq!(stats.header_bytes + stats.record_bytes, stats.file_bytes);
        for tile in &stats.tiles {
            prop_assert_eq!(tile.index_len, scsr_index_size(&tile.stats));
            prop_assert_eq!(
                tile.record_len,
                16 + tile.index_len + tile.stats.c * tile.stats.nnz
            );
        }
        prop_assert_eq!(stats.aggregate.nnz as usize, uniq.len());
        if weighted {
            let m = TiledSparseMatrix::from_bytes(img).unwrap();
            let got: Vec<_> = m.entries().iter().map(|e| ((e.row, e.col), e.value)).collect();
            let want: Vec<_> = uniq.into_iter().collect();
            prop_assert_eq!(got, want);
        }
    }

    /// Damaged images are rejected or decoded, never a panic.
    #[test]
    fn corruption_never_panics((n, m, raw) in edges_strategy(), pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let opts = ConvertOptions {
            n_rows: Some(n),
            n_cols: Some(m),
            tile_size: 16,
            ..ConvertOptions::default()
        };
        let (mut img, _) = convert_to_vec(raw.iter().map(|&(r, c, _)| Ok(Entry::new(r, c, 1.0))), &opts).unwrap();
        let i = pos.index(img.len());
        img[i] ^= byte | 1;
        let _ = TiledSparseMatrix::from_bytes(img.clone());
        let _ = matrix_stats(&MemSource::new(img));
    }
}

#[test]
fn spilled_conversion_matches_in_memory() {
    let raw: Vec<_> = (0..20_000u64).map(|i| (i * 7919 % 3001, i * 104_729 % 2999)).collect();
    let mk = |budget| ConvertOptions {
        tile_size: 64,
        sort_budget: budget,
        ..ConvertOptions::default()
    };
    let edges = || raw.iter().map(|&(r, c)| Ok(Entry::new(r, c, 1.0)));
    let (a, ra) = convert_to_vec(edges(), &mk(256 << 20)).unwrap();
    let (b, rb) = convert_to_vec(edges(), &mk(24 * 1000)).unwrap();
    assert_eq!(ra.spilled_runs, 0);
    assert!(rb.spilled_runs > 5);
    assert_eq!(a, b);
}
