//! Nonnegative matrix factorization `A ≈ W·H` with multiplicative updates.
//!
//! `H` is kept transposed (`m × k`) so both sparse products are plain SpMMs:
//! `WᵀA = (AᵀW)ᵀ` runs on the image of `Aᵀ` and `A·Hᵀ` on the image of `A`.

use super::trace::Trace;
use super::{multiply_in_passes, SpmmEngine};
use crate::dense::{
    hadamard_scale_in_place, multiply, transpose_multiply, DenseMatrix, DEFAULT_DIV_GUARD,
};
use crate::error::{Error, Result};

/// Above this many cells the objective comes from the trace identity
/// instead of an exact pass over `A - W·H`.
pub const EXACT_OBJECTIVE_CELLS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmfConfig {
    pub k: usize,
    pub iters: usize,
    /// Factor columns multiplied per sparse pass; `None` means all `k`.
    pub mem_cols: Option<usize>,
    pub seed: u64,
    pub eps: f64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self {
            k: 16,
            iters: 50,
            mem_cols: None,
            seed: 1,
            eps: DEFAULT_DIV_GUARD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmfResult {
    /// `n × k`.
    pub w: DenseMatrix,
    /// `Hᵀ`, `m × k`.
    pub h_t: DenseMatrix,
    /// `‖A − W·H‖_F` after each iteration.
    pub objective: Vec<f64>,
    pub trace: Trace,
}

/// Seeded uniform `[0, 1)` starting factors `(W, Hᵀ)`.
pub fn initial_factors(n: usize, m: usize, k: usize, seed: u64) -> (DenseMatrix, DenseMatrix) {
    let w = DenseMatrix::random(n, k, seed);
    let h_t = DenseMatrix::random(m, k, seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    (w, h_t)
}

/// Rows of `A` as sorted `(col, value)` lists, and `‖A‖²_F`.
fn load_rows(a: &dyn SpmmEngine) -> Result<(Vec<Vec<(usize, f64)>>, f64)> {
    let mut rows = vec![Vec::new(); a.n_rows()];
    let mut bad = None;
    a.for_each_entry(&mut |e| {
        if e.value < 0.0 && bad.is_none() {
            bad = Some(e);
        }
        rows[e.row as usize].push((e.col as usize, e.value));
    })?;
    if let Some(e) = bad {
        return Err(Error::NegativeEntry {
            row: e.row,
            col: e.col,
            value: e.value,
        });
    }
    let mut sq = 0.0;
    for r in &mut rows {
        r.sort_unstable_by_key(|e| e.0);
        sq += r.iter().map(|e| e.1 * e.1).sum::<f64>();
    }
    Ok((rows, sq))
}

fn exact_objective(rows: &[Vec<(usize, f64)>], w: &DenseMatrix, h_t: &DenseMatrix) -> f64 {
    let m = h_t.rows();
    let mut total = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let wi = w.row(i);
        let mut next = row.iter().peekable();
        let mut s = 0.0;
        for j in 0..m {
            let approx: f64 = wi.iter().zip(h_t.row(j)).map(|(a, b)| a * b).sum();
            let aij = match next.peek() {
                Some(&&(c, v)) if c == j => {
                    next.next();
                    v
                }
                _ => 0.0,
            };
            let d = aij - approx;
            s += d * d;
        }
        total += s;
    }
    total.sqrt()
}

/// `‖A‖² − 2·tr(Wᵀ·A·Hᵀ) + tr(WᵀW · HHᵀ)`, clamped at zero.
fn trace_objective(
    a_sq: f64,
    w: &DenseMatrix,
    a_ht: &DenseMatrix,
    wtw: &DenseMatrix,
    hht: &DenseMatrix,
) -> f64 {
    let cross: f64 = w.as_slice().iter().zip(a_ht.as_slice()).map(|(x, y)| x * y).sum();
    let gram: f64 = wtw.as_slice().iter().zip(hht.as_slice()).map(|(x, y)| x * y).sum();
    (a_sq - 2.0 * cross + gram).max(0.0).sqrt()
}

/// Factor the nonnegative `n × m` matrix `A`, given engines for `A` and `Aᵀ`.
/// `init` overrides the seeded starting factors `(W, Hᵀ)`.
pub fn nmf(
    a: &dyn SpmmEngine,
    a_t: &dyn SpmmEngine,
    cfg: &NmfConfig,
    init: Option<(DenseMatrix, DenseMatrix)>,
) -> Result<NmfResult> {
    let (n, m) = (a.n_rows(), a.n_cols());
    if a_t.n_rows() != m || a_t.n_cols() != n {
        return Err(Error::shape(format!(
            "transpose is {}x{}, expected {m}x{n}",
            a_t.n_rows(),
            a_t.n_cols()
        )));
    }
    let k = cfg.k;
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    let mem_cols = cfg.mem_cols.unwrap_or(k);
    if mem_cols == 0 || mem_cols > k {
        return Err(Error::invalid(
            "mem_cols",
            format!("{mem_cols} is outside [1, {k}]"),
        ));
    }
    let (rows, a_sq) = load_rows(a)?;
    let (mut w, mut h_t) = match init {
        Some((w, h_t)) => {
            if w.shape() != (n, k) || h_t.shape() != (m, k) {
                return Err(Error::shape(format!(
                    "initial factors {:?} and {:?}, expected ({n}, {k}) and ({m}, {k})",
                    w.shape(),
                    h_t.shape()
                )));
            }
            if w.as_slice().iter().chain(h_t.as_slice()).any(|&x| x < 0.0) {
                return Err(Error::invalid("init", "initial factors must be nonnegative"));
            }
            (w, h_t)
        }
        None => initial_factors(n, m, k, cfg.seed),
    };
    let exact = n.saturating_mul(m) <= EXACT_OBJECTIVE_CELLS;
    let mut objective = Vec::with_capacity(cfg.iters);
    let mut trace = Trace::new();
    for iter in 1..=cfg.iters {
        // Hᵀ ← Hᵀ ∘ (AᵀW) ⊘ (Hᵀ·WᵀW)
        let at_w = multiply_in_passes(a_t, &w, mem_cols)?;
        let wtw = transpose_multiply(&w, &w)?;
        let den = multiply(&h_t, &wtw)?;
        hadamard_scale_in_place(&mut h_t, &at_w, &den, cfg.eps)?;

        // W ← W ∘ (A·Hᵀ) ⊘ (W·HHᵀ)
        let a_ht = multiply_in_passes(a, &h_t, mem_cols)?;
        let hht = transpose_multiply(&h_t, &h_t)?;
        let den = multiply(&w, &hht)?;
        hadamard_scale_in_place(&mut w, &a_ht, &den, cfg.eps)?;

        let obj = if exact {
            exact_objective(&rows, &w, &h_t)
        } else {
            let wtw = transpose_multiply(&w, &w)?;
            trace_objective(a_sq, &w, &a_ht, &wtw, &hht)
        };
        objective.push(obj);
        trace.record(iter, "objective", obj);
    }
    Ok(NmfResult {
        w,
        h_t,
        objective,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::test_util::image;
    use crate::apps::{InMemoryEngine, SemEngine};
    use crate::format::ValueKind;
    use crate::kernel::KernelConfig;
    use crate::sem::SemConfig;
    use crate::storage::MemSource;
    use crate::TiledSparseMatrix;
    use std::sync::Arc;

    fn pair(n: u64, m: u64, e: &[(u64, u64, f64)]) -> (TiledSparseMatrix, TiledSparseMatrix) {
        let mut t: Vec<_> = e.iter().map(|&(r, c, v)| (c, r, v)).collect();
        t.sort_by_key(|x| (x.0, x.1));
        (
            image(n, m, 16, e, ValueKind::Float64),
            image(m, n, 16, &t, ValueKind::Float64),
        )
    }

    #[test]
    fn one_step_by_hand() {
        let (a, at) = pair(2, 2, &[(0, 0, 1.0), (1, 1, 1.0)]);
        let (ea, eat) = (
            InMemoryEngine::new(&a, KernelConfig::default()),
            InMemoryEngine::new(&at, KernelConfig::default()),
        );
        let s = 1.0 / 2f64.sqrt();
        let w = DenseMatrix::from_vec(2, 1, vec![s, s]).unwrap();
        let h_t = DenseMatrix::from_vec(2, 1, vec![s, s]).unwrap();
        let cfg = NmfConfig {
            k: 1,
            iters: 1,
            ..NmfConfig::default()
        };
        let r = nmf(&ea, &eat, &cfg, Some((w, h_t))).unwrap();
        // WᵀA = [s, s] and WᵀW·H = (s² + s²)·s per entry.
        let h = s * s / (s * (s * s + s * s) + 1e-12);
        assert_eq!(r.h_t.as_slice(), &[h, h]);
        // A·Hᵀ = [h, h] and W·HHᵀ = s·(h² + h²).
        let w = s * h / (s * (h * h + h * h) + 1e-12);
        assert_eq!(r.w.as_slice(), &[w, w]);
        // W·H = w·h everywhere; A - WH = [[1-wh, -wh], [-wh, 1-wh]].
        let wh = w * h;
        let want = (2.0 * (1.0 - wh).powi(2) + 2.0 * wh * wh).sqrt();
        assert!((r.objective[0] - want).abs() < 1e-15);
    }

    #[test]
    fn rank_one_is_recovered() {
        let (n, m) = (12u64, 9u64);
        let e: Vec<_> = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j, (i + 1) as f64 * (j % 4 + 1) as f64)))
            .collect();
        let (a, at) = pair(n, m, &e);
        let ea = InMemoryEngine::new(&a, KernelConfig::default());
        let eat = InMemoryEngine::new(&at, KernelConfig::default());
        let cfg = NmfConfig {
            k: 1,
            iters: 200,
            ..NmfConfig::default()
        };
        let r = nmf(&ea, &eat, &cfg, None).unwrap();
        let norm_a = e.iter().map(|x| x.2 * x.2).sum::<f64>().sqrt();
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert!(*r.objective.last().unwrap() < 1e-3 * norm_a);
    }

    #[test]
    fn mem_cols_and_engines_do_not_change_bits() {
        let e: Vec<_> = (0..400u64)
            .map(|i| ((i * 17 % 40, i * 29 % 30), (i % 7) as f64 + 0.25))
            .collect::<std::collections::BTreeMap<_, _>>()
            .into_iter()
            .map(|((r, c), v)| (r, c, v))
            .collect();
        let e: Vec<(u64, u64, f64)> = e;
        let (a, at) = pair(40, 30, &e);
        let ea = InMemoryEngine::new(&a, KernelConfig::with_threads(2));
        let eat = InMemoryEngine::new(&at, KernelConfig::with_threads(2));
        let cfg = NmfConfig {
            k: 8,
            iters: 10,
            ..NmfConfig::default()
        };
        let base = nmf(&ea, &eat, &cfg, None).unwrap();
        assert!(base.w.as_slice().iter().chain(base.h_t.as_slice()).all(|&x| x >= 0.0));
        for mc in [4, 2, 1] {
            let r = nmf(&ea, &eat, &NmfConfig { mem_cols: Some(mc), ..cfg }, None).unwrap();
            assert_eq!(r.objective, base.objective);
            assert_eq!(r.w, base.w);
        }
        let sa = SemEngine::new(Arc::new(MemSource::new(a.as_bytes().to_vec())), SemConfig::with_threads(3)).unwrap();
        let sat = SemEngine::new(Arc::new(MemSource::new(at.as_bytes().to_vec())), SemConfig::with_threads(3)).unwrap();
        let r = nmf(&sa, &sat, &cfg, None).unwrap();
        assert_eq!(r.objective, base.objective);
        assert_eq!(r.h_t, base.h_t);
    }

    #[test]
    fn trace_identity_matches_exact() {
        let w = DenseMatrix::random(5, 2, 1);
        let h_t = DenseMatrix::random(4, 2, 2);
        let rows: Vec<Vec<(usize, f64)>> = (0..5).map(|i| vec![(i % 4, 1.0 + i as f64)]).collect();
        let a_sq: f64 = (0..5).map(|i| (1.0 + i as f64).powi(2)).sum();
        let a_ht = DenseMatrix::from_fn(5, 2, |i, c| (1.0 + i as f64) * h_t.get(i % 4, c));
        let t = trace_objective(
            a_sq,
            &w,
            &a_ht,
            &transpose_multiply(&w, &w).unwrap(),
            &transpose_multiply(&h_t, &h_t).unwrap(),
        );
        assert!((t - exact_objective(&rows, &w, &h_t)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let (a, at) = pair(2, 2, &[(0, 0, -1.0)]);
        let ea = InMemoryEngine::new(&a, KernelConfig::default());
        let eat = InMemoryEngine::new(&at, KernelConfig::default());
        let cfg = NmfConfig {
            k: 1,
            ..NmfConfig::default()
        };
        assert!(matches!(nmf(&ea, &eat, &cfg, None), Err(Error::NegativeEntry { .. })));
        let (a, at) = pair(2, 2, &[(0, 0, 1.0)]);
        let ea = InMemoryEngine::new(&a, KernelConfig::default());
        let eat = InMemoryEngine::new(&at, KernelConfig::default());
        for c in [
            NmfConfig { k: 0, ..cfg },
            NmfConfig { mem_cols: Some(2), ..cfg },
        ] {
            assert!(nmf(&ea, &eat, &c, None).is_err());
        }
        assert!(nmf(&ea, &ea, &cfg, Some((DenseMatrix::zeros(3, 1), DenseMatrix::zeros(2, 1)))).is_err());
    }
}
