//! Top eigenpairs of a symmetric sparse matrix by block subspace iteration
//! with Rayleigh-Ritz extraction.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trace::Trace;
use super::{require_square, SpmmEngine};
use crate::dense::{mgs_qr, multiply, transpose_multiply, DenseMatrix};
use crate::error::{Error, Result};
use crate::storage::{DirStore, Store};

pub const MAX_BLOCK: usize = 64;
pub const STAGNATION_WINDOW: usize = 50;

/// Where the subspace lives between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residency {
    Memory,
    /// The block is written to a store after every update and multiplied
    /// from there.
    Storage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenConfig {
    pub k: usize,
    pub block: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub residency: Residency,
    pub seed: u64,
    pub check_symmetry: bool,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self {
            k: 1,
            block: 4,
            max_iters: 1000,
            tol: 1e-6,
            residency: Residency::Memory,
            seed: 1,
            check_symmetry: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenResult {
    /// Ritz values, descending by magnitude.
    pub values: Vec<f64>,
    /// `n × k` Ritz vectors.
    pub vectors: DenseMatrix,
    /// Relative residuals `‖Av − λv‖ / |λ|`.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `|QᵀQ − I|` entry seen over all iterations.
    pub max_orthogonality_error: f64,
    pub trace: Trace,
}

/// Fails with the first entry whose mirror is missing or different.
pub fn check_symmetric(engine: &dyn SpmmEngine) -> Result<()> {
    require_square(engine, "symmetry check")?;
    let mut fwd = Vec::new();
    engine.for_each_entry(&mut |e| fwd.push((e.row, e.col, e.value.to_bits())))?;
    let mut rev: Vec<_> = fwd.iter().map(|&(r, c, v)| (c, r, v)).collect();
    fwd.sort_unstable();
    rev.sort_unstable();
    if let Some((a, b)) = fwd.iter().zip(&rev).find(|(a, b)| a != b) {
        let (row, col) = if a < b { (a.0, a.1) } else { (b.1, b.0) };
        return Err(Error::NotSymmetric { row, col });
    }
    Ok(())
}

fn random_block(n: usize, b: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(n, b, |_, _| rng.random::<f64>() - 0.5)
}

/// Orthonormal basis of `y`'s columns, topped up with random directions if
/// `y` is rank deficient.
fn orthonormalize(y: &DenseMatrix, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let (n, b) = y.shape();
    let mut q = mgs_qr(y).q;
    for _ in 0..8 {
        if q.cols() == b {
            return q;
        }
        let fill = random_block(n, b - q.cols(), rng);
        let mut both = DenseMatrix::zeros(n, b);
        both.set_columns(0, &q).unwrap();
        both.set_columns(q.cols(), &fill).unwrap();
        q = mgs_qr(&both).q;
    }
    q
}

fn orthogonality_error(q: &DenseMatrix) -> Result<f64> {
    let g = transpose_multiply(q, q)?;
    let mut worst: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g.get(i, j) - want).abs());
        }
    }
    Ok(worst)
}

struct Subspace<'s> {
    store: Option<&'s dyn Store>,
    q: DenseMatrix,
}

impl Subspace<'_> {
    fn put(&mut self, q: DenseMatrix) -> Result<()> {
        if let Some(store) = self.store {
            let mut sink = store.create(Q_NAME)?;
            q.write_image(&mut sink)?;
        }
        self.q = q;
        Ok(())
    }

    fn apply(&self, engine: &dyn SpmmEngine) -> Result<DenseMatrix> {
        match self.store {
            None => engine.multiply(&self.q),
            Some(store) => {
                engine.multiply_stored(store, Q_NAME, Y_NAME)?;
                let y = DenseMatrix::read_image(&*store.open(Y_NAME)?)?;
                Ok(y.with_intervals(self.q.intervals()))
            }
        }
    }
}

const Q_NAME: &str = "subspace.q";
const Y_NAME: &str = "subspace.aq";

/// Top-`k` eigenpairs (by magnitude) of the symmetric matrix behind
/// `engine`. With [`Residency::Storage`] the block lives in `store`, or in a
/// temporary directory when no store is given.
pub fn subspace_iteration(
    engine: &dyn SpmmEngine,
    cfg: &EigenConfig,
    store: Option<&dyn Store>,
) -> Result<EigenResult> {
    let n = require_square(engine, "eigensolver")?;
    let (k, b) = (cfg.k, cfg.block);
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if b < k || b > MAX_BLOCK {
        return Err(Error::invalid(
            "block",
            format!("{b} is outside [{k}, {MAX_BLOCK}]"),
        ));
    }
    if b > n {
        return Err(Error::invalid("block", format!("{b} exceeds the order {n}")));
    }
    if cfg.check_symmetry {
        check_symmetric(engine)?;
    }

    let tmp;
    let store = match (cfg.residency, store) {
        (Residency::Memory, _) => None,
        (Residency::Storage, Some(s)) => Some(s),
        (Residency::Storage, None) => {
            tmp = TempStore::new()?;
            Some(&tmp.store as &dyn Store)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = random_block(n, b, &mut rng);
    let mut space = Subspace {
        store,
        q: DenseMatrix::zeros(0, 0),
    };
    space.put(orthonormalize(&start, &mut rng))?;

    let mut trace = Trace::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut max_orth: f64 = 0.0;
    let mut last = None;
    for iter in 1..=cfg.max_iters {
        let q = &space.q;
        let orth = orthogonality_error(q)?;
        max_orth = max_orth.max(orth);
        let y = space.apply(engine)?;

        let h = transpose_multiply(q, &y)?;
        let hm = DMatrix::from_fn(b, b, |i, j| 0.5 * (h.get(i, j) + h.get(j, i)));
        let eig = SymmetricEigen::new(hm);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| {
            let (a, c) = (eig.eigenvalues[i], eig.eigenvalues[j]);
            c.abs().total_cmp(&a.abs()).then(c.total_cmp(&a))
        });
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let s = DenseMatrix::from_fn(b, b, |r, c| eig.eigenvectors[(r, order[c])]);
        let v = multiply(q, &s)?;
        let av = multiply(&y, &s)?;

        let floor = values[0].abs() * f64::EPSILON;
        let residuals: Vec<f64> = (0..k)
            .map(|i| {
                let r: f64 = (0..n)
                    .map(|row| {
                        let d = av.get(row, i) - values[i] * v.get(row, i);
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt();
                r / values[i].abs().max(floor).max(f64::MIN_POSITIVE)
            })
            .collect();
        let worst = residuals.iter().copied().fold(0.0, f64::max);
        trace.record(iter, "max_residual", worst);
        trace.record(iter, "orthogonality", orth);
        trace.record(iter, "ritz0", values[0]);

        let converged = worst < cfg.tol;
        if worst < best {
            best = worst;
            since_best = 0;
        } else {
            since_best += 1;
        }
        last = Some((values, v, residuals, iter, converged));
        if converged {
            break;
        }
        if since_best >= STAGNATION_WINDOW {
            return Err(Error::Stagnation {
                iterations: iter,
                best_residual: best,
            });
        }
        space.put(orthonormalize(&av, &mut rng))?;
    }

    let (values, v, residuals, iterations, converged) = match last {
        Some(l) => l,
        None => return Err(Error::invalid("max_iters", "must be at least 1")),
    };
    if let Some(s) = store {
        for name in [Q_NAME, Y_NAME] {
            let _ = s.remove(name);
        }
    }
    Ok(EigenResult {
        values: values[..k].to_vec(),
        vectors: v.columns(0..k),
        residuals,
        iterations,
        converged,
        max_orthogonality_error: max_orth,
        trace,
    })
}

struct TempStore {
    store: DirStore,
    _dir: tempfile::TempDir,
}

impl TempStore {
    fn new() -> Result<Self> {
        let dir = tempfile::tempdir()?;
        Ok(Self {
            store: DirStore::new(dir.path())?,
            _dir: dir,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::test_util::image;
    use crate::apps::{InMemoryEngine, SemEngine};
    use crate::format::ValueKind;
    use crate::kernel::KernelConfig;
    use crate::sem::SemConfig;
    use crate::storage::{MemSource, MemStore};
    use std::sync::Arc;

    fn k4() -> crate::TiledSparseMatrix {
        let e: Vec<_> = (0..4u64)
            .flat_map(|i| (0..4u64).filter(move |&j| j != i).map(move |j| (i, j, 1.0)))
            .collect();
        image(4, 4, 16, &e, ValueKind::Binary)
    }

    #[test]
    fn complete_graph_spectrum() {
        let m = k4();
        let e = InMemoryEngine::new(&m, KernelConfig::default());
        let cfg = EigenConfig {
            k: 4,
            block: 4,
            tol: 1e-12,
            ..EigenConfig::default()
        };
        let r = subspace_iteration(&e, &cfg, None).unwrap();
        assert!(r.converged);
        let want = [3.0, -1.0, -1.0, -1.0];
        for (a, b) in r.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-10, "{:?}", r.values);
        }
        let v0 = r.vectors.column(0);
        let sign = v0[0].signum();
        assert!(v0.iter().all(|x| (x * sign - 0.5).abs() < 1e-10));
    }

    #[test]
    fn residency_modes_agree() {
        let m = k4();
        let sem = SemEngine::new(Arc::new(MemSource::new(m.as_bytes().to_vec())), SemConfig::with_threads(2)).unwrap();
        let cfg = EigenConfig {
            k: 1,
            block: 2,
            ..EigenConfig::default()
        };
        let a = subspace_iteration(&sem, &cfg, None).unwrap();
        let store = MemStore::new();
        let st = EigenConfig {
            residency: Residency::Storage,
            ..cfg
        };
        let b = subspace_iteration(&sem, &st, Some(&store)).unwrap();
        assert_eq!(a.values, b.values);
        assert!(store.names().is_empty());
        let c = subspace_iteration(&sem, &st, None).unwrap();
        assert_eq!(a.values, c.values);
    }

    #[test]
    fn rejects_bad_input() {
        let m = image(4, 4, 16, &[(0, 1, 1.0)], ValueKind::Binary);
        let e = InMemoryEngine::new(&m, KernelConfig::default());
        assert!(matches!(
            subspace_iteration(&e, &EigenConfig::default(), None),
            Err(Error::NotSymmetric { row: 0, col: 1 })
        ));
        let m = k4();
        let e = InMemoryEngine::new(&m, KernelConfig::default());
        for (k, block) in [(0, 1), (3, 2), (1, 65), (1, 5)] {
            let cfg = EigenConfig {
                k,
                block,
                ..EigenConfig::default()
            };
            assert!(subspace_iteration(&e, &cfg, None).is_err(), "{k} {block}");
        }
    }

    #[test]
    fn stagnation_is_reported() {
        // A 2-cycle has eigenvalues 1 and -1: equal magnitude, so a block of
        // one vector never settles.
        let m = image(2, 2, 16, &[(0, 1, 1.0), (1, 0, 1.0)], ValueKind::Binary);
        let e = InMemoryEngine::new(&m, KernelConfig::default());
        let cfg = EigenConfig {
            k: 1,
            block: 1,
            max_iters: 10_000,
            seed: 3,
            ..EigenConfig::default()
        };
        assert!(matches!(
            subspace_iteration(&e, &cfg, None),
            Err(Error::Stagnation { .. })
        ));
    }
}
