//! PageRank as repeated SpMM with a single dense column.

use super::trace::Trace;
use super::{column_counts, require_square, SpmmEngine};
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageRankConfig {
    pub damping: f64,
    pub max_iters: usize,
    /// Stop once the L1 change of an iteration falls below this.
    pub tol: Option<f64>,
    /// Spread the rank of vertices without out-edges uniformly. When off,
    /// those vertices simply contribute nothing.
    pub redistribute_dangling: bool,
}

impl Default for PageRankConfig {
    fn default() -> Self {
        Self {
            damping: 0.85,
            max_iters: 30,
            tol: None,
            redistribute_dangling: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PageRankResult {
    pub ranks: Vec<f64>,
    pub iterations: usize,
    /// L1 change of each iteration.
    pub deltas: Vec<f64>,
    pub trace: Trace,
}

/// Out-degrees of the forward graph, read off the transposed adjacency
/// (column `v` of `Aᵀ` lists the out-edges of `v`).
pub fn out_degrees(adj_t: &dyn SpmmEngine) -> Result<Vec<u64>> {
    column_counts(adj_t)
}

/// Rank vector of the graph whose transposed adjacency is `adj_t`; row `u`
/// holds the in-neighbours of `u`.
pub fn pagerank(
    adj_t: &dyn SpmmEngine,
    out_degree: &[u64],
    cfg: &PageRankConfig,
) -> Result<PageRankResult> {
    if !(cfg.damping > 0.0 && cfg.damping < 1.0) {
        return Err(Error::invalid(
            "damping",
            format!("{} is outside (0, 1)", cfg.damping),
        ));
    }
    let n = require_square(adj_t, "pagerank")?;
    if out_degree.len() != n {
        return Err(Error::invalid(
            "out_degree",
            format!("{} degrees for {n} vertices", out_degree.len()),
        ));
    }
    let d = cfg.damping;
    let nf = n as f64;
    let mut x = vec![1.0 / nf; n];
    let mut deltas = Vec::new();
    let mut trace = Trace::new();
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let mut scaled = DenseMatrix::zeros(n, 1);
        let mut dangling = 0.0;
        for (v, (&deg, &xv)) in out_degree.iter().zip(&x).enumerate() {
            if deg == 0 {
                dangling += xv;
            } else {
                scaled.set(v, 0, xv / deg as f64);
            }
        }
        let y = adj_t.multiply(&scaled)?;
        let base = if cfg.redistribute_dangling {
            (1.0 - d) / nf + d * dangling / nf
        } else {
            (1.0 - d) / nf
        };
        let next: Vec<f64> = y.as_slice().iter().map(|&s| base + d * s).collect();
        let delta: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        iterations += 1;
        deltas.push(delta);
        trace.record(iterations, "l1_delta", delta);
        if cfg.tol.is_some_and(|tol| delta < tol) {
            break;
        }
    }
    Ok(PageRankResult {
        ranks: x,
        iterations,
        deltas,
        trace,
    })
}
