//! Seeded synthetic graphs: R-MAT and a stochastic block model.
//!
//! Both generators return sorted, duplicate-free edge lists without self
//! loops. Undirected graphs list each edge once as `(u, v)` with `u < v`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_SCALE: u32 = 30;
/// Draws allowed per requested edge before giving up on reaching the target.
pub const ATTEMPT_FACTOR: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmatParams {
    pub scale: u32,
    pub edge_factor: u64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub seed: u64,
    pub directed: bool,
}

impl Default for RmatParams {
    fn default() -> Self {
        Self {
            scale: 10,
            edge_factor: 16,
            a: 0.57,
            b: 0.19,
            c: 0.19,
            d: 0.05,
            seed: 1,
            directed: true,
        }
    }
}

impl RmatParams {
    pub fn n(&self) -> u64 {
        1u64 << self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale > MAX_SCALE {
            return Err(Error::invalid(
                "scale",
                format!("{} exceeds the limit of {MAX_SCALE}", self.scale),
            ));
        }
        let probs = [self.a, self.b, self.c, self.d];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("a,b,c,d", "probabilities must lie in [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("a,b,c,d", format!("sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Quadrant of one recursive step: 0 = a (top left), 1 = b (top right),
/// 2 = c (bottom left), 3 = d.
pub fn draw_quadrant(rng: &mut impl Rng, p: &RmatParams) -> u8 {
    let x: f64 = rng.random();
    if x < p.a {
        0
    } else if x < p.a + p.b {
        1
    } else if x < p.a + p.b + p.c {
        2
    } else {
        3
    }
}

fn rmat_edge(rng: &mut impl Rng, p: &RmatParams) -> (u64, u64) {
    let (mut u, mut v) = (0u64, 0u64);
    for _ in 0..p.scale {
        let q = draw_quadrant(rng, p);
        u = (u << 1) | (q >> 1) as u64;
        v = (v << 1) | (q & 1) as u64;
    }
    (u, v)
}

/// Draw until `target` distinct edges exist or the attempt cap is hit.
fn collect_unique(
    target: u64,
    directed: bool,
    mut draw: impl FnMut() -> (u64, u64),
) -> Vec<(u64, u64)> {
    let mut seen = HashSet::with_capacity(target as usize);
    let cap = target.saturating_mul(ATTEMPT_FACTOR);
    let mut attempts = 0;
    while (seen.len() as u64) < target && attempts < cap {
        attempts += 1;
        let (u, v) = draw();
        if u == v {
            continue;
        }
        let e = if directed || u < v { (u, v) } else { (v, u) };
        seen.insert(e);
    }
    let mut out: Vec<_> = seen.into_iter().collect();
    out.sort_unstable();
    out
}

pub fn gen_rmat(p: &RmatParams) -> Result<Vec<(u64, u64)>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let target = p.n().saturating_mul(p.edge_factor);
    Ok(collect_unique(target, p.directed, || rmat_edge(&mut rng, p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexOrder {
    /// Cluster members have contiguous ids.
    Clustered,
    /// Vertex ids are shuffled by a seeded permutation.
    Unclustered,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbmParams {
    pub n: u64,
    pub num_clusters: u64,
    pub edges: u64,
    /// Expected ratio of intra-cluster to inter-cluster edges.
    pub in_out_ratio: f64,
    pub order: VertexOrder,
    pub seed: u64,
    pub directed: bool,
}

impl Default for SbmParams {
    fn default() -> Self {
        Self {
            n: 1 << 14,
            num_clusters: 16,
            edges: 1 << 18,
            in_out_ratio: 4.0,
            order: VertexOrder::Clustered,
            seed: 1,
            directed: false,
        }
    }
}

impl SbmParams {
    pub fn validate(&self) -> Result<()> {
        if self.n > 1 << MAX_SCALE {
            return Err(Error::invalid("n", format!("{} exceeds 2^{MAX_SCALE}", self.n)));
        }
        if self.num_clusters < 2 || self.num_clusters > self.n / 2 {
            return Err(Error::invalid(
                "clusters",
                format!("{} clusters for {} vertices", self.num_clusters, self.n),
            ));
        }
        if !(self.in_out_ratio > 0.0 && self.in_out_ratio.is_finite()) {
            return Err(Error::invalid("in_out_ratio", "must be positive"));
        }
        Ok(())
    }

    /// Expected share of intra-cluster edges.
    pub fn intra_fraction(&self) -> f64 {
        self.in_out_ratio / (1.0 + self.in_out_ratio)
    }

    fn cluster_len(&self) -> u64 {
        self.n / self.num_clusters
    }

    /// Cluster of a vertex in clustered order; the last cluster takes the
    /// remainder.
    pub fn cluster_of(&self, v: u64) -> u64 {
        (v / self.cluster_len()).min(self.num_clusters - 1)
    }

    pub fn cluster_range(&self, c: u64) -> std::ops::Range<u64> {
        let len = self.cluster_len();
        let end = if c + 1 == self.num_clusters { self.n } else { (c + 1) * len };
        c * len..end
    }

    /// Vertex relabelling used for [`VertexOrder::Unclustered`].
    pub fn permutation(&self) -> Vec<u64> {
        let mut perm: Vec<u64> = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5bd1_e995_5bd1_e995);
        perm.shuffle(&mut rng);
        perm
    }
}

fn sbm_edge(rng: &mut impl Rng, p: &SbmParams) -> (u64, u64) {
    let u = rng.random_range(0..p.n);
    let own = p.cluster_range(p.cluster_of(u));
    let v = if rng.random_bool(p.intra_fraction()) {
        rng.random_range(own.clone())
    } else {
        let x = rng.random_range(0..p.n - (own.end - own.start));
        if x < own.start {
            x
        } else {
            x + (own.end - own.start)
        }
    };
    (u, v)
}

pub fn gen_sbm(p: &SbmParams) -> Result<Vec<(u64, u64)>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let edges = collect_unique(p.edges, p.directed, || sbm_edge(&mut rng, p));
    Ok(match p.order {
        VertexOrder::Clustered => edges,
        VertexOrder::Unclustered => relabel(&edges, &p.permutation(), p.directed),
    })
}

/// Apply `perm` to every endpoint, restoring canonical order.
pub fn relabel(edges: &[(u64, u64)], perm: &[u64], directed: bool) -> Vec<(u64, u64)> {
    let mut out: Vec<_> = edges
        .iter()
        .map(|&(u, v)| {
            let (a, b) = (perm[u as usize], perm[v as usize]);
            if directed || a < b {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmat_is_deterministic_and_canonical() {
        let p = RmatParams {
            scale: 2,
            edge_factor: 1,
            seed: 7,
            ..RmatParams::default()
        };
        let a = gen_rmat(&p).unwrap();
        assert_eq!(a, gen_rmat(&p).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&(u, v)| u != v && u < 4 && v < 4));

        let p = RmatParams {
            scale: 8,
            directed: false,
            ..RmatParams::default()
        };
        let e = gen_rmat(&p).unwrap();
        assert!(e.iter().all(|&(u, v)| u < v));
        assert!(e.len() as u64 <= p.n() * p.edge_factor);
        assert!(e.len() as u64 > p.n() * p.edge_factor / 2);
    }

    #[test]
    fn rmat_rejects_bad_params() {
        for p in [
            RmatParams { scale: 31, ..RmatParams::default() },
            RmatParams { a: 0.6, ..RmatParams::default() },
        ] {
            assert!(gen_rmat(&p).is_err());
        }
    }

    #[test]
    fn quadrant_frequencies() {
        let p = RmatParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0u32; 4];
        let draws = 1_000_000;
        for _ in 0..draws {
            counts[draw_quadrant(&mut rng, &p) as usize] += 1;
        }
        for (c, want) in counts.iter().zip([p.a, p.b, p.c, p.d]) {
            let got = *c as f64 / draws as f64;
            assert!((got - want).abs() < 0.01, "{got} vs {want}");
        }
    }

    #[test]
    fn sbm_clusters_and_permutation() {
        let p = SbmParams {
            n: 1000,
            num_clusters: 7,
            edges: 5000,
            ..SbmParams::default()
        };
        assert_eq!(p.cluster_range(6), 852..1000);
        assert_eq!(p.cluster_of(999), 6);
        let clustered = gen_sbm(&p).unwrap();
        assert_eq!(clustered.len(), 5000);
        assert!(clustered.iter().all(|&(u, v)| u < v));
        let un = gen_sbm(&SbmParams {
            order: VertexOrder::Unclustered,
            ..p
        })
        .unwrap();
        assert_eq!(un, relabel(&clustered, &p.permutation(), false));
        let degrees = |e: &[(u64, u64)]| {
            let mut d = vec![0u32; 1000];
            for &(u, v) in e {
                d[u as usize] += 1;
                d[v as usize] += 1;
            }
            d.sort_unstable();
            d
        };
        assert_eq!(degrees(&clustered), degrees(&un));
    }

    #[test]
    fn sbm_rejects_bad_params() {
        for p in [
            SbmParams { in_out_ratio: 0.0, ..SbmParams::default() },
            SbmParams { num_clusters: 1, ..SbmParams::default() },
            SbmParams { n: (1 << 30) + 1, ..SbmParams::default() },
        ] {
            assert!(gen_sbm(&p).is_err());
        }
    }
}
