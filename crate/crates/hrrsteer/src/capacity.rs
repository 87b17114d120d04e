//! Quasi-orthogonality capacity measurements.
//!
//! [`max_pairwise_similarity`] draws `n` random vectors and returns the exact
//! largest |dot| over all pairs. The O(n²d) work runs as tiled single-precision
//! matrix products; every f32 dot comes with a rigorous rounding bound, and
//! only pairs whose bound straddles the running maximum are recomputed in
//! double precision. The f32 pass therefore only prunes, it never decides.
//!
//! Row `i` of a draw comes from its own seeded stream, so any row can be
//! regenerated exactly for the verification pass without storing f64 copies.

use std::io::Write;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed;

/// Default ceiling on n·d (f32 storage is 4 bytes per element).
pub const DEFAULT_BUDGET: usize = 150_000_000;

const TILE: usize = 256;
const UNIT_ROUNDOFF: f64 = 1.0 / (1u64 << 24) as f64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityEstimate {
    pub d: usize,
    pub n_vectors: usize,
    pub seed: u64,
    pub epsilon_max: f64,
    /// Pair attaining the maximum (row indices, i < j).
    pub argmax: (usize, usize),
    /// Pairs recomputed in double precision.
    pub verified_pairs: usize,
}

fn gen_row(seed: u64, d: usize, i: usize, out: &mut [f64]) {
    let mut rng = seed::rng_from(seed::derive_index(seed, "capacity-row", i as u64));
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
    for x in out.iter_mut() {
        *x = normal.sample(&mut rng);
    }
}

/// Exact max |similarity| over all pairs of `n` random N(0, 1/d) vectors.
pub fn max_pairwise_similarity(n: usize, d: usize, seed: u64, budget: usize) -> Result<CapacityEstimate> {
    if n < 2 {
        return Err(Error::OutOfRange(format!("need at least 2 vectors, got {n}")));
    }
    if d < 2 {
        return Err(Error::InvalidDimension(d, 2));
    }
    let cells = n.saturating_mul(d);
    if cells > budget {
        return Err(Error::Budget(format!("n·d = {cells} exceeds budget {budget}")));
    }

    // f32 copy of all rows plus exact f64 norms.
    let mut a = vec![0f32; n * d];
    let mut norms = vec![0f64; n];
    a.par_chunks_mut(d).zip(norms.par_iter_mut()).enumerate().for_each_init(
        || vec![0f64; d],
        |row, (i, (dst, norm))| {
            gen_row(seed, d, i, row);
            *norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (o, &x) in dst.iter_mut().zip(row.iter()) {
                *o = x as f32;
            }
        },
    );

    // |fl32(x)·fl32(y) − x·y| ≤ κ‖x‖‖y‖: d-term summation plus the two input
    // roundings, with a small safety factor for the partial-sum order.
    let gamma = (d + 2) as f64 * UNIT_ROUNDOFF;
    let kappa = 1.01 * gamma / (1.0 - gamma);

    let tiles = n.div_ceil(TILE);
    let pairs: Vec<(usize, usize)> = (0..tiles).flat_map(|ti| (ti..tiles).map(move |tj| (ti, tj))).collect();

    // Each tile pair keeps a lower bound on the max and the pairs that could
    // still beat it.
    let partial: Vec<TileScan> = pairs
        .par_iter()
        .map_init(
            || vec![0f32; TILE * TILE],
            |c, &(ti, tj)| scan_tile(&a, &norms, d, n, ti, tj, kappa, c),
        )
        .collect();

    let lower = partial.iter().map(|p| p.0).fold(0.0, f64::max);
    let mut candidates: Vec<(usize, usize)> = partial
        .into_iter()
        .flat_map(|(_, c)| c)
        .filter(|&(_, _, upper)| upper >= lower)
        .map(|(i, j, _)| (i, j))
        .collect();
    candidates.sort_unstable();

    let exact: Vec<(f64, (usize, usize))> = candidates
        .par_iter()
        .map_init(
            || (vec![0f64; d], vec![0f64; d]),
            |(x, y), &(i, j)| {
                gen_row(seed, d, i, x);
                gen_row(seed, d, j, y);
                let s: f64 = x.iter().zip(y.iter()).map(|(p, q)| p * q).sum();
                (s.abs(), (i, j))
            },
        )
        .collect();
    // Ties resolve to the smallest pair so the argmax is reproducible.
    let (eps, argmax) = exact
        .iter()
        .copied()
        .fold((f64::NEG_INFINITY, (0, 0)), |best, cur| if cur.0 > best.0 { cur } else { best });
    if !eps.is_finite() {
        return Err(Error::Numerical("no candidate pair survived screening".into()));
    }
    Ok(CapacityEstimate { d, n_vectors: n, seed, epsilon_max: eps, argmax, verified_pairs: exact.len() })
}

/// Lower bound on a tile's max and the pairs `(i, j, upper)` that could beat it.
type TileScan = (f64, Vec<(usize, usize, f64)>);

#[allow(clippy::too_many_arguments)]
fn scan_tile(
    a: &[f32],
    norms: &[f64],
    d: usize,
    n: usize,
    ti: usize,
    tj: usize,
    kappa: f64,
    c: &mut [f32],
) -> TileScan {
    let (i0, j0) = (ti * TILE, tj * TILE);
    let mi = TILE.min(n - i0);
    let mj = TILE.min(n - j0);
    // C = A_I · A_Jᵀ, row-major, leading dimension TILE.
    unsafe {
        matrixmultiply::sgemm(
            mi,
            d,
            mj,
            1.0,
            a[i0 * d..].as_ptr(),
            d as isize,
            1,
            a[j0 * d..].as_ptr(),
            1,
            d as isize,
            0.0,
            c.as_mut_ptr(),
            TILE as isize,
            1,
        );
    }
    let mut lower = 0f64;
    let mut keep = Vec::new();
    for r in 0..mi {
        let i = i0 + r;
        let start = if ti == tj { r + 1 } else { 0 };
        let row = &c[r * TILE..r * TILE + mj];
        for (s, &v) in row.iter().enumerate().skip(start) {
            let j = j0 + s;
            let err = kappa * norms[i] * norms[j];
            let approx = (v as f64).abs();
            if approx + err < lower {
                continue;
            }
            lower = lower.max(approx - err);
            keep.push((i, j, approx + err));
        }
    }
    keep.retain(|&(_, _, upper)| upper >= lower);
    (lower, keep)
}

/// Rows of a capacity sweep plus the least-squares fit ln N = α·d·ε² + c
/// over the per-(d, N) median ε.
#[derive(Debug, Clone, Serialize)]
pub struct CapacityTable {
    pub rows: Vec<CapacityEstimate>,
    pub alpha_fit: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// (d, N, median ε, residual of ln N) per grid point.
    pub points: Vec<(usize, usize, f64, f64)>,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Median ε over seeds for one grid point.
pub fn median_epsilon(rows: &[CapacityEstimate], d: usize, n: usize) -> Option<f64> {
    let mut eps: Vec<f64> = rows.iter().filter(|r| r.d == d && r.n_vectors == n).map(|r| r.epsilon_max).collect();
    (!eps.is_empty()).then(|| median(&mut eps))
}

/// Run every (d, N, seed) combination and fit the capacity law.
pub fn capacity_curve(dims: &[usize], ns: &[usize], seeds: &[u64], budget: usize) -> Result<CapacityTable> {
    if dims.is_empty() || ns.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("capacity grid"));
    }
    let mut rows = Vec::with_capacity(dims.len() * ns.len() * seeds.len());
    for &d in dims {
        for &n in ns {
            for &s in seeds {
                rows.push(max_pairwise_similarity(n, d, s, budget)?);
            }
        }
    }
    fit_capacity(rows)
}

/// Least-squares fit of ln N on d·ε² over grid-point medians.
pub fn fit_capacity(rows: Vec<CapacityEstimate>) -> Result<CapacityTable> {
    let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.d, r.n_vectors)).collect();
    keys.sort_unstable();
    keys.dedup();
    let pts: Vec<(usize, usize, f64)> =
        keys.iter().map(|&(d, n)| (d, n, median_epsilon(&rows, d, n).expect("key from rows"))).collect();
    let xs: Vec<f64> = pts.iter().map(|&(d, _, e)| d as f64 * e * e).collect();
    let ys: Vec<f64> = pts.iter().map(|&(_, n, _)| (n as f64).ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if pts.len() < 2 || sxx <= 0.0 {
        return Err(Error::Numerical("degenerate capacity fit: need two distinct grid points".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = sxy / sxx;
    let intercept = my - alpha * mx;
    let resid: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - (alpha * x + intercept)).collect();
    let ss_res: f64 = resid.iter().map(|r| r * r).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let points = pts.iter().zip(&resid).map(|(&(d, n, e), &r)| (d, n, e, r)).collect();
    Ok(CapacityTable { rows, alpha_fit: alpha, intercept, r_squared, points })
}

/// CSV with columns d, N, seed, epsilon_max.
pub fn write_csv<W: Write>(w: &mut W, rows: &[CapacityEstimate]) -> Result<()> {
    writeln!(w, "d,N,seed,epsilon_max")?;
    for r in rows {
        writeln!(w, "{},{},{},{:.10}", r.d, r.n_vectors, r.seed, r.epsilon_max)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(n: usize, d: usize, seed: u64) -> f64 {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = vec![0.0; d];
                gen_row(seed, d, i, &mut r);
                r
            })
            .collect();
        let mut best: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.max(rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>().abs());
            }
        }
        best
    }

    #[test]
    fn matches_brute_force_across_tile_edges() {
        for (n, d, s) in [(2, 4096, 0), (37, 64, 1), (300, 128, 2), (600, 33, 3)] {
            let est = max_pairwise_similarity(n, d, s, DEFAULT_BUDGET).unwrap();
            assert_eq!(est.epsilon_max, brute_force(n, d, s), "n={n} d={d}");
            assert!(est.verified_pairs >= 1);
        }
    }

    #[test]
    fn guards() {
        assert!(max_pairwise_similarity(1, 64, 0, DEFAULT_BUDGET).is_err());
        assert!(matches!(max_pairwise_similarity(1000, 1000, 0, 10_000), Err(Error::Budget(_))));
        assert!(capacity_curve(&[], &[10], &[0], DEFAULT_BUDGET).is_err());
        assert!(capacity_curve(&[64], &[10], &[0, 1], DEFAULT_BUDGET).is_err());
    }

    #[test]
    fn two_vectors_rarely_exceed_point_one() {
        let hits = (0..100).filter(|&s| max_pairwise_similarity(2, 4096, s, DEFAULT_BUDGET).unwrap().epsilon_max < 0.1).count();
        assert!(hits >= 99);
    }

    #[test]
    fn fit_recovers_synthetic_law() {
        // ln N = 0.25·dε² + 1 exactly.
        let mut rows = Vec::new();
        for (d, n) in [(100usize, 50usize), (200, 500), (400, 5000)] {
            let eps = (((n as f64).ln() - 1.0) / (0.25 * d as f64)).sqrt();
            rows.push(CapacityEstimate { d, n_vectors: n, seed: 0, epsilon_max: eps, argmax: (0, 1), verified_pairs: 1 });
        }
        let t = fit_capacity(rows).unwrap();
        assert!((t.alpha_fit - 0.25).abs() < 1e-9);
        assert!((t.intercept - 1.0).abs() < 1e-9);
        assert!(t.r_squared > 0.999_999);
    }
}
