use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::assignment::dense_permutation;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Median timings of applying a column permutation to a `rows × n` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    pub rows: usize,
    pub iterations: usize,
    pub gather_median_ns: u64,
    pub dense_median_ns: u64,
    /// `dense / gather`.
    pub ratio: f64,
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Index gather versus multiplication by the dense permutation matrix.
pub fn cli_bench_permutation(n: usize, rows: usize, iterations: usize) -> Result<BenchReport> {
    if n < 2 || rows == 0 || iterations == 0 {
        return Err(Error::Config(format!(
            "benchmark needs n >= 2, rows >= 1 and iterations >= 1 (got {n}, {rows}, {iterations})"
        )));
    }
    let mut rng = Rng::new(n as u64);
    let w: Matrix<f32> = rng.gaussian_matrix(rows, n, 1.0);
    let perm = rng.permutation(n);
    let dense = dense_permutation::<f32>(&perm);

    let mut gather = Vec::with_capacity(iterations);
    let mut matmul = Vec::with_capacity(iterations);
    let mut reference = None;
    for _ in 0..iterations {
        let t = Instant::now();
        let g = w.gather_columns(&perm)?;
        gather.push(t.elapsed());
        let t = Instant::now();
        let d = w.matmul(&dense)?;
        matmul.push(t.elapsed());
        if reference.is_none() {
            if g != d {
                return Err(Error::Config("gather and dense product disagree".into()));
            }
            reference = Some(g);
        }
    }
    let (g, d) = (median(gather), median(matmul));
    let g_ns = g.as_nanos().max(1) as u64;
    let d_ns = d.as_nanos().max(1) as u64;
    Ok(BenchReport {
        n,
        rows,
        iterations,
        gather_median_ns: g_ns,
        dense_median_ns: d_ns,
        ratio: d_ns as f64 / g_ns as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_bench_runs() {
        let r = cli_bench_permutation(2, 4, 3).unwrap();
        assert!(r.ratio > 0.0);
        assert!(cli_bench_permutation(1, 4, 3).is_err());
    }
}
