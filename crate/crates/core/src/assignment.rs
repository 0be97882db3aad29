//! Hard permutations and the linear sum assignment that projects a soft
//! permutation onto the closest one (maximum `Tr(Pᵀ P̂)`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// A bijection on `[0, n)`; `perm[j]` is the source index placed at
/// position `j`. The dense form has its ones at `(perm[j], j)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PermutationIndices(Vec<usize>);

impl PermutationIndices {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for (pos, &src) in perm.iter().enumerate() {
            if src >= n {
                return Err(Error::InvalidPermutation(format!(
                    "entry {src} at position {pos} is out of range for length {n}"
                )));
            }
            if std::mem::replace(&mut seen[src], true) {
                return Err(Error::InvalidPermutation(format!(
                    "index {src} appears more than once"
                )));
            }
        }
        Ok(PermutationIndices(perm))
    }

    pub fn identity(n: usize) -> Self {
        PermutationIndices((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (pos, &src) in self.0.iter().enumerate() {
            inv[src] = pos;
        }
        PermutationIndices(inv)
    }

    /// Recovers indices from a dense 0/1 permutation matrix.
    pub fn from_dense<T: Real>(p: &Matrix<T>) -> Result<Self> {
        if p.rows() != p.cols() {
            return Err(Error::dim("from_dense", format!("non-square {:?}", p.shape())));
        }
        let n = p.rows();
        let mut perm = Vec::with_capacity(n);
        for j in 0..n {
            let ones: Vec<usize> = (0..n).filter(|&i| p[(i, j)] != T::zero()).collect();
            match ones.as_slice() {
                [i] if p[(*i, j)] == T::one() => perm.push(*i),
                _ => {
                    return Err(Error::InvalidPermutation(format!(
                        "column {j} is not a unit vector"
                    )))
                }
            }
        }
        Self::new(perm)
    }
}

impl TryFrom<Vec<usize>> for PermutationIndices {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PermutationIndices> for Vec<usize> {
    fn from(p: PermutationIndices) -> Self {
        p.0
    }
}

/// Binary matrix with ones at `(perm[j], j)`.
pub fn dense_permutation<T: Real>(perm: &PermutationIndices) -> Matrix<T> {
    let n = perm.len();
    let mut m = Matrix::zeros(n, n);
    for (j, &i) in perm.as_slice().iter().enumerate() {
        m[(i, j)] = T::one();
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    pub perm: PermutationIndices,
    /// `Σⱼ P̂[perm[j], j]`, summed in increasing `j`.
    pub objective: T,
}

fn objective<T: Real>(p_hat: &Matrix<T>, perm: &[usize]) -> T {
    perm.iter()
        .enumerate()
        .fold(T::zero(), |acc, (j, &i)| acc + p_hat[(i, j)])
}

fn check_square<T: Real>(p_hat: &Matrix<T>, op: &'static str) -> Result<()> {
    if p_hat.rows() != p_hat.cols() {
        return Err(Error::dim(op, format!("non-square input {:?}", p_hat.shape())));
    }
    p_hat.ensure_finite(op)
}

/// Maximum-weight perfect matching by the O(n³) Hungarian method with
/// row/column potentials.
///
/// Maximization runs as minimization of `max(P̂) − P̂`. Rows are inserted in
/// increasing order and the first column reaching the minimum reduced cost
/// wins, so a total tie resolves to the identity.
pub fn solve_lsa<T: Real>(p_hat: &Matrix<T>) -> Result<Assignment<T>> {
    check_square(p_hat, "solve_lsa")?;
    let n = p_hat.rows();
    let max = p_hat
        .as_slice()
        .iter()
        .fold(f64::NEG_INFINITY, |m, x| m.max(Real::to_f64(*x)));
    let cost = |i: usize, j: usize| max - p_hat[(i, j)].to_f64();

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let perm: Vec<usize> = (1..=n).map(|j| row_of_col[j] - 1).collect();
    let objective = objective(p_hat, &perm);
    Ok(Assignment {
        perm: PermutationIndices::new(perm)?,
        objective,
    })
}

/// Largest size `exhaustive_lsa` accepts.
pub const EXHAUSTIVE_LSA_MAX_N: usize = 10;

/// Enumerates every permutation in lexicographic order and keeps the first
/// strict maximizer.
pub fn exhaustive_lsa<T: Real>(p_hat: &Matrix<T>) -> Result<Assignment<T>> {
    check_square(p_hat, "exhaustive_lsa")?;
    let n = p_hat.rows();
    if n > EXHAUSTIVE_LSA_MAX_N {
        return Err(Error::TooLarge(format!(
            "exhaustive assignment over {n}! permutations (limit n <= {EXHAUSTIVE_LSA_MAX_N})"
        )));
    }
    let mut current: Vec<usize> = (0..n).collect();
    let mut best = current.clone();
    let mut best_obj = objective(p_hat, &current);
    while next_permutation(&mut current) {
        let obj = objective(p_hat, &current);
        if obj > best_obj {
            best_obj = obj;
            best.copy_from_slice(&current);
        }
    }
    Ok(Assignment {
        perm: PermutationIndices::new(best)?,
        objective: best_obj,
    })
}

/// Advances to the next lexicographic permutation; false after the last.
pub(crate) fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::sinkhorn::sinkhorn_normalize;

    #[test]
    fn permutation_validation() {
        assert!(PermutationIndices::new(vec![0, 0]).is_err());
        assert!(PermutationIndices::new(vec![0, 2]).is_err());
        let p = PermutationIndices::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse().as_slice(), &[1, 2, 0]);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "[2,0,1]");
        assert!(serde_json::from_str::<PermutationIndices>("[1,1]").is_err());
    }

    #[test]
    fn dense_examples() {
        assert_eq!(
            dense_permutation::<f64>(&PermutationIndices::identity(3)),
            Matrix::identity(3)
        );
        let swap = dense_permutation::<f64>(&PermutationIndices::new(vec![1, 0]).unwrap());
        assert_eq!(swap.as_slice(), &[0., 1., 1., 0.]);
        let mut rng = Rng::new(1);
        for n in 1..10 {
            let p = rng.permutation(n);
            assert_eq!(PermutationIndices::from_dense(&dense_permutation::<f32>(&p)).unwrap(), p);
        }
    }

    #[test]
    fn uniform_tie_gives_identity() {
        for n in 1..9 {
            let u = Matrix::<f64>::filled(n, n, 1.0 / n as f64);
            assert!(solve_lsa(&u).unwrap().perm.is_identity());
            assert!(exhaustive_lsa(&u).unwrap().perm.is_identity());
        }
    }

    #[test]
    fn dominant_pattern_is_recovered() {
        let mut rng = Rng::new(2);
        for n in 2..12 {
            let target = rng.permutation(n);
            let off = 0.1 / (n as f64 - 1.0);
            let mut p = Matrix::<f64>::filled(n, n, off);
            for (j, &i) in target.as_slice().iter().enumerate() {
                p[(i, j)] = 0.9;
            }
            assert_eq!(solve_lsa(&p).unwrap().perm, target);
        }
    }

    #[test]
    fn exhaustive_small_cases() {
        let one = Matrix::<f64>::from_f64(1, 1, &[0.3]).unwrap();
        assert_eq!(exhaustive_lsa(&one).unwrap().perm.as_slice(), &[0]);
        let two = Matrix::<f64>::from_f64(2, 2, &[0.6, 0.4, 0.4, 0.6]).unwrap();
        let a = exhaustive_lsa(&two).unwrap();
        assert!(a.perm.is_identity());
        assert!((a.objective - 1.2).abs() < 1e-15);
        assert!(exhaustive_lsa(&Matrix::<f64>::zeros(11, 11)).is_err());
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = Rng::new(3);
        for trial in 0..200 {
            let n = 1 + trial % 8;
            let x = rng.gaussian_matrix::<f64>(n, n, 1.0);
            let p = sinkhorn_normalize(&x, 5).unwrap();
            let h = solve_lsa(p.entries()).unwrap();
            let e = exhaustive_lsa(p.entries()).unwrap();
            assert_eq!(h.objective, e.objective, "trial {trial}");
        }
    }

    #[test]
    fn noisy_permutation_recovery() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let n = 16;
            let target = rng.permutation(n);
            let mut p = dense_permutation::<f64>(&target);
            for x in p.as_mut_slice() {
                *x += 0.4 * rng.uniform();
            }
            assert_eq!(solve_lsa(&p).unwrap().perm, target);
        }
    }

    #[test]
    fn rejects_non_square() {
        let r = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(solve_lsa(&r), Err(Error::Dimension { .. })));
    }

    #[test]
    fn lexicographic_enumeration_count() {
        let mut v = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut v) {
            count += 1;
        }
        assert_eq!(count, 24);
    }
}
