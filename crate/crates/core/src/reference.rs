//! Baselines and exact oracles: the score-maximizing heuristic channel
//! permutation, exhaustive search over group partitions, and partition
//! counting.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_lsa, PermutationIndices};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, Rng};
use crate::permlearn::{loss_cosine, BlockLayout, Objective};
use crate::sparsity::{magnitude_scores, ImportanceMetric, ImportanceScores, Metric, NmConfig};

/// Largest joint candidate count [`oracle_best_partition`] will enumerate.
pub const ORACLE_MAX_CANDIDATES: u64 = 10_000_000;

fn factorial(n: usize) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, k| acc * BigUint::from(k))
}

/// Number of ways to split `c_in` channels into unordered groups of `m`:
/// `c_in! / ((m!)^G · G!)` with `G = c_in / m`.
pub fn count_partitions(c_in: usize, m: usize) -> Result<BigUint> {
    if m == 0 || c_in == 0 || !c_in.is_multiple_of(m) {
        return Err(Error::Config(format!("group {m} must divide channel count {c_in}")));
    }
    let g = c_in / m;
    Ok(factorial(c_in) / (factorial(m).pow(g as u32) * factorial(g)))
}

/// Canonical set partitions of `0..n` into groups of `m`, each encoded as
/// the concatenation of its groups (every group ascending, groups ordered
/// by their smallest member). Lexicographic in that encoding.
pub fn group_partitions(n: usize, m: usize) -> Result<Vec<Vec<usize>>> {
    let count = count_partitions(n, m)?;
    let count = count
        .to_usize()
        .filter(|&c| c as u64 <= ORACLE_MAX_CANDIDATES)
        .ok_or_else(|| Error::TooLarge(format!("{count} partitions of {n} channels into groups of {m}")))?;
    let mut out = Vec::with_capacity(count);
    let mut used = vec![false; n];
    let mut current = Vec::with_capacity(n);
    fill_groups(n, m, &mut used, &mut current, &mut out);
    debug_assert_eq!(out.len(), count);
    Ok(out)
}

fn fill_groups(n: usize, m: usize, used: &mut [bool], current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    let Some(anchor) = used.iter().position(|u| !u) else {
        out.push(current.clone());
        return;
    };
    used[anchor] = true;
    current.push(anchor);
    pick_members(n, m, anchor + 1, m - 1, used, current, out);
    current.pop();
    used[anchor] = false;
}

fn pick_members(
    n: usize,
    m: usize,
    from: usize,
    left: usize,
    used: &mut [bool],
    current: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if left == 0 {
        fill_groups(n, m, used, current, out);
        return;
    }
    for c in from..n {
        if used[c] {
            continue;
        }
        used[c] = true;
        current.push(c);
        pick_members(n, m, c + 1, left - 1, used, current, out);
        current.pop();
        used[c] = false;
    }
}

/// Exhaustive search outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionOracleResult {
    /// Channel groups of every pruned layer (global channel indices).
    pub best_grouping: Vec<Vec<Vec<usize>>>,
    /// The same grouping as one permutation per pruned layer.
    pub best_permutations: Vec<PermutationIndices>,
    pub best_loss: f64,
    pub evaluated_count: u64,
}

/// Minimizes the hard loss of `obj` over every block-respecting grouping of
/// every pruned layer jointly. Orderings inside a group do not affect the
/// loss, so only canonical partitions are visited. Ties go to the first
/// candidate in enumeration order.
pub fn oracle_objective<T: Real>(obj: &Objective<T>) -> Result<PartitionOracleResult> {
    obj.validate()?;
    let m = obj.cfg.group;
    let layouts = obj.layouts();
    let mut total = BigUint::one();
    for layout in &layouts {
        for (_, len) in layout.blocks() {
            total *= count_partitions(len, m)?;
        }
    }
    let total = total
        .to_u64()
        .filter(|&t| t <= ORACLE_MAX_CANDIDATES)
        .ok_or_else(|| {
            Error::TooLarge(format!("{total} joint candidates exceed the limit of {ORACLE_MAX_CANDIDATES}"))
        })?;

    // One candidate list per block, blocks of all layers in order.
    let mut tables: Vec<Vec<Vec<usize>>> = Vec::new();
    for layout in &layouts {
        for (_, len) in layout.blocks() {
            tables.push(group_partitions(len, m)?);
        }
    }
    let decode = |mut idx: u64| -> Result<Vec<PermutationIndices>> {
        let mut picks = vec![0usize; tables.len()];
        for (b, table) in tables.iter().enumerate().rev() {
            let n = table.len() as u64;
            picks[b] = (idx % n) as usize;
            idx /= n;
        }
        let mut b = 0;
        layouts
            .iter()
            .map(|layout| {
                let local = layout
                    .blocks()
                    .map(|_| {
                        let p = PermutationIndices::new(tables[b][picks[b]].clone());
                        b += 1;
                        p
                    })
                    .collect::<Result<Vec<_>>>()?;
                layout.assemble(&local)
            })
            .collect()
    };

    let (best_loss, best_idx) = (0..total)
        .into_par_iter()
        .map(|idx| -> Result<(f64, u64)> {
            let loss = obj.evaluate(&decode(idx)?)?.loss.to_f64();
            Ok((if loss.is_finite() { loss } else { f64::INFINITY }, idx))
        })
        .try_reduce(
            || (f64::INFINITY, u64::MAX),
            |a, b| Ok(if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a }),
        )?;
    let best_permutations = decode(best_idx)?;
    let best_grouping = best_permutations
        .iter()
        .map(|p| p.as_slice().chunks(m).map(<[usize]>::to_vec).collect())
        .collect();
    Ok(PartitionOracleResult {
        best_grouping,
        best_permutations,
        best_loss,
        evaluated_count: total,
    })
}

/// Exhaustive optimum for a single layer reconstructing `x·Wᵀ`.
pub fn oracle_best_partition<T: Real>(
    w: &Matrix<T>,
    x: &Matrix<T>,
    metric: Metric,
    cfg: NmConfig,
    layout: &BlockLayout,
) -> Result<PartitionOracleResult> {
    let scores = metric.scores(w, x)?;
    oracle_objective(&Objective::single_layer(w.clone(), x.clone(), scores, layout.clone(), cfg)?)
}

fn group_score<T: Real>(s: &Matrix<T>, cols: &[usize], keep: usize, buf: &mut Vec<T>) -> f64 {
    let mut total = 0.0;
    for r in 0..s.rows() {
        buf.clear();
        buf.extend(cols.iter().map(|&c| s[(r, c)]));
        buf.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
        total += buf[..keep].iter().map(|v| Real::to_f64(*v)).sum::<f64>();
    }
    total
}

/// Score-maximizing channel permutation.
///
/// Within every block, channels are ranked by total importance and dealt
/// round-robin across the block's groups, so the most important channels
/// land in different groups. One refinement pass then reassigns, slot by
/// slot, which group each slot member joins by solving a linear assignment
/// on the retained score. Groups are emitted in canonical order (members
/// ascending, groups by first member); a block keeps the identity order unless the
/// grouping strictly retains more.
pub fn heuristic_cp<T: Real>(
    s: &ImportanceScores<T>,
    cfg: NmConfig,
    layout: &BlockLayout,
) -> Result<PermutationIndices> {
    let scores = s.matrix();
    if scores.cols() != layout.c_in() {
        return Err(Error::dim(
            "heuristic_cp",
            format!("scores have {} columns, layout covers {}", scores.cols(), layout.c_in()),
        ));
    }
    layout.check_groups(cfg)?;
    let (m, keep) = (cfg.group, cfg.keep());
    let totals = s.column_totals();
    let mut buf = Vec::with_capacity(m);
    let mut local = Vec::with_capacity(layout.num_blocks());
    for (start, len) in layout.blocks() {
        let g = len / m;
        let mut order: Vec<usize> = (start..start + len).collect();
        order.sort_by(|&a, &b| totals[b].partial_cmp(&totals[a]).expect("finite scores"));
        let mut groups: Vec<Vec<usize>> = vec![Vec::with_capacity(m); g];
        for (rank, &c) in order.iter().enumerate() {
            groups[rank % g].push(c);
        }

        for slot in 0..m {
            let value = Matrix::from_fn(g, g, |src, dst| {
                let mut cols = groups[dst].clone();
                cols[slot] = groups[src][slot];
                T::of(group_score(scores, &cols, keep, &mut buf))
            });
            let assign = solve_lsa(&value)?;
            let members: Vec<usize> = groups.iter().map(|grp| grp[slot]).collect();
            for (dst, &src) in assign.perm.as_slice().iter().enumerate() {
                groups[dst][slot] = members[src];
            }
        }

        for grp in groups.iter_mut() {
            grp.sort_unstable();
        }
        groups.sort_unstable_by_key(|grp| grp[0]);
        let retained: f64 = groups.iter().map(|grp| group_score(scores, grp, keep, &mut buf)).sum();
        let identity: Vec<usize> = (start..start + len).collect();
        let identity_retained: f64 = identity
            .chunks(m)
            .map(|grp| group_score(scores, grp, keep, &mut buf))
            .sum();
        let chosen: Vec<usize> = if identity_retained >= retained {
            (0..len).collect()
        } else {
            groups.concat().into_iter().map(|c| c - start).collect()
        };
        local.push(PermutationIndices::new(chosen)?);
    }
    layout.assemble(&local)
}

/// A single-layer instance where maximizing the retained score makes the
/// pruned output worse than keeping the original channel order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig1Instance {
    pub weight: Matrix<f64>,
    pub calibration: Matrix<f64>,
    pub seed: u64,
    pub attempts: usize,
}

/// Retained score, cosine loss and mean squared error of one permutation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationQuality {
    pub retained: f64,
    pub loss: f64,
    pub mse: f64,
}

/// Scores a permutation of a single magnitude-pruned layer.
pub fn permutation_quality(
    w: &Matrix<f64>,
    x: &Matrix<f64>,
    cfg: NmConfig,
    perm: &PermutationIndices,
) -> Result<PermutationQuality> {
    let layout = BlockLayout::uniform(w.cols(), w.cols())?;
    let obj = Objective::single_layer(w.clone(), x.clone(), magnitude_scores(w)?, layout, cfg)?;
    let (out, _, retained) = obj.output(std::slice::from_ref(perm))?;
    let diff = out.sub(&obj.target)?;
    let mse = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / diff.as_slice().len() as f64;
    Ok(PermutationQuality {
        retained: retained[0],
        loss: loss_cosine(&obj.target, &out)?,
        mse,
    })
}

/// Minimum relative worsening of loss and MSE a counterexample must show.
pub const FIG1_MIN_MARGIN: f64 = 0.05;

/// Random search over `4×8` magnitude-pruned layers (2:4, one block) for an
/// instance where the heuristic raises the retained score but worsens both
/// the cosine loss and the MSE relative to the identity permutation by at
/// least [`FIG1_MIN_MARGIN`]. Candidates are rounded to `f32` first so the
/// property survives storage.
pub fn search_fig1(seed: u64, max_attempts: usize) -> Result<Fig1Instance> {
    let cfg = NmConfig::new(2, 4)?;
    let layout = BlockLayout::uniform(8, 8)?;
    let mut rng = Rng::new(seed);
    for attempt in 1..=max_attempts {
        let w = rng.gaussian_matrix::<f32>(4, 8, 1.0).cast::<f64>();
        // heterogeneous channel scales make magnitude a poor proxy for output
        let scales: Vec<f64> = (0..8).map(|_| (3.0 * rng.normal()).exp()).collect();
        let base = rng.gaussian_matrix::<f64>(16, 8, 1.0);
        let x = Matrix::from_fn(16, 8, |r, c| (base[(r, c)] * scales[c]) as f32 as f64);
        let heur = heuristic_cp(&magnitude_scores(&w)?, cfg, &layout)?;
        let h = permutation_quality(&w, &x, cfg, &heur)?;
        let i = permutation_quality(&w, &x, cfg, &PermutationIndices::identity(8))?;
        let worse = |a: f64, b: f64| a > b * (1.0 + FIG1_MIN_MARGIN);
        if h.retained > i.retained && worse(h.loss, i.loss) && worse(h.mse, i.mse) {
            return Ok(Fig1Instance {
                weight: w,
                calibration: x,
                seed,
                attempts: attempt,
            });
        }
    }
    Err(Error::TooLarge(format!("no counterexample within {max_attempts} attempts")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permlearn::hard_mask;
    use crate::sparsity::{retained_score, wanda_scores};
    use num_bigint::BigUint;

    #[test]
    fn partition_counts() {
        assert_eq!(count_partitions(4, 4).unwrap(), BigUint::from(1u32));
        assert_eq!(count_partitions(8, 4).unwrap(), BigUint::from(35u32));
        assert_eq!(count_partitions(16, 4).unwrap(), BigUint::from(2_627_625u32));
        assert_eq!(count_partitions(12, 4).unwrap(), BigUint::from(5775u32));
        assert!(count_partitions(6, 4).is_err());
        // exact well beyond u64
        assert_eq!(
            count_partitions(64, 4).unwrap() * factorial(16) * factorial(4).pow(16),
            factorial(64)
        );
    }

    #[test]
    fn partitions_are_canonical_and_complete() {
        let parts = group_partitions(8, 4).unwrap();
        assert_eq!(parts.len(), 35);
        assert_eq!(parts[0], (0..8).collect::<Vec<_>>());
        let mut sorted = parts.clone();
        sorted.sort();
        assert_eq!(sorted, parts);
        for p in &parts {
            assert_eq!(p[0], 0);
            PermutationIndices::new(p.clone()).unwrap();
        }
        assert_eq!(group_partitions(12, 4).unwrap().len(), 5775);
        assert_eq!(group_partitions(6, 2).unwrap().len(), 15);
    }

    #[test]
    fn heuristic_on_ranked_row() {
        let s = ImportanceScores::new(
            Matrix::<f64>::from_f64(1, 8, &[8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]).unwrap(),
        )
        .unwrap();
        let cfg = NmConfig::new(2, 4).unwrap();
        let layout = BlockLayout::uniform(8, 8).unwrap();
        let perm = heuristic_cp(&s, cfg, &layout).unwrap();
        let got = retained_score(&s.permuted(&perm).unwrap(), &hard_mask(&s, &perm, cfg).unwrap()).unwrap();
        let best = group_partitions(8, 4)
            .unwrap()
            .into_iter()
            .map(|p| {
                let p = PermutationIndices::new(p).unwrap();
                retained_score(&s.permuted(&p).unwrap(), &hard_mask(&s, &p, cfg).unwrap()).unwrap()
            })
            .fold(0.0, f64::max);
        assert!(got >= 22.0);
        assert_eq!(got, best);
        assert_eq!(best, 26.0);
    }

    #[test]
    fn heuristic_never_loses_score() {
        let cfg = NmConfig::new(2, 4).unwrap();
        let layout = BlockLayout::uniform(16, 8).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..500 {
            let s = ImportanceScores::new(rng.uniform_matrix::<f64>(8, 16)).unwrap();
            let perm = heuristic_cp(&s, cfg, &layout).unwrap();
            assert!(layout.confines(&perm));
            let id = PermutationIndices::identity(16);
            let r = |p: &PermutationIndices| {
                retained_score(&s.permuted(p).unwrap(), &hard_mask(&s, p, cfg).unwrap()).unwrap()
            };
            assert!(r(&perm) >= r(&id));
        }
        let uniform = ImportanceScores::new(Matrix::<f64>::filled(3, 16, 1.0)).unwrap();
        assert!(heuristic_cp(&uniform, cfg, &layout).unwrap().is_identity());
    }

    #[test]
    fn oracle_bounds() {
        let cfg = NmConfig::new(2, 4).unwrap();
        let mut rng = Rng::new(8);
        let w = rng.gaussian_matrix::<f64>(4, 8, 1.0);
        let x = rng.gaussian_matrix::<f64>(32, 8, 1.0);
        let layout = BlockLayout::uniform(8, 8).unwrap();
        let res = oracle_best_partition(&w, &x, Metric::Wanda, cfg, &layout).unwrap();
        assert_eq!(res.evaluated_count, 35);
        let obj = Objective::single_layer(w.clone(), x.clone(), wanda_scores(&w, &x).unwrap(), layout.clone(), cfg)
            .unwrap();
        let id = obj.evaluate(&obj.identity_perms()).unwrap().loss;
        let heur = heuristic_cp(&wanda_scores(&w, &x).unwrap(), cfg, &layout).unwrap();
        let h = obj.evaluate(&[heur]).unwrap().loss;
        assert!(res.best_loss <= id && res.best_loss <= h);
        assert_eq!(obj.evaluate(&res.best_permutations).unwrap().loss, res.best_loss);
        // random permutations never beat the oracle
        for _ in 0..50 {
            let p = rng.permutation(8);
            assert!(obj.evaluate(&[p]).unwrap().loss >= res.best_loss);
        }
    }

    #[test]
    fn oracle_single_group_is_plain_pruning() {
        let cfg = NmConfig::new(2, 4).unwrap();
        let mut rng = Rng::new(9);
        let w = rng.gaussian_matrix::<f64>(3, 4, 1.0);
        let x = rng.gaussian_matrix::<f64>(8, 4, 1.0);
        let layout = BlockLayout::uniform(4, 4).unwrap();
        let res = oracle_best_partition(&w, &x, Metric::Magnitude, cfg, &layout).unwrap();
        assert_eq!(res.evaluated_count, 1);
        assert!(res.best_permutations[0].is_identity());
    }

    #[test]
    fn oracle_refuses_huge_searches() {
        let cfg = NmConfig::new(2, 4).unwrap();
        let mut rng = Rng::new(10);
        let w = rng.gaussian_matrix::<f64>(2, 32, 1.0);
        let x = rng.gaussian_matrix::<f64>(4, 32, 1.0);
        let layout = BlockLayout::uniform(32, 16).unwrap();
        let err = oracle_best_partition(&w, &x, Metric::Magnitude, cfg, &layout).unwrap_err();
        assert!(matches!(err, Error::TooLarge(_)), "{err}");
    }

    #[test]
    fn fig1_search_finds_a_counterexample() {
        let inst = search_fig1(0, 10_000).unwrap();
        let cfg = NmConfig::new(2, 4).unwrap();
        let heur = heuristic_cp(&magnitude_scores(&inst.weight).unwrap(), cfg, &BlockLayout::uniform(8, 8).unwrap())
            .unwrap();
        let h = permutation_quality(&inst.weight, &inst.calibration, cfg, &heur).unwrap();
        let i = permutation_quality(&inst.weight, &inst.calibration, cfg, &PermutationIndices::identity(8)).unwrap();
        assert!(h.retained > i.retained);
        assert!(h.loss > i.loss * (1.0 + FIG1_MIN_MARGIN) && h.mse > i.mse * (1.0 + FIG1_MIN_MARGIN));
    }
}
