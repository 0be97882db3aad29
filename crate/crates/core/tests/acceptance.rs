//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Each criterion also has a wall-clock budget.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::Path;
use std::time::{Duration, Instant};

use permnm::assignment::{exhaustive_lsa, solve_lsa, PermutationIndices};
use permnm::permlearn::{
    fold_and_export, hard_mask, init_params, train, Activation, BlockLayout, BlockPermutationParams, Layer, Mode,
    Model, Objective, Problem, TrainConfig,
};
use permnm::pipeline::{
    cli_bench_permutation, cli_compare, generate_fixture, load_calibration, load_model, FixtureKind, RunConfig,
    TensorContainer,
};
use permnm::reference::{count_partitions, heuristic_cp, oracle_best_partition, permutation_quality};
use permnm::sparsity::{check_nm_weights, compress_nm, decompress_nm};
use permnm::{
    graddiff::finite_diff_check, magnitude_scores, nm_mask, retained_score, sinkhorn_normalize, wanda_scores,
    CompressedNm, ImportanceScores, Matrix, Metric, NmConfig, Rng,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Oracle-suite regression constants, frozen from the first calibration
/// run (default learning rate 1e-3, 64 calibration samples per seed).
const SEEDS: u64 = 50;
const MIN_SEEDS_AT_MOST_HEURISTIC: usize = 42;
const MAX_MEAN_ORACLE_GAP: f64 = 0.061;
// frozen constants may only tighten the required majority and 10% gap
const _: () = assert!(2 * MIN_SEEDS_AT_MOST_HEURISTIC > SEEDS as usize && MAX_MEAN_ORACLE_GAP <= 0.10);

fn sinkhorn_convergence() -> Outcome {
    let mut rng = Rng::new(1);
    let (mut worst5, mut worst50) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = rng.gaussian_matrix::<f64>(64, 64, 1.0);
        worst5 = worst5.max(ok(sinkhorn_normalize(&x, 5))?.marginal_error());
        worst50 = worst50.max(ok(sinkhorn_normalize(&x, 50))?.marginal_error());
    }
    ensure!(worst5 <= 5e-2, "L=5 marginal error {worst5:.3e} > 5e-2");
    ensure!(worst50 <= 1e-4, "L=50 marginal error {worst50:.3e} > 1e-4");
    Ok(format!("max error {worst5:.2e} at L=5, {worst50:.2e} at L=50"))
}

fn lsa_exactness() -> Outcome {
    let mut rng = Rng::new(2);
    for i in 0..200 {
        let n = 1 + rng.below(8);
        let m = rng.uniform_matrix::<f64>(n, n);
        let fast = ok(solve_lsa(&m))?;
        let brute = ok(exhaustive_lsa(&m))?;
        ensure!(
            fast.objective == brute.objective,
            "instance {i} (n={n}): {} vs exhaustive {}",
            fast.objective,
            brute.objective
        );
    }
    Ok("200/200 instances match exhaustive enumeration".into())
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    (k - 1..n)
        .flat_map(|last| {
            combinations(last, k - 1).into_iter().map(move |mut c| {
                c.push(last);
                c
            })
        })
        .collect()
}

fn mask_optimality() -> Outcome {
    let cfg = ok(NmConfig::new(2, 4))?;
    let subsets = combinations(4, 2);
    let mut rng = Rng::new(3);
    for i in 0..100 {
        let s = ok(ImportanceScores::new(rng.uniform_matrix::<f64>(8, 16)))?;
        let mask = ok(nm_mask(&s, cfg))?;
        for r in 0..8 {
            for g in 0..4 {
                let cols = g * 4..g * 4 + 4;
                let kept: Vec<usize> = cols.clone().filter(|&c| mask.matrix()[(r, c)] == 1.0).collect();
                ensure!(kept.len() == 2, "instance {i} row {r} group {g} keeps {}", kept.len());
                let sum = |idx: &[usize]| idx.iter().map(|&c| s.matrix()[(r, c)]).sum::<f64>();
                let best = subsets
                    .iter()
                    .map(|sub| sum(&sub.iter().map(|o| cols.start + o).collect::<Vec<_>>()))
                    .fold(f64::NEG_INFINITY, f64::max);
                ensure!(sum(&kept) == best, "instance {i} row {r} group {g}: {} < {best}", sum(&kept));
            }
        }
        let total = ok(retained_score(&s, &mask))?;
        ensure!(total > 0.0, "instance {i}: retained score {total}");
    }
    Ok("100/100 score matrices hit the per-group maximum".into())
}

fn gradient_fidelity() -> Outcome {
    let cfg = ok(NmConfig::new(2, 4))?;
    let mut rng = Rng::new(4);
    let w = rng.gaussian_matrix::<f64>(4, 8, 1.0);
    let x = rng.gaussian_matrix::<f64>(16, 8, 1.0);
    let obj = ok(Objective::single_layer(
        w.clone(),
        x.clone(),
        ok(wanda_scores(&w, &x))?,
        ok(BlockLayout::uniform(8, 8))?,
        cfg,
    ))?;
    let mut tape = ok(obj.tape(1.0, 5, true, false))?;
    let mut worst = 0.0f64;
    for p in 0..20 {
        let point = vec![rng.gaussian_matrix::<f64>(8, 8, 1.0)];
        let check = ok(finite_diff_check(&mut tape, &point, 1e-5))?;
        ensure!(
            check.max_rel_error <= 1e-4,
            "point {p}: relative error {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
            check.max_rel_error,
            check.worst_coordinate,
            check.analytic,
            check.numeric
        );
        worst = worst.max(check.max_rel_error);
    }
    Ok(format!("max relative error {worst:.2e} over 20 points"))
}

fn oracle_suite() -> Outcome {
    let cfg = ok(NmConfig::new(2, 4))?;
    let layout = ok(BlockLayout::uniform(8, 8))?;
    let (mut at_most_identity, mut at_most_heuristic, mut gap_sum) = (0usize, 0usize, 0.0f64);
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let w = rng.gaussian_matrix::<f64>(4, 8, 1.0);
        let x = rng.gaussian_matrix::<f64>(64, 8, 1.0);
        let model = ok(Model::new(vec![Layer::new("fc", w.clone(), Activation::Identity)]))?;
        let tcfg = TrainConfig {
            steps: 50,
            block_size: 8,
            metric: Metric::Wanda,
            mode: Mode::Endtoend,
            seed,
            ..TrainConfig::default()
        };
        let sol = ok(train(&model, &x, &tcfg, cfg))?.remove(0);
        let oracle = ok(oracle_best_partition(&w, &x, Metric::Wanda, cfg, &layout))?.best_loss;
        ensure!(
            oracle <= sol.achieved_loss && oracle <= sol.heuristic_loss,
            "seed {seed}: oracle {oracle} above a comparator"
        );
        at_most_identity += (sol.achieved_loss <= sol.identity_loss) as usize;
        at_most_heuristic += (sol.achieved_loss <= sol.heuristic_loss) as usize;
        gap_sum += (sol.achieved_loss - oracle) / oracle;
    }
    let mean_gap = gap_sum / SEEDS as f64;
    ensure!(at_most_identity == SEEDS as usize, "(a) {at_most_identity}/{SEEDS} seeds at most identity");
    ensure!(
        at_most_heuristic >= MIN_SEEDS_AT_MOST_HEURISTIC,
        "(b) {at_most_heuristic}/{SEEDS} seeds at most heuristic, frozen floor {MIN_SEEDS_AT_MOST_HEURISTIC}"
    );
    ensure!(
        mean_gap <= MAX_MEAN_ORACLE_GAP,
        "(c) mean oracle gap {:.2}% above frozen {:.1}%",
        100.0 * mean_gap,
        100.0 * MAX_MEAN_ORACLE_GAP
    );
    Ok(format!(
        "(a) {at_most_identity}/{SEEDS} (b) {at_most_heuristic}/{SEEDS} (c) mean gap {:.2}%",
        100.0 * mean_gap
    ))
}

fn fig1_phenomenon() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fig1.json");
    let model = ok(load_model::<f64>(&path))?;
    let x = ok(load_calibration::<f64>(&path))?;
    let w = &model.layers()[0].weight;
    let cfg = ok(NmConfig::new(2, 4))?;
    let layout = ok(BlockLayout::uniform(8, 8))?;
    let heuristic = ok(heuristic_cp(&ok(magnitude_scores(w))?, cfg, &layout))?;
    let h = ok(permutation_quality(w, &x, cfg, &heuristic))?;
    let i = ok(permutation_quality(w, &x, cfg, &PermutationIndices::identity(8)))?;
    ensure!(h.retained > i.retained, "retained {} <= identity {}", h.retained, i.retained);
    ensure!(h.loss > i.loss, "loss {} <= identity {}", h.loss, i.loss);
    Ok(format!(
        "retained {:.3} > {:.3} yet loss {:.4} > {:.4}",
        h.retained, i.retained, h.loss, i.loss
    ))
}

fn combinatorics() -> Outcome {
    let big = ok(count_partitions(16, 4))?;
    let small = ok(count_partitions(8, 4))?;
    ensure!(big == 2_627_625u64.into(), "count_partitions(16, 4) = {big}");
    ensure!(small == 35u64.into(), "count_partitions(8, 4) = {small}");
    Ok(format!("{big} and {small}"))
}

fn complexity() -> Outcome {
    let mut rng = Rng::new(8);
    for (c_in, b) in [(4096, 64), (8, 8), (256, 32), (128, 128)] {
        let p: BlockPermutationParams<f64> = ok(init_params(c_in, b, &mut rng))?;
        ensure!(p.param_count() == c_in * b, "C_in={c_in} B={b}: {} parameters", p.param_count());
    }
    let sizes = [64usize, 128, 256];
    let mut times = Vec::new();
    for &n in &sizes {
        let mut samples: Vec<f64> = (0..5)
            .map(|_| {
                let m = rng.uniform_matrix::<f64>(n, n);
                let t = Instant::now();
                solve_lsa(&m).expect("square input");
                t.elapsed().as_secs_f64()
            })
            .collect();
        samples.sort_by(f64::total_cmp);
        times.push(samples[2]);
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    ensure!(slope <= 3.5, "log-log slope {slope:.2} > 3.5 (times {times:?})");
    Ok(format!("parameter counts C_in*B; Hungarian slope {slope:.2}"))
}

fn random_block_permutation(layout: &BlockLayout, rng: &mut Rng) -> PermutationIndices {
    let mut perm = Vec::with_capacity(layout.c_in());
    for (start, len) in layout.blocks() {
        perm.extend(rng.permutation(len).as_slice().iter().map(|&j| start + j));
    }
    PermutationIndices::new(perm).expect("block permutations compose")
}

fn fold_correctness() -> Outcome {
    let cfg = ok(NmConfig::new(2, 4))?;
    let mut rng = Rng::new(9);
    let model = ok(Model::new(vec![
        Layer::new("fc1", rng.gaussian_matrix::<f64>(8, 16, 0.25), Activation::Relu),
        Layer::new("fc2", rng.gaussian_matrix::<f64>(4, 8, 0.35), Activation::Identity),
    ]))?;
    let x = rng.gaussian_matrix::<f64>(32, 16, 1.0);
    let tcfg = TrainConfig {
        steps: 10,
        block_size: 8,
        learning_rate: 5e-2,
        mode: Mode::Endtoend,
        ..TrainConfig::default()
    };
    let problem = ok(Problem::new(&model, &x, &tcfg, cfg))?;
    let trained = ok(train(&model, &x, &tcfg, cfg))?;
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let mut sols = trained.clone();
        if trial > 0 {
            for (k, sol) in sols.iter_mut().enumerate() {
                sol.permutation = random_block_permutation(&sol.layout, &mut rng);
                sol.mask = ok(hard_mask(&problem.scores[k], &sol.permutation, cfg))?;
            }
        }
        if trial % 2 == 1 {
            sols.reverse();
        }
        let folded = ok(fold_and_export(&model, &sols, cfg))?;
        for layer in folded.model.layers() {
            ok(check_nm_weights(&layer.weight, cfg))?;
        }
        let mut perms: Vec<_> = sols.iter().map(|s| s.permutation.clone()).collect();
        if trial % 2 == 1 {
            perms.reverse();
        }
        let (expect, _, _) = ok(problem.model_objective().output(&perms))?;
        let got = ok(folded.forward(&x))?;
        let rel = got.max_abs_diff(&expect) / expect.frobenius_norm().max(f64::MIN_POSITIVE);
        ensure!(rel <= 1e-5, "trial {trial}: relative deviation {rel:.3e}");
        worst = worst.max(rel);
    }
    Ok(format!("20 permutation sets, max relative deviation {worst:.2e}, all layers N:M"))
}

fn round_trips() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let mut rng = Rng::new(10);
    let configs = [(2, 4), (4, 8), (1, 4), (3, 4)];
    for i in 0..100 {
        let (n, m) = configs[i % configs.len()];
        let cfg = ok(NmConfig::new(n, m))?;
        let (rows, cols) = (1 + rng.below(9), m * (1 + rng.below(6)));
        let w = rng.gaussian_matrix::<f32>(rows, cols, 1.0);
        let pruned = ok(nm_mask(&ok(magnitude_scores(&w))?, cfg))?;
        let pruned = ok(pruned.apply(&w))?;
        let c = ok(compress_nm(&pruned, cfg))?;
        let bytes = c.to_bytes();
        let back = ok(CompressedNm::from_bytes(&bytes))?;
        ensure!(back == c && back.to_bytes() == bytes, "codec instance {i} changed on reload");
        let dense = ok(decompress_nm(&back))?;
        ensure!(
            dense.as_slice().iter().zip(pruned.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "codec instance {i} is not bitwise lossless"
        );

        let mut container = TensorContainer::new();
        let mut originals = Vec::new();
        for t in 0..1 + rng.below(4) {
            let (rows, cols) = (1 + rng.below(7), 1 + rng.below(7));
            let mut m: Matrix<f32> = rng.gaussian_matrix(rows, cols, 10.0);
            m.as_mut_slice()[0] = [-0.0, f32::MIN_POSITIVE / 2.0, f32::MAX, 1.0][t % 4];
            ok(container.insert(format!("t{t}"), m.clone()))?;
            originals.push((format!("t{t}"), m));
        }
        let path = dir.path().join(format!("c{i}.json"));
        ok(container.save(&path))?;
        let loaded = ok(TensorContainer::load(&path))?;
        ensure!(loaded.names() == container.names(), "container {i} lost tensor order");
        for (name, m) in &originals {
            let got = loaded.get(name).ok_or(format!("container {i} lost `{name}`"))?;
            ensure!(
                got.shape() == m.shape()
                    && got.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "container {i} tensor `{name}` is not bitwise lossless"
            );
        }
    }
    Ok("100 codec and 100 container instances bitwise identical".into())
}

fn determinism() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let model = dir.path().join("model.json");
    let calib = dir.path().join("calib.json");
    ok(generate_fixture(&FixtureKind::Mlp { dims: vec![16, 8, 4] }, 11, &model))?;
    ok(generate_fixture(
        &FixtureKind::Calibration {
            samples: 32,
            features: 16,
        },
        12,
        &calib,
    ))?;
    let mut cfg = RunConfig::new(&model, &calib);
    cfg.block_size = 8;
    cfg.steps = 20;
    cfg.seed = 7;
    let a = ok(ok(cli_compare(&cfg))?.without_timing().to_json())?;
    let b = ok(ok(cli_compare(&cfg))?.without_timing().to_json())?;
    ensure!(a == b, "reports differ between identical runs");
    Ok(format!("identical {}-byte reports", a.len()))
}

fn benchmark() -> Outcome {
    let r = ok(cli_bench_permutation(2048, 64, 5))?;
    ensure!(r.ratio >= 10.0, "gather only {:.1}x faster than dense matmul", r.ratio);
    Ok(format!(
        "gather {:.1}x faster ({} ns vs {} ns, machine-dependent)",
        r.ratio, r.gather_median_ns, r.dense_median_ns
    ))
}

fn main() {
    type Criterion = (&'static str, u64, fn() -> Outcome);
    let criteria: [Criterion; 12] = [
        ("sinkhorn convergence", 5, sinkhorn_convergence),
        ("assignment exactness", 10, lsa_exactness),
        ("N:M mask optimality", 5, mask_optimality),
        ("gradient fidelity", 30, gradient_fidelity),
        ("oracle suite", 300, oracle_suite),
        ("score-maximizing permutation can hurt", 1, fig1_phenomenon),
        ("partition counts", 1, combinatorics),
        ("parameter and complexity arithmetic", 30, complexity),
        ("fold correctness", 5, fold_correctness),
        ("lossless round trips", 5, round_trips),
        ("determinism", 60, determinism),
        ("benchmark sanity", 60, benchmark),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(*budget);
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {budget} s budget")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        failed += (status == "FAIL") as usize;
        println!(
            "criterion {:>2} {status} {name}: {detail} [{:.2} s]",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
