//! Acceptance suite. Every check prints one `criterion N: PASS|FAIL` line.
//!
//! Criteria 6 to 8 train the full pipeline on synthetic data and take a few
//! minutes; run with `--nocapture` to see the report lines.

mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use egra_core::alignment::{entity_weights, epoch_weight, AlignmentSchedule};
use egra_core::behavior::propagate_lightgcn;
use egra_core::dataset::{Interaction, InteractionDataset, Split};
use egra_core::evaluator::{evaluate, ndcg_at_k, recall_at_k};
use egra_core::experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
use egra_core::knn_graph::{build_enhanced_adjacency, topk_binary_graph, topk_directed, topk_weighted_graph};
use egra_core::modality::semantic_propagate;
use egra_core::sparse::SparseAdjacency;
use egra_core::synthetic::SyntheticConfig;
use egra_core::trainer::{alignment_weights, total_loss};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(n: usize, pass: bool, detail: &str) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

#[test]
fn criterion_1_weight_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_sum: f64 = 0.0;
    let mut negative = false;
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let d = rng.random_range(1..16);
        let b = normal_matrix(n, d, &mut rng);
        let m = normal_matrix(n, d, &mut rng);
        let tau1 = rng.random_range(0.6..2.0);
        let w = entity_weights(b.view(), m.view(), tau1).unwrap();
        worst_sum = worst_sum.max((w.sum() - 1.0).abs());
        negative |= w.iter().any(|&x| x < 0.0);
    }
    let mut schedule_ok = true;
    for _ in 0..200 {
        let lambda_min = rng.random_range(0.0..0.02);
        let sched = AlignmentSchedule {
            lambda_min,
            lambda_max: lambda_min + rng.random_range(0.0..0.05),
            warmup: rng.random_range(1..25),
            ..AlignmentSchedule::default()
        };
        let ws: Vec<f64> = (0..3 * sched.warmup + 5).map(|p| epoch_weight(p, &sched)).collect();
        schedule_ok &= ws.windows(2).all(|w| w[1] >= w[0]);
        schedule_ok &= ws[sched.warmup..].iter().all(|&w| w == sched.lambda_max);
        schedule_ok &= ws[0] == sched.lambda_min;
    }
    let pass = worst_sum <= 1e-6 && !negative && schedule_ok;
    report(
        1,
        pass,
        &format!("max |sum - 1| = {worst_sum:.2e}, negatives = {negative}, schedule ok = {schedule_ok}"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradient_correctness() {
    let mut worst = (0.0, String::new());
    for restart in 0..20 {
        let t = common::tiny_instance(100 + restart);
        let epoch = (restart % 12) as usize;
        let w = alignment_weights(&t.model, &t.state, &t.triples, epoch, &t.config).unwrap();
        let (_, grad) = total_loss(&t.model, &t.state, &t.triples, epoch, &t.config, Some(&w)).unwrap();
        let loss = |s: &egra_core::model::ModelState| {
            total_loss(&t.model, s, &t.triples, epoch, &t.config, Some(&w)).unwrap().0.total()
        };
        let (err, group) = common::max_group_error(&t.state, &grad, 1e-4, loss);
        if err > worst.0 {
            worst = (err, format!("{group} at restart {restart}"));
        }
    }
    let pass = worst.0 < 1e-3;
    report(2, pass, &format!("max relative error {:.2e} ({})", worst.0, worst.1));
    assert!(pass);
}

/// Exhaustive Top-K: all pairwise cosines in f64, sorted per row.
fn brute_force_topk(e: ArrayView2<'_, f32>, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = e.nrows();
    let norm = |i: usize| e.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let cos = |i: usize, j: usize| {
        let (a, b) = (norm(i), norm(j));
        if a == 0.0 || b == 0.0 {
            return 0.0;
        }
        let dot: f64 = e.row(i).iter().zip(e.row(j)).map(|(&x, &y)| x as f64 * y as f64).sum();
        dot / (a * b)
    };
    (0..n)
        .map(|i| {
            let mut all: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, cos(i, j))).collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(k);
            all
        })
        .collect()
}

#[test]
fn criterion_3_graph_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for inst in 0..20 {
        let n = rng.random_range(3..=50);
        let d = rng.random_range(1..12);
        let k = rng.random_range(1..n.min(11));
        let e = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0f32..1.0));
        let oracle = brute_force_topk(e.view(), k);

        let directed = topk_directed(e.view(), k, true).unwrap();
        for i in 0..n {
            if directed.row_nnz(i) != k {
                failures.push(format!("instance {inst}: row {i} has {} entries", directed.row_nnz(i)));
            }
        }
        // symmetrized oracle: union of directed edges, larger weight kept
        let mut weighted = vec![vec![None::<f64>; n]; n];
        for (i, row) in oracle.iter().enumerate() {
            for &(j, c) in row {
                for (a, b) in [(i, j), (j, i)] {
                    let slot = &mut weighted[a][b];
                    *slot = Some(slot.map_or(c, |w: f64| w.max(c)));
                }
            }
        }
        let s_w = topk_weighted_graph(e.view(), k).unwrap();
        let s_b = topk_binary_graph(e.view(), k).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = weighted[i][j];
                let got_w = s_w.get(i, j).map(f64::from);
                let same = match (want, got_w) {
                    (None, None) => true,
                    (Some(a), Some(b)) => (a - b).abs() < 1e-6,
                    _ => false,
                };
                if !same || want.is_some() != s_b.get(i, j).is_some() {
                    failures.push(format!("instance {inst}: entry ({i},{j}) {want:?} vs {got_w:?}"));
                }
            }
        }

        let users = rng.random_range(1..20);
        let triplets: BTreeSet<(usize, usize)> = (0..rng.random_range(1..60))
            .map(|_| (rng.random_range(0..users), rng.random_range(0..n)))
            .collect();
        let r = SparseAdjacency::from_triplets(users, n, triplets.iter().map(|&(u, i)| (u, i, 1.0)).collect())
            .unwrap();
        let g = build_enhanced_adjacency(&r, &s_b).unwrap();
        if !g.is_symmetric() || g.nnz() != 2 * r.nnz() + s_b.nnz() {
            failures.push(format!("instance {inst}: G_e nnz {} symmetric {}", g.nnz(), g.is_symmetric()));
        }
    }
    report(3, failures.is_empty(), &format!("20 instances, {} mismatches", failures.len()));
    assert!(failures.is_empty(), "{failures:?}");
}

fn random_symmetric_graph(n: usize, density: f64, rng: &mut ChaCha8Rng) -> SparseAdjacency {
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                let w = rng.random_range(0.1f32..1.0);
                triplets.push((i, j, w));
                triplets.push((j, i, w));
            }
        }
    }
    SparseAdjacency::from_triplets(n, n, triplets).unwrap()
}

/// `D^{-1/2} A D^{-1/2}` in dense arithmetic; isolated nodes stay zero.
fn dense_normalized(a: &Array2<f64>) -> Array2<f64> {
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn(a.dim(), |(i, j)| {
        if deg[i] == 0.0 || deg[j] == 0.0 {
            0.0
        } else {
            a[[i, j]] / (deg[i].sqrt() * deg[j].sqrt())
        }
    })
}

fn rel_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(1e-300);
    diff / scale
}

#[test]
fn criterion_4_propagation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..=100);
        let g = random_symmetric_graph(n, rng.random_range(0.02..0.3), &mut rng);
        let dense = dense_normalized(&g.to_dense());
        let normalized = g.sym_normalize().unwrap();
        let e0 = normal_matrix(n, rng.random_range(1..9), &mut rng);

        let layers = rng.random_range(0..5);
        let mut power = e0.clone();
        let mut mean = e0.clone();
        for _ in 0..layers {
            power = dense.dot(&power);
            mean += &power;
        }
        mean /= (layers + 1) as f64;
        let sparse = propagate_lightgcn(e0.view(), &normalized, layers).unwrap();
        worst = worst.max(rel_error(&mean, &sparse));

        let sem_layers = rng.random_range(1..4);
        let mut last = e0.clone();
        for _ in 0..sem_layers {
            last = dense.dot(&last);
        }
        if last.iter().any(|&v| v != 0.0) {
            let sparse = semantic_propagate(e0.view(), &normalized, sem_layers).unwrap();
            worst = worst.max(rel_error(&last, &sparse));
        }
    }
    let pass = worst < 1e-5;
    report(4, pass, &format!("max relative error {worst:.2e} over 20 graphs"));
    assert!(pass);
}

/// Rank of each candidate by counting the candidates placed before it.
fn brute_force_metrics(scores: &[f64], exclude: &[usize], relevant: &[usize], k: usize) -> (f64, f64) {
    let candidates: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    let rank = |i: usize| {
        candidates
            .iter()
            .filter(|&&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let mut hits = 0;
    let mut dcg = 0.0;
    for &i in relevant {
        if !exclude.contains(&i) && rank(i) < k {
            hits += 1;
            dcg += 1.0 / ((rank(i) + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(relevant.len())).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    (hits as f64 / relevant.len() as f64, dcg / idcg)
}

fn metric_oracle_failures() -> Vec<String> {
    let mut failures = Vec::new();
    // every ranking of 5 items against every nonempty relevant set and cut-off
    let mut perms: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..5 {
        perms = perms
            .into_iter()
            .flat_map(|p| {
                (0..5)
                    .filter(|i| !p.contains(i))
                    .map(|i| [p.clone(), vec![i]].concat())
                    .collect::<Vec<_>>()
            })
            .collect();
    }
    for ranked in &perms {
        let scores: Vec<f64> = {
            let mut s = vec![0.0; 5];
            for (pos, &i) in ranked.iter().enumerate() {
                s[i] = (5 - pos) as f64;
            }
            s
        };
        for mask in 1u32..32 {
            let relevant: Vec<usize> = (0..5).filter(|i| mask & (1 << i) != 0).collect();
            for k in 1..=5 {
                let want = brute_force_metrics(&scores, &[], &relevant, k);
                let got = (recall_at_k(ranked, &relevant, k).unwrap(), ndcg_at_k(ranked, &relevant, k).unwrap());
                if (want.0 - got.0).abs() > 1e-9 || (want.1 - got.1).abs() > 1e-9 {
                    failures.push(format!("{ranked:?} {relevant:?} K={k}: {want:?} vs {got:?}"));
                }
            }
        }
    }

    // random datasets with up to 10 users and 20 items, with tied scores
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for inst in 0..300 {
        let users = rng.random_range(1..=10);
        let items = rng.random_range(2..=20);
        let d = rng.random_range(1..4);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for u in 0..users {
            let mut all: Vec<usize> = (0..items).collect();
            all.shuffle(&mut rng);
            let n_train = rng.random_range(0..items);
            let n_test = rng.random_range(0..=(items - n_train).min(5));
            train.extend(all[..n_train].iter().map(|&i| Interaction::new(u, i)));
            test.extend(all[n_train..n_train + n_test].iter().map(|&i| Interaction::new(u, i)));
        }
        let Ok(ds) = InteractionDataset::from_splits(users, items, train, vec![], test) else {
            continue;
        };
        let e = Array2::from_shape_simple_fn((users + items, d), || rng.random_range(-2..=2) as f64);
        let ks = [1, 3, 10];
        let got = evaluate(e.view(), &ds, Split::Test, &ks).unwrap();
        let mut sums = vec![(0.0, 0.0); ks.len()];
        let mut counted = 0;
        for u in 0..users {
            let relevant: Vec<usize> = ds.test.iter().filter(|x| x.user == u).map(|x| x.item).collect();
            if relevant.is_empty() {
                continue;
            }
            counted += 1;
            let scores: Vec<f64> = (0..items).map(|i| e.row(u).dot(&e.row(users + i))).collect();
            for (s, &k) in sums.iter_mut().zip(&ks) {
                let (r, n) = brute_force_metrics(&scores, ds.train_items(u), &relevant, k);
                s.0 += r;
                s.1 += n;
            }
        }
        if counted != got.num_users {
            failures.push(format!("instance {inst}: {counted} users vs {}", got.num_users));
            continue;
        }
        for (s, &k) in sums.iter().zip(&ks) {
            let (r, n) = (s.0 / counted.max(1) as f64, s.1 / counted.max(1) as f64);
            if (r - got.recall_at(k)).abs() > 1e-9 || (n - got.ndcg_at(k)).abs() > 1e-9 {
                failures.push(format!("instance {inst} K={k}: ({r}, {n}) vs ({}, {})", got.recall_at(k), got.ndcg_at(k)));
            }
        }
    }
    failures
}

#[test]
fn criterion_5_metric_oracle() {
    let failures = metric_oracle_failures();

    // random embeddings: one train and one test item per user, so the test
    // item is uniform over the 99 candidates and E[R@10] = 10/99
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (users, items) = (1000, 100);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in 0..users {
        let a = rng.random_range(0..items);
        let mut b = rng.random_range(0..items);
        while b == a {
            b = rng.random_range(0..items);
        }
        train.push(Interaction::new(u, a));
        test.push(Interaction::new(u, b));
    }
    let ds = InteractionDataset::from_splits(users, items, train, vec![], test).unwrap();
    let e = normal_matrix(users + items, 16, &mut rng);
    let r10 = evaluate(e.view(), &ds, Split::Test, &[10]).unwrap().recall_at(10);
    let p = 10.0 / 99.0;
    let sigma = (p * (1.0 - p) / users as f64).sqrt();
    let within = (r10 - p).abs() <= 3.0 * sigma;

    let pass = failures.is_empty() && within;
    report(
        5,
        pass,
        &format!(
            "{} oracle mismatches; random R@10 = {r10:.4}, expected {p:.4} +- {:.4}",
            failures.len(),
            3.0 * sigma
        ),
    );
    assert!(pass, "{:?}", &failures[..failures.len().min(5)]);
}

const SEEDS: u64 = 5;

/// The synthetic experiment shared by criteria 6 to 8.
fn synthetic_config(seed: u64, ablation: &str, tag: &str, root: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ablation: ablation.to_string(),
        out_dir: root.join(format!("{tag}-s{seed}-{ablation}")),
        cache_dir: Some(root.join("cache")),
        ..Default::default()
    };
    cfg.data.synthetic = Some(SyntheticConfig {
        seed: 100 + seed,
        ..SyntheticConfig::default()
    });
    cfg.train.dim = 32;
    cfg.train.batch_size = 512;
    cfg.train.max_epochs = 100;
    cfg
}

struct VariantRuns {
    egra: Vec<ExperimentOutcome>,
    ebg: Vec<ExperimentOutcome>,
    bda: Vec<ExperimentOutcome>,
}

fn variant_runs() -> &'static VariantRuns {
    static RUNS: OnceLock<VariantRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let run = |ablation: &str| -> Vec<ExperimentOutcome> {
            (0..SEEDS)
                .map(|seed| run_experiment(&synthetic_config(seed, ablation, "variants", root.path())).unwrap())
                .collect()
        };
        VariantRuns {
            egra: run("none"),
            ebg: run("ebg"),
            bda: run("bda"),
        }
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_6_ablation_ordering() {
    let runs = variant_runs();
    let r20 = |v: &[ExperimentOutcome]| mean(v.iter().map(|o| o.test.recall_at(20)));
    let (egra, ebg, bda) = (r20(&runs.egra), r20(&runs.ebg), r20(&runs.bda));
    let pass = egra > ebg && egra > bda;
    report(
        6,
        pass,
        &format!("mean test R@20 over {SEEDS} seeds: EGRA {egra:.4}, EGRA/EBG {ebg:.4}, EGRA/BDA {bda:.4}"),
    );
    assert!(pass);
}

/// Recall@20 of one popularity group, or `None` when the group is absent.
fn group_recall(o: &ExperimentOutcome, group: usize) -> Option<f64> {
    o.longtail[group].as_ref().map(|r| r.recall_at(20))
}

#[test]
fn criterion_7_longtail_gain() {
    let runs = variant_runs();
    let mut head_gain = Vec::new();
    let mut tail_gain = Vec::new();
    for (a, b) in runs.egra.iter().zip(&runs.ebg) {
        if let (Some(x), Some(y)) = (group_recall(a, 0), group_recall(b, 0)) {
            head_gain.push(x - y);
        }
        // tail 40% = groups 4 and 5
        for g in [3, 4] {
            if let (Some(x), Some(y)) = (group_recall(a, g), group_recall(b, g)) {
                tail_gain.push(x - y);
            }
        }
    }
    let head = mean(head_gain.into_iter());
    let tail = mean(tail_gain.into_iter());
    let pass = tail - head > 0.0;
    report(
        7,
        pass,
        &format!("R@20 gain over EGRA/EBG: head {head:+.4}, tail 40% {tail:+.4}, difference {:+.4}", tail - head),
    );
    assert!(pass);
}

#[test]
fn criterion_8_lambda_min_sensitivity() {
    let root = tempfile::tempdir().unwrap();
    let values = [0.0, 0.005, 0.01];
    let mut valid = vec![Vec::new(); values.len()];
    for seed in 0..SEEDS {
        for (v, &lambda_min) in values.iter().enumerate() {
            let mut cfg = synthetic_config(seed, "none", &format!("lmin{v}"), root.path());
            cfg.align.lambda_min = lambda_min;
            valid[v].push(run_experiment(&cfg).unwrap().best_valid);
        }
    }
    for seed in 0..SEEDS as usize {
        let best_other = valid[1][seed].max(valid[2][seed]);
        if valid[0][seed] > best_other {
            println!(
                "criterion 8: WARN seed {seed}: lambda_min = 0 gives valid R@20 {:.4} > {best_other:.4}",
                valid[0][seed]
            );
        }
    }
    let means: Vec<f64> = valid.iter().map(|v| mean(v.iter().copied())).collect();
    let pass = means[0] <= means[1].max(means[2]);
    report(
        8,
        pass,
        &format!(
            "mean valid R@20 over {SEEDS} seeds: lambda_min 0 -> {:.4}, 0.005 -> {:.4}, 0.01 -> {:.4}",
            means[0], means[1], means[2]
        ),
    );
    assert!(pass);
}
