use std::fs;
use std::path::Path;

use egra_core::alignment::AlignmentSchedule;
use egra_core::dataset::{assign_longtail_groups, Interaction, InteractionDataset, Split};
use egra_core::evaluator::{evaluate, longtail_evaluate, DEFAULT_KS};
use egra_core::experiment::{run_experiment, run_grid, Enhancement, ExperimentConfig, FAILURE_MARKER};
use egra_core::features::{save_matrix, ModalityFeatureSet, TEXTUAL, VISUAL};
use egra_core::knn_graph::topk_binary_graph;
use egra_core::model::{build_semantic_graphs, EgraModel};
use egra_core::synthetic::{generate, SyntheticConfig};
use egra_core::trainer::{fit, pretrain_backbone, TrainConfig};
use ndarray::{array, Array2};

fn small_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        num_users: 60,
        num_items: 40,
        min_interactions: 6,
        max_interactions: 15,
        visual_dim: 8,
        textual_dim: 6,
        ..SyntheticConfig::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        dim: 8,
        batch_size: 128,
        max_epochs: 4,
        patience: 2,
        ..TrainConfig::default()
    }
}

fn small_config(root: &Path, name: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 3,
        out_dir: root.join(name),
        cache_dir: Some(root.join("cache")),
        train: small_train(),
        ..ExperimentConfig::default()
    };
    cfg.graph.h = 3;
    cfg.graph.k = 4;
    cfg.data.synthetic = Some(small_synthetic());
    cfg
}

fn cache_files(root: &Path, prefix: &str) -> usize {
    fs::read_dir(root.join("cache"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(prefix))
        .count()
}

#[test]
fn fit_is_deterministic_for_a_seed() {
    let data = generate(&small_synthetic()).unwrap();
    let semantic = build_semantic_graphs(&data.features, 4).unwrap();
    let cfg = small_train();
    let model = EgraModel::new(&data.dataset, &data.features, None, &semantic, cfg.dims()).unwrap();
    let a = fit(&model, &data.dataset, &cfg).unwrap();
    let b = fit(&model, &data.dataset, &cfg).unwrap();
    let strip = |h: &[egra_core::trainer::EpochRecord]| -> Vec<(f64, f64, f64, f64)> {
        h.iter().map(|r| (r.bpr, r.align, r.reg, r.valid_recall)).collect()
    };
    assert_eq!(strip(&a.history), strip(&b.history));
    assert_eq!(a.state.embeddings, b.state.embeddings);
}

#[test]
fn separable_toy_loss_decreases() {
    let train = vec![Interaction::new(0, 0), Interaction::new(1, 1)];
    let ds = InteractionDataset::from_splits(2, 2, train, vec![], vec![]).unwrap();
    let mut features = ModalityFeatureSet::new();
    features.insert(VISUAL, array![[1.0f32, 0.2, 0.0], [0.0, 0.3, 1.0]], 2).unwrap();
    let semantic = build_semantic_graphs(&features, 1).unwrap();
    let cfg = TrainConfig {
        dim: 4,
        learning_rate: 0.01,
        max_epochs: 5,
        ..TrainConfig::default()
    };
    let model = EgraModel::new(&ds, &features, None, &semantic, cfg.dims()).unwrap();
    let result = fit(&model, &ds, &cfg).unwrap();
    let totals: Vec<f64> = result.history.iter().map(|r| r.bpr + r.align + r.reg).collect();
    assert_eq!(totals.len(), 5);
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
}

#[test]
fn pretrain_graph_fit_chain() {
    let data = generate(&small_synthetic()).unwrap();
    let semantic = build_semantic_graphs(&data.features, 4).unwrap();
    let cfg = small_train();
    let e_pt = pretrain_backbone(&data.dataset, &data.features, &semantic, &cfg).unwrap();
    assert_eq!(e_pt.dim(), (40, 8));
    let s_pt = topk_binary_graph(e_pt.view(), 5).unwrap();
    let model = EgraModel::new(&data.dataset, &data.features, Some(&s_pt), &semantic, cfg.dims()).unwrap();
    let result = fit(&model, &data.dataset, &cfg).unwrap();
    assert!(result.state.is_finite());
    assert!(result.best_epoch < cfg.max_epochs);
}

#[test]
fn behavior_only_training_beats_random_ranking() {
    // modality inputs zeroed, no alignment: plain LightGCN with BPR
    let mut total = 0.0;
    let mut baseline = 0.0;
    for seed in 0..5 {
        let syn = SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        };
        let data = generate(&syn).unwrap();
        let ds = &data.dataset;
        let mut zeros = ModalityFeatureSet::new();
        for (name, m) in data.features.iter() {
            zeros.insert(name, Array2::zeros(m.dim()), ds.num_items).unwrap();
        }
        let semantic = build_semantic_graphs(&data.features, 10).unwrap();
        let s_pt = topk_binary_graph(data.features.get(VISUAL).unwrap().view(), 5).unwrap();
        let cfg = TrainConfig {
            dim: 32,
            batch_size: 512,
            max_epochs: 60,
            seed,
            schedule: AlignmentSchedule {
                lambda_min: 0.0,
                lambda_max: 0.0,
                ..AlignmentSchedule::default()
            },
            ..TrainConfig::default()
        };
        let model = EgraModel::new(ds, &zeros, Some(&s_pt), &semantic, cfg.dims()).unwrap();
        total += fit(&model, ds, &cfg).unwrap().best_valid;
        // expected recall of a uniformly random ranking over each user's candidates
        let users: Vec<usize> = (0..ds.num_users).filter(|&u| ds.valid.iter().any(|x| x.user == u)).collect();
        baseline += users
            .iter()
            .map(|&u| (20.0 / (ds.num_items - ds.train_items(u).len()) as f64).min(1.0))
            .sum::<f64>()
            / users.len() as f64;
    }
    assert!(total >= 3.0 * baseline, "trained {total:.3} vs random {baseline:.3} (sums over seeds)");
}

#[test]
fn longtail_groups_match_filtered_reruns() {
    let data = generate(&small_synthetic()).unwrap();
    let ds = &data.dataset;
    let e = Array2::from_shape_fn((ds.num_users + ds.num_items, 5), |(i, k)| ((i * 31 + k * 17) % 11) as f64 - 5.0);
    let groups = assign_longtail_groups(ds);
    let per_group = longtail_evaluate(e.view(), ds, &groups, &DEFAULT_KS).unwrap();
    for g in 0..5 {
        let test: Vec<Interaction> = ds.test.iter().filter(|x| groups.group_of_item[x.item] as usize == g + 1).copied().collect();
        let filtered = InteractionDataset::from_splits(ds.num_users, ds.num_items, ds.train.clone(), vec![], test.clone()).unwrap();
        match &per_group[g] {
            None => assert!(test.is_empty()),
            Some(r) => {
                let rerun = evaluate(e.view(), &filtered, Split::Test, &DEFAULT_KS).unwrap();
                assert_eq!(r, &rerun, "group {}", g + 1);
            }
        }
    }
}

#[test]
fn rerun_reuses_cached_stages() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path(), "a");
    let first = run_experiment(&cfg).unwrap();
    assert!(first.cache_hits.is_empty(), "{:?}", first.cache_hits);
    let second = run_experiment(&cfg).unwrap();
    for stage in ["semantic-", "pretrained-", "item-graph-", "train-"] {
        assert!(second.cache_hits.iter().any(|h| h.starts_with(stage)), "{stage} not reused");
    }
    assert_eq!(first.test, second.test);
    for f in ["report.txt", "report.tsv", "longtail.tsv", "history.jsonl", "config.toml"] {
        assert!(root.path().join("a").join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(root.path().join("a/report.txt")).unwrap();
    assert!(report.contains("test.meta.config_hash") && report.contains("group1.recall@20"), "{report}");
}

#[test]
fn ebg_ablation_skips_pretraining_and_graph_build() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_config(root.path(), "ebg");
    cfg.ablation = "ebg".into();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.label, "EGRA/EBG");
    assert_eq!(cache_files(root.path(), "pretrained-"), 0);
    assert_eq!(cache_files(root.path(), "item-graph-"), 0);
}

#[test]
fn external_embeddings_replace_pretraining() {
    let root = tempfile::tempdir().unwrap();
    let path = root.path().join("e_pt.bin");
    save_matrix(&path, &Array2::from_shape_fn((40, 6), |(i, k)| ((i * 7 + k) % 9) as f32)).unwrap();
    let mut cfg = small_config(root.path(), "ext");
    cfg.data.pretrained_embeddings = Some(path);
    run_experiment(&cfg).unwrap();
    assert_eq!(cache_files(root.path(), "pretrained-"), 0);
    assert_eq!(cache_files(root.path(), "item-graph-"), 1);
}

#[test]
fn intersected_enhancement_builds_the_comparator_graph() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_config(root.path(), "gume");
    cfg.enhancement = Enhancement::Intersected;
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.label, "EGRA[intersected]");
    assert_eq!(cache_files(root.path(), "intersected-"), 1);
    assert_eq!(cache_files(root.path(), "pretrained-"), 0);
}

#[test]
fn single_cell_grid_matches_a_plain_run() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_config(root.path(), "grid");
    cfg.grid.insert("graph.h".into(), vec![toml::Value::Integer(3)]);
    let grid = run_grid(&cfg).unwrap();
    let mut plain = small_config(root.path(), "plain");
    plain.cache_dir = Some(tempfile::tempdir().unwrap().path().join("cache"));
    let direct = run_experiment(&plain).unwrap();
    assert_eq!(grid.cells.len(), 1);
    assert_eq!(grid.cells[0].outcome.test, direct.test);
    assert!(grid.sensitivity.contains("graph.h\t3"));
}

#[test]
fn missing_inputs_fail_before_any_output() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_config(root.path(), "missing");
    cfg.data.synthetic = None;
    cfg.data.interactions = Some(root.path().join("nope.txt"));
    cfg.data.features.insert(TEXTUAL.into(), root.path().join("nope.bin"));
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!root.path().join("missing").exists());
}

#[test]
fn failed_stage_leaves_a_marker() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_config(root.path(), "diverge");
    cfg.ablation = "ebg".into();
    cfg.train.learning_rate = 1e200;
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    let marker = fs::read_to_string(root.path().join("diverge").join(FAILURE_MARKER)).unwrap();
    assert!(marker.contains("stage = train"), "{marker}");
    assert!(root.path().join("diverge/config.toml").exists());
}

#[test]
fn file_inputs_run_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let data = generate(&small_synthetic()).unwrap();
    let dir = root.path().join("data");
    data.write_to_dir(&dir).unwrap();
    let cfg_path = dir.join("egra.toml");
    fs::write(
        &cfg_path,
        format!(
            "seed = 1\nout_dir = \"{}\"\ntrain.dim = 8\ntrain.max_epochs = 2\ngraph.h = 3\ngraph.k = 4\n\
             data.interactions = \"interactions.txt\"\ndata.features.visual = \"visual.bin\"\ndata.features.textual = \"textual.bin\"\n",
            root.path().join("out").display()
        ),
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let out = run_experiment(&cfg).unwrap();
    assert!(out.test.num_users > 0);
    assert_eq!(out.longtail.len(), 5);
}
