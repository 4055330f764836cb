#![allow(dead_code)]

use egra_core::alignment::AlignmentSchedule;
use egra_core::dataset::{Interaction, InteractionDataset, Triple};
use egra_core::features::{ModalityFeatureSet, TEXTUAL, VISUAL};
use egra_core::knn_graph::topk_binary_graph;
use egra_core::model::{build_semantic_graphs, EgraModel, ModelState};
use egra_core::trainer::TrainConfig;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Tiny {
    pub ds: InteractionDataset,
    pub model: EgraModel,
    pub state: ModelState,
    pub triples: Vec<Triple>,
    pub config: TrainConfig,
}

/// A 6-user / 8-item instance with d = 4 and two 6-wide modalities.
pub fn tiny_instance(seed: u64) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (users, items) = (6, 8);
    let mut train = Vec::new();
    for u in 0..users {
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < 3 {
            let i = rng.random_range(0..items);
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        train.extend(picked.into_iter().map(|i| Interaction::new(u, i)));
    }
    let ds = InteractionDataset::from_splits(users, items, train, vec![], vec![]).unwrap();
    let mut features = ModalityFeatureSet::new();
    for name in [VISUAL, TEXTUAL] {
        let m = Array2::from_shape_simple_fn((items, 6), || rng.random_range(-1.0f32..1.0));
        features.insert(name, m, items).unwrap();
    }
    let pretrained = Array2::from_shape_simple_fn((items, 4), || rng.random_range(-1.0f32..1.0));
    let s_pt = topk_binary_graph(pretrained.view(), 2).unwrap();
    let semantic = build_semantic_graphs(&features, 3).unwrap();
    let config = TrainConfig {
        dim: 4,
        layers: 2,
        semantic_layers: 2,
        reg_weight: 0.01,
        schedule: AlignmentSchedule {
            lambda_min: 0.1,
            lambda_max: 0.5,
            warmup: 10,
            tau1: 1.0,
            tau2: 0.3,
            tau3: 0.4,
        },
        ..TrainConfig::default()
    };
    let model = EgraModel::new(&ds, &features, Some(&s_pt), &semantic, config.dims()).unwrap();
    let mut state = model.init_state(&mut rng);
    // larger attention/gate weights so every branch carries gradient
    state.attention.v_a.mapv_inplace(|v| v * 3.0);
    state.attention.b_a.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    for g in &mut state.gates {
        g.b_p.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    for p in &mut state.projectors {
        p.b1.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        p.b2.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    let triples: Vec<Triple> = ds
        .train
        .iter()
        .step_by(2)
        .map(|x| {
            let mut j = rng.random_range(0..items);
            while ds.train_items(x.user).contains(&j) {
                j = rng.random_range(0..items);
            }
            (x.user, x.item, j)
        })
        .collect();
    Tiny {
        ds,
        model,
        state,
        triples,
        config,
    }
}

/// Largest per-group relative error `|a - f| / max(|a|, |f|)` between the
/// analytic gradient and central differences, and the group name.
pub fn max_group_error<F>(state: &ModelState, analytic: &ModelState, eps: f64, loss: F) -> (f64, String)
where
    F: Fn(&ModelState) -> f64,
{
    let names: Vec<String> = state.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|t| t.to_vec()).collect();
    let mut worst = (0.0, String::new());
    for (g, name) in names.iter().enumerate() {
        let mut num = 0.0;
        let mut den_a = 0.0;
        let mut den_f = 0.0;
        for k in 0..grads[g].len() {
            let mut plus = state.clone();
            plus.tensors_mut()[g][k] += eps;
            let mut minus = state.clone();
            minus.tensors_mut()[g][k] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let a = grads[g][k];
            num += (a - fd) * (a - fd);
            den_a += a * a;
            den_f += fd * fd;
        }
        let scale = den_a.sqrt().max(den_f.sqrt());
        let err = if scale < 1e-12 { num.sqrt() } else { num.sqrt() / scale };
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    worst
}
