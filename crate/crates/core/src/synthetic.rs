//! Synthetic interaction data with planted block structure, long-tailed item
//! popularity and block-correlated modality features.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::dataset::{split_8_1_1, Interaction, InteractionDataset};
use crate::error::{EgraError, Result};
use crate::features::{save_matrix, ModalityFeatureSet, TEXTUAL, VISUAL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_blocks: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that an interaction stays inside the user's block.
    pub in_block: f64,
    /// Zipf exponent of item popularity.
    pub popularity_exponent: f64,
    pub visual_dim: usize,
    pub textual_dim: usize,
    /// Standard deviation of per-item feature noise.
    pub feature_noise: f64,
    /// Dimension of the within-block taste factors.
    pub taste_dim: usize,
    /// Scale of the user-item taste affinity inside a block; 0 leaves only
    /// popularity.
    pub taste_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 300,
            num_items: 150,
            num_blocks: 5,
            min_interactions: 10,
            max_interactions: 30,
            in_block: 0.85,
            popularity_exponent: 1.0,
            visual_dim: 64,
            textual_dim: 32,
            feature_noise: 1.0,
            taste_dim: 8,
            taste_strength: 2.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Split 8:1:1 with the generator seed.
    pub dataset: InteractionDataset,
    pub features: ModalityFeatureSet,
    pub item_block: Vec<usize>,
    pub user_block: Vec<usize>,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.num_blocks == 0 || cfg.num_items < cfg.num_blocks || cfg.num_users == 0 {
        return Err(EgraError::Argument("synthetic config needs users, items and blocks".into()));
    }
    if cfg.min_interactions == 0
        || cfg.min_interactions > cfg.max_interactions
        || cfg.max_interactions >= cfg.num_items
    {
        return Err(EgraError::Argument("bad interaction count range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let item_block: Vec<usize> = (0..cfg.num_items).map(|i| i % cfg.num_blocks).collect();
    let mut ranks: Vec<usize> = (0..cfg.num_items).collect();
    ranks.shuffle(&mut rng);
    let popularity: Vec<f64> = ranks
        .iter()
        .map(|&r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_exponent))
        .collect();
    let by_block: Vec<Vec<usize>> = (0..cfg.num_blocks)
        .map(|b| (0..cfg.num_items).filter(|&i| item_block[i] == b).collect())
        .collect();
    let global = WeightedIndex::new(&popularity).unwrap();

    let unit = Normal::new(0.0, 1.0).unwrap();
    let q = cfg.taste_dim.max(1);
    let item_taste = Array2::from_shape_simple_fn((cfg.num_items, q), || unit.sample(&mut rng));
    let user_block: Vec<usize> = (0..cfg.num_users)
        .map(|_| rng.random_range(0..cfg.num_blocks))
        .collect();
    let mut interactions = Vec::new();
    for (u, &b) in user_block.iter().enumerate() {
        let taste: Vec<f64> = (0..q).map(|_| unit.sample(&mut rng) / (q as f64).sqrt()).collect();
        let in_block = WeightedIndex::new(by_block[b].iter().map(|&i| {
            let affinity: f64 = (0..q).map(|k| taste[k] * item_taste[[i, k]]).sum();
            popularity[i] * (cfg.taste_strength * affinity).exp()
        }))
        .unwrap();
        let target = rng.random_range(cfg.min_interactions..=cfg.max_interactions);
        let mut items: Vec<usize> = Vec::with_capacity(target);
        let mut attempts = 0;
        while items.len() < target && attempts < 100 * target {
            attempts += 1;
            let i = if rng.random_bool(cfg.in_block) {
                by_block[b][in_block.sample(&mut rng)]
            } else {
                global.sample(&mut rng)
            };
            if !items.contains(&i) {
                items.push(i);
            }
        }
        interactions.extend(items.into_iter().map(|i| Interaction::new(u, i)));
    }
    let unsplit = InteractionDataset::from_splits(
        cfg.num_users,
        cfg.num_items,
        interactions,
        Vec::new(),
        Vec::new(),
    )?;
    let dataset = split_8_1_1(&unsplit, cfg.seed)?;

    // features: block centroid plus a random linear view of the taste factors
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).unwrap();
    let mut features = ModalityFeatureSet::new();
    for (name, dim) in [(VISUAL, cfg.visual_dim), (TEXTUAL, cfg.textual_dim)] {
        let centroids = Array2::from_shape_simple_fn((cfg.num_blocks, dim), || unit.sample(&mut rng));
        let view = Array2::from_shape_simple_fn((q, dim), || unit.sample(&mut rng) / (q as f64).sqrt());
        let taste_part = item_taste.dot(&view);
        let m = Array2::from_shape_fn((cfg.num_items, dim), |(i, k)| {
            (centroids[[item_block[i], k]] + taste_part[[i, k]] + noise.sample(&mut rng)) as f32
        });
        features.insert(name, m, cfg.num_items)?;
    }
    Ok(SyntheticData {
        dataset,
        features,
        item_block,
        user_block,
    })
}

impl SyntheticData {
    /// Writes `interactions.txt` (all splits, `user item` per line) and one
    /// `<modality>.bin` feature file per modality into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| EgraError::io(dir, e))?;
        let path = dir.join("interactions.txt");
        let file = File::create(&path).map_err(|e| EgraError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let ds = &self.dataset;
        let mut all: Vec<_> = ds.train.iter().chain(&ds.valid).chain(&ds.test).collect();
        all.sort();
        for x in all {
            writeln!(w, "u{} i{}", x.user, x.item).map_err(|e| EgraError::io(&path, e))?;
        }
        w.flush().map_err(|e| EgraError::io(&path, e))?;
        for (name, m) in self.features.iter() {
            save_matrix(&dir.join(format!("{name}.bin")), m)?;
        }
        Ok(())
    }
}
