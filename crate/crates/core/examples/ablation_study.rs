//! Compares EGRA with its ablations on synthetic data over several seeds.
//!
//! cargo run --release --example ablation_study -- [seeds] [key=value ...]

use egra_core::experiment::{run_experiment, ExperimentConfig};
use egra_core::synthetic::SyntheticConfig;

fn main() -> egra_core::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let overrides: Vec<(String, toml::Value)> = args
        .iter()
        .skip(1)
        .map(|a| {
            let (k, v) = a.split_once('=').expect("key=value");
            let v = v.parse::<toml::Value>().unwrap_or_else(|_| {
                toml::from_str::<toml::Table>(&format!("x = {v}"))
                    .map(|t| t["x"].clone())
                    .unwrap_or(toml::Value::String(v.into()))
            });
            (k.to_string(), v)
        })
        .collect();
    let tmp = std::env::temp_dir().join("egra-ablation-study");
    let variants = ["none", "ebg", "bda"];
    let mut sums = vec![(0.0, [0.0; 5]); variants.len()];
    for seed in 0..seeds {
        for (v, ablation) in variants.iter().enumerate() {
            let mut cfg = ExperimentConfig {
                seed,
                ablation: ablation.to_string(),
                out_dir: tmp.join(format!("s{seed}-{ablation}")),
                cache_dir: Some(tmp.join("cache")),
                ..Default::default()
            };
            cfg.data.synthetic = Some(SyntheticConfig { seed: 100 + seed, ..Default::default() });
            for (k, val) in &overrides {
                cfg = cfg.with_override(k, val)?;
            }
            let t = std::time::Instant::now();
            let out = run_experiment(&cfg)?;
            let groups: Vec<f64> = out.longtail.iter().map(|g| g.as_ref().map_or(0.0, |r| r.recall_at(20))).collect();
            println!(
                "seed {seed} {:<10} R@20 {:.4} valid {:.4} epoch {:>3} groups {:?} ({:.1}s)",
                out.label,
                out.test.recall_at(20),
                out.best_valid,
                out.best_epoch,
                groups.iter().map(|g| (g * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                t.elapsed().as_secs_f64()
            );
            sums[v].0 += out.test.recall_at(20);
            for g in 0..5 {
                sums[v].1[g] += groups[g];
            }
        }
    }
    for (v, ablation) in variants.iter().enumerate() {
        let n = seeds as f64;
        println!(
            "{ablation:<5} mean R@20 {:.4} groups {:?}",
            sums[v].0 / n,
            sums[v].1.iter().map(|g| (g / n * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    let _ = std::fs::remove_dir_all(&tmp);
    Ok(())
}
