use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use egra_core::evaluator::{report_table, DEFAULT_KS};
use egra_core::experiment::{
    evaluate_checkpoint, longtail_table, prepare, pretrained_embeddings, run_experiment, run_grid,
    ExperimentConfig, StageCache,
};
use egra_core::features::{load_matrix, save_matrix};
use egra_core::knn_graph::{topk_binary_graph, topk_weighted_graph};
use egra_core::synthetic::generate;
use egra_core::{EgraError, Result};

#[derive(Parser, Debug)]
#[command(name = "egra", version, about = "Enhanced-graph multimodal recommendation experiments")]
struct Cli {
    /// Experiment config (TOML with dotted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    ablation: Option<AblationArg>,
    /// External pretrained item embeddings (feature-file format).
    #[arg(long, global = true)]
    pretrained_embeddings: Option<PathBuf>,
    /// Output directory (output file for `build-graph`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AblationArg {
    Ebg,
    Bda,
    En,
    Ep,
    None,
}

impl AblationArg {
    fn as_str(self) -> &'static str {
        match self {
            AblationArg::Ebg => "ebg",
            AblationArg::Bda => "bda",
            AblationArg::En => "en",
            AblationArg::Ep => "ep",
            AblationArg::None => "none",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the interactions 8:1:1 (or materialize the synthetic dataset)
    /// and write the split manifest.
    PrepareData,
    /// Train the backbone and export its item embeddings.
    Pretrain,
    /// Build a Top-K item graph from an embedding or feature matrix.
    BuildGraph {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        topk: usize,
        /// Keep cosine weights instead of binary edges.
        #[arg(long)]
        weighted: bool,
    },
    /// Run the full pipeline and write reports and a checkpoint.
    Train,
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        /// Defaults to `<out>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every combination of the config's `grid` table.
    Grid,
    /// Per-popularity-group evaluation of a checkpoint.
    Longtail {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(a) = cli.ablation {
        cfg.ablation = a.as_str().to_string();
    }
    if let Some(p) = &cli.pretrained_embeddings {
        cfg.data.pretrained_embeddings = Some(p.clone());
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EgraError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::BuildGraph {
            embeddings,
            topk,
            weighted,
        } => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| EgraError::Argument("build-graph needs --out <file>".into()))?;
            let e = load_matrix(embeddings)?;
            let g = if *weighted {
                topk_weighted_graph(e.view(), *topk)?
            } else {
                topk_binary_graph(e.view(), *topk)?
            };
            g.save(&out)?;
            println!("{} items, {} edges -> {}", g.shape().0, g.nnz(), out.display());
        }
        Command::PrepareData => {
            let cfg = load_config(&cli)?;
            create_dir(&cfg.out_dir)?;
            let ds = match &cfg.data.synthetic {
                Some(syn) => {
                    let data = generate(syn)?;
                    data.write_to_dir(&cfg.out_dir)?;
                    data.dataset
                }
                None => prepare(&cfg, &mut StageCache::open(&cfg.cache_dir())?)?.dataset,
            };
            let manifest = cfg.out_dir.join("split.txt");
            ds.write_split_manifest(&manifest)?;
            println!(
                "{} users, {} items, train/valid/test = {}/{}/{} -> {}",
                ds.num_users,
                ds.num_items,
                ds.train.len(),
                ds.valid.len(),
                ds.test.len(),
                manifest.display()
            );
        }
        Command::Pretrain => {
            let cfg = load_config(&cli)?;
            let mut cache = StageCache::open(&cfg.cache_dir())?;
            let prep = prepare(&cfg, &mut cache)?;
            let (e, _) = pretrained_embeddings(&cfg, &prep, &mut cache)?;
            create_dir(&cfg.out_dir)?;
            let path = cfg.out_dir.join("pretrained.bin");
            save_matrix(&path, &e)?;
            println!("{} x {} item embeddings -> {}", e.nrows(), e.ncols(), path.display());
        }
        Command::Train => {
            let cfg = load_config(&cli)?;
            let outcome = run_experiment(&cfg)?;
            info!("best epoch {} (valid R@20 {:.4})", outcome.best_epoch, outcome.best_valid);
            print!("{}", report_table(&[(outcome.label, outcome.test)], &DEFAULT_KS));
            print!("{}", longtail_table(&outcome.longtail));
        }
        Command::Evaluate { checkpoint } => {
            let cfg = load_config(&cli)?;
            let dir = checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint"));
            let (test, _) = evaluate_checkpoint(&cfg, &dir)?;
            print!("{}", test.to_kv("test"));
        }
        Command::Longtail { checkpoint } => {
            let cfg = load_config(&cli)?;
            let dir = checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint"));
            let (_, groups) = evaluate_checkpoint(&cfg, &dir)?;
            print!("{}", longtail_table(&groups));
        }
        Command::Grid => {
            let cfg = load_config(&cli)?;
            let grid = run_grid(&cfg)?;
            print!("{}", grid.summary);
            println!();
            print!("{}", grid.sensitivity);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
