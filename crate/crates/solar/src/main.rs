use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use solar::evaluation::render_table;
use solar::pipeline::{
    embed_corpus, evaluate, gradcheck_suite, load_checkpoint, load_config, mine_index,
    render_loss_svg, save_embeddings, synth_benchmark, train_stage1, train_stage2, RunConfig,
};
use solar::providers::{load_fixture, save_fixture, synth_generate, Dataset};
use solar::{Result, SolarError};

#[derive(Parser)]
#[command(name = "solar", about = "two-stage self-supervised multimodal retrieval")]
struct Cli {
    /// JSON run configuration; defaults apply when absent
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override a config field, e.g. --set stage1.lr=0.005
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// generate a synthetic dataset fixture
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// run stage-1 training (masked alignment)
    TrainStage1 {
        /// fixture directory; synthesized from config when absent
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// run stage-2 training (group contrastive) from a stage-1 checkpoint
    TrainStage2 {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// mined-negative index JSONL; mined fresh when absent
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// build the offline hard-negative index
    Mine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// embed a corpus with a checkpoint
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// evaluate a checkpoint on a synthesized benchmark
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// render the metrics table and loss-curve SVGs for a finished run
    Report {
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// run the finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
}

fn dataset_from(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<Dataset> {
    match data {
        Some(dir) => load_fixture(dir),
        None => synth_generate(&cfg.synth, cfg.dataset_size),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.set)?;
    match cli.cmd {
        Cmd::Synth { out, count } => {
            let ds = synth_generate(&cfg.synth, count.unwrap_or(cfg.dataset_size))?;
            save_fixture(&ds, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Cmd::TrainStage1 { data } => {
            let ds = dataset_from(&cfg, &data)?;
            let outcome = train_stage1(&cfg, &ds, &cfg.out_dir)?;
            println!("stage 1 checkpoint: {}", outcome.checkpoint_dir.display());
        }
        Cmd::TrainStage2 { stage1, data, index } => {
            let ds = dataset_from(&cfg, &data)?;
            let s1_dir = stage1.unwrap_or_else(|| cfg.out_dir.join("stage1"));
            let (s1_model, _, _) = load_checkpoint(&s1_dir)?;
            let idx = match index {
                Some(p) => solar::mining::HardNegativeIndex::load_jsonl(&p)?,
                None => {
                    let idx = mine_index(&s1_model, &ds, cfg.mining.k)?;
                    idx.save_jsonl(&cfg.out_dir.join("mined.jsonl"))?;
                    idx
                }
            };
            let outcome = train_stage2(&cfg, &ds, &s1_model, &idx, &cfg.out_dir)?;
            println!("stage 2 checkpoint: {}", outcome.checkpoint_dir.display());
        }
        Cmd::Mine { ckpt, data, out } => {
            let ds = dataset_from(&cfg, &data)?;
            let (model, _, _) = load_checkpoint(&ckpt)?;
            let idx = mine_index(&model, &ds, cfg.mining.k)?;
            let path = out.unwrap_or_else(|| cfg.out_dir.join("mined.jsonl"));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            idx.save_jsonl(&path)?;
            println!("mined index: {}", path.display());
        }
        Cmd::Embed { ckpt, data, out } => {
            let ds = dataset_from(&cfg, &data)?;
            let (model, _, _) = load_checkpoint(&ckpt)?;
            let (ids, table) = embed_corpus(&model, &ds)?;
            save_embeddings(&ids, &table, &out)?;
            println!("embedded {} samples into {}", ids.len(), out.display());
        }
        Cmd::Eval { ckpt } => {
            let (model, _, _) = load_checkpoint(&ckpt)?;
            let bench = synth_benchmark(
                &cfg.synth,
                cfg.eval.triplets,
                cfg.eval.distractors,
                cfg.seed ^ 0xbe9c,
            )?;
            let report = evaluate(&model, &bench, &cfg.eval, cfg.seed)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(
                cfg.out_dir.join("metrics.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            print!("{}", render_table(&report));
        }
        Cmd::Report { run } => {
            let dir = run.unwrap_or_else(|| cfg.out_dir.clone());
            let metrics = dir.join("metrics.json");
            if metrics.exists() {
                let report = serde_json::from_str(&std::fs::read_to_string(&metrics)?)?;
                print!("{}", render_table(&report));
            }
            for (log, field) in [("stage1_log.jsonl", "total"), ("stage2_log.jsonl", "loss")] {
                let path = dir.join(log);
                if path.exists() {
                    let svg = dir.join(log.replace("_log.jsonl", "_loss.svg"));
                    render_loss_svg(&path, field, &svg)?;
                    println!("wrote {}", svg.display());
                }
            }
        }
        Cmd::Gradcheck { instances } => {
            let worst = gradcheck_suite(instances, cfg.seed)?;
            println!("worst relative error: {worst:.3e}");
            if worst >= 1e-4 {
                return Err(SolarError::NonFinite(format!(
                    "gradient check failed: {worst:.3e} >= 1e-4"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SolarError::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
