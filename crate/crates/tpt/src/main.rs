use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use tpt::autodiff::params::TapeParams;
use tpt::autodiff::tape::Tape;
use tpt::config::{parse_config_text, RunConfig};
use tpt::data::{write_manifest, write_split};
use tpt::error::{Error, Result};
use tpt::export::{write_attention_csv, write_attention_pgm};
use tpt::harness::{
    ablate, build_run, evaluate_checkpoint, gradcheck, load_checkpoint, train,
};
use tpt::metrics::append_history;
use tpt::model::PartGenerator;

#[derive(Parser)]
#[command(
    name = "tpt",
    about = "Temporal parsing transformer for action quality assessment on synthetic phase-structured videos"
)]
struct Cli {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic splits (train/val/test) plus CSV manifests.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, tracking the best validation checkpoint.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Append the report to this run-history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train + test-evaluate named variants under one seed; emit a CSV table.
    Ablate {
        /// Comma-separated variant names (e.g. tpt,baseline,tpt-no-rank).
        #[arg(long)]
        variants: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every parameter's gradient against central differences.
    Gradcheck,
    /// Dump per-layer cross-attention maps (CSV + PGM) for a few videos.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// How many videos from the head of the split.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>, sets: &[String]) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => parse_config_text(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    for assignment in sets {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got {assignment:?}"))
        })?;
        config.apply(key.trim(), value.trim())?;
    }
    config.validate()?;
    Ok(config)
}

/// Default run directory: runs/<hash prefix>-<unix seconds>.
fn default_out(config: &RunConfig) -> PathBuf {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{}-{stamp}", &config.hash()[..8]))
}

fn cmd_gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let run = build_run(config)?;
    for (name, videos) in [
        ("train", &run.dataset.train),
        ("val", &run.dataset.val),
        ("test", &run.dataset.test),
    ] {
        write_split(&out.join(format!("{name}.split")), &config.data, videos)?;
        write_manifest(&out.join(format!("{name}.csv")), videos)?;
        println!("{name}: {} videos", videos.len());
    }
    std::fs::write(
        out.join("config.txt"),
        format!("# config hash: {}\n{}", config.hash(), config.serialize()),
    )?;
    println!("wrote splits to {}", out.display());
    Ok(())
}

fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    let (_, outcome) = train(config, out)?;
    println!(
        "best validation spearman {:.4} at epoch {} (init {:.4})",
        outcome.best_spearman, outcome.best_epoch, outcome.init_val_spearman
    );
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn cmd_eval(
    config: &RunConfig,
    checkpoint: &Path,
    split: &str,
    history: &Option<PathBuf>,
) -> Result<()> {
    let (report, _) = evaluate_checkpoint(config, checkpoint, split)?;
    println!("{}", report.to_json());
    if let Some(path) = history {
        append_history(path, split, &report)?;
    }
    Ok(())
}

fn cmd_ablate(config: &RunConfig, variants: &str, out: &Path) -> Result<()> {
    let names: Vec<String> = variants
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let results = ablate(config, &names, out)?;
    for (name, report) in &results {
        println!(
            "{name}: spearman {:.4}, R-l2 {:.4}",
            report.spearman, report.relative_l2_x100
        );
    }
    println!("table: {}", out.join("ablation.csv").display());
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig) -> Result<()> {
    let report = gradcheck(config)?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_error
        )))
    }
}

fn cmd_export_attention(
    config: &RunConfig,
    checkpoint: &Path,
    split: &str,
    count: usize,
    out: &Path,
) -> Result<()> {
    if config.part_generator != PartGenerator::Tpt {
        return Err(Error::Config(
            "attention export requires model.part_generator = tpt".into(),
        ));
    }
    let mut run = build_run(config)?;
    run.intervals = load_checkpoint(checkpoint, &mut run.store, &config.hash())?;
    let videos = match split {
        "train" => &run.dataset.train,
        "val" => &run.dataset.val,
        "test" => &run.dataset.test,
        other => {
            return Err(Error::Config(format!(
                "unknown split {other:?} (expected train | val | test)"
            )))
        }
    };
    std::fs::create_dir_all(out)?;
    let mut written = 0;
    for video in videos.iter().take(count) {
        let mut tape = Tape::new();
        let mut lease = TapeParams::new();
        let forward = run
            .model
            .video_forward(&mut tape, &mut lease, &run.store, &video.clips)?;
        for (layer, &map) in forward.attention.iter().enumerate() {
            let tensor = tape.value(map);
            let stem = format!("video{}-layer{}", video.id, layer);
            write_attention_csv(&out.join(format!("{stem}.csv")), tensor)?;
            write_attention_pgm(&out.join(format!("{stem}.pgm")), tensor)?;
            written += 2;
        }
    }
    println!("wrote {written} files to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.config, &cli.sets)?;
    match &cli.command {
        Command::GenData { out } => {
            let out = out.clone().unwrap_or_else(|| default_out(&config));
            cmd_gen_data(&config, &out)
        }
        Command::Train { out } => {
            let out = out.clone().unwrap_or_else(|| default_out(&config));
            cmd_train(&config, &out)
        }
        Command::Eval {
            checkpoint,
            split,
            history,
        } => cmd_eval(&config, checkpoint, split, history),
        Command::Ablate { variants, out } => {
            let out = out.clone().unwrap_or_else(|| default_out(&config));
            cmd_ablate(&config, variants, &out)
        }
        Command::Gradcheck => cmd_gradcheck(&config),
        Command::ExportAttention {
            checkpoint,
            split,
            count,
            out,
        } => {
            let out = out.clone().unwrap_or_else(|| default_out(&config));
            cmd_export_attention(&config, checkpoint, split, *count, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
