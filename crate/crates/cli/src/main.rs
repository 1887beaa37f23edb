use anyhow::{Context, Result};
use bst_cli::config::{load_run_config, parse_list};
use bst_cli::{bench, gridcmd, memreport, overhead, traincmd};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

/// Block-sparse activation training toolkit.
#[derive(Parser)]
#[command(name = "bst", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the BSR encoding-overhead table for a (sparsity, block) grid.
    OverheadTable {
        #[arg(long, default_value_t = overhead::DEFAULT_ROWS)]
        rows: usize,
        #[arg(long, default_value_t = overhead::DEFAULT_COLS)]
        cols: usize,
        /// Comma-separated block sizes.
        #[arg(long, default_value = "1,4,8,16,32,64,128,384")]
        blocks: String,
        /// Comma-separated sparsities in percent.
        #[arg(long, default_value = "0,20,40,60,80,100")]
        sparsities: String,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the block-sparse kernel against the dense baseline.
    Bench {
        /// Activation shape B,P,D.
        #[arg(long, default_value = "64,196,384")]
        shape: String,
        #[arg(long, default_value = "4,16,64")]
        blocks: String,
        /// Comma-separated sparsity fractions.
        #[arg(long, default_value = "0.1,0.5,0.9")]
        sparsities: String,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration and write loss/metrics/memory/checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dense baseline plus a (sparsity, block) accuracy sweep.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated sparsity fractions.
        #[arg(long, default_value = "0.3,0.5,0.7")]
        sparsities: String,
        #[arg(long, default_value = "4,8,16")]
        blocks: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Component breakdown and savings model without training.
    MemoryReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Emit JSON instead of text.
        #[arg(long, default_value_t = false)]
        json: bool,
    },
}

fn emit(text: String, out: Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::OverheadTable {
            rows,
            cols,
            blocks,
            sparsities,
            out,
        } => {
            let blocks: Vec<usize> = parse_list(&blocks)?;
            let sparsities: Vec<f64> = parse_list(&sparsities)?;
            emit(overhead::render_csv(rows, cols, &blocks, &sparsities), out)
        }
        Command::Bench {
            shape,
            blocks,
            sparsities,
            reps,
            seed,
            out,
        } => {
            let dims: Vec<usize> = parse_list(&shape)?;
            let [b, p, d] = dims[..] else {
                anyhow::bail!("--shape expects B,P,D");
            };
            let blocks: Vec<usize> = parse_list(&blocks)?;
            let sparsities: Vec<f64> = parse_list(&sparsities)?;
            let rows = bench::run_bench((b, p, d), &blocks, &sparsities, reps, seed)?;
            let meta = format!(
                "bst bench shape={b},{p},{d} reps={reps} seed={seed} (timing columns vary per host)"
            );
            emit(bench::render_csv(&rows, &meta), out)
        }
        Command::Train { config, seed, out } => {
            let cfg = load_run_config(&config)?;
            let metrics = traincmd::run(&cfg, seed, &out)?;
            println!(
                "train done: steps={} final_loss={} train_acc={:.4} test_acc={:.4} -> {}",
                metrics.steps,
                metrics.final_loss,
                metrics.train_accuracy,
                metrics.test_accuracy,
                out.display()
            );
            Ok(())
        }
        Command::Grid {
            config,
            sparsities,
            blocks,
            seed,
            out,
        } => {
            let cfg = load_run_config(&config)?;
            let sparsities: Vec<f64> = parse_list(&sparsities)?;
            let blocks: Vec<usize> = parse_list(&blocks)?;
            let result = gridcmd::run_grid(&cfg, &sparsities, &blocks, seed)?;
            let meta = format!("bst grid seed={seed} config={}", cfg.echo());
            gridcmd::write_outputs(&result, &sparsities, &blocks, &meta, &out)?;
            println!(
                "grid done: baseline_test_acc={:.4}, {} cells -> {}",
                result.baseline_test_accuracy,
                result.cells.len(),
                out.display()
            );
            Ok(())
        }
        Command::MemoryReport {
            config,
            batch_size,
            json,
        } => {
            let cfg = load_run_config(&config)?;
            let report = memreport::build_report(&cfg, batch_size)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", memreport::render_text(&report));
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::init();
    // BST_THREADS is the only environment knob: worker count for the
    // deterministic output-partitioned kernels.
    if let Ok(threads) = std::env::var("BST_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let command = std::env::args().nth(1).unwrap_or_default();
    if let Err(err) = run(cli) {
        let payload = serde_json::json!({
            "error": format!("{err:#}"),
            "command": command,
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
