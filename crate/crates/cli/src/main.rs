use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dymesh_cli::{commands, CliError, Globals, RunConfig};

/// Text-driven animation of triangle meshes.
#[derive(Parser, Debug)]
#[command(name = "dymesh", version, about)]
struct Cli {
    /// JSON run configuration; unspecified fields take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker-thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge, slice, normalize and filter source animations into a corpus.
    DatasetBuild {
        /// Directory of `.dmb` files and `*.synth.json` generator specs.
        #[arg(long)]
        src: PathBuf,
        /// Window length; overrides `dataset.window` from the config.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Train the trajectory VAE.
    TrainVae {
        #[arg(long)]
        corpus: PathBuf,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Latent statistics of a corpus under a trained VAE.
    ComputeStats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vae: PathBuf,
    },
    /// Train the text-conditioned flow model.
    TrainFlow {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Animate a static mesh from a text prompt.
    Animate {
        /// `.dmb` or `.obj`; only frame 0 is used.
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        flow: PathBuf,
    },
    /// Convert precomputed text embeddings (JSON) into an archive.
    EmbedImport {
        #[arg(long)]
        input: PathBuf,
    },
    /// Reconstruction error across token sampling ratios.
    EvalSweep {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vae: PathBuf,
    },
    /// Train and evaluate the component ablation configurations.
    Ablation {
        #[arg(long)]
        corpus: PathBuf,
        /// Restrict to these configurations (comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Command::DatasetBuild {
        window: Some(w), ..
    } = cli.command
    {
        config.dataset.window = w;
    }
    let g = Globals {
        config,
        seed: cli.seed,
        threads: cli.threads,
        out: cli.out,
    };
    match &cli.command {
        Command::DatasetBuild { src, .. } => println!("{}", commands::dataset_build(&g, src)?),
        Command::TrainVae { corpus, resume } => {
            println!("{}", commands::train_vae(&g, corpus, *resume)?)
        }
        Command::ComputeStats { corpus, vae } => {
            let stats = commands::compute_stats(&g, corpus, vae)?;
            println!(
                "stats: {} shape channels, {} latent channels",
                stats.mu0.len(),
                stats.mu_t.len()
            );
        }
        Command::TrainFlow {
            corpus,
            vae,
            stats,
            resume,
        } => {
            println!("{}", commands::train_flow(&g, corpus, vae, stats, *resume)?)
        }
        Command::Animate {
            mesh,
            prompt,
            vae,
            flow,
        } => println!("{}", commands::animate(&g, mesh, prompt, vae, flow)?),
        Command::EmbedImport { input } => {
            println!("archive: {}", commands::embed_import(&g, input)?.display())
        }
        Command::EvalSweep { corpus, vae } => {
            let table = commands::eval_sweep(&g, corpus, vae)?;
            print!("{}", table.to_csv());
            let bad = table.non_monotone_meshes();
            if !bad.is_empty() {
                eprintln!(
                    "error rises with the sampling ratio for: {}",
                    bad.join(", ")
                );
            }
        }
        Command::Ablation { corpus, only } => {
            for e in commands::ablation(&g, corpus, only)? {
                println!(
                    "{:<12} frame_avg_l2 {:.6}  l2_sum {:.3}",
                    e.name, e.report.error.frame_avg_l2, e.report.error.l2_sum
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DYMESH_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {:#}", anyhow::Error::new(e));
            ExitCode::from(code as u8)
        }
    }
}
