use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vsdnerf::i3ds::Method;
use vsdnerf::Result;
use vsdnerf_cli::config::{RunConfig, DATA_ROOT_ENV};
use vsdnerf_cli::{exit_code, pipeline};

#[derive(Parser)]
#[command(name = "vsdnerf", version, about = "Diffusion-guided super-resolution of voxel radiance fields")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set i3ds.vsd.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root directory for scenes, models, fields and runs.
    #[arg(long, env = DATA_ROOT_ENV, global = true)]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic evaluation scene and the pretraining corpus.
    Generate {
        #[arg(long)]
        force: bool,
    },
    /// Train the latent codec and the denoiser on the corpus.
    Pretrain,
    /// Fit the low-resolution field on the training views.
    FitLr,
    /// Run the upscale/sync rounds and write report.json.
    Superres {
        #[arg(long)]
        resume: bool,
        #[arg(long, conflicts_with = "resume")]
        force: bool,
    },
    /// Score finished runs and print a comparison table.
    Evaluate {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write comparison.csv and comparison.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several methods into `<data root>/compare/<method>` and tabulate them.
    Compare {
        /// Comma-separated methods; defaults to all four.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        resume: bool,
        #[arg(long, conflicts_with = "resume")]
        force: bool,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.common.overrides;
    if let Some(root) = &cli.common.data_root {
        overrides.insert(0, format!("paths.data_root={}", toml_string(&root.display().to_string())));
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Generate { force } => {
            let s = pipeline::generate(&cfg, force)?;
            println!("wrote {} files under {} scene directories", s.files, s.scenes.len());
        }
        Command::Pretrain => {
            let h = pipeline::pretrain(&cfg)?;
            println!("codec {}\ndenoiser {}", h.codec, h.denoiser);
        }
        Command::FitLr => {
            let p = pipeline::fit_lr(&cfg)?;
            println!("{}", p.display());
        }
        Command::Superres { resume, force } => {
            let r = pipeline::superres(&cfg, resume, force)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Evaluate { runs, out } => {
            let rows = pipeline::evaluate(&cfg, &runs)?;
            print!("{}", vsdnerf::metrics::comparison_text(&rows));
            if let Some(dir) = out {
                pipeline::write_tables(&dir, &rows)?;
            }
        }
        Command::Compare { methods, resume, force } => {
            let methods = if methods.is_empty() {
                Method::ALL.to_vec()
            } else {
                methods.iter().map(|m| Method::parse(m.trim())).collect::<Result<_>>()?
            };
            let base = cfg.paths().data_root.join("compare");
            let rows = pipeline::compare(&cfg, &methods, &base, resume, force)?;
            print!("{}", vsdnerf::metrics::comparison_text(&rows));
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
