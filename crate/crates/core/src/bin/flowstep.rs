//! Command-line front end: data generation, training, inference, evaluation
//! and gradient checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowstep::checks;
use flowstep::synthetic::{self, SceneRecipe};
use flowstep::train::{self, Checkpoint, LossMode, TrainConfig};
use flowstep::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "flowstep", version, about = "Iterative scene flow for 3D point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a recipe file.
    GenData {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a model and write its checkpoint (rewritten every epoch).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the flow of one scene and write the final iterate.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// `<dir>/<id>`, naming `<dir>/<id>_src.txt` and `<dir>/<id>_tgt.txt`.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print `epe,acc3ds,acc3dr,outliers` for a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iters: usize,
    },
    /// Finite-difference checks of every layer, loss and the whole model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn require_iterations(iters: usize) -> Result<()> {
    if iters == 0 {
        return Err(Error::InvalidArgument("--iters must be at least 1".into()));
    }
    Ok(())
}

fn split_scene(path: &Path) -> Result<(PathBuf, String)> {
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .filter(|n| !n.is_empty())
        .ok_or_else(|| Error::InvalidArgument(format!("--scene '{}' must be <dir>/<id>", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, id.to_string()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { recipe, out, count } => {
            if count == 0 {
                return Err(Error::InvalidArgument("--count must be at least 1".into()));
            }
            let recipe = SceneRecipe::load(&recipe)?;
            let scenes = synthetic::generate_set(&recipe, count)?;
            synthetic::save_dataset(&scenes, &out)?;
            log::info!("wrote {count} scenes to {}", out.display());
        }
        Command::Train { config, data, out } => {
            let config = TrainConfig::load(&config)?;
            config.validate()?;
            let scenes = synthetic::load_dataset(&data, config.loss_mode == LossMode::Full)?;
            let report = train::train(&config, &scenes, Some(&out))?;
            if let Some(last) = report.steps.last() {
                log::info!("finished after {} steps, last loss {:.6}", report.steps.len(), last.loss);
            }
        }
        Command::Infer { ckpt, scene, iters, out } => {
            require_iterations(iters)?;
            let (dir, id) = split_scene(&scene)?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let pair = synthetic::load_scene_parts(&dir, &id, false)?;
            let flows = train::infer(&checkpoint.params, &pair, iters)?;
            synthetic::write_points(&out, flows.last().vectors())?;
        }
        Command::Eval { ckpt, data, iters } => {
            require_iterations(iters)?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let scenes = synthetic::load_dataset(&data, true)?;
            println!("{}", train::evaluate_dataset(&checkpoint.params, &scenes, iters)?);
        }
        Command::Gradcheck { seed } => {
            let mut failed = 0;
            let mut reports = checks::layer_checks(seed)?;
            reports.push(("model".to_string(), checks::model_check(seed)?));
            for (name, report) in &reports {
                println!("{name}: {report}");
                if !report.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::InvalidArgument(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
