use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ee_core::analysis::{self, DEFAULT_NULL_TRIALS, DEFAULT_PAIR_BUDGET, DEFAULT_WINDOW};
use ee_core::archive::Archive;
use ee_core::behavior::BehaviorImage;
use ee_core::embedding::{Embedder, RemoteConfig, RemoteEmbedder, ToyEmbedder};
use ee_core::engine::{load_config, Engine, Mode, RunConfig};
use ee_core::simulator::simulate;

const ANALYSIS_DIR: &str = "analysis";

#[derive(Parser)]
#[command(name = "ee", version, about = "Expedition & Expansion exploration of Flow Lenia")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run.
    Run {
        /// TOML run configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Override a config key, e.g. `--set alpha=4` or `--set cmaes.steps=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Continue a run from its last checkpoint.
    Resume {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write diversity.csv and genealogy.json under <out>/analysis.
    Analyze {
        #[arg(long)]
        out: PathBuf,
        /// Embedding space for diversity: the run's own backend (default),
        /// `toy`, `toy:SEED:DIM`, or a model served at EE_EMBED_URL.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, default_value_t = DEFAULT_PAIR_BUDGET)]
        pair_budget: usize,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_NULL_TRIALS)]
        null_trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export archive data for external tools.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        what: ExportKind,
    },
    /// Re-simulate one archived solution and write its behavior image.
    Render {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        id: usize,
        /// Output PNG; defaults to <out>/renders/<id>.png.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Also dump the final state as raw float32 next to the image.
        #[arg(long)]
        raw: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Embeddings,
    Genealogy,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out, mode, overrides } => {
            let mut overrides = overrides;
            if let Some(mode) = mode {
                overrides.push(format!("mode=\"{}\"", mode.as_str()));
            }
            let config = match config {
                Some(path) => RunConfig::load(&path, &overrides)?,
                None => RunConfig::default().with_overrides(&overrides)?,
            };
            let mut engine = Engine::create(config, &out)?;
            let summary = engine.run()?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Resume { out } => {
            let mut engine = Engine::resume(&out)?;
            if engine.is_finished() {
                log::info!("run in {} is already complete", out.display());
            }
            let summary = engine.run()?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Analyze { out, backend, pair_budget, window, null_trials, seed } => {
            analyze(&out, backend.as_deref(), pair_budget, window, null_trials, seed)?;
        }
        Command::Export { out, what } => {
            let (archive, _) = Archive::load(&out).context("loading archive")?;
            let dir = out.join(ANALYSIS_DIR);
            std::fs::create_dir_all(&dir)?;
            match what {
                ExportKind::Embeddings => {
                    let path = dir.join("embeddings.csv");
                    analysis::export_embeddings(&archive, &path)?;
                    println!("{}", path.display());
                }
                ExportKind::Genealogy => {
                    let config = load_config(&out)?;
                    let stats = analysis::genealogy_stats(
                        &archive,
                        config.seed_iterations,
                        DEFAULT_WINDOW,
                        DEFAULT_NULL_TRIALS,
                        config.seed,
                    )?;
                    let path = dir.join("genealogy.json");
                    analysis::export_genealogy(&archive, &stats, &path)?;
                    println!("{}", path.display());
                }
            }
        }
        Command::Render { out, id, file, raw } => {
            let config = load_config(&out)?;
            let (archive, _) = Archive::load(&out).context("loading archive")?;
            let Some(record) = archive.get(id) else {
                bail!("no record {id}; the archive has {} records", archive.len());
            };
            let rollout = simulate(&record.theta, &config.layout, &config.sim)?;
            let path = file.unwrap_or_else(|| out.join("renders").join(format!("{id:06}.png")));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            rollout.image.write_png(&path)?;
            if raw {
                rollout.final_state.write_raw(&path.with_extension("bin"))?;
            }
            if let Some(step) = rollout.truncated_at {
                log::warn!("rollout of record {id} truncated at step {step}");
            }
            println!("{}", path.display());
        }
    }
    Ok(())
}

/// Embedder for `--backend`.
fn backend_from_arg(arg: &str) -> Result<Arc<dyn Embedder>> {
    if arg == "toy" {
        return Ok(Arc::new(ToyEmbedder::default()));
    }
    if let Some(rest) = arg.strip_prefix("toy:") {
        let (seed, dim) = rest.split_once(':').context("expected toy:SEED:DIM")?;
        return Ok(Arc::new(ToyEmbedder::new(seed.parse()?, dim.parse()?)));
    }
    Ok(Arc::new(RemoteEmbedder::connect(RemoteConfig::from_env(arg))?))
}

fn analyze(out: &Path, backend: Option<&str>, pair_budget: usize, window: usize, trials: usize, seed: u64) -> Result<()> {
    let config = load_config(out)?;
    let (archive, _) = Archive::load(out).context("loading archive")?;
    let dir = out.join(ANALYSIS_DIR);
    std::fs::create_dir_all(&dir)?;

    let (backend_id, curve) = match backend {
        Some(name) if name != archive.backend_id() => {
            let embedder = backend_from_arg(name)?;
            let mut vectors = Vec::with_capacity(archive.len());
            for r in archive.records() {
                let image = BehaviorImage::read_png(&out.join(&r.behavior))
                    .with_context(|| format!("reading {}", r.behavior))?;
                vectors.push(embedder.embed_image(&image)?.vector().to_vec());
            }
            let every = config.checkpoint_every;
            let mut sizes: Vec<usize> = (1..).map(|c| c * every).take_while(|&m| m <= vectors.len()).collect();
            if sizes.last() != Some(&vectors.len()) {
                sizes.push(vectors.len());
            }
            let mut rows = Vec::new();
            for m in sizes.into_iter().filter(|&m| m >= 2) {
                let s = ee_core::rng::derive_seed(seed, &[m as u64]);
                rows.push((m, analysis::diversity(&vectors[..m], pair_budget, s)?));
            }
            (embedder.backend_id().to_string(), rows)
        }
        _ => (
            archive.backend_id().to_string(),
            analysis::diversity_curve(&archive, config.checkpoint_every, pair_budget, seed)?,
        ),
    };
    analysis::write_diversity_csv(&curve, &backend_id, &dir.join("diversity.csv"))?;

    let stats = analysis::genealogy_stats(&archive, config.seed_iterations, window, trials, seed)?;
    analysis::export_genealogy(&archive, &stats, &dir.join("genealogy.json"))?;

    if let Some((m, d)) = curve.last() {
        println!("diversity ({backend_id}, {m} records): {:.6}", d.value);
    }
    println!(
        "expedition progeny: {:.2}% strict, {:.2}% with the expeditions themselves; null model {:.2}% +/- {:.2}%",
        100.0 * stats.expedition_progeny_fraction,
        100.0 * stats.expedition_lineage_fraction,
        100.0 * stats.null_model.mean,
        100.0 * stats.null_model.std
    );
    if let Some(w) = &stats.window {
        println!("records within +/-{} iterations: {:.2}% +/- {:.2}%", w.window, 100.0 * w.mean, 100.0 * w.std);
    }
    Ok(())
}
