//! The exploration loop: seeding, novelty-driven expansions and
//! goal-directed expeditions, plus the baselines under the same bookkeeping.
//!
//! Iteration `i` (1-based) adds exactly one archive record:
//! - `i <= S`, or every iteration in `random_params` mode: random parameters;
//! - `ee` mode, `(i - S) % K == 0`: an expedition;
//! - otherwise: an expansion (mutate a parent drawn with `p ~ NOV^alpha`,
//!   `alpha = 0` in `random_ga` mode).
//!
//! All randomness is derived from `(seed, purpose, i)`, so a run resumed from
//! a checkpoint reproduces the uninterrupted archive exactly.

mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    interpolate_env, Backend, CmaConfig, EmbeddingConfig, GoalClientKind, GoalConfig, Mode, RunConfig,
};

use crate::archive::{write_json_atomic, Archive, ArchiveError, NewRecord, Origin, BEHAVIOR_DIR};
use crate::behavior::{BehaviorImage, ImageError};
use crate::cmaes::{self, CmaError};
use crate::embedding::{
    CachedEmbedder, EmbedError, Embedder, Embedding, EmbeddingCache, RemoteEmbedder, ToyEmbedder,
};
use crate::genome::{Genome, GenomeError, GenomeLayout};
use crate::goals::{
    build_prompt, generate_goal, GoalClient, GoalError, GoalLog, GoalSource, ScriptedGoals, VlmClient,
    GOALS_FILE,
};
use crate::rng::{derive_seed, stream};
use crate::simulator::{simulate, SimConfig, SimError};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const CACHE_FILE: &str = "embedding_cache.jsonl";
pub const EXPEDITION_DIR: &str = "expeditions";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("run directory: {0}")]
    RunDir(String),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Goal(#[from] GoalError),
    #[error(transparent)]
    Cma(#[from] CmaError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What iteration `i` does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepKind {
    Seed,
    Expansion { alpha: f64 },
    Expedition,
}

pub fn step_kind(config: &RunConfig, i: usize) -> StepKind {
    if config.mode == Mode::RandomParams || i <= config.seed_iterations {
        return StepKind::Seed;
    }
    match config.mode {
        Mode::Ee if (i - config.seed_iterations).is_multiple_of(config.expedition_period) => StepKind::Expedition,
        Mode::RandomGa => StepKind::Expansion { alpha: 0.0 },
        _ => StepKind::Expansion { alpha: config.alpha },
    }
}

/// Simulates and embeds parameter vectors.
#[derive(Clone)]
pub struct Evaluator {
    pub layout: GenomeLayout,
    pub sim: SimConfig,
    pub embedder: Arc<dyn Embedder>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub image: BehaviorImage,
    pub embedding: Embedding,
    pub truncated_at: Option<usize>,
}

impl Evaluator {
    pub fn evaluate(&self, theta: &Genome) -> Result<Evaluation, EngineError> {
        let rollout = simulate(theta, &self.layout, &self.sim)?;
        let embedding = self.embedder.embed_image(&rollout.image)?;
        Ok(Evaluation { image: rollout.image, embedding, truncated_at: rollout.truncated_at })
    }

    pub fn image(&self, theta: &Genome) -> Result<BehaviorImage, EngineError> {
        Ok(simulate(theta, &self.layout, &self.sim)?.image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub completed_iterations: usize,
    pub goal_cursor: usize,
    pub fallback_cursor: usize,
    pub next_seed_goal: usize,
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub iteration: usize,
    pub id: usize,
    pub origin: Origin,
    pub parent_id: Option<usize>,
    pub goal_id: Option<usize>,
    pub seconds: f64,
    pub truncated_at: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub expedition: Option<ExpeditionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpeditionSummary {
    pub goal: String,
    pub source: GoalSource,
    pub start_id: usize,
    pub initial_fitness: f64,
    pub best_fitness: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub completed_iterations: usize,
    pub records: usize,
    pub seeds: usize,
    pub expansions: usize,
    pub expeditions: usize,
    pub goals: usize,
}

/// Embedding backend named by the config.
pub fn build_embedder(config: &EmbeddingConfig) -> Result<Arc<dyn Embedder>, EngineError> {
    Ok(match config.backend {
        Backend::Toy => Arc::new(ToyEmbedder::new(config.toy_seed, config.toy_dim)),
        Backend::Remote => Arc::new(RemoteEmbedder::connect(config.remote.clone())?),
    })
}

pub fn build_goal_client(config: &GoalConfig) -> Result<Box<dyn GoalClient>, EngineError> {
    Ok(match config.client {
        GoalClientKind::Scripted => Box::new(ScriptedGoals::new(config.script.clone())?),
        GoalClientKind::Vlm => Box::new(VlmClient::new(config.vlm.clone().with_env())?),
    })
}

pub struct Engine {
    config: RunConfig,
    dir: PathBuf,
    backend: Arc<dyn Embedder>,
    cached: Arc<CachedEmbedder<Arc<dyn Embedder>>>,
    goal_client: Box<dyn GoalClient>,
    fallback: ScriptedGoals,
    archive: Archive,
    goals: GoalLog,
    completed: usize,
    next_seed_goal: usize,
    events: BufWriter<File>,
}

impl Engine {
    /// Starts a new run in `dir` with backends built from the config.
    pub fn create(config: RunConfig, dir: &Path) -> Result<Self, EngineError> {
        config.validate()?;
        let backend = build_embedder(&config.embedding)?;
        let client = build_goal_client(&config.goals)?;
        Self::create_with(config, dir, backend, client)
    }

    /// Starts a new run with caller-supplied backends.
    pub fn create_with(
        config: RunConfig,
        dir: &Path,
        backend: Arc<dyn Embedder>,
        goal_client: Box<dyn GoalClient>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        if dir.join(CHECKPOINT_FILE).exists() {
            return Err(EngineError::RunDir(format!(
                "{} already holds a run; resume it or pick another directory",
                dir.display()
            )));
        }
        if config.mode == Mode::Ee && !backend.descriptor().supports_goals() {
            return Err(EngineError::Config(format!(
                "backend {} cannot embed text, which expeditions need",
                backend.backend_id()
            )));
        }
        std::fs::create_dir_all(dir.join(BEHAVIOR_DIR))?;
        let cache = Arc::new(EmbeddingCache::new());
        let cached = Arc::new(CachedEmbedder::new(backend.clone(), cache));
        let descriptor = backend.descriptor().clone();
        let archive = Archive::new(&descriptor.backend_id, descriptor.dim, config.layout, config.k);
        let mut goals = GoalLog::new();
        if config.mode == Mode::Ee {
            for text in &config.goals.seed_goals {
                let e = cached.embed_text(text)?;
                goals.append(text.clone(), e, 0, Vec::new(), GoalSource::Predefined, None);
            }
        }
        let fallback = ScriptedGoals::new(config.goals.fallback_script.clone())?;
        let events = BufWriter::new(File::create(dir.join(EVENTS_FILE))?);
        let mut engine = Self {
            config,
            dir: dir.to_path_buf(),
            backend,
            cached,
            goal_client,
            fallback,
            archive,
            goals,
            completed: 0,
            next_seed_goal: 0,
            events,
        };
        engine.checkpoint()?;
        Ok(engine)
    }

    /// Reopens the run in `dir` at its last checkpoint, rebuilding backends
    /// from the echoed config. Secrets come from the environment again.
    pub fn resume(dir: &Path) -> Result<Self, EngineError> {
        let config = load_config(dir)?;
        let backend = build_embedder(&config.embedding)?;
        let client = build_goal_client(&config.goals)?;
        Self::resume_with(dir, backend, client)
    }

    pub fn resume_with(
        dir: &Path,
        backend: Arc<dyn Embedder>,
        goal_client: Box<dyn GoalClient>,
    ) -> Result<Self, EngineError> {
        let config = load_config(dir)?;
        let checkpoint: Checkpoint = serde_json::from_slice(&std::fs::read(dir.join(CHECKPOINT_FILE))?)?;
        let (archive, _) = Archive::load(dir)?;
        if archive.backend_id() != backend.backend_id() || archive.dim() != backend.descriptor().dim {
            return Err(EngineError::RunDir(format!(
                "run used backend {} (dim {}), resuming with {} (dim {})",
                archive.backend_id(),
                archive.dim(),
                backend.backend_id(),
                backend.descriptor().dim
            )));
        }
        if archive.len() != checkpoint.completed_iterations {
            return Err(EngineError::RunDir(format!(
                "checkpoint lists {} iterations but the archive has {} records",
                checkpoint.completed_iterations,
                archive.len()
            )));
        }
        let goals = GoalLog::load(&dir.join(GOALS_FILE), archive.backend_id())?;
        let cache = Arc::new(EmbeddingCache::load(&dir.join(CACHE_FILE))?);
        let cached = Arc::new(CachedEmbedder::new(backend.clone(), cache));
        let fallback = ScriptedGoals::new(config.goals.fallback_script.clone())?;
        fallback.set_cursor(checkpoint.fallback_cursor);
        goal_client.set_cursor(checkpoint.goal_cursor);
        let events = truncate_events(&dir.join(EVENTS_FILE), checkpoint.completed_iterations)?;
        Ok(Self {
            config,
            dir: dir.to_path_buf(),
            backend,
            cached,
            goal_client,
            fallback,
            archive,
            goals,
            completed: checkpoint.completed_iterations,
            next_seed_goal: checkpoint.next_seed_goal,
            events,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn goals(&self) -> &GoalLog {
        &self.goals
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn is_finished(&self) -> bool {
        self.completed >= self.config.iterations
    }

    fn evaluator(&self, embedder: Arc<dyn Embedder>) -> Evaluator {
        Evaluator { layout: self.config.layout, sim: self.config.sim.clone(), embedder }
    }

    pub fn run(&mut self) -> Result<RunSummary, EngineError> {
        self.run_until(self.config.iterations)
    }

    /// Runs until `target` iterations are complete (capped at N),
    /// checkpointing on schedule and at the end.
    pub fn run_until(&mut self, target: usize) -> Result<RunSummary, EngineError> {
        let target = target.min(self.config.iterations);
        while self.completed < target {
            self.step()?;
            if self.completed.is_multiple_of(self.config.checkpoint_every) || self.completed == self.config.iterations {
                self.checkpoint()?;
            }
        }
        self.events.flush()?;
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        let count = |o| self.archive.records().iter().filter(|r| r.origin == o).count();
        RunSummary {
            completed_iterations: self.completed,
            records: self.archive.len(),
            seeds: count(Origin::Seed),
            expansions: count(Origin::Expansion),
            expeditions: count(Origin::Expedition),
            goals: self.goals.len(),
        }
    }

    /// Runs one iteration and returns the new record id.
    pub fn step(&mut self) -> Result<usize, EngineError> {
        let i = self.completed + 1;
        let seed = self.config.seed;
        let start = Instant::now();
        let kind = step_kind(&self.config, i);
        let mut summary = None;
        let (theta, origin, parent_id, goal_id) = match kind {
            StepKind::Seed => {
                let theta = self.config.layout.sample_random(derive_seed(seed, &[stream::SAMPLE, i as u64]));
                (theta, Origin::Seed, None, None)
            }
            StepKind::Expansion { alpha } => {
                let parent =
                    self.archive.sample_high_novelty(1, alpha, derive_seed(seed, &[stream::SELECT, i as u64]))?[0];
                let theta = self.archive.records()[parent]
                    .theta
                    .mutate(self.config.sigma_mut, derive_seed(seed, &[stream::MUTATE, i as u64]))?;
                (theta, Origin::Expansion, Some(parent), None)
            }
            StepKind::Expedition => {
                let (theta, parent, goal_id, s) = self.expedition(i)?;
                summary = Some(s);
                (theta, Origin::Expedition, Some(parent), Some(goal_id))
            }
        };
        let eval = self.evaluator(self.cached.clone()).evaluate(&theta)?;
        let id = self.archive.len();
        let behavior = format!("{BEHAVIOR_DIR}/{id:06}.png");
        eval.image.write_png(&self.dir.join(&behavior))?;
        self.archive.insert(NewRecord {
            iteration: i,
            origin,
            parent_id,
            goal_id,
            theta,
            embedding: eval.embedding,
            behavior,
        })?;
        self.completed = i;
        let event = Event {
            iteration: i,
            id,
            origin,
            parent_id,
            goal_id,
            seconds: start.elapsed().as_secs_f64(),
            truncated_at: eval.truncated_at,
            expedition: summary,
        };
        serde_json::to_writer(&mut self.events, &event)?;
        self.events.write_all(b"\n")?;
        if origin == Origin::Expedition {
            self.events.flush()?;
        }
        Ok(id)
    }

    /// Picks a goal, starts sep-CMA-ES from its nearest archived solution and
    /// returns the best parameters found with the start id and goal id.
    fn expedition(&mut self, i: usize) -> Result<(Genome, usize, usize, ExpeditionSummary), EngineError> {
        let seed = self.config.seed;
        let goal_id = if self.config.goals.pursue_seed_goals && self.next_seed_goal < self.config.goals.seed_goals.len() {
            self.next_seed_goal += 1;
            self.next_seed_goal - 1
        } else {
            let wants_images = self.goal_client.source() == GoalSource::Vlm;
            let dir = self.dir.clone();
            let prompt = build_prompt(
                &self.archive,
                &self.goals,
                self.config.goals.context_size,
                self.config.alpha,
                derive_seed(seed, &[stream::PROMPT, i as u64]),
                |r| {
                    if wants_images {
                        BehaviorImage::read_png(&dir.join(&r.behavior)).ok()
                    } else {
                        None
                    }
                },
            )?;
            let (text, source) = generate_goal(&prompt, self.goal_client.as_ref(), &self.fallback, &self.goals);
            let embedding = self.cached.embed_text(&text)?;
            self.goals.append(text, embedding, i, prompt.context_ids(), source, None)
        };
        let goal = self.goals.get(goal_id).expect("goal just logged").clone();
        let (start, initial_fitness) = {
            let (r, d) = self.archive.nearest_to(&goal.embedding)?;
            (r.id, d)
        };
        self.goals.set_seed_solution(goal_id, start);
        log::info!("iteration {i}: expedition toward {:?} from solution {start} (distance {initial_fitness:.4})", goal.text);

        // candidates are not archived, so they bypass the embedding cache
        let evaluator = self.evaluator(self.backend.clone());
        let fatal: Mutex<Option<EmbedError>> = Mutex::new(None);
        let objective = |theta: &Genome| -> Result<f64, EngineError> {
            let image = evaluator.image(theta)?;
            match evaluator.embedder.embed_image(&image) {
                Ok(e) => Ok(crate::embedding::cosine_distance(e.vector(), goal.embedding.vector())),
                Err(err @ EmbedError::Unreachable { .. }) => {
                    let msg = err.to_string();
                    fatal.lock().expect("lock").get_or_insert(err);
                    Err(EngineError::Config(msg))
                }
                Err(err) => Err(err.into()),
            }
        };
        let snapshots = &self.config.cmaes.snapshots;
        let start_theta = self.archive.records()[start].theta.clone();
        let mut snaps: Vec<(usize, Genome)> = Vec::new();
        if snapshots.contains(&0) {
            snaps.push((0, start_theta.clone()));
        }
        let trace = cmaes::optimize(
            objective,
            &start_theta,
            self.config.cmaes.steps,
            self.config.cmaes.lambda,
            self.config.cmaes.sigma_init,
            derive_seed(seed, &[stream::CMAES, i as u64]),
            |_, t| {
                let g = t.generations.len();
                if snapshots.contains(&g) {
                    snaps.push((g, t.best_theta.clone()));
                }
            },
        )?;
        if let Some(err) = fatal.into_inner().expect("lock") {
            return Err(err.into());
        }

        let out = self.dir.join(EXPEDITION_DIR).join(goal_id.to_string());
        std::fs::create_dir_all(&out)?;
        let mut csv = BufWriter::new(File::create(out.join("trace.csv"))?);
        writeln!(csv, "generation,best_fitness,mean_fitness,sigma")?;
        writeln!(csv, "0,{initial_fitness},{initial_fitness},{}", self.config.cmaes.sigma_init)?;
        for g in &trace.generations {
            writeln!(csv, "{},{},{},{}", g.generation, g.best_fitness, g.mean_fitness, g.sigma)?;
        }
        csv.flush()?;
        for (g, theta) in &snaps {
            evaluator.image(theta)?.write_png(&out.join(format!("gen_{g:03}.png")))?;
        }
        let summary = ExpeditionSummary {
            goal: goal.text.clone(),
            source: goal.source,
            start_id: start,
            initial_fitness,
            best_fitness: trace.best_fitness,
            evaluations: trace.evaluations,
        };
        write_json_atomic(&out.join("expedition.json"), &summary)?;
        Ok((trace.best_theta, start, goal_id, summary))
    }

    /// Persists the archive, goal log, embedding cache and resume point.
    pub fn checkpoint(&mut self) -> Result<(), EngineError> {
        self.events.flush()?;
        self.archive.save(&self.dir, self.config.echo())?;
        self.goals.save(&self.dir.join(GOALS_FILE))?;
        self.cached.cache().save(&self.dir.join(CACHE_FILE))?;
        let checkpoint = Checkpoint {
            completed_iterations: self.completed,
            goal_cursor: self.goal_client.cursor(),
            fallback_cursor: self.fallback.cursor(),
            next_seed_goal: self.next_seed_goal,
        };
        write_json_atomic(&self.dir.join(CHECKPOINT_FILE), &checkpoint)?;
        log::info!("checkpoint at iteration {}", self.completed);
        Ok(())
    }
}

/// The effective config echoed in a run's manifest, with secrets restored
/// from the environment.
pub fn load_config(dir: &Path) -> Result<RunConfig, EngineError> {
    let manifest: crate::archive::ArchiveManifest =
        serde_json::from_slice(&std::fs::read(dir.join(crate::archive::MANIFEST_FILE))?)?;
    let mut config: RunConfig = serde_json::from_value(manifest.config)?;
    config.goals.vlm = config.goals.vlm.with_env();
    Ok(config)
}

/// Keeps the events of the first `completed` iterations and reopens the log
/// for appending.
fn truncate_events(path: &Path, completed: usize) -> Result<BufWriter<File>, EngineError> {
    let mut kept = Vec::new();
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            match serde_json::from_str::<Event>(&line) {
                Ok(e) if e.iteration <= completed => kept.push(line),
                _ => {}
            }
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for line in kept {
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(out)
}

/// Reads `events.jsonl`.
pub fn read_events(dir: &Path) -> Result<Vec<Event>, EngineError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(dir.join(EVENTS_FILE))?).lines() {
        out.push(serde_json::from_str(&line?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_the_expedition_count() {
        let mut c = RunConfig { iterations: 1300, seed_iterations: 1000, expedition_period: 100, ..RunConfig::default() };
        let count = |c: &RunConfig| (1..=c.iterations).filter(|&i| step_kind(c, i) == StepKind::Expedition).count();
        assert_eq!(count(&c), 3);
        c.iterations = 10_000;
        c.expedition_period = 50;
        assert_eq!(count(&c), 180);
        assert_eq!(step_kind(&c, 1050), StepKind::Expedition);
        assert_eq!(step_kind(&c, 1000), StepKind::Seed);
        assert_eq!(step_kind(&c, 1001), StepKind::Expansion { alpha: 4.0 });
        c.seed_iterations = 1003;
        assert_eq!(count(&c), (10_000 - 1003) / 50);
        c.mode = Mode::RandomGa;
        assert_eq!(step_kind(&c, 2000), StepKind::Expansion { alpha: 0.0 });
        c.mode = Mode::RandomParams;
        assert_eq!(step_kind(&c, 5000), StepKind::Seed);
    }
}
