//! Append-only solution archive: genealogy, exact k-NN novelty, sampling and
//! persistence.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_distance, Embedding};
use crate::genome::{Genome, GenomeError, GenomeLayout};
use crate::rng::rng_from_seed;

pub const DEFAULT_K: usize = 10;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const BEHAVIOR_DIR: &str = "behaviors";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive is empty")]
    Empty,
    #[error("embedding backend {actual} does not match archive backend {expected}")]
    BackendMismatch { expected: String, actual: String },
    #[error("embedding dimension {actual} does not match archive dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("{file} line {line}: {message}")]
    Corrupt { file: &'static str, line: usize, message: String },
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Seed,
    Expansion,
    Expedition,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Seed => "seed",
            Origin::Expansion => "expansion",
            Origin::Expedition => "expedition",
        }
    }
}

/// Everything about a solution except its id.
#[derive(Debug, Clone, PartialEq)]
pub struct NewRecord {
    pub iteration: usize,
    pub origin: Origin,
    pub parent_id: Option<usize>,
    pub goal_id: Option<usize>,
    pub theta: Genome,
    pub embedding: Embedding,
    /// Behavior image path relative to the run directory.
    pub behavior: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionRecord {
    pub id: usize,
    pub iteration: usize,
    pub origin: Origin,
    pub parent_id: Option<usize>,
    pub goal_id: Option<usize>,
    pub theta: Genome,
    pub embedding: Embedding,
    pub behavior: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: usize,
    iteration: usize,
    origin: Origin,
    parent_id: Option<usize>,
    goal_id: Option<usize>,
    theta: Vec<f64>,
    embedding: Vec<f64>,
    behavior: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub backend_id: String,
    pub dim: usize,
    pub k: usize,
    pub layout: GenomeLayout,
    pub record_count: usize,
    /// Effective run configuration, echoed verbatim.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Solutions in insertion order plus an exact k-NN cache.
///
/// For every stored record the `k` nearest other records are kept sorted by
/// `(distance, id)` and updated on each insert, so stored-record novelty is
/// O(k). Queries for other `k` or foreign embeddings scan the archive.
#[derive(Debug, Clone)]
pub struct Archive {
    backend_id: Arc<str>,
    dim: usize,
    k: usize,
    layout: GenomeLayout,
    records: Vec<SolutionRecord>,
    neighbors: Vec<Vec<(f64, usize)>>,
}

impl PartialEq for Archive {
    fn eq(&self, other: &Self) -> bool {
        self.backend_id == other.backend_id
            && self.dim == other.dim
            && self.k == other.k
            && self.layout == other.layout
            && self.records == other.records
    }
}

fn sort_key(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` smallest `(distance, id)` pairs, sorted.
fn k_smallest(mut all: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if all.len() > k && k > 0 {
        all.select_nth_unstable_by(k - 1, sort_key);
        all.truncate(k);
    } else if k == 0 {
        all.clear();
    }
    all.sort_by(sort_key);
    all
}

fn mean_distance(list: &[(f64, usize)]) -> f64 {
    if list.is_empty() {
        return 0.0;
    }
    list.iter().map(|p| p.0).sum::<f64>() / list.len() as f64
}

impl Archive {
    pub fn new(backend_id: &str, dim: usize, layout: GenomeLayout, k: usize) -> Self {
        Self {
            backend_id: backend_id.into(),
            dim,
            k: k.max(1),
            layout,
            records: Vec::new(),
            neighbors: Vec::new(),
        }
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layout(&self) -> &GenomeLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SolutionRecord] {
        &self.records
    }

    pub fn get(&self, id: usize) -> Option<&SolutionRecord> {
        self.records.get(id)
    }

    fn check_embedding(&self, e: &Embedding) -> Result<(), ArchiveError> {
        if e.backend_id() != &*self.backend_id {
            return Err(ArchiveError::BackendMismatch {
                expected: self.backend_id.to_string(),
                actual: e.backend_id().to_string(),
            });
        }
        if e.dim() != self.dim {
            return Err(ArchiveError::DimensionMismatch { expected: self.dim, actual: e.dim() });
        }
        Ok(())
    }

    fn validate(&self, r: &NewRecord) -> Result<(), ArchiveError> {
        self.check_embedding(&r.embedding)?;
        r.theta.check_layout(&self.layout)?;
        let id = self.records.len();
        match (r.origin, r.parent_id) {
            (Origin::Seed, Some(_)) => {
                return Err(ArchiveError::InvalidRecord("seed records have no parent".into()))
            }
            (Origin::Seed, None) => {}
            (_, None) => {
                return Err(ArchiveError::InvalidRecord(format!("{} record needs a parent", r.origin.as_str())))
            }
            (_, Some(p)) if p >= id => {
                return Err(ArchiveError::InvalidRecord(format!("parent {p} is not older than id {id}")))
            }
            _ => {}
        }
        if (r.origin == Origin::Expedition) != r.goal_id.is_some() {
            return Err(ArchiveError::InvalidRecord("goal_id is set exactly for expedition records".into()));
        }
        Ok(())
    }

    /// Appends a record and updates every neighbor list. Returns the new id.
    pub fn insert(&mut self, record: NewRecord) -> Result<usize, ArchiveError> {
        self.validate(&record)?;
        let id = self.records.len();
        let e = record.embedding.vector();
        let mut all = Vec::with_capacity(id);
        for (j, other) in self.records.iter().enumerate() {
            let d = cosine_distance(other.embedding.vector(), e);
            all.push((d, j));
            let list = &mut self.neighbors[j];
            // the new id is the largest, so it sorts after equal distances
            let pos = list.partition_point(|p| p.0 <= d);
            if pos < self.k {
                list.insert(pos, (d, id));
                list.truncate(self.k);
            }
        }
        self.neighbors.push(k_smallest(all, self.k));
        self.records.push(SolutionRecord {
            id,
            iteration: record.iteration,
            origin: record.origin,
            parent_id: record.parent_id,
            goal_id: record.goal_id,
            theta: record.theta,
            embedding: record.embedding,
            behavior: record.behavior,
        });
        Ok(id)
    }

    fn scan(&self, e: &[f64], k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        let all = self
            .records
            .iter()
            .filter(|r| Some(r.id) != exclude)
            .map(|r| (cosine_distance(r.embedding.vector(), e), r.id))
            .collect();
        k_smallest(all, k)
    }

    /// Mean cosine distance from `e` to its `k` nearest stored embeddings
    /// (all of them when fewer than `k` exist).
    pub fn novelty(&self, e: &Embedding, k: usize) -> Result<f64, ArchiveError> {
        if self.is_empty() {
            return Err(ArchiveError::Empty);
        }
        self.check_embedding(e)?;
        Ok(mean_distance(&self.scan(e.vector(), k.max(1), None)))
    }

    /// Novelty of a stored record, excluding the record itself. A lone record
    /// has novelty 0.
    pub fn novelty_of(&self, id: usize, k: usize) -> Result<f64, ArchiveError> {
        let record = self.records.get(id).ok_or(ArchiveError::Empty)?;
        if k == self.k {
            return Ok(mean_distance(&self.neighbors[id]));
        }
        Ok(mean_distance(&self.scan(record.embedding.vector(), k.max(1), Some(id))))
    }

    /// Novelty of every stored record under the archive's `k`.
    pub fn novelty_scores(&self) -> Vec<f64> {
        self.neighbors.iter().map(|l| mean_distance(l)).collect()
    }

    /// The `(distance, id)` neighbor list cached for `id`.
    pub fn neighbors_of(&self, id: usize) -> &[(f64, usize)] {
        &self.neighbors[id]
    }

    /// Draws `n` distinct record ids with probability proportional to
    /// `NOV^alpha`, in draw order. When every remaining weight is zero the
    /// rest are drawn uniformly. `n >= len` returns every id.
    pub fn sample_high_novelty(&self, n: usize, alpha: f64, seed: u64) -> Result<Vec<usize>, ArchiveError> {
        self.sample_high_novelty_with(n, alpha, &mut rng_from_seed(seed))
    }

    pub fn sample_high_novelty_with<R: Rng + ?Sized>(
        &self,
        n: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>, ArchiveError> {
        if self.is_empty() {
            return Err(ArchiveError::Empty);
        }
        if !(alpha >= 0.0) {
            return Err(ArchiveError::InvalidRecord(format!("alpha must be >= 0, got {alpha}")));
        }
        if n >= self.len() {
            return Ok((0..self.len()).collect());
        }
        let weights: Vec<f64> = self.novelty_scores().into_iter().map(|v| v.powf(alpha)).collect();
        sample_weighted(&weights, n, rng)
            .map_err(|e| ArchiveError::InvalidRecord(format!("novelty weights: {e}")))
    }

    /// Record closest to `goal`; ties go to the lowest id.
    pub fn nearest_to(&self, goal: &Embedding) -> Result<(&SolutionRecord, f64), ArchiveError> {
        self.check_embedding(goal)?;
        let mut best: Option<(usize, f64)> = None;
        for r in &self.records {
            let d = cosine_distance(r.embedding.vector(), goal.vector());
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((r.id, d));
            }
        }
        let (id, d) = best.ok_or(ArchiveError::Empty)?;
        Ok((&self.records[id], d))
    }

    pub fn manifest(&self, config: serde_json::Value) -> ArchiveManifest {
        ArchiveManifest {
            backend_id: self.backend_id.to_string(),
            dim: self.dim,
            k: self.k,
            layout: self.layout,
            record_count: self.len(),
            config,
        }
    }

    /// Writes `manifest.json` and `records.jsonl`. Behavior images are
    /// written by the caller when records are created.
    pub fn save(&self, dir: &Path, config: serde_json::Value) -> Result<(), ArchiveError> {
        std::fs::create_dir_all(dir)?;
        let records_tmp = dir.join(format!("{RECORDS_FILE}.tmp"));
        {
            let mut out = BufWriter::new(std::fs::File::create(&records_tmp)?);
            for r in &self.records {
                let line = RecordLine {
                    id: r.id,
                    iteration: r.iteration,
                    origin: r.origin,
                    parent_id: r.parent_id,
                    goal_id: r.goal_id,
                    theta: r.theta.values().to_vec(),
                    embedding: r.embedding.vector().to_vec(),
                    behavior: r.behavior.clone(),
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        std::fs::rename(&records_tmp, dir.join(RECORDS_FILE))?;
        write_json_atomic(&dir.join(MANIFEST_FILE), &self.manifest(config))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ArchiveManifest), ArchiveError> {
        let manifest: ArchiveManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)
            .map_err(|e| ArchiveError::Corrupt { file: MANIFEST_FILE, line: e.line(), message: e.to_string() })?;
        manifest.layout.validate()?;
        let mut archive = Archive::new(&manifest.backend_id, manifest.dim, manifest.layout, manifest.k);
        let reader = BufReader::new(std::fs::File::open(dir.join(RECORDS_FILE))?);
        let corrupt = |line: usize, message: String| ArchiveError::Corrupt { file: RECORDS_FILE, line, message };
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| corrupt(lineno, e.to_string()))?;
            if parsed.id != i {
                return Err(corrupt(lineno, format!("expected id {i}, found {}", parsed.id)));
            }
            let theta = Genome::new(parsed.theta).map_err(|e| corrupt(lineno, e.to_string()))?;
            let embedding = Embedding::from_unit(manifest.backend_id.as_str(), parsed.embedding)
                .map_err(|e| corrupt(lineno, e.to_string()))?;
            archive
                .insert(NewRecord {
                    iteration: parsed.iteration,
                    origin: parsed.origin,
                    parent_id: parsed.parent_id,
                    goal_id: parsed.goal_id,
                    theta,
                    embedding,
                    behavior: parsed.behavior,
                })
                .map_err(|e| corrupt(lineno, e.to_string()))?;
        }
        if archive.len() != manifest.record_count {
            return Err(corrupt(
                archive.len() + 1,
                format!("manifest lists {} records, file has {}", manifest.record_count, archive.len()),
            ));
        }
        Ok((archive, manifest))
    }
}

/// Weighted sampling without replacement; uniform over the remainder once
/// all remaining weights are zero.
pub fn sample_weighted<R: Rng + ?Sized>(
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, rand::distr::weighted::Error> {
    let n = n.min(weights.len());
    let mut out = Vec::with_capacity(n);
    let mut taken = vec![false; weights.len()];
    let mut dist = match WeightedIndex::new(weights) {
        Ok(d) => Some(d),
        Err(rand::distr::weighted::Error::InsufficientNonZero) => None,
        Err(e) => return Err(e),
    };
    while out.len() < n {
        let i = match &dist {
            Some(d) => d.sample(rng),
            None => {
                let rest: Vec<usize> = (0..weights.len()).filter(|&i| !taken[i]).collect();
                rest[rng.random_range(0..rest.len())]
            }
        };
        taken[i] = true;
        out.push(i);
        if let Some(d) = &mut dist {
            if d.update_weights(&[(i, &0.0)]).is_err() {
                dist = None;
            }
        }
    }
    Ok(out)
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), ArchiveError> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}
