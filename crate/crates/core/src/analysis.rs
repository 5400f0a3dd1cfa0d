//! Diversity and genealogy statistics over a finished archive, and exports
//! for external tools.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::archive::{Archive, Origin};
use crate::embedding::cosine_distance;
use crate::rng::{derive_seed, rng_from_seed};

pub const DEFAULT_PAIR_BUDGET: usize = 200_000;
pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_NULL_TRIALS: usize = 1000;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("diversity needs at least two embeddings, got {0}")]
    TooFew(usize),
    #[error("genealogy is not a forest: record {id} has parent {parent}")]
    Cycle { id: usize, parent: usize },
    #[error("unknown parent {parent} for record {id}")]
    DanglingParent { id: usize, parent: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diversity {
    pub value: f64,
    /// Pairs averaged over.
    pub pairs: usize,
    pub exact: bool,
    pub seed: u64,
}

/// Mean pairwise cosine distance. Exact when the number of unordered pairs
/// fits in `pair_budget`, otherwise an unbiased estimate from `pair_budget`
/// uniformly drawn pairs of distinct points.
pub fn diversity<V: AsRef<[f64]> + Sync>(
    embeddings: &[V],
    pair_budget: usize,
    seed: u64,
) -> Result<Diversity, AnalysisError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(AnalysisError::TooFew(n));
    }
    let total_pairs = n * (n - 1) / 2;
    if total_pairs <= pair_budget.max(1) {
        let sum: f64 = (0..n)
            .into_par_iter()
            .map(|i| {
                let a = embeddings[i].as_ref();
                embeddings[i + 1..].iter().map(|b| cosine_distance(a, b.as_ref())).sum::<f64>()
            })
            .sum();
        return Ok(Diversity { value: sum / total_pairs as f64, pairs: total_pairs, exact: true, seed });
    }
    let mut rng = rng_from_seed(seed);
    let mut sum = 0.0;
    for _ in 0..pair_budget {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        sum += cosine_distance(embeddings[i].as_ref(), embeddings[j].as_ref());
    }
    Ok(Diversity { value: sum / pair_budget as f64, pairs: pair_budget, exact: false, seed })
}

/// Diversity of the first `m` records for `m = every, 2*every, ...` and the
/// full archive.
pub fn diversity_curve(
    archive: &Archive,
    every: usize,
    pair_budget: usize,
    seed: u64,
) -> Result<Vec<(usize, Diversity)>, AnalysisError> {
    let vectors: Vec<&[f64]> = archive.records().iter().map(|r| r.embedding.vector()).collect();
    let mut sizes: Vec<usize> = (1..).map(|c| c * every.max(1)).take_while(|&m| m <= vectors.len()).collect();
    if sizes.last() != Some(&vectors.len()) {
        sizes.push(vectors.len());
    }
    sizes
        .into_iter()
        .filter(|&m| m >= 2)
        .map(|m| Ok((m, diversity(&vectors[..m], pair_budget, derive_seed(seed, &[m as u64]))?)))
        .collect()
}

/// Checks that every parent is older than its child, which makes the
/// genealogy a forest.
pub fn check_forest(parents: &[Option<usize>]) -> Result<(), AnalysisError> {
    for (id, p) in parents.iter().enumerate() {
        if let Some(parent) = *p {
            if parent >= parents.len() {
                return Err(AnalysisError::DanglingParent { id, parent });
            }
            if parent >= id {
                return Err(AnalysisError::Cycle { id, parent });
            }
        }
    }
    Ok(())
}

/// Strict descendant count of every node, in one pass from the youngest
/// record to the oldest.
pub fn descendant_counts(parents: &[Option<usize>]) -> Result<Vec<usize>, AnalysisError> {
    check_forest(parents)?;
    let mut counts = vec![0usize; parents.len()];
    for id in (0..parents.len()).rev() {
        if let Some(p) = parents[id] {
            counts[p] += counts[id] + 1;
        }
    }
    Ok(counts)
}

/// Marks records with a strict ancestor in `marked`.
fn descends_from(parents: &[Option<usize>], marked: &[bool]) -> Vec<bool> {
    let mut below = vec![false; parents.len()];
    for id in 0..parents.len() {
        if let Some(p) = parents[id] {
            below[id] = marked[p] || below[p];
        }
    }
    below
}

/// Fraction of records that are strict descendants of a marked record.
pub fn progeny_fraction_of(parents: &[Option<usize>], marked: &[bool]) -> Result<f64, AnalysisError> {
    check_forest(parents)?;
    if parents.is_empty() {
        return Ok(0.0);
    }
    let below = descends_from(parents, marked);
    Ok(below.iter().filter(|&&b| b).count() as f64 / parents.len() as f64)
}

/// Fraction of records that are marked or descend from a marked record.
pub fn lineage_fraction_of(parents: &[Option<usize>], marked: &[bool]) -> Result<f64, AnalysisError> {
    check_forest(parents)?;
    if parents.is_empty() {
        return Ok(0.0);
    }
    let below = descends_from(parents, marked);
    let n = below.iter().zip(marked).filter(|(&b, &m)| b || m).count();
    Ok(n as f64 / parents.len() as f64)
}

pub fn parents(archive: &Archive) -> Vec<Option<usize>> {
    archive.records().iter().map(|r| r.parent_id).collect()
}

fn marked_by(archive: &Archive, filter: impl Fn(Origin) -> bool) -> Vec<bool> {
    archive.records().iter().map(|r| filter(r.origin)).collect()
}

/// Share of the archive strictly descended from records whose origin passes
/// `filter`.
pub fn progeny_fraction(archive: &Archive, filter: impl Fn(Origin) -> bool) -> Result<f64, AnalysisError> {
    progeny_fraction_of(&parents(archive), &marked_by(archive, filter))
}

/// Like [`progeny_fraction`] but counting the filtered records themselves.
pub fn lineage_fraction(archive: &Archive, filter: impl Fn(Origin) -> bool) -> Result<f64, AnalysisError> {
    lineage_fraction_of(&parents(archive), &marked_by(archive, filter))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN, samples: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    MeanStd { mean, std: var.sqrt(), samples: n }
}

/// Iterations of the expeditions in a run with `n` iterations, `s` seeds and
/// period `k`.
pub fn expedition_schedule(n: usize, s: usize, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    (1..).map(|j| s + j * k).take_while(|&i| i <= n).collect()
}

/// Uniform-selection null model: record `i >= s` (0-based) picks a uniform
/// parent among records `0..i`; records at the 1-based `expedition_iterations`
/// are marked. Returns the mean and std over trials of the marked records'
/// lineage fraction (marked records plus their descendants).
pub fn null_model_progeny_at(
    n: usize,
    s: usize,
    expedition_iterations: &[usize],
    trials: usize,
    seed: u64,
) -> MeanStd {
    let mut marked = vec![false; n];
    for &it in expedition_iterations {
        if (1..=n).contains(&it) && it > s {
            marked[it - 1] = true;
        }
    }
    let fractions: Vec<f64> = (0..trials.max(1))
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(seed, &[t as u64]));
            let mut inside = vec![false; n];
            let mut count = 0usize;
            for i in 0..n {
                inside[i] = marked[i] || (i >= s && i > 0 && inside[rng.random_range(0..i)]);
                count += inside[i] as usize;
            }
            count as f64 / n.max(1) as f64
        })
        .collect();
    mean_std(&fractions)
}

/// [`null_model_progeny_at`] with expeditions at the run schedule.
pub fn null_model_progeny(n: usize, s: usize, k: usize, trials: usize, seed: u64) -> MeanStd {
    null_model_progeny_at(n, s, &expedition_schedule(n, s, k), trials, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowComparison {
    pub window: usize,
    /// Progeny fraction per nonzero offset from the expedition iterations.
    pub by_offset: Vec<(i64, f64)>,
    pub mean: f64,
    pub std: f64,
}

/// Progeny of non-expedition records created near expeditions.
///
/// For each offset `o` in `[-window, window]`, `o != 0`, the cohort is the
/// non-expedition records whose iteration is an expedition iteration plus
/// `o`; its strict progeny fraction is computed like the expeditions' own.
/// Returns the mean and std across offsets, or `None` when no cohort exists.
pub fn window_comparison(archive: &Archive, window: usize) -> Result<Option<WindowComparison>, AnalysisError> {
    let parents = parents(archive);
    check_forest(&parents)?;
    let records = archive.records();
    let expedition_iters: Vec<usize> =
        records.iter().filter(|r| r.origin == Origin::Expedition).map(|r| r.iteration).collect();
    if expedition_iters.is_empty() {
        return Ok(None);
    }
    let mut by_iteration: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for r in records {
        if r.origin != Origin::Expedition {
            by_iteration.entry(r.iteration).or_default().push(r.id);
        }
    }
    let w = window as i64;
    let mut by_offset = Vec::new();
    for o in (-w..=w).filter(|&o| o != 0) {
        let mut marked = vec![false; records.len()];
        let mut any = false;
        for &it in &expedition_iters {
            let target = it as i64 + o;
            if target < 0 {
                continue;
            }
            if let Some(ids) = by_iteration.get(&(target as usize)) {
                for &id in ids {
                    marked[id] = true;
                    any = true;
                }
            }
        }
        if any {
            by_offset.push((o, progeny_fraction_of(&parents, &marked)?));
        }
    }
    if by_offset.is_empty() {
        return Ok(None);
    }
    let stats = mean_std(&by_offset.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(Some(WindowComparison { window, by_offset, mean: stats.mean, std: stats.std }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenealogyStats {
    pub records: usize,
    pub seeds: usize,
    pub expansions: usize,
    pub expeditions: usize,
    /// Strict descendants of expedition records, as a share of the archive.
    pub expedition_progeny_fraction: f64,
    /// Expedition records plus their descendants, as a share of the archive.
    pub expedition_lineage_fraction: f64,
    pub window: Option<WindowComparison>,
    /// Lineage fraction expected under uniform parent selection with the
    /// same expedition iterations.
    pub null_model: MeanStd,
    pub descendant_counts: Vec<usize>,
}

pub fn genealogy_stats(
    archive: &Archive,
    seed_iterations: usize,
    window: usize,
    null_trials: usize,
    seed: u64,
) -> Result<GenealogyStats, AnalysisError> {
    let parents = parents(archive);
    let counts = descendant_counts(&parents)?;
    let is_expedition = |o| o == Origin::Expedition;
    let census = |o| archive.records().iter().filter(|r| r.origin == o).count();
    let expedition_iters: Vec<usize> =
        archive.records().iter().filter(|r| r.origin == Origin::Expedition).map(|r| r.iteration).collect();
    Ok(GenealogyStats {
        records: archive.len(),
        seeds: census(Origin::Seed),
        expansions: census(Origin::Expansion),
        expeditions: census(Origin::Expedition),
        expedition_progeny_fraction: progeny_fraction(archive, is_expedition)?,
        expedition_lineage_fraction: lineage_fraction(archive, is_expedition)?,
        window: window_comparison(archive, window)?,
        null_model: null_model_progeny_at(archive.len(), seed_iterations, &expedition_iters, null_trials, seed),
        descendant_counts: counts,
    })
}

/// CSV with `id, iteration, origin, parent_id` followed by one column per
/// embedding dimension.
pub fn export_embeddings(archive: &Archive, path: &Path) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "iteration".into(), "origin".into(), "parent_id".into()];
    header.extend((0..archive.dim()).map(|d| format!("e{d}")));
    w.write_record(&header)?;
    for r in archive.records() {
        let mut row = vec![
            r.id.to_string(),
            r.iteration.to_string(),
            r.origin.as_str().to_string(),
            r.parent_id.map(|p| p.to_string()).unwrap_or_default(),
        ];
        row.extend(r.embedding.vector().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct GenealogyNode {
    id: usize,
    iteration: usize,
    origin: Origin,
    parent_id: Option<usize>,
    goal_id: Option<usize>,
    descendants: usize,
}

#[derive(Serialize)]
struct GenealogyExport<'a> {
    stats: &'a GenealogyStats,
    nodes: Vec<GenealogyNode>,
}

pub fn export_genealogy(archive: &Archive, stats: &GenealogyStats, path: &Path) -> Result<(), AnalysisError> {
    let nodes = archive
        .records()
        .iter()
        .map(|r| GenealogyNode {
            id: r.id,
            iteration: r.iteration,
            origin: r.origin,
            parent_id: r.parent_id,
            goal_id: r.goal_id,
            descendants: stats.descendant_counts[r.id],
        })
        .collect();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, &GenealogyExport { stats, nodes })?;
    Ok(())
}

pub fn write_diversity_csv(rows: &[(usize, Diversity)], backend: &str, path: &Path) -> Result<(), AnalysisError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "checkpoint,backend,value,pairs,exact")?;
    for (m, d) in rows {
        writeln!(f, "{m},{backend},{},{},{}", d.value, d.pairs, d.exact)?;
    }
    f.flush()?;
    Ok(())
}
