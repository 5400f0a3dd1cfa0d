#![allow(dead_code)]

use ee_core::archive::{Archive, NewRecord, Origin};
use ee_core::embedding::Embedding;
use ee_core::genome::{Genome, GenomeLayout};
use ee_core::rng::rng_from_seed;
use rand::Rng;
use rand_distr::StandardNormal;

pub const BACKEND: &str = "test";

/// Eight-slot layout; keeps record payloads small in archive-heavy tests.
pub fn tiny_layout() -> GenomeLayout {
    GenomeLayout { kernel_count: 1, rings_per_kernel: 1, channels: 1, evolve_routing: false }
}

pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Embedding {
    let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Embedding::normalized(BACKEND, raw).unwrap()
}

pub fn unit(values: &[f64]) -> Embedding {
    Embedding::normalized(BACKEND, values.to_vec()).unwrap()
}

pub fn record(origin: Origin, parent_id: Option<usize>, embedding: Embedding, iteration: usize) -> NewRecord {
    let layout = tiny_layout();
    NewRecord {
        iteration,
        origin,
        parent_id,
        goal_id: (origin == Origin::Expedition).then_some(0),
        theta: Genome::new(vec![0.5; layout.total_dim()]).unwrap(),
        embedding,
        behavior: format!("behaviors/{iteration:06}.png"),
    }
}

/// Archive of `n` seed records with random unit embeddings.
pub fn random_archive(n: usize, dim: usize, k: usize, seed: u64) -> Archive {
    let mut rng = rng_from_seed(seed);
    let mut archive = Archive::new(BACKEND, dim, tiny_layout(), k);
    for i in 0..n {
        archive.insert(record(Origin::Seed, None, random_unit(&mut rng, dim), i)).unwrap();
    }
    archive
}

/// Archive whose records follow `parents` (`None` = seed, otherwise expansion).
pub fn forest_archive(parents: &[Option<usize>], expeditions: &[usize]) -> Archive {
    let mut rng = rng_from_seed(7);
    let mut archive = Archive::new(BACKEND, 4, tiny_layout(), 3);
    for (i, p) in parents.iter().enumerate() {
        let origin = match p {
            None => Origin::Seed,
            Some(_) if expeditions.contains(&i) => Origin::Expedition,
            Some(_) => Origin::Expansion,
        };
        archive.insert(record(origin, *p, random_unit(&mut rng, 4), i + 1)).unwrap();
    }
    archive
}

pub fn brute_knn_mean(archive: &Archive, query: &[f64], k: usize, exclude: Option<usize>) -> f64 {
    let mut d: Vec<f64> = archive
        .records()
        .iter()
        .filter(|r| Some(r.id) != exclude)
        .map(|r| (1.0 - r.embedding.vector().iter().zip(query).map(|(a, b)| a * b).sum::<f64>()).clamp(0.0, 2.0))
        .collect();
    d.sort_by(f64::total_cmp);
    d.truncate(k);
    if d.is_empty() {
        0.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}

/// Random forest: node 0 is a root, later nodes are roots with probability
/// `root_p` and otherwise pick a uniform older parent.
pub fn random_forest(n: usize, root_p: f64, seed: u64) -> Vec<Option<usize>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|i| (i > 0 && !rng.random_bool(root_p)).then(|| rng.random_range(0..i)))
        .collect()
}

pub fn children(parents: &[Option<usize>]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); parents.len()];
    for (id, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            out[*p].push(id);
        }
    }
    out
}

/// Strict descendants of `root` by explicit depth-first search.
pub fn dfs(children: &[Vec<usize>], root: usize, seen: &mut [bool]) -> usize {
    let mut stack = children[root].clone();
    let mut count = 0;
    while let Some(v) = stack.pop() {
        count += 1;
        seen[v] = true;
        stack.extend(&children[v]);
    }
    count
}
