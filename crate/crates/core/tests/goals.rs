mod common;

use common::random_archive;
use ee_core::goals::{build_prompt, GoalLog, GoalSource};
use ee_core::rng::derive_seed;

#[test]
fn prompt_context_is_drawn_in_proportion_to_novelty_to_the_fourth() {
    let archive = random_archive(12, 3, 2, 21);
    let weights: Vec<f64> = archive.novelty_scores().iter().map(|v| v.powi(4)).collect();
    let total: f64 = weights.iter().sum();
    let log = GoalLog::new();
    let draws = 100_000;
    let mut counts = vec![0usize; archive.len()];
    for t in 0..draws {
        let prompt = build_prompt(&archive, &log, 1, 4.0, derive_seed(1, &[t]), |_| None).unwrap();
        counts[prompt.context_ids()[0]] += 1;
    }
    for (id, (&c, w)) in counts.iter().zip(&weights).enumerate() {
        let p = w / total;
        if p > 0.02 {
            let observed = c as f64 / draws as f64;
            assert!((observed / p - 1.0).abs() < 0.05, "record {id}: {observed} vs {p}");
        }
    }
}

#[test]
fn prompts_are_deterministic_and_carry_prior_goals() {
    let archive = random_archive(40, 6, 5, 22);
    let mut log = GoalLog::new();
    let e = archive.records()[0].embedding.clone();
    log.append("a pink square".into(), e, 0, Vec::new(), GoalSource::Predefined, None);
    let a = build_prompt(&archive, &log, 25, 4.0, 5, |_| None).unwrap();
    let b = build_prompt(&archive, &log, 25, 4.0, 5, |_| None).unwrap();
    assert_eq!(a.context_ids(), b.context_ids());
    assert_eq!(a.context_ids().len(), 25);
    assert_eq!(a.prior_goals, vec!["a pink square".to_string()]);
    assert!(a.user_text().contains("a pink square"));
    assert!(a.user_text().contains("5-15 words"));
}
