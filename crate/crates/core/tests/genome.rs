use ee_core::genome::{Genome, GenomeLayout, SlotKind};
use ee_core::rng::rng_from_seed;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

const SAMPLES: usize = 100_000;

/// Asymptotic Kolmogorov p-value for a one-sample statistic `d` over `n` points.
fn kolmogorov_p(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        p += sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
    }
    (2.0 * p).clamp(0.0, 1.0)
}

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn sampled_components_average_one_half() {
    let layout = GenomeLayout::default();
    let mut rng = rng_from_seed(0);
    let mut sums = vec![0.0; layout.total_dim()];
    for _ in 0..SAMPLES {
        for (s, v) in sums.iter_mut().zip(layout.sample_with(&mut rng).values()) {
            *s += v;
        }
    }
    for (i, s) in sums.iter().enumerate() {
        let mean = s / SAMPLES as f64;
        assert!((mean - 0.5).abs() < 0.01, "component {i}: mean {mean}");
    }
}

#[test]
fn mutation_noise_has_the_requested_spread() {
    let dim = 8;
    let g = Genome::new(vec![0.5; dim]).unwrap();
    let mut rng = rng_from_seed(1);
    let mut deltas = vec![Vec::with_capacity(SAMPLES); dim];
    for _ in 0..SAMPLES {
        let child = g.mutate_with(0.05, &mut rng).unwrap();
        for (d, v) in deltas.iter_mut().zip(child.values()) {
            d.push(v - 0.5);
        }
    }
    let normal = Normal::new(0.0, 0.05).unwrap();
    for (i, d) in deltas.into_iter().enumerate() {
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.05).abs() < 0.002, "component {i}: std {std}");
        let stat = ks_statistic(d, |x| normal.cdf(x));
        let p = kolmogorov_p(stat, SAMPLES);
        assert!(p > 0.01, "component {i}: KS D={stat}, p={p}");
    }
}

#[test]
fn ks_helper_rejects_a_wrong_scale() {
    let mut rng = rng_from_seed(2);
    let g = Genome::new(vec![0.5]).unwrap();
    let d: Vec<f64> = (0..SAMPLES)
        .map(|_| g.mutate_with(0.05, &mut rng).unwrap().values()[0] - 0.5)
        .collect();
    let wrong = Normal::new(0.0, 0.055).unwrap();
    assert!(kolmogorov_p(ks_statistic(d, |x| wrong.cdf(x)), SAMPLES) < 0.01);
}

#[test]
fn every_slot_kind_decodes_monotonically() {
    let kinds = [
        SlotKind::Radius,
        SlotKind::RingHeight,
        SlotKind::RingCenter,
        SlotKind::RingWidth,
        SlotKind::GrowthMean,
        SlotKind::GrowthStd,
        SlotKind::Weight,
        SlotKind::SourceChannel,
        SlotKind::TargetChannel,
        SlotKind::CriticalMass,
    ];
    for kind in kinds {
        let b = kind.bounds(3);
        let values: Vec<f64> = (0..=1000).map(|i| b.decode(i as f64 / 1000.0)).collect();
        assert!(values.windows(2).all(|w| w[0] < w[1]), "{kind:?}");
    }
}

proptest! {
    #[test]
    fn encode_inverts_decode(seed in any::<u64>()) {
        let layout = GenomeLayout::default();
        let g = layout.sample_random(seed);
        let back = layout.encode(&layout.decode(&g));
        for (a, b) in g.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_layouts_decode_stably(seed in any::<u64>()) {
        let layout = GenomeLayout { evolve_routing: true, ..GenomeLayout::default() };
        let params = layout.decode(&layout.sample_random(seed));
        let again = layout.decode(&layout.encode(&params));
        for (a, b) in params.kernels.iter().zip(&again.kernels) {
            prop_assert_eq!((a.source, a.target), (b.source, b.target));
            prop_assert!((a.radius - b.radius).abs() < 1e-12);
        }
    }

    #[test]
    fn mutation_stays_in_the_unit_cube(seed in any::<u64>(), sigma in 0.001f64..2.0) {
        let layout = GenomeLayout::default();
        let child = layout.sample_random(seed).mutate(sigma, seed ^ 1).unwrap();
        prop_assert_eq!(child.len(), 235);
        prop_assert!(child.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
