use ee_core::behavior::{hex, BehaviorImage};
use ee_core::genome::GenomeLayout;
use ee_core::rng::derive_seed;
use ee_core::simulator::kernel::spatial_kernel;
use ee_core::simulator::{render, simulate, FlowLenia, GridState, SimConfig, SpatialKernel};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn small_config(grid: usize, radius: usize, steps: usize) -> SimConfig {
    SimConfig {
        grid_size: grid,
        kernel_radius: radius,
        steps,
        init_patch: grid / 3,
        ..SimConfig::default()
    }
}

/// out[y, x] = sum over (dy, dx) of K(dy, dx) * src[y - dy, x - dx] on the torus.
fn direct_convolution(kernel: &SpatialKernel, src: &[f64], n: usize) -> Vec<f64> {
    let r = kernel.radius as isize;
    let n_i = n as isize;
    let mut out = vec![0.0; n * n];
    for y in 0..n_i {
        for x in 0..n_i {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = (y - dy).rem_euclid(n_i);
                    let sx = (x - dx).rem_euclid(n_i);
                    acc += kernel.at(dy, dx) * src[(sy * n_i + sx) as usize];
                }
            }
            out[(y * n_i + x) as usize] = acc;
        }
    }
    out
}

fn max_abs_diff(a: &GridState, b: &GridState) -> f64 {
    a.mass
        .iter()
        .zip(&b.mass)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn fft_convolution_and_step_match_direct_oracle() {
    let layout = GenomeLayout::default();
    let config = small_config(32, 13, 1);
    let n = config.grid_size;
    for bank in 0..20u64 {
        let theta = layout.sample_random(derive_seed(99, &[bank]));
        let sim = FlowLenia::from_genome(&config, &layout, &theta).unwrap();
        let state = GridState::seeded_patch(n, layout.channels, n, bank);
        let fast = sim.convolve(&state);
        let oracle: Vec<Vec<f64>> = sim
            .bank()
            .entries
            .iter()
            .map(|e| direct_convolution(&e.spatial, &state.mass[e.source], n))
            .collect();
        let conv_err = fast
            .iter()
            .zip(&oracle)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max);
        assert!(conv_err < 1e-5, "bank {bank}: convolution error {conv_err}");

        let stepped = sim.step(&state).unwrap();
        let reference = sim.advance(&state, &oracle).unwrap();
        let step_err = max_abs_diff(&stepped, &reference);
        assert!(step_err < 1e-5, "bank {bank}: step error {step_err}");
    }
}

#[test]
fn one_step_commutes_with_toroidal_shifts() {
    let layout = GenomeLayout::default();
    let config = small_config(48, 9, 1);
    for (i, (dy, dx)) in [(5isize, -7isize), (-13, 2), (24, 24)].into_iter().enumerate() {
        let theta = layout.sample_random(derive_seed(3, &[i as u64]));
        let sim = FlowLenia::from_genome(&config, &layout, &theta).unwrap();
        let state = GridState::seeded_patch(48, layout.channels, 20, i as u64);
        let a = sim.step(&state.shifted(dy, dx)).unwrap();
        let b = sim.step(&state).unwrap().shifted(dy, dx);
        let err = max_abs_diff(&a, &b);
        assert!(err < 1e-5, "shift ({dy}, {dx}): {err}");
    }
}

#[test]
fn identical_inputs_give_bit_identical_rollouts() {
    let layout = GenomeLayout::default();
    let config = small_config(32, 6, 30);
    let theta = layout.sample_random(11);
    let a = simulate(&theta, &layout, &config).unwrap();
    let b = simulate(&theta, &layout, &config).unwrap();
    assert_eq!(a.image.content_hash(), b.image.content_hash());
    assert_eq!(a.final_state, b.final_state);
}

#[test]
fn zero_initial_mass_renders_black() {
    let layout = GenomeLayout::default();
    let config = small_config(32, 6, 10);
    let sim = FlowLenia::from_genome(&config, &layout, &layout.sample_random(1)).unwrap();
    let rollout = sim.run_from(GridState::zeros(32, layout.channels), 10);
    assert_eq!(rollout.image, BehaviorImage::black());
    assert_eq!(rollout.final_state.total_mass(), 0.0);
}

#[test]
fn rendered_images_are_128_square_in_unit_range() {
    let layout = GenomeLayout::default();
    let config = small_config(32, 6, 5);
    let image = simulate(&layout.sample_random(2), &layout, &config).unwrap().image;
    assert_eq!(image.pixels().len(), 128 * 128 * 3);
    assert!(image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    let mut saturated = GridState::zeros(32, 3);
    saturated.mass[1][0] = 5.0;
    assert_eq!(render(&saturated, 2.0).get(0, 0, 1), 1.0);
}

fn kernel_digest(kernel: &SpatialKernel) -> String {
    let mut h = Sha256::new();
    for v in &kernel.values {
        h.update(format!("{v:.12e}\n").as_bytes());
    }
    hex(&h.finalize())
}

/// Hash of the quantized image, which is what gets written to disk.
fn rgb8_digest(image: &BehaviorImage) -> String {
    hex(&Sha256::digest(image.to_rgb8()))
}

const GOLDEN_KERNEL: &str = "1fc53eabcc4a72ae71078f8cbf89913a551ebaed11352d2a5f0806623b52837b";
const GOLDEN_IMAGES: [&str; 3] = [
    "e74b84b16e57de280d912a4f43f918a45041f944f66e3a34c3c34f8eb218b00d",
    "87994dbceaada579efe27c446bca5b8a985183a936278d3c2abbc7a2c3009b68",
    "8e115ffe5b99959d4702041f5433e0cdef1a473ecfb44e5a95f6627bcc9bb6fa",
];

#[test]
fn golden_kernel_for_a_fixed_genome() {
    let layout = GenomeLayout::default();
    let params = layout.decode(&layout.sample_random(0));
    let digest = kernel_digest(&spatial_kernel(&params.kernels[0], 13));
    assert_eq!(digest, GOLDEN_KERNEL);
}

#[test]
fn golden_images_for_three_genomes_drawn_with_seed_zero() {
    let layout = GenomeLayout::default();
    let config = small_config(64, 13, 100);
    for (i, golden) in GOLDEN_IMAGES.iter().enumerate() {
        let theta = layout.sample_random(derive_seed(0, &[i as u64]));
        let image = simulate(&theta, &layout, &config).unwrap().image;
        assert_eq!(rgb8_digest(&image), *golden, "genome {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mass_is_conserved_and_nonnegative(seed in any::<u64>()) {
        let layout = GenomeLayout::default();
        let config = small_config(32, 6, 40);
        let sim = FlowLenia::from_genome(&config, &layout, &layout.sample_random(seed)).unwrap();
        let init = sim.initial_state();
        let m0 = init.total_mass();
        let rollout = sim.run_from(init, config.steps);
        prop_assert!(rollout.truncated_at.is_none());
        let drift = (rollout.final_state.total_mass() - m0).abs() / m0;
        prop_assert!(drift < 1e-3, "drift {}", drift);
        prop_assert!(rollout.final_state.min_value() >= 0.0);
    }

    #[test]
    fn shifting_the_state_shifts_the_step(dy in -16isize..16, dx in -16isize..16, seed in 0u64..1000) {
        let layout = GenomeLayout::default();
        let config = small_config(32, 6, 1);
        let sim = FlowLenia::from_genome(&config, &layout, &layout.sample_random(seed)).unwrap();
        let state = GridState::seeded_patch(32, layout.channels, 12, seed);
        let a = sim.step(&state.shifted(dy, dx)).unwrap();
        let b = sim.step(&state).unwrap().shifted(dy, dx);
        prop_assert!(max_abs_diff(&a, &b) < 1e-5);
    }
}
