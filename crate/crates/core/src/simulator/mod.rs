//! Mass-conserving Flow Lenia.
//!
//! One step:
//! 1. convolve each kernel's source channel (FFT, toroidal),
//! 2. map through the kernel's growth curve and sum the weighted results into
//!    an affinity field per target channel,
//! 3. build the flow `F = (1 - a) grad(U) - a grad(total mass)` with
//!    `a = clip((mass / critical_mass)^n, 0, 1)`,
//! 4. move every cell's mass by `dt * F` and redistribute it onto the cells
//!    overlapped by a square of half-side `spread` (reintegration tracking).
//!
//! Step 4 hands out each cell's mass with weights that sum to one, so total
//! mass is conserved up to rounding.

mod fft;
pub mod kernel;

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::behavior::BehaviorImage;
use crate::genome::{Genome, GenomeLayout, PhysicalParams};
use crate::rng::rng_from_seed;

pub use fft::Fft2;
pub use kernel::{build_kernels, BankEntry, KernelBank, SpatialKernel};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite mass after step {step}")]
    NonFinite { step: usize },
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Grid side length (square torus).
    pub grid_size: usize,
    pub steps: usize,
    pub dt: f64,
    /// Maximum kernel radius in cells.
    pub kernel_radius: usize,
    /// Exponent of the concentration term.
    pub flow_exponent: f64,
    /// Per-axis displacement cap per step; defaults to `kernel_radius - 1`.
    pub max_displacement: Option<f64>,
    /// Half-side of the square each cell's mass is spread over when moved.
    pub spread: f64,
    /// Side of the centred random initial patch.
    pub init_patch: usize,
    pub init_seed: u64,
    /// Mass per cell that renders at full intensity.
    pub saturation: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid_size: 128,
            steps: 500,
            dt: 0.2,
            kernel_radius: 13,
            flow_exponent: 2.0,
            max_displacement: None,
            spread: 0.65,
            init_patch: 40,
            init_seed: 0,
            saturation: 2.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.kernel_radius == 0 {
            return bad("kernel_radius must be >= 1");
        }
        if self.grid_size < 2 * self.kernel_radius + 1 {
            return bad("grid_size must be at least 2 * kernel_radius + 1");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.spread >= 0.5) {
            return bad("spread must be >= 0.5");
        }
        if !(self.saturation > 0.0) {
            return bad("saturation must be positive");
        }
        if self.max_displacement.is_some_and(|d| !(d >= 0.0)) {
            return bad("max_displacement must be non-negative");
        }
        Ok(())
    }

    pub fn displacement_cap(&self) -> f64 {
        self.max_displacement
            .unwrap_or((self.kernel_radius as f64 - 1.0).max(0.0))
    }
}

/// Channel-major mass field on a square torus.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub size: usize,
    pub channels: usize,
    /// `mass[c][y * size + x]`
    pub mass: Vec<Vec<f64>>,
    pub step_index: usize,
}

impl GridState {
    pub fn zeros(size: usize, channels: usize) -> Self {
        Self {
            size,
            channels,
            mass: vec![vec![0.0; size * size]; channels],
            step_index: 0,
        }
    }

    /// Centred `patch x patch` square of uniform random mass in `[0, 1)`.
    pub fn seeded_patch(size: usize, channels: usize, patch: usize, seed: u64) -> Self {
        let mut state = Self::zeros(size, channels);
        let patch = patch.min(size);
        let start = (size - patch) / 2;
        let mut rng = rng_from_seed(seed);
        for field in state.mass.iter_mut() {
            for y in start..start + patch {
                for x in start..start + patch {
                    field[y * size + x] = rng.random::<f64>();
                }
            }
        }
        state
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().flat_map(|c| c.iter()).sum()
    }

    pub fn min_value(&self) -> f64 {
        self.mass
            .iter()
            .flat_map(|c| c.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.mass.iter().flat_map(|c| c.iter()).all(|v| v.is_finite())
    }

    /// Cyclic shift by `(dy, dx)`.
    pub fn shifted(&self, dy: isize, dx: isize) -> Self {
        let n = self.size as isize;
        let mass = self
            .mass
            .iter()
            .map(|field| {
                let mut out = vec![0.0; field.len()];
                for y in 0..n {
                    for x in 0..n {
                        let ty = (y + dy).rem_euclid(n);
                        let tx = (x + dx).rem_euclid(n);
                        out[(ty * n + tx) as usize] = field[(y * n + x) as usize];
                    }
                }
                out
            })
            .collect();
        Self { mass, ..self.clone() }
    }

    /// Raw dump: magic `FLST`, then H, W, C as little-endian u32, then
    /// `H*W*C` little-endian f32 in `(y, x, c)` order.
    pub fn write_raw(&self, path: &Path) -> Result<(), SimError> {
        let mut buf = Vec::with_capacity(16 + 4 * self.size * self.size * self.channels);
        buf.extend_from_slice(b"FLST");
        for d in [self.size, self.size, self.channels] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for i in 0..self.size * self.size {
            for c in 0..self.channels {
                buf.extend_from_slice(&(self.mass[c][i] as f32).to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }
}

/// Per-channel division by the saturation constant, clipped to `[0, 1]` and
/// nearest-neighbour resampled to 128x128. Channels beyond the third are
/// dropped; a single channel renders grey.
pub fn render(state: &GridState, saturation: f64) -> BehaviorImage {
    let out = BehaviorImage::SIZE;
    let mut pixels = vec![0.0; BehaviorImage::LEN];
    for y in 0..out {
        let sy = y * state.size / out;
        for x in 0..out {
            let sx = x * state.size / out;
            let cell = sy * state.size + sx;
            for rgb in 0..3 {
                let c = if state.channels == 1 { 0 } else { rgb };
                if c < state.channels {
                    pixels[(y * out + x) * 3 + rgb] = (state.mass[c][cell] / saturation).clamp(0.0, 1.0);
                }
            }
        }
    }
    BehaviorImage::from_pixels(pixels)
}

/// Output of one rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub image: BehaviorImage,
    pub final_state: GridState,
    /// Step at which a non-finite state stopped the rollout, if any.
    pub truncated_at: Option<usize>,
}

/// A parameterized Flow Lenia world ready to step.
#[derive(Debug, Clone)]
pub struct FlowLenia {
    config: SimConfig,
    channels: usize,
    bank: KernelBank,
    fft: Fft2,
}

impl FlowLenia {
    pub fn new(config: &SimConfig, params: &PhysicalParams, channels: usize) -> Result<Self, SimError> {
        config.validate()?;
        if let Some(k) = params.kernels.iter().find(|k| k.source >= channels || k.target >= channels) {
            return Err(SimError::Config(format!(
                "kernel routes {} -> {} but only {channels} channels exist",
                k.source, k.target
            )));
        }
        let n = config.grid_size;
        let fft = Fft2::new(n, n);
        let bank = build_kernels(params, config.kernel_radius, &fft, n, n);
        Ok(Self { config: config.clone(), channels, bank, fft })
    }

    pub fn from_genome(config: &SimConfig, layout: &GenomeLayout, genome: &Genome) -> Result<Self, SimError> {
        genome
            .check_layout(layout)
            .map_err(|e| SimError::Config(e.to_string()))?;
        Self::new(config, &layout.decode(genome), layout.channels)
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn initial_state(&self) -> GridState {
        GridState::seeded_patch(
            self.config.grid_size,
            self.channels,
            self.config.init_patch,
            self.config.init_seed,
        )
    }

    /// Circular convolution of each kernel with its source channel, via FFT.
    pub fn convolve(&self, state: &GridState) -> Vec<Vec<f64>> {
        let len = self.fft.len();
        let spectra: Vec<Vec<Complex64>> = state
            .mass
            .iter()
            .map(|field| {
                let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                self.fft.forward(&mut buf);
                buf
            })
            .collect();
        let entries = &self.bank.entries;
        let mut out = vec![Vec::new(); entries.len()];
        // Both kernels and fields are real, so each product spectrum is
        // Hermitian; two of them share one inverse transform as re + i*im.
        let mut buf = vec![Complex64::default(); len];
        for first in (0..entries.len()).step_by(2) {
            let a = &entries[first];
            let sa = &spectra[a.source];
            match (first + 1 < entries.len()).then_some(first + 1) {
                Some(j) => {
                    let b = &entries[j];
                    let sb = &spectra[b.source];
                    for i in 0..len {
                        let pa = sa[i] * a.spectrum[i];
                        let pb = sb[i] * b.spectrum[i];
                        buf[i] = pa + Complex64::new(-pb.im, pb.re);
                    }
                    self.fft.inverse(&mut buf);
                    out[first] = buf.iter().map(|c| c.re).collect();
                    out[j] = buf.iter().map(|c| c.im).collect();
                }
                None => {
                    for i in 0..len {
                        buf[i] = sa[i] * a.spectrum[i];
                    }
                    self.fft.inverse(&mut buf);
                    out[first] = buf.iter().map(|c| c.re).collect();
                }
            }
        }
        out
    }

    /// Completes a step given the per-kernel convolutions of `state`.
    pub fn advance(&self, state: &GridState, convolutions: &[Vec<f64>]) -> Result<GridState, SimError> {
        let n = state.size;
        let len = n * n;
        let mut affinity = vec![vec![0.0; len]; self.channels];
        for (entry, conv) in self.bank.entries.iter().zip(convolutions) {
            let target = &mut affinity[entry.target];
            for (u, &c) in target.iter_mut().zip(conv) {
                *u += entry.weight * entry.growth(c);
            }
        }
        let mut total = vec![0.0; len];
        for field in &state.mass {
            for (t, &m) in total.iter_mut().zip(field) {
                *t += m;
            }
        }
        let (gty, gtx) = sobel(&total, n);
        let cap = self.config.displacement_cap();
        let dt = self.config.dt;
        let exponent = self.config.flow_exponent;
        let critical = self.bank.critical_mass;
        let spread = self.config.spread;
        let mut next = GridState::zeros(n, self.channels);
        next.step_index = state.step_index + 1;
        for c in 0..self.channels {
            let (guy, gux) = sobel(&affinity[c], n);
            let mass = &state.mass[c];
            let dest = &mut next.mass[c];
            for y in 0..n {
                for x in 0..n {
                    let i = y * n + x;
                    let m = mass[i];
                    if m == 0.0 {
                        continue;
                    }
                    let a = (m / critical).powf(exponent).clamp(0.0, 1.0);
                    let fy = (1.0 - a) * guy[i] - a * gty[i];
                    let fx = (1.0 - a) * gux[i] - a * gtx[i];
                    let dy = (dt * fy).clamp(-cap, cap);
                    let dx = (dt * fx).clamp(-cap, cap);
                    scatter(dest, n, y as f64 + dy, x as f64 + dx, spread, m);
                }
            }
        }
        if !next.is_finite() {
            return Err(SimError::NonFinite { step: next.step_index });
        }
        Ok(next)
    }

    pub fn step(&self, state: &GridState) -> Result<GridState, SimError> {
        let conv = self.convolve(state);
        self.advance(state, &conv)
    }

    /// Runs `steps` updates from `init`. A non-finite update stops the rollout
    /// and the last finite state is kept.
    pub fn run_from(&self, init: GridState, steps: usize) -> Rollout {
        let mut state = init;
        let mut truncated_at = None;
        for _ in 0..steps {
            match self.step(&state) {
                Ok(next) => state = next,
                Err(SimError::NonFinite { step }) => {
                    log::warn!("rollout truncated at step {step}: non-finite mass");
                    truncated_at = Some(step);
                    break;
                }
                Err(e) => unreachable!("step only fails on non-finite mass: {e}"),
            }
        }
        let image = render(&state, self.config.saturation);
        Rollout { image, final_state: state, truncated_at }
    }

    pub fn run(&self) -> Rollout {
        self.run_from(self.initial_state(), self.config.steps)
    }
}

/// Decodes `genome` and runs a full rollout from the seeded initial state.
pub fn simulate(genome: &Genome, layout: &GenomeLayout, config: &SimConfig) -> Result<Rollout, SimError> {
    Ok(FlowLenia::from_genome(config, layout, genome)?.run())
}

/// Unnormalized Sobel gradient on a torus; returns `(d/dy, d/dx)`.
pub fn sobel(field: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gy = vec![0.0; n * n];
    let mut gx = vec![0.0; n * n];
    for y in 0..n {
        let ym = (y + n - 1) % n;
        let yp = (y + 1) % n;
        for x in 0..n {
            let xm = (x + n - 1) % n;
            let xp = (x + 1) % n;
            let f = |yy: usize, xx: usize| field[yy * n + xx];
            gx[y * n + x] = (f(ym, xp) - f(ym, xm)) + 2.0 * (f(y, xp) - f(y, xm)) + (f(yp, xp) - f(yp, xm));
            gy[y * n + x] = (f(yp, xm) - f(ym, xm)) + 2.0 * (f(yp, x) - f(ym, x)) + (f(yp, xp) - f(ym, xp));
        }
    }
    (gy, gx)
}

/// Overlap of the interval `[centre - spread, centre + spread]` with each unit
/// cell it touches, as `(cell, length)` pairs.
fn overlaps(centre: f64, spread: f64) -> impl Iterator<Item = (i64, f64)> {
    let first = (centre - spread + 0.5).floor() as i64;
    let last = (centre + spread + 0.5).floor() as i64;
    let full = (2.0 * spread).min(1.0);
    (first..=last).filter_map(move |q| {
        let len = (0.5 + spread - (q as f64 - centre).abs()).clamp(0.0, full);
        (len > 0.0).then_some((q, len))
    })
}

fn scatter(dest: &mut [f64], n: usize, cy: f64, cx: f64, spread: f64, mass: f64) {
    let ys: SmallVec<[(i64, f64); 4]> = overlaps(cy, spread).collect();
    let xs: SmallVec<[(i64, f64); 4]> = overlaps(cx, spread).collect();
    let sy: f64 = ys.iter().map(|p| p.1).sum();
    let sx: f64 = xs.iter().map(|p| p.1).sum();
    let norm = mass / (sy * sx);
    let ni = n as i64;
    for &(qy, wy) in ys.iter() {
        let row = qy.rem_euclid(ni) as usize * n;
        let wy = wy * norm;
        for &(qx, wx) in xs.iter() {
            dest[row + qx.rem_euclid(ni) as usize] += wy * wx;
        }
    }
}
