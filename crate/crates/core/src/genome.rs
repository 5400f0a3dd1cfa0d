//! Flow Lenia parameter vectors.
//!
//! A [`Genome`] is a flat vector in normalized `[0, 1]` coordinates. The
//! [`GenomeLayout`] says which slot holds which physical parameter and maps each
//! slot affinely onto its physical range.
//!
//! Default layout: 18 kernels, each with a relative radius, three rings
//! (height, center, width), growth mean, growth std and kernel weight
//! (13 slots), followed by one global slot for the critical mass of the flow
//! concentration term: `18 * 13 + 1 = 235`. Kernels are routed over the nine
//! ordered channel pairs of a 3-channel world, two kernels per pair. Setting
//! `evolve_routing` adds two per-kernel selector slots decoded by binning.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;

#[derive(Debug, Error, PartialEq)]
pub enum GenomeError {
    #[error("mutation sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("genome has {actual} components, layout expects {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("component {index} = {value} is outside [0, 1]")]
    OutOfBounds { index: usize, value: f64 },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
}

/// Physical range of one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    const fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn decode(&self, unit: f64) -> f64 {
        self.lower + unit * (self.upper - self.lower)
    }

    pub fn encode(&self, physical: f64) -> f64 {
        ((physical - self.lower) / (self.upper - self.lower)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Radius,
    RingHeight,
    RingCenter,
    RingWidth,
    GrowthMean,
    GrowthStd,
    Weight,
    SourceChannel,
    TargetChannel,
    CriticalMass,
}

impl SlotKind {
    pub fn bounds(self, channels: usize) -> Bounds {
        match self {
            SlotKind::Radius => Bounds::new(0.2, 1.0),
            SlotKind::RingHeight => Bounds::new(0.001, 1.0),
            SlotKind::RingCenter => Bounds::new(0.0, 1.0),
            SlotKind::RingWidth => Bounds::new(0.01, 0.5),
            SlotKind::GrowthMean => Bounds::new(0.05, 0.5),
            SlotKind::GrowthStd => Bounds::new(0.001, 0.18),
            SlotKind::Weight => Bounds::new(0.01, 1.0),
            SlotKind::SourceChannel | SlotKind::TargetChannel => {
                Bounds::new(0.0, channels as f64)
            }
            SlotKind::CriticalMass => Bounds::new(0.5, 3.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenomeLayout {
    pub kernel_count: usize,
    pub rings_per_kernel: usize,
    pub channels: usize,
    /// Evolve per-kernel source/target channels instead of the fixed routing.
    pub evolve_routing: bool,
}

impl Default for GenomeLayout {
    fn default() -> Self {
        Self {
            kernel_count: 18,
            rings_per_kernel: 3,
            channels: 3,
            evolve_routing: false,
        }
    }
}

pub const GLOBAL_SLOTS: usize = 1;

impl GenomeLayout {
    pub fn validate(&self) -> Result<(), GenomeError> {
        if self.kernel_count == 0 {
            return Err(GenomeError::InvalidLayout("kernel_count must be >= 1".into()));
        }
        if self.rings_per_kernel == 0 {
            return Err(GenomeError::InvalidLayout("rings_per_kernel must be >= 1".into()));
        }
        if self.channels == 0 {
            return Err(GenomeError::InvalidLayout("channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn slots_per_kernel(&self) -> usize {
        let routing = if self.evolve_routing { 2 } else { 0 };
        1 + 3 * self.rings_per_kernel + 3 + routing
    }

    pub fn total_dim(&self) -> usize {
        self.kernel_count * self.slots_per_kernel() + GLOBAL_SLOTS
    }

    /// Slot kinds in storage order.
    pub fn slots(&self) -> Vec<SlotKind> {
        let mut out = Vec::with_capacity(self.total_dim());
        for _ in 0..self.kernel_count {
            out.push(SlotKind::Radius);
            out.extend(std::iter::repeat_n(SlotKind::RingHeight, self.rings_per_kernel));
            out.extend(std::iter::repeat_n(SlotKind::RingCenter, self.rings_per_kernel));
            out.extend(std::iter::repeat_n(SlotKind::RingWidth, self.rings_per_kernel));
            out.push(SlotKind::GrowthMean);
            out.push(SlotKind::GrowthStd);
            out.push(SlotKind::Weight);
            if self.evolve_routing {
                out.push(SlotKind::SourceChannel);
                out.push(SlotKind::TargetChannel);
            }
        }
        out.push(SlotKind::CriticalMass);
        out
    }

    /// Fixed routing: kernel `i` reads channel `p / C` and writes `p % C`
    /// with `p = i mod C²`.
    pub fn fixed_route(&self, kernel: usize) -> (usize, usize) {
        let c = self.channels;
        let pair = kernel % (c * c);
        (pair / c, pair % c)
    }

    /// Decodes normalized coordinates into physical parameters.
    pub fn decode(&self, genome: &Genome) -> PhysicalParams {
        debug_assert_eq!(genome.len(), self.total_dim());
        let c = self.channels;
        let bin = |physical: f64| (physical.floor() as usize).min(c - 1);
        let mut it = genome.values().iter().copied();
        let mut next = |kind: SlotKind| kind.bounds(c).decode(it.next().expect("layout length"));
        let mut kernels = Vec::with_capacity(self.kernel_count);
        for k in 0..self.kernel_count {
            let radius = next(SlotKind::Radius);
            let heights: Vec<f64> =
                (0..self.rings_per_kernel).map(|_| next(SlotKind::RingHeight)).collect();
            let centers: Vec<f64> =
                (0..self.rings_per_kernel).map(|_| next(SlotKind::RingCenter)).collect();
            let widths: Vec<f64> =
                (0..self.rings_per_kernel).map(|_| next(SlotKind::RingWidth)).collect();
            let growth_mean = next(SlotKind::GrowthMean);
            let growth_std = next(SlotKind::GrowthStd);
            let weight = next(SlotKind::Weight);
            let (source, target) = if self.evolve_routing {
                let s = next(SlotKind::SourceChannel);
                let t = next(SlotKind::TargetChannel);
                (bin(s), bin(t))
            } else {
                self.fixed_route(k)
            };
            let rings = heights
                .into_iter()
                .zip(centers)
                .zip(widths)
                .map(|((height, center), width)| Ring { height, center, width })
                .collect();
            kernels.push(KernelParams {
                radius,
                rings,
                growth_mean,
                growth_std,
                weight,
                source,
                target,
            });
        }
        let critical_mass = next(SlotKind::CriticalMass);
        PhysicalParams { kernels, critical_mass }
    }

    /// Inverse of [`GenomeLayout::decode`]. Channel selectors encode to the
    /// centre of their bin.
    pub fn encode(&self, params: &PhysicalParams) -> Genome {
        let c = self.channels;
        let mut values = Vec::with_capacity(self.total_dim());
        for kernel in &params.kernels {
            values.push(SlotKind::Radius.bounds(c).encode(kernel.radius));
            values.extend(kernel.rings.iter().map(|r| SlotKind::RingHeight.bounds(c).encode(r.height)));
            values.extend(kernel.rings.iter().map(|r| SlotKind::RingCenter.bounds(c).encode(r.center)));
            values.extend(kernel.rings.iter().map(|r| SlotKind::RingWidth.bounds(c).encode(r.width)));
            values.push(SlotKind::GrowthMean.bounds(c).encode(kernel.growth_mean));
            values.push(SlotKind::GrowthStd.bounds(c).encode(kernel.growth_std));
            values.push(SlotKind::Weight.bounds(c).encode(kernel.weight));
            if self.evolve_routing {
                values.push((kernel.source as f64 + 0.5) / c as f64);
                values.push((kernel.target as f64 + 0.5) / c as f64);
            }
        }
        values.push(SlotKind::CriticalMass.bounds(c).encode(params.critical_mass));
        Genome { values }
    }

    pub fn sample_random(&self, seed: u64) -> Genome {
        let mut rng = rng_from_seed(seed);
        self.sample_with(&mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Genome {
        let values = (0..self.total_dim()).map(|_| rng.random::<f64>()).collect();
        Genome { values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pub height: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Kernel radius as a fraction of the simulator's maximum radius.
    pub radius: f64,
    pub rings: Vec<Ring>,
    pub growth_mean: f64,
    pub growth_std: f64,
    pub weight: f64,
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub kernels: Vec<KernelParams>,
    /// Mass at which the concentration term fully takes over the flow.
    pub critical_mass: f64,
}

/// Normalized parameter vector; every component lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Genome {
    values: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Genome {
    type Error = GenomeError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Genome::new(values)
    }
}

impl From<Genome> for Vec<f64> {
    fn from(g: Genome) -> Self {
        g.values
    }
}

impl Genome {
    pub fn new(values: Vec<f64>) -> Result<Self, GenomeError> {
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(GenomeError::OutOfBounds { index, value });
        }
        Ok(Self { values })
    }

    /// Clips every component into `[0, 1]`; non-finite components become 0.5.
    pub fn from_clipped(values: Vec<f64>) -> Self {
        let values = values
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.5 })
            .collect();
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_layout(&self, layout: &GenomeLayout) -> Result<(), GenomeError> {
        if self.len() != layout.total_dim() {
            return Err(GenomeError::LengthMismatch {
                expected: layout.total_dim(),
                actual: self.len(),
            });
        }
        Ok(())
    }

    /// Additive isotropic Gaussian mutation followed by clipping to `[0, 1]`.
    pub fn mutate(&self, sigma: f64, seed: u64) -> Result<Genome, GenomeError> {
        let mut rng = rng_from_seed(seed);
        self.mutate_with(sigma, &mut rng)
    }

    pub fn mutate_with<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Result<Genome, GenomeError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(GenomeError::InvalidSigma(sigma));
        }
        let noise = Normal::new(0.0, sigma).map_err(|_| GenomeError::InvalidSigma(sigma))?;
        let values = self
            .values
            .iter()
            .map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0))
            .collect();
        Ok(Genome { values })
    }
}
