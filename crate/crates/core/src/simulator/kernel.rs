use log::warn;
use rustfft::num_complex::Complex64;

use super::fft::Fft2;
use crate::genome::{KernelParams, PhysicalParams};

/// Ring widths below this are floored.
pub const MIN_RING_WIDTH: f64 = 1e-3;

/// Square `(2R+1) x (2R+1)` spatial kernel centred on the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKernel {
    pub radius: usize,
    /// Row-major, `values[(dy + R) * (2R + 1) + (dx + R)]`.
    pub values: Vec<f64>,
}

impl SpatialKernel {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        let side = self.side() as isize;
        self.values[((dy + r) * side + (dx + r)) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct BankEntry {
    pub spatial: SpatialKernel,
    /// Transform of the kernel wrapped onto the simulation grid.
    pub spectrum: Vec<Complex64>,
    pub source: usize,
    pub target: usize,
    pub weight: f64,
    pub growth_mean: f64,
    pub growth_std: f64,
}

impl BankEntry {
    /// Growth mapping applied to a convolution value, in `[-1, 1]`.
    pub fn growth(&self, u: f64) -> f64 {
        let z = (u - self.growth_mean) / self.growth_std;
        2.0 * (-0.5 * z * z).exp() - 1.0
    }
}

#[derive(Debug, Clone)]
pub struct KernelBank {
    pub entries: Vec<BankEntry>,
    pub critical_mass: f64,
}

/// Ring-sum profile evaluated at normalized distance `d` (0 at the centre,
/// 1 at the kernel edge).
fn ring_profile(kernel: &KernelParams, d: f64) -> f64 {
    kernel
        .rings
        .iter()
        .map(|ring| {
            let z = (d - ring.center) / ring.width.max(MIN_RING_WIDTH);
            ring.height * (-0.5 * z * z).exp()
        })
        .sum()
}

/// Builds the normalized spatial kernel for one kernel descriptor.
///
/// Degenerate descriptors (all ring heights zero, or a profile that vanishes
/// on every cell inside the radius) fall back to a uniform disc.
pub fn spatial_kernel(kernel: &KernelParams, max_radius: usize) -> SpatialKernel {
    if kernel.rings.iter().any(|r| r.width < MIN_RING_WIDTH) {
        warn!("ring width below {MIN_RING_WIDTH}, flooring");
    }
    let r = max_radius as isize;
    let side = 2 * max_radius + 1;
    let reach = (kernel.radius * max_radius as f64).max(1e-9);
    let mut values = vec![0.0; side * side];
    let mut inside = vec![false; side * side];
    for dy in -r..=r {
        for dx in -r..=r {
            let dist = ((dy * dy + dx * dx) as f64).sqrt();
            let d = dist / reach;
            let idx = ((dy + r) as usize) * side + (dx + r) as usize;
            if d <= 1.0 && dist <= max_radius as f64 {
                inside[idx] = true;
                values[idx] = ring_profile(kernel, d);
            }
        }
    }
    let total: f64 = values.iter().sum();
    let all_heights_zero = kernel.rings.iter().all(|ring| ring.height == 0.0);
    if all_heights_zero || !(total > 0.0) || !total.is_finite() {
        warn!("degenerate kernel profile, substituting a uniform disc");
        let count = inside.iter().filter(|&&b| b).count() as f64;
        for (v, &i) in values.iter_mut().zip(&inside) {
            *v = if i { 1.0 / count } else { 0.0 };
        }
    } else {
        for v in values.iter_mut() {
            *v /= total;
        }
    }
    SpatialKernel { radius: max_radius, values }
}

/// Wraps a spatial kernel onto a torus grid and transforms it.
pub fn kernel_spectrum(kernel: &SpatialKernel, fft: &Fft2, height: usize, width: usize) -> Vec<Complex64> {
    let mut grid = vec![Complex64::default(); height * width];
    let r = kernel.radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let y = dy.rem_euclid(height as isize) as usize;
            let x = dx.rem_euclid(width as isize) as usize;
            grid[y * width + x].re += kernel.at(dy, dx);
        }
    }
    fft.forward(&mut grid);
    grid
}

pub fn build_kernels(params: &PhysicalParams, max_radius: usize, fft: &Fft2, height: usize, width: usize) -> KernelBank {
    let entries = params
        .kernels
        .iter()
        .map(|k| {
            let spatial = spatial_kernel(k, max_radius);
            let spectrum = kernel_spectrum(&spatial, fft, height, width);
            BankEntry {
                spatial,
                spectrum,
                source: k.source,
                target: k.target,
                weight: k.weight,
                growth_mean: k.growth_mean,
                growth_std: k.growth_std,
            }
        })
        .collect();
    KernelBank { entries, critical_mass: params.critical_mass }
}
