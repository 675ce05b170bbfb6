//! Real scanner noise, replayed onto synthetic samples.
//!
//! A noise map is the residual field of a scan of a flat board after removing
//! its best-fit plane. Training patches are random crops of those maps with
//! independent random horizontal and vertical flips; values are never
//! rescaled or resampled.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{crop, flip, FlipAxis, Grid, Point3, ResidualGrid, SurfaceGrid};
use crate::preprocess::canonicalize;
use crate::synth::sample_rng;

/// Plane-free residual field of one flat-board scan, in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMap {
    pub residuals: ResidualGrid,
    pub source: String,
}

impl NoiseMap {
    pub fn dims(&self) -> (usize, usize) {
        self.residuals.dims()
    }

    pub fn mean(&self) -> f64 {
        let s: f64 = self.residuals.as_slice().iter().map(|&v| v as f64).sum();
        s / self.residuals.len() as f64
    }
}

/// Remove the total-least-squares plane of a flat-board scan and keep the
/// signed distances from it.
pub fn ingest_flat_scan(cloud: &SurfaceGrid, source: impl Into<String>) -> Result<NoiseMap> {
    let (aligned, _, _) = canonicalize(cloud)?;
    let n = aligned.len() as f64;
    let mean_z = aligned.iter().map(|p| p.z).sum::<f64>() / n;
    let residuals = aligned.points.map(|p| (p.z - mean_z) as f32);
    Ok(NoiseMap {
        residuals,
        source: source.into(),
    })
}

/// Add a noise patch to the z coordinate of every point.
pub fn apply_patch(surface: &SurfaceGrid, patch: &ResidualGrid) -> Result<SurfaceGrid> {
    if patch.dims() != surface.dims() {
        return Err(Error::DimensionMismatch {
            expected: surface.dims(),
            found: patch.dims(),
        });
    }
    let mut points = surface.points.clone();
    for (p, &n) in points.as_mut_slice().iter_mut().zip(patch.as_slice()) {
        p.z += n as f64;
    }
    Ok(SurfaceGrid::new(points, surface.pitch))
}

/// Parameters of [`synthetic_flat_scan`]. Lengths in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatScanModel {
    pub width: usize,
    pub height: usize,
    pub pitch: f64,
    /// Fringe ripple amplitude and wavelength ranges.
    pub ripple_amplitude: (f64, f64),
    pub ripple_wavelength: (f64, f64),
    /// Slow waviness amplitude and wavelength ranges.
    pub wave_amplitude: (f64, f64),
    pub wave_wavelength: (f64, f64),
    /// Per-point speckle standard deviation.
    pub speckle: f64,
    /// Board tilt limit (slope, dimensionless) removed again on ingestion.
    pub max_tilt: f64,
}

impl Default for FlatScanModel {
    fn default() -> Self {
        Self {
            width: 320,
            height: 192,
            pitch: 3.0,
            ripple_amplitude: (0.4, 1.0),
            ripple_wavelength: (30.0, 60.0),
            wave_amplitude: (0.2, 0.5),
            wave_wavelength: (150.0, 400.0),
            speckle: 0.1,
            max_tilt: 0.05,
        }
    }
}

/// Stand-in for a scan of a flat board: a tilted plane carrying periodic
/// fringe artefacts, slow waviness and speckle.
pub fn synthetic_flat_scan(model: &FlatScanModel, seed: u64, index: u64) -> SurfaceGrid {
    let mut rng = sample_rng(seed, index);
    let wave = |amp: (f64, f64), len: (f64, f64), rng: &mut rand_chacha::ChaCha20Rng| {
        let a = rng.random_range(amp.0..=amp.1);
        let k = TAU / rng.random_range(len.0..=len.1);
        let dir = rng.random_range(0.0..TAU);
        let phase = rng.random_range(0.0..TAU);
        (a, k * dir.cos(), k * dir.sin(), phase)
    };
    let components = [
        wave(model.ripple_amplitude, model.ripple_wavelength, &mut rng),
        wave(model.wave_amplitude, model.wave_wavelength, &mut rng),
        wave(model.wave_amplitude, model.wave_wavelength, &mut rng),
    ];
    let (tx, ty) = (
        rng.random_range(-model.max_tilt..=model.max_tilt),
        rng.random_range(-model.max_tilt..=model.max_tilt),
    );
    let speckle = Normal::new(0.0, model.speckle.max(0.0)).expect("finite speckle");
    let points = Grid::from_fn(model.width, model.height, |c, r| {
        let (x, y) = (c as f64 * model.pitch, r as f64 * model.pitch);
        let mut z = tx * x + ty * y;
        for &(a, kx, ky, ph) in &components {
            z += a * (kx * x + ky * y + ph).sin();
        }
        z += speckle.sample(&mut rng);
        Point3::new(x, y, z)
    });
    SurfaceGrid::new(points, model.pitch)
}

/// Which augmentations `sample_patch` may apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseAugment {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl Default for NoiseAugment {
    fn default() -> Self {
        Self {
            flip_horizontal: true,
            flip_vertical: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    maps: Vec<NoiseMap>,
    pub augment: NoiseAugment,
}

impl NoiseBank {
    pub fn new(maps: Vec<NoiseMap>, augment: NoiseAugment) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Empty("noise bank has no maps"));
        }
        Ok(Self { maps, augment })
    }

    pub fn maps(&self) -> &[NoiseMap] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// A `w x h` crop of a uniformly chosen map (among those large enough),
    /// uniformly placed, each flip applied with probability 1/2 when enabled.
    pub fn sample_patch(&self, w: usize, h: usize, rng: &mut impl Rng) -> Result<ResidualGrid> {
        let eligible: Vec<&NoiseMap> = self
            .maps
            .iter()
            .filter(|m| m.residuals.width() >= w && m.residuals.height() >= h)
            .collect();
        if eligible.is_empty() || w == 0 || h == 0 {
            return Err(Error::NoNoiseMap { w, h });
        }
        let map = eligible[rng.random_range(0..eligible.len())];
        let (mw, mh) = map.dims();
        let ox = rng.random_range(0..=mw - w);
        let oy = rng.random_range(0..=mh - h);
        let mut patch: Grid<f32> = crop(&map.residuals, (ox, oy), (w, h))?;
        if self.augment.flip_horizontal && rng.random_bool(0.5) {
            patch = flip(&patch, FlipAxis::Horizontal);
        }
        if self.augment.flip_vertical && rng.random_bool(0.5) {
            patch = flip(&patch, FlipAxis::Vertical);
        }
        Ok(patch)
    }
}
