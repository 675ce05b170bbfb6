//! Virtual dataset of dented curved panels with exact ground truth.
//!
//! A sample is built as
//!
//! ```text
//! z = αx² + βy²  +  deepest dent deformation  +  N(0, σ)  [+ replayed scanner noise]
//! ```
//!
//! over a jittered `w x h` lattice, labelled wherever a dent's support covers a
//! lattice point, and finally rotated rigidly about all three world axes.

use std::f64::consts::{E, PI};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMask, Point3, ResidualGrid, SurfaceGrid};
use crate::noisebank::NoiseBank;

/// Generator settings. Lengths in mm, angles in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub world_x: f64,
    pub world_y: f64,
    pub width: usize,
    pub height: usize,
    /// Probability of the first dent.
    pub dent_prob: f64,
    /// Dent `k+1` appears with probability `dent_prob · dent_decay^k`.
    pub dent_decay: f64,
    /// Gaussian white noise on z.
    pub sigma: f64,
    /// Uniform xy jitter amplitude as a fraction of the pitch.
    pub xy_jitter: f64,
    /// Per-axis rotation limits (x, y, z).
    pub rotation_limits: [f64; 3],
    /// Full dent length and width are each drawn from this range.
    pub dent_size: (f64, f64),
    pub dent_depth: (f64, f64),
    /// α and β are each drawn from this range (1/mm).
    pub curvature: (f64, f64),
    pub seed: u64,
}

/// Pitch of the full-resolution acquisition (500 mm over 960 px, 330 mm over 640 px).
pub const REFERENCE_PITCH: f64 = (500.0 / 960.0 + 330.0 / 640.0) / 2.0;

/// White noise level at the reference pitch when only Gaussian noise is used.
pub const REFERENCE_SIGMA: f64 = 2.0;

/// Rescale a per-point noise level to a coarser lattice: averaging `k²`
/// points per coarse cell divides σ by `k`.
pub fn scaled_sigma(sigma: f64, reference_pitch: f64, pitch: f64) -> f64 {
    sigma * reference_pitch / pitch
}

impl Default for SynthConfig {
    /// Desk-scale default: 160x96 lattice at 3 mm pitch.
    fn default() -> Self {
        Self {
            world_x: 480.0,
            world_y: 288.0,
            width: 160,
            height: 96,
            dent_prob: 0.9,
            dent_decay: 0.5,
            sigma: scaled_sigma(REFERENCE_SIGMA, REFERENCE_PITCH, 3.0),
            xy_jitter: 0.25,
            rotation_limits: [15.0; 3],
            dent_size: (20.0, 150.0),
            dent_depth: (0.5, 5.0),
            curvature: (-5e-4, 5e-4),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Full-resolution acquisition: 960x640 points over 500x330 mm.
    pub fn full_scale() -> Self {
        Self {
            world_x: 500.0,
            world_y: 330.0,
            width: 960,
            height: 640,
            sigma: REFERENCE_SIGMA,
            ..Self::default()
        }
    }

    pub fn pitch_x(&self) -> f64 {
        self.world_x / self.width as f64
    }

    pub fn pitch_y(&self) -> f64 {
        self.world_y / self.height as f64
    }

    pub fn pitch(&self) -> f64 {
        (self.pitch_x() + self.pitch_y()) / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(16) || !self.height.is_multiple_of(16) {
            return bad(format!("grid {}x{} must be positive multiples of 16", self.width, self.height));
        }
        if !(self.world_x > 0.0 && self.world_y > 0.0) {
            return bad("world size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dent_prob) {
            return bad(format!("dent probability {} outside [0,1]", self.dent_prob));
        }
        if !(0.0..1.0).contains(&self.dent_decay) {
            return bad(format!("dent decay {} outside [0,1)", self.dent_decay));
        }
        if !(self.sigma >= 0.0) || !(self.xy_jitter >= 0.0 && self.xy_jitter < 0.5) {
            return bad("sigma must be >= 0 and jitter in [0, 0.5)".into());
        }
        if self.rotation_limits.iter().any(|a| !(0.0..90.0).contains(a)) {
            return bad("rotation limits must be in [0, 90) degrees".into());
        }
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !range_ok(self.dent_size) || self.dent_size.0 <= 0.0 {
            return bad("dent size range must be positive and ordered".into());
        }
        if !range_ok(self.dent_depth) || self.dent_depth.0 <= 0.0 {
            return bad("dent depth range must be positive and ordered".into());
        }
        if !range_ok(self.curvature) {
            return bad("curvature range must be ordered".into());
        }
        Ok(())
    }
}

/// Curvature coefficients of the base parabola `z = αx² + βy²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseSurfaceParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BaseSurfaceParams {
    pub fn sample(config: &SynthConfig, rng: &mut impl Rng) -> Self {
        Self {
            alpha: uniform(rng, config.curvature),
            beta: uniform(rng, config.curvature),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// One dent: an elliptic bump centred at `(cx, cy)`, rotated by `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DentSpec {
    pub cx: f64,
    pub cy: f64,
    /// Half-extent along the dent's local x axis.
    pub scale_x: f64,
    /// Half-extent along the dent's local y axis.
    pub scale_y: f64,
    /// Peak depth (positive; applied downwards).
    pub depth: f64,
    pub theta: f64,
}

impl DentSpec {
    /// Normalised radius of `(x, y)` in the dent's rescaled frame; the support
    /// is `r < 1`.
    pub fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (c * dx + s * dy) / self.scale_x;
        let v = (-s * dx + c * dy) / self.scale_y;
        (u * u + v * v).sqrt()
    }

    pub fn covers(&self, x: f64, y: f64) -> bool {
        self.radius(x, y) < 1.0
    }

    /// Amplitude multiplying the unit bump so the peak equals `depth`.
    pub fn amplitude(&self) -> f64 {
        self.depth * E
    }

    pub fn from_preset(preset: DentPreset, cx: f64, cy: f64, theta: f64) -> Self {
        let (length, width, depth) = preset.dimensions();
        Self {
            cx,
            cy,
            scale_x: length / 2.0,
            scale_y: width / 2.0,
            depth,
            theta,
        }
    }
}

/// Physical dent samples (length, width, depth in mm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DentPreset {
    A,
    B,
    C,
    D,
}

impl DentPreset {
    pub const ALL: [DentPreset; 4] = [DentPreset::A, DentPreset::B, DentPreset::C, DentPreset::D];

    pub fn dimensions(self) -> (f64, f64, f64) {
        match self {
            DentPreset::A => (60.0, 40.0, 2.0),
            DentPreset::B => (120.0, 100.0, 2.0),
            DentPreset::C => (100.0, 80.0, 3.0),
            DentPreset::D => (120.0, 80.0, 1.0),
        }
    }
}

/// The unit bump: `-exp(-1/(1-r²))` inside the unit disc, zero outside.
pub fn unit_dent(r: f64) -> f64 {
    let r2 = r * r;
    if r2 < 1.0 {
        -(-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

/// Deformation (mm, never positive) contributed by `spec` at world `(x, y)`.
pub fn dent_field(spec: &DentSpec, x: f64, y: f64) -> f64 {
    spec.amplitude() * unit_dent(spec.radius(x, y))
}

/// Jittered lattice with the parabola applied.
pub fn base_surface(params: &BaseSurfaceParams, config: &SynthConfig, rng: &mut impl Rng) -> SurfaceGrid {
    let (px, py) = (config.pitch_x(), config.pitch_y());
    let (x0, y0) = (-config.world_x / 2.0, -config.world_y / 2.0);
    let j = config.xy_jitter;
    let points = Grid::from_fn(config.width, config.height, |c, r| {
        let (mut x, mut y) = (x0 + (c as f64 + 0.5) * px, y0 + (r as f64 + 0.5) * py);
        if j > 0.0 {
            x += rng.random_range(-j..j) * px;
            y += rng.random_range(-j..j) * py;
        }
        Point3::new(x, y, params.alpha * x * x + params.beta * y * y)
    });
    SurfaceGrid::new(points, config.pitch())
}

/// Draw the dents of one sample: the first with probability `p`, each further
/// one with probability `p·q^k`.
pub fn spawn_dents(config: &SynthConfig, rng: &mut impl Rng) -> Vec<DentSpec> {
    let mut dents = Vec::new();
    let mut prob = config.dent_prob;
    while prob > 0.0 && rng.random::<f64>() < prob {
        let (hx, hy) = (config.world_x / 2.0, config.world_y / 2.0);
        dents.push(DentSpec {
            cx: rng.random_range(-hx..hx),
            cy: rng.random_range(-hy..hy),
            scale_x: uniform(rng, config.dent_size) / 2.0,
            scale_y: uniform(rng, config.dent_size) / 2.0,
            depth: uniform(rng, config.dent_depth),
            theta: rng.random_range(0.0..PI),
        });
        prob *= config.dent_decay;
        if config.dent_decay == 0.0 {
            break;
        }
    }
    dents
}

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub config: SynthConfig,
    pub seed: u64,
    pub index: u64,
    pub base: BaseSurfaceParams,
    pub dents: Vec<DentSpec>,
    /// Total rigid rotation applied to the points.
    pub rotation: Matrix3<f64>,
    /// Angles (deg, about x, y, z) of the last rotation applied.
    pub angles: [f64; 3],
    pub has_noise_patch: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledSample {
    pub surface: SurfaceGrid,
    pub truth: LabelMask,
    pub provenance: Provenance,
}

/// Add dents, white noise and an optional replayed noise patch to `base`,
/// label the dent supports and rotate the result.
pub fn compose_sample(
    base: &SurfaceGrid,
    dents: &[DentSpec],
    config: &SynthConfig,
    rng: &mut impl Rng,
    noise_patch: Option<&ResidualGrid>,
) -> Result<LabelledSample> {
    if let Some(patch) = noise_patch {
        if patch.dims() != base.dims() {
            return Err(Error::DimensionMismatch {
                expected: base.dims(),
                found: patch.dims(),
            });
        }
    }
    let white = Normal::new(0.0, config.sigma.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let (w, h) = base.dims();
    let mut truth = Grid::filled(w, h, 0u8);
    let points = Grid::from_fn(w, h, |c, r| {
        let p = *base.points.get(c, r);
        let mut deepest = 0.0f64;
        for d in dents {
            let rad = d.radius(p.x, p.y);
            if rad < 1.0 {
                *truth.get_mut(c, r) = 1;
                deepest = deepest.min(d.amplitude() * unit_dent(rad));
            }
        }
        let mut z = p.z + deepest;
        if config.sigma > 0.0 {
            z += white.sample(rng);
        }
        if let Some(patch) = noise_patch {
            z += *patch.get(c, r) as f64;
        }
        Point3::new(p.x, p.y, z)
    });
    let sample = LabelledSample {
        surface: SurfaceGrid::new(points, base.pitch),
        truth: LabelMask::new(truth)?,
        provenance: Provenance {
            config: config.clone(),
            seed: config.seed,
            index: 0,
            base: BaseSurfaceParams { alpha: 0.0, beta: 0.0 },
            dents: dents.to_vec(),
            rotation: Matrix3::identity(),
            angles: [0.0; 3],
            has_noise_patch: noise_patch.is_some(),
        },
    };
    let angles = random_angles(config, rng);
    Ok(rotate_sample(&sample, angles))
}

/// Uniform angles within the configured per-axis limits (degrees).
pub fn random_angles(config: &SynthConfig, rng: &mut impl Rng) -> [f64; 3] {
    config.rotation_limits.map(|lim| if lim > 0.0 { rng.random_range(-lim..lim) } else { 0.0 })
}

/// Rotation `Rz·Ry·Rx` for angles in degrees about x, y, z.
pub fn rotation_from_angles(angles_deg: [f64; 3]) -> Matrix3<f64> {
    let [ax, ay, az] = angles_deg.map(f64::to_radians);
    *Rotation3::from_euler_angles(ax, ay, az).matrix()
}

/// Apply `m` to every point about the world origin.
pub fn rotate_points(surface: &SurfaceGrid, m: &Matrix3<f64>) -> SurfaceGrid {
    let points = surface.points.map(|p| {
        let v = m * Vector3::new(p.x, p.y, p.z);
        Point3::new(v.x, v.y, v.z)
    });
    SurfaceGrid::new(points, surface.pitch)
}

/// Rigidly rotate the sample's points; labels ride with their points.
pub fn rotate_sample(sample: &LabelledSample, angles_deg: [f64; 3]) -> LabelledSample {
    let m = rotation_from_angles(angles_deg);
    let mut provenance = sample.provenance.clone();
    provenance.rotation = m * provenance.rotation;
    provenance.angles = angles_deg;
    LabelledSample {
        surface: rotate_points(&sample.surface, &m),
        truth: sample.truth.clone(),
        provenance,
    }
}

/// Substream for sample `index` of master `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generate sample `index` of the dataset keyed by `seed`. Independent of any
/// other index.
pub fn generate_sample(
    config: &SynthConfig,
    seed: u64,
    index: u64,
    noise: Option<&NoiseBank>,
) -> Result<LabelledSample> {
    let mut rng = sample_rng(seed, index);
    let params = BaseSurfaceParams::sample(config, &mut rng);
    let base = base_surface(&params, config, &mut rng);
    let dents = spawn_dents(config, &mut rng);
    let patch = match noise {
        Some(bank) => Some(bank.sample_patch(config.width, config.height, &mut rng)?),
        None => None,
    };
    let mut sample = compose_sample(&base, &dents, config, &mut rng, patch.as_ref())?;
    sample.provenance.seed = seed;
    sample.provenance.index = index;
    sample.provenance.base = params;
    Ok(sample)
}

/// Lazily generated dataset, in index order.
pub fn generate_dataset<'a>(
    config: &'a SynthConfig,
    count: u64,
    seed: u64,
    noise: Option<&'a NoiseBank>,
) -> impl Iterator<Item = Result<LabelledSample>> + 'a {
    (0..count).map(move |i| generate_sample(config, seed, i, noise))
}

/// Generate `range` of the dataset in parallel; output in index order and
/// identical to the sequential stream.
pub fn generate_batch(
    config: &SynthConfig,
    range: std::ops::Range<u64>,
    seed: u64,
    noise: Option<&NoiseBank>,
) -> Result<Vec<LabelledSample>> {
    range.into_par_iter().map(|i| generate_sample(config, seed, i, noise)).collect()
}

/// Dent statistics over generated samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DentStats {
    pub samples: u64,
    /// `histogram[k]` = samples with exactly `k` dents.
    pub histogram: Vec<u64>,
    pub positive_cells: u64,
    pub total_cells: u64,
}

impl DentStats {
    pub fn add(&mut self, sample: &LabelledSample) {
        let k = sample.provenance.dents.len();
        if self.histogram.len() <= k {
            self.histogram.resize(k + 1, 0);
        }
        self.histogram[k] += 1;
        self.samples += 1;
        self.positive_cells += sample.truth.count_positive() as u64;
        self.total_cells += sample.truth.as_slice().len() as u64;
    }

    pub fn mean_dents(&self) -> f64 {
        let total: u64 = self.histogram.iter().enumerate().map(|(k, &n)| k as u64 * n).sum();
        total as f64 / self.samples.max(1) as f64
    }

    pub fn positive_fraction(&self) -> f64 {
        self.positive_cells as f64 / self.total_cells.max(1) as f64
    }

    /// Probability of exactly `k` dents under the spawning law.
    pub fn expected_fraction(config: &SynthConfig, k: usize) -> f64 {
        let (p, q) = (config.dent_prob, config.dent_decay);
        let reach: f64 = (0..k).map(|j| p * q.powi(j as i32)).product();
        reach * (1.0 - p * q.powi(k as i32))
    }
}
