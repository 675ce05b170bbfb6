//! 3D scan grid → 2D residual image.
//!
//! 1. Rotate the surface so its mean normal (total-least-squares plane) lies
//!    along +z, the scanner's optical axis.
//! 2. Fit `z = a + bx + cy + dx² + exy + fy²` by linear least squares.
//! 3. Keep the per-cell z-residual against that quadric.
//!
//! All accumulations run in `f64` in a fixed order so results are
//! bit-reproducible.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::grid::{Grid, Point3, ResidualGrid, SurfaceGrid};

/// Total-least-squares plane through `centroid` with unit `normal`
/// (`normal · ẑ > 0`) and `offset = normal · centroid`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub centroid: Vector3<f64>,
}

/// Proper orthonormal 3x3 rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(pub Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Largest entry of `|RᵀR − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }
}

/// Coefficients of `z(x, y) = a + b·x + c·y + d·x² + e·xy + f·y²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadricCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl QuadricCoeffs {
    pub fn from_array(v: [f64; 6]) -> Self {
        let [a, b, c, d, e, f] = v;
        Self { a, b, c, d, e, f }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.a + self.b * x + self.c * y + self.d * x * x + self.e * x * y + self.f * y * y
    }
}

/// Output of [`preprocess`]: the network input plus what is needed to map
/// predictions back to the original points.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub residuals: ResidualGrid,
    /// Rotation `R` with `R·ẑ = n̂`; points were mapped with `Rᵀ`.
    pub rotation: RotationMatrix,
    /// Pivot of the canonical rotation.
    pub centroid: Vector3<f64>,
    pub quadric: QuadricCoeffs,
    pub source_dims: (usize, usize),
}

fn centroid(grid: &SurfaceGrid) -> Vector3<f64> {
    let n = grid.len() as f64;
    let mut s = Vector3::zeros();
    for p in grid.iter() {
        s += Vector3::new(p.x, p.y, p.z);
    }
    s / n
}

/// Total-least-squares plane: the normal is the eigenvector of the smallest
/// eigenvalue of the centred scatter matrix.
pub fn fit_plane(grid: &SurfaceGrid) -> Result<PlaneFit> {
    if grid.len() < 3 {
        return Err(Error::Degenerate(format!("plane fit needs 3 points, got {}", grid.len())));
    }
    let c = centroid(grid);
    let mut cov = Matrix3::zeros();
    for p in grid.iter() {
        let d = Vector3::new(p.x, p.y, p.z) - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(hi > 0.0) || mid <= 1e-12 * hi {
        return Err(Error::Degenerate("points are coincident or collinear".into()));
    }
    debug_assert!(lo >= -1e-9 * hi);
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    normal.normalize_mut();
    if normal.z < 0.0 {
        normal = -normal;
    }
    Ok(PlaneFit {
        normal,
        offset: normal.dot(&c),
        centroid: c,
    })
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `R = I + [ẑ×n̂]ₓ + [ẑ×n̂]ₓ² / (1 + ẑ·n̂)`, the rotation taking `ẑ` onto `n̂`.
pub fn alignment_rotation(normal: &Vector3<f64>) -> Result<RotationMatrix> {
    let norm = normal.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate("normal has zero or non-finite length".into()));
    }
    let n = normal / norm;
    let z = Vector3::z();
    let cos = z.dot(&n);
    if cos <= -1.0 + 1e-6 {
        return Err(Error::Degenerate("normal is antiparallel to the optical axis".into()));
    }
    let k = skew(&z.cross(&n));
    Ok(RotationMatrix(Matrix3::identity() + k + k * k / (1.0 + cos)))
}

/// Rotate the surface about its centroid by `Rᵀ` so the fitted normal maps
/// onto `ẑ`. Returns the rotated grid, `R`, and the pivot.
pub fn canonicalize(grid: &SurfaceGrid) -> Result<(SurfaceGrid, RotationMatrix, Vector3<f64>)> {
    let plane = fit_plane(grid)?;
    let r = alignment_rotation(&plane.normal)?;
    let rt = r.0.transpose();
    let c = plane.centroid;
    let points = grid.points.map(|p| {
        let v = rt * (Vector3::new(p.x, p.y, p.z) - c) + c;
        Point3::new(v.x, v.y, v.z)
    });
    Ok((SurfaceGrid::new(points, grid.pitch), r, c))
}

/// Least-squares bivariate quadric over all points.
///
/// x and y are centred and scaled to unit RMS before forming the normal
/// equations; the solution is mapped back to world coordinates.
pub fn fit_quadric(grid: &SurfaceGrid) -> Result<QuadricCoeffs> {
    fit_quadric_points(grid.points.as_slice())
}

pub(crate) fn fit_quadric_points(points: &[Point3]) -> Result<QuadricCoeffs> {
    if points.len() < 6 {
        return Err(Error::Degenerate(format!("quadric fit needs 6 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in points {
        mx += p.x;
        my += p.y;
    }
    mx /= n;
    my /= n;
    let (mut vx, mut vy) = (0.0, 0.0);
    for p in points {
        vx += (p.x - mx) * (p.x - mx);
        vy += (p.y - my) * (p.y - my);
    }
    let (sx, sy) = ((vx / n).sqrt(), (vy / n).sqrt());
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::Degenerate("points do not span both x and y".into()));
    }

    let mut ata = Matrix6::<f64>::zeros();
    let mut atz = Vector6::<f64>::zeros();
    for p in points {
        let u = (p.x - mx) / sx;
        let v = (p.y - my) / sy;
        let row = [1.0, u, v, u * u, u * v, v * v];
        for i in 0..6 {
            atz[i] += row[i] * p.z;
            for j in i..6 {
                ata[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..6 {
        for j in 0..i {
            ata[(i, j)] = ata[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(ata);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(lo > 1e-12 * hi) {
        return Err(Error::Degenerate("quadric design matrix is rank deficient".into()));
    }
    let sol = ata
        .cholesky()
        .ok_or_else(|| Error::Degenerate("quadric normal equations not positive definite".into()))?
        .solve(&atz);

    // z = A + B·u + C·v + D·u² + E·uv + F·v², u = ax·x + bx, v = ay·y + by
    let (aa, bb, cc, dd, ee, ff) = (sol[0], sol[1], sol[2], sol[3], sol[4], sol[5]);
    let (ax, bx) = (1.0 / sx, -mx / sx);
    let (ay, by) = (1.0 / sy, -my / sy);
    Ok(QuadricCoeffs {
        a: aa + bb * bx + cc * by + dd * bx * bx + ee * bx * by + ff * by * by,
        b: bb * ax + 2.0 * dd * ax * bx + ee * ax * by,
        c: cc * ay + ee * bx * ay + 2.0 * ff * ay * by,
        d: dd * ax * ax,
        e: ee * ax * ay,
        f: ff * ay * ay,
    })
}

/// Per-cell `z − quadric(x, y)`; positive above the fitted surface.
pub fn residuals(grid: &SurfaceGrid, coeffs: &QuadricCoeffs) -> ResidualGrid {
    grid.points.map(|p| (p.z - coeffs.eval(p.x, p.y)) as f32)
}

/// Residuals at full precision.
pub fn residuals_f64(grid: &SurfaceGrid, coeffs: &QuadricCoeffs) -> Grid<f64> {
    grid.points.map(|p| p.z - coeffs.eval(p.x, p.y))
}

/// Canonical rotation, quadric fit and residual extraction.
pub fn preprocess(grid: &SurfaceGrid) -> Result<Preprocessed> {
    let bad = crate::grid::validate_finite(&grid.points);
    if let Some(&(c, r)) = bad.first() {
        return Err(Error::Degenerate(format!(
            "{} non-finite points, first at ({c},{r})",
            bad.len()
        )));
    }
    let (canonical, rotation, centroid) = canonicalize(grid)?;
    let quadric = fit_quadric(&canonical)?;
    Ok(Preprocessed {
        residuals: residuals(&canonical, &quadric),
        rotation,
        centroid,
        quadric,
        source_dims: grid.dims(),
    })
}
