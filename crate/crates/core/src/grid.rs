//! Grid and mask types shared by every stage of the pipeline.
//!
//! All rasters are stored row-major and addressed as `(col, row)`, i.e. the
//! first index runs along x and the second along y, matching the image layout
//! the network consumes.

use crate::error::{Error, Result};

/// A point in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Dense row-major `width x height` raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("grid dims must be positive, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} grid needs {} cells, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "grid dims must be positive");
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn get_mut(&mut self, col: usize, row: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "grid dims must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    fn crop_cells(&self, origin: (usize, usize), size: (usize, usize)) -> Result<Self> {
        let (ox, oy) = origin;
        let (sw, sh) = size;
        if sw == 0 || sh == 0 || ox + sw > self.width || oy + sh > self.height {
            return Err(Error::OutOfBounds {
                origin,
                size,
                dims: self.dims(),
            });
        }
        let mut data = Vec::with_capacity(sw * sh);
        for row in oy..oy + sh {
            data.extend_from_slice(&self.row(row)[ox..ox + sw]);
        }
        Ok(Self {
            width: sw,
            height: sh,
            data,
        })
    }

    fn flip_cells(&self, axis: FlipAxis) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        match axis {
            FlipAxis::Horizontal => {
                for row in 0..self.height {
                    data.extend(self.row(row).iter().rev().cloned());
                }
            }
            FlipAxis::Vertical => {
                for row in (0..self.height).rev() {
                    data.extend_from_slice(self.row(row));
                }
            }
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Mirror axis. `Horizontal` reverses every row (x mirrored), `Vertical`
/// reverses the row order (y mirrored).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// Ordered scan or synthetic surface: `w x h` points plus the nominal pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub points: Grid<Point3>,
    /// Nominal spacing in mm/pixel.
    pub pitch: f64,
}

impl SurfaceGrid {
    pub fn new(points: Grid<Point3>, pitch: f64) -> Self {
        Self { points, pitch }
    }

    pub fn width(&self) -> usize {
        self.points.width()
    }

    pub fn height(&self) -> usize {
        self.points.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.points.dims()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Point3> {
        self.points.as_slice().iter()
    }

    /// Z channel as a scalar raster.
    pub fn heights(&self) -> Grid<f64> {
        self.points.map(|p| p.z)
    }
}

/// Signed z-distance (mm) of each cell from the fitted base surface.
pub type ResidualGrid = Grid<f32>;

/// Binary ground truth or prediction: 1 = dented.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask(Grid<u8>);

impl LabelMask {
    pub fn new(grid: Grid<u8>) -> Result<Self> {
        if let Some(bad) = grid.as_slice().iter().find(|&&v| v > 1) {
            return Err(Error::Shape(format!("label mask cell {bad} is not binary")));
        }
        Ok(Self(grid))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, 0))
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, 1))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(width, height, |c, r| f(c, r) as u8))
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn is_set(&self, col: usize, row: usize) -> bool {
        *self.0.get(col, row) != 0
    }

    pub fn as_slice(&self) -> &[u8] {
        self.0.as_slice()
    }

    pub fn count_positive(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v != 0).count()
    }

    pub fn invert(&self) -> Self {
        Self(self.0.map(|&v| 1 - v))
    }
}

/// Per-cell dent probability, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask(Grid<f32>);

impl ProbMask {
    pub fn new(grid: Grid<f32>) -> Result<Self> {
        if let Some(bad) = grid.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("probability {bad} outside [0,1]")));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn as_slice(&self) -> &[f32] {
        self.0.as_slice()
    }

    /// Boundary policy: `threshold <= 0` marks everything, `threshold >= 1`
    /// marks nothing, otherwise `p >= threshold`.
    pub fn binarize(&self, threshold: f32) -> LabelMask {
        let g = if threshold <= 0.0 {
            self.0.map(|_| 1)
        } else if threshold >= 1.0 {
            self.0.map(|_| 0)
        } else {
            self.0.map(|&p| (p >= threshold) as u8)
        };
        LabelMask(g)
    }
}

/// Types that are a raster underneath and can be cropped or flipped without
/// touching their values.
pub trait Raster: Sized {
    type Cell: Clone;

    fn cells(&self) -> &Grid<Self::Cell>;

    /// Rebuild `Self` around a grid holding a selection of this raster's cells.
    fn rewrap(&self, cells: Grid<Self::Cell>) -> Self;
}

impl<T: Clone> Raster for Grid<T> {
    type Cell = T;

    fn cells(&self) -> &Grid<T> {
        self
    }

    fn rewrap(&self, cells: Grid<T>) -> Self {
        cells
    }
}

impl Raster for SurfaceGrid {
    type Cell = Point3;

    fn cells(&self) -> &Grid<Point3> {
        &self.points
    }

    fn rewrap(&self, cells: Grid<Point3>) -> Self {
        SurfaceGrid::new(cells, self.pitch)
    }
}

impl Raster for LabelMask {
    type Cell = u8;

    fn cells(&self) -> &Grid<u8> {
        &self.0
    }

    fn rewrap(&self, cells: Grid<u8>) -> Self {
        LabelMask(cells)
    }
}

impl Raster for ProbMask {
    type Cell = f32;

    fn cells(&self) -> &Grid<f32> {
        &self.0
    }

    fn rewrap(&self, cells: Grid<f32>) -> Self {
        ProbMask(cells)
    }
}

/// Exact sub-window starting at `origin = (col, row)` with `size = (w, h)`.
pub fn crop<R: Raster>(raster: &R, origin: (usize, usize), size: (usize, usize)) -> Result<R> {
    let cells = raster.cells().crop_cells(origin, size)?;
    Ok(raster.rewrap(cells))
}

pub fn flip<R: Raster>(raster: &R, axis: FlipAxis) -> R {
    raster.rewrap(raster.cells().flip_cells(axis))
}

/// Values that can be checked for NaN/Inf.
pub trait MaybeFinite {
    fn all_finite(&self) -> bool;
}

impl MaybeFinite for f32 {
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl MaybeFinite for f64 {
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl MaybeFinite for Point3 {
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

/// `(col, row)` of every cell holding a NaN or infinity. Empty means valid.
pub fn validate_finite<T: MaybeFinite>(grid: &Grid<T>) -> Vec<(usize, usize)> {
    let w = grid.width();
    grid.as_slice()
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.all_finite())
        .map(|(i, _)| (i % w, i / w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_grid(w: usize, h: usize) -> Grid<u32> {
        Grid::from_fn(w, h, |c, r| (r * w + c) as u32)
    }

    #[test]
    fn full_crop_is_identity() {
        let g = index_grid(5, 3);
        assert_eq!(crop(&g, (0, 0), (5, 3)).unwrap(), g);
    }

    #[test]
    fn crop_centre_cells() {
        let g = index_grid(4, 4);
        let c = crop(&g, (1, 1), (2, 2)).unwrap();
        // index oracle: cell (c, r) of the crop is (c+1, r+1) of the source
        let expected: Vec<u32> = [(1, 1), (2, 1), (1, 2), (2, 2)]
            .iter()
            .map(|&(c, r)| (r * 4 + c) as u32)
            .collect();
        assert_eq!(c.as_slice(), &expected[..]);
    }

    #[test]
    fn crop_out_of_bounds() {
        let g = index_grid(4, 4);
        let err = crop(&g, (2, 2), (3, 3)).unwrap_err();
        assert!(matches!(
            err,
            Error::OutOfBounds {
                origin: (2, 2),
                size: (3, 3),
                dims: (4, 4)
            }
        ));
    }

    #[test]
    fn horizontal_flip_reverses_rows() {
        let g = Grid::from_vec(3, 1, vec![1, 2, 3]).unwrap();
        assert_eq!(flip(&g, FlipAxis::Horizontal).as_slice(), &[3, 2, 1]);
    }

    #[test]
    fn vertical_flip_swaps_rows() {
        let g = index_grid(3, 4);
        let f = flip(&g, FlipAxis::Vertical);
        for r in 0..4 {
            for c in 0..3 {
                assert_eq!(f.get(c, r), g.get(c, 3 - r));
            }
        }
    }

    #[test]
    fn flips_on_masks_and_surfaces() {
        let m = LabelMask::from_fn(3, 2, |c, r| c == 0 && r == 0);
        let f = flip(&m, FlipAxis::Horizontal);
        assert!(f.is_set(2, 0));
        assert_eq!(flip(&f, FlipAxis::Horizontal), m);

        let s = SurfaceGrid::new(Grid::from_fn(2, 2, |c, r| Point3::new(c as f64, r as f64, 0.0)), 0.5);
        let v = flip(&s, FlipAxis::Vertical);
        assert_eq!(v.pitch, 0.5);
        assert_eq!(v.points.get(0, 0).y, 1.0);
    }

    #[test]
    fn finite_checks() {
        let mut g = Grid::filled(6, 5, 0.0f32);
        assert!(validate_finite(&g).is_empty());
        *g.get_mut(3, 4) = f32::NAN;
        assert_eq!(validate_finite(&g), vec![(3, 4)]);
        *g.get_mut(0, 1) = f32::INFINITY;
        assert_eq!(validate_finite(&g), vec![(0, 1), (3, 4)]);
    }

    #[test]
    fn binarize_boundaries() {
        let p = ProbMask::new(Grid::from_vec(3, 1, vec![0.0, 0.5, 1.0]).unwrap()).unwrap();
        assert_eq!(p.binarize(0.0).count_positive(), 3);
        assert_eq!(p.binarize(1.0).count_positive(), 0);
        assert_eq!(p.binarize(0.5).as_slice(), &[0, 1, 1]);
    }

    #[test]
    fn rejects_bad_masks() {
        assert!(LabelMask::new(Grid::from_vec(2, 1, vec![0, 2]).unwrap()).is_err());
        assert!(ProbMask::new(Grid::from_vec(1, 1, vec![1.5]).unwrap()).is_err());
        assert!(Grid::<u8>::from_vec(2, 2, vec![0; 3]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn double_flip_is_identity(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
                let g = Grid::from_fn(w, h, |c, r| seed.wrapping_mul(31).wrapping_add((r * w + c) as u64));
                for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
                    prop_assert_eq!(flip(&flip(&g, axis), axis), g.clone());
                }
            }

            #[test]
            fn crop_and_flip_only_select(w in 1usize..10, h in 1usize..10, a in 0usize..10, b in 0usize..10) {
                let g = Grid::from_fn(w, h, |c, r| (r * w + c) as u32);
                let (ox, oy) = (a % w, b % h);
                let c = crop(&g, (ox, oy), (w - ox, h - oy)).unwrap();
                let f = flip(&c, FlipAxis::Vertical);
                for v in f.as_slice() {
                    prop_assert!(g.as_slice().contains(v));
                }
                let mut sorted = f.into_vec();
                sorted.sort();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), (w - ox) * (h - oy));
            }
        }
    }
}
