//! Binary rasters of workspace geometry.
//!
//! A pixel is on when its center lies inside a polygon. Centers exactly on an
//! edge belong to the polygon only for "top-left" edges, so two polygons that
//! share an edge never both claim a pixel.

use thiserror::Error;

use crate::geometry::{Point, Polygon};
use crate::scalar::Scalar;

/// Side length of every observation raster, in pixels.
pub const RASTER_SIZE: usize = 120;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("degenerate target region")]
    DegenerateTarget,
}

/// Affine map from workspace units to pixel coordinates: `pixel = scale * p + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame<T> {
    pub scale: T,
    pub offset: Point<T>,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> Frame<T> {
    /// Maps the square `[0, extent]²` onto the full `RASTER_SIZE²` grid.
    pub fn workspace(extent: f64) -> Self {
        Self {
            scale: T::of(RASTER_SIZE as f64 / extent),
            offset: Point::new(T::zero(), T::zero()),
            width: RASTER_SIZE,
            height: RASTER_SIZE,
        }
    }

    pub fn to_pixel(&self, p: Point<T>) -> Point<T> {
        p * self.scale + self.offset
    }

    pub fn to_workspace(&self, p: Point<T>) -> Point<T> {
        (p - self.offset) * (T::one() / self.scale)
    }

    /// Workspace position of the center of pixel (`col`, `row`).
    pub fn pixel_center(&self, col: usize, row: usize) -> Point<T> {
        let half = T::of(0.5);
        self.to_workspace(Point::new(T::of(col as f64) + half, T::of(row as f64) + half))
    }

    /// Workspace length of one pixel side.
    pub fn pitch(&self) -> T {
        T::one() / self.scale
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pixels of one piece in one raster, as sorted row-major indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct PixelSet {
    indices: Vec<u32>,
}

impl PixelSet {
    /// Sorts and deduplicates.
    pub fn from_indices(mut indices: Vec<u32>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn intersection_len(&self, other: &PixelSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.indices, &other.indices);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn union(sets: &[&PixelSet]) -> PixelSet {
        PixelSet::from_indices(sets.iter().flat_map(|s| s.indices.iter().copied()).collect())
    }
}

/// Row-major binary occupancy grid. Row 0 is the lowest workspace row.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub frame: Frame<T>,
    bits: Vec<bool>,
}

impl<T: Scalar> Raster<T> {
    pub fn empty(frame: Frame<T>) -> Self {
        Self { bits: vec![false; frame.len()], frame }
    }

    pub fn width(&self) -> usize {
        self.frame.width
    }

    pub fn height(&self) -> usize {
        self.frame.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.frame.width + col]
    }

    pub fn count_on(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn set_all(&mut self, set: &PixelSet) {
        for &i in set.indices() {
            self.bits[i as usize] = true;
        }
    }

    pub fn on_pixels(&self) -> PixelSet {
        PixelSet {
            indices: self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i as u32).collect(),
        }
    }

    /// Binary PGM (P5, maxval 255, on = 255), top row first.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (w, h) = (self.width(), self.height());
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for row in (0..h).rev() {
            out.extend(self.bits[row * w..(row + 1) * w].iter().map(|&b| if b { 255u8 } else { 0 }));
        }
        out
    }
}

#[inline]
fn owns_boundary<T: Scalar>(edge: Point<T>) -> bool {
    edge.y < T::zero() || (edge.y == T::zero() && edge.x > T::zero())
}

/// Pixel-center-inside set of a single convex CCW polygon.
pub fn piece_pixels<T: Scalar>(poly: &Polygon<T>, frame: &Frame<T>) -> PixelSet {
    if poly.len() < 3 {
        return PixelSet::default();
    }
    let bb = poly.bbox();
    let lo = frame.to_pixel(bb.min);
    let hi = frame.to_pixel(bb.max);
    if !(lo.x.is_finite() && lo.y.is_finite() && hi.x.is_finite() && hi.y.is_finite()) {
        return PixelSet::default();
    }
    let range = |a: T, b: T, n: usize| -> (usize, usize) {
        let s = (a - T::one()).floor().max(T::zero());
        let e = (b + T::one()).ceil().min(T::of(n as f64));
        if e <= s {
            (0, 0)
        } else {
            (s.to_usize().unwrap_or(0), e.to_usize().unwrap_or(0))
        }
    };
    let (c0, c1) = range(lo.x, hi.x, frame.width);
    let (r0, r1) = range(lo.y, hi.y, frame.height);

    let edges: Vec<(Point<T>, Point<T>, bool)> =
        poly.edges().map(|(a, b)| (a, b - a, owns_boundary(b - a))).collect();
    let mut indices = Vec::new();
    for row in r0..r1 {
        for col in c0..c1 {
            let p = frame.pixel_center(col, row);
            let inside = edges.iter().all(|&(a, e, own)| {
                let c = e.cross(p - a);
                c > T::zero() || (c == T::zero() && own)
            });
            if inside {
                indices.push((row * frame.width + col) as u32);
            }
        }
    }
    PixelSet { indices }
}

/// Union raster of all polygons.
pub fn rasterize<T: Scalar>(polygons: &[Polygon<T>], frame: &Frame<T>) -> Raster<T> {
    let mut r = Raster::empty(*frame);
    for p in polygons {
        r.set_all(&piece_pixels(p, frame));
    }
    r
}

/// `|placed ∩ target| / |target|`.
pub fn coverage(placed: &PixelSet, target: &PixelSet) -> Result<f64, RasterError> {
    if target.is_empty() {
        return Err(RasterError::DegenerateTarget);
    }
    Ok(placed.intersection_len(target) as f64 / target.len() as f64)
}
