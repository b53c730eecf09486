//! Tangram pieces and convex polygon arithmetic.
//!
//! All coordinates are in workspace units, where the seven canonical pieces
//! tile the `[0, 4] x [0, 4]` square.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Pairwise intersection area (units²) below which two pieces count as not overlapping.
pub const OVERLAP_EPS: f64 = 1e-3;

/// Facing parallel edges closer than this (units) are read as one shared edge
/// when measuring a silhouette perimeter. Slightly over two pixels at the
/// observation resolution.
pub const CONTACT_GAP: f64 = 0.25;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn rotate(self, cos: T, sin: T) -> Self {
        Self::new(cos * self.x - sin * self.y, sin * self.x + cos * self.y)
    }
}

impl<T: Scalar> Add for Point<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Scalar> Sub for Point<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Scalar> Mul<T> for Point<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

impl<T: Scalar> Neg for Point<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<T> {
    pub min: Point<T>,
    pub max: Point<T>,
}

impl<T: Scalar> Aabb<T> {
    pub fn intersects(&self, o: &Self) -> bool {
        self.min.x < o.max.x && o.min.x < self.max.x && self.min.y < o.max.y && o.min.y < self.max.y
    }
}

/// A convex polygon with counter-clockwise vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon<T> {
    vertices: Vec<Point<T>>,
}

impl<T: Scalar> Polygon<T> {
    /// Builds a polygon, reversing the vertex order if it was clockwise.
    pub fn new(mut vertices: Vec<Point<T>>) -> Self {
        if signed_area(&vertices) < T::zero() {
            vertices.reverse();
        }
        Self { vertices }
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Self {
        Self::new(coords.iter().map(|&(x, y)| Point::new(T::of(x), T::of(y))).collect())
    }

    /// Axis-aligned rectangle, handy for tests and workspace bounds.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::from_coords(&[(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    pub fn vertices(&self) -> &[Point<T>] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point<T>, Point<T>)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn area(&self) -> T {
        signed_area(&self.vertices).abs()
    }

    pub fn perimeter(&self) -> T {
        self.edges().map(|(a, b)| (b - a).norm()).sum()
    }

    /// Area centroid.
    pub fn centroid(&self) -> Point<T> {
        let mut cx = T::zero();
        let mut cy = T::zero();
        let mut a2 = T::zero();
        for (p, q) in self.edges() {
            let c = p.cross(q);
            a2 += c;
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        let six = T::of(3.0) * a2;
        Point::new(cx / six, cy / six)
    }

    pub fn translate(&self, d: Point<T>) -> Self {
        Self { vertices: self.vertices.iter().map(|&v| v + d).collect() }
    }

    pub fn bbox(&self) -> Aabb<T> {
        let mut min = self.vertices[0];
        let mut max = self.vertices[0];
        for v in &self.vertices[1..] {
            min.x = min.x.min(v.x);
            min.y = min.y.min(v.y);
            max.x = max.x.max(v.x);
            max.y = max.y.max(v.y);
        }
        Aabb { min, max }
    }

    /// True when every vertex lies in `[lo, hi]²`.
    pub fn within(&self, lo: T, hi: T) -> bool {
        self.vertices.iter().all(|v| v.x >= lo && v.x <= hi && v.y >= lo && v.y <= hi)
    }

    pub fn is_convex_ccw(&self) -> bool {
        let n = self.vertices.len();
        n >= 3
            && (0..n).all(|i| {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                let c = self.vertices[(i + 2) % n];
                (b - a).cross(c - b) > T::zero()
            })
    }
}

fn signed_area<T: Scalar>(v: &[Point<T>]) -> T {
    let n = v.len();
    let mut s = T::zero();
    for i in 0..n {
        s += v[i].cross(v[(i + 1) % n]);
    }
    s * T::of(0.5)
}

/// The seven tangram pieces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PieceId {
    LT1,
    LT2,
    MT,
    SQ,
    ST1,
    ST2,
    PG,
}

impl PieceId {
    pub const ALL: [PieceId; 7] =
        [PieceId::LT1, PieceId::LT2, PieceId::MT, PieceId::SQ, PieceId::ST1, PieceId::ST2, PieceId::PG];

    /// Placement order: largest first, ties in listed order.
    pub const ASSEMBLY_ORDER: [PieceId; 7] =
        [PieceId::LT1, PieceId::LT2, PieceId::MT, PieceId::SQ, PieceId::PG, PieceId::ST1, PieceId::ST2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PieceId::LT1 => "LT1",
            PieceId::LT2 => "LT2",
            PieceId::MT => "MT",
            PieceId::SQ => "SQ",
            PieceId::ST1 => "ST1",
            PieceId::ST2 => "ST2",
            PieceId::PG => "PG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Distinct orientations among the eight 45° rotation bins.
    pub fn rotational_symmetry(self) -> u8 {
        match self {
            PieceId::SQ => 2,
            PieceId::PG => 4,
            _ => 8,
        }
    }
}

impl fmt::Display for PieceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A piece in its canonical frame.
#[derive(Clone, Debug)]
pub struct Piece<T> {
    pub id: PieceId,
    pub polygon: Polygon<T>,
    pub area: T,
    pub rotational_symmetry: u8,
    centroid: Point<T>,
}

impl<T: Scalar> Piece<T> {
    pub fn canonical(id: PieceId) -> Self {
        let coords: &[(f64, f64)] = match id {
            PieceId::LT1 => &[(0.0, 4.0), (2.0, 2.0), (4.0, 4.0)],
            PieceId::LT2 => &[(4.0, 4.0), (2.0, 2.0), (4.0, 0.0)],
            PieceId::MT => &[(0.0, 0.0), (2.0, 0.0), (0.0, 2.0)],
            PieceId::SQ => &[(2.0, 0.0), (3.0, 1.0), (2.0, 2.0), (1.0, 1.0)],
            PieceId::ST1 => &[(2.0, 0.0), (4.0, 0.0), (3.0, 1.0)],
            PieceId::ST2 => &[(0.0, 2.0), (1.0, 3.0), (0.0, 4.0)],
            PieceId::PG => &[(0.0, 2.0), (1.0, 1.0), (2.0, 2.0), (1.0, 3.0)],
        };
        let polygon = Polygon::from_coords(coords);
        Self {
            id,
            area: polygon.area(),
            centroid: polygon.centroid(),
            rotational_symmetry: id.rotational_symmetry(),
            polygon,
        }
    }

    pub fn centroid(&self) -> Point<T> {
        self.centroid
    }

    /// The pose that leaves the canonical polygon where it is.
    pub fn canonical_pose(&self) -> Pose<T> {
        Pose::new(self.centroid.x, self.centroid.y, T::zero())
    }
}

/// All seven pieces, in `PieceId::ALL` order.
pub fn canonical_pieces<T: Scalar>() -> Vec<Piece<T>> {
    PieceId::ALL.into_iter().map(Piece::canonical).collect()
}

/// Planar placement: where the piece centroid goes and how far it is turned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Scalar> Pose<T> {
    /// `theta` is wrapped into `[0, 2π)`.
    pub fn new(x: T, y: T, theta: T) -> Self {
        let two_pi = T::PI() + T::PI();
        let mut t = theta % two_pi;
        if t < T::zero() {
            t += two_pi;
        }
        if t >= two_pi {
            t = T::zero();
        }
        Self { x, y, theta: t }
    }
}

/// Rotates the canonical piece about its centroid and moves the centroid to the pose.
pub fn transform<T: Scalar>(piece: &Piece<T>, pose: &Pose<T>) -> Polygon<T> {
    let (sin, cos) = pose.theta.sin_cos();
    let c = piece.centroid;
    let target = Point::new(pose.x, pose.y);
    Polygon {
        vertices: piece.polygon.vertices.iter().map(|&v| (v - c).rotate(cos, sin) + target).collect(),
    }
}

/// Area of the intersection of two convex CCW polygons.
pub fn intersection_area<T: Scalar>(a: &Polygon<T>, b: &Polygon<T>) -> T {
    if !a.bbox().intersects(&b.bbox()) {
        return T::zero();
    }
    match clip(a, b) {
        Some(p) => signed_area(&p).abs(),
        None => T::zero(),
    }
}

/// Sutherland–Hodgman: the part of `subject` inside convex `clipper`.
fn clip<T: Scalar>(subject: &Polygon<T>, clipper: &Polygon<T>) -> Option<Vec<Point<T>>> {
    let mut out = subject.vertices.clone();
    let mut input = Vec::with_capacity(out.len() + 4);
    for (a, b) in clipper.edges() {
        if out.is_empty() {
            return None;
        }
        std::mem::swap(&mut input, &mut out);
        out.clear();
        let e = b - a;
        let side = |p: Point<T>| e.cross(p - a);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            let sc = side(cur);
            let sp = side(prev);
            if sc >= T::zero() {
                if sp < T::zero() {
                    out.push(prev + (cur - prev) * (sp / (sp - sc)));
                }
                out.push(cur);
            } else if sp >= T::zero() {
                out.push(prev + (cur - prev) * (sp / (sp - sc)));
            }
        }
    }
    (out.len() >= 3).then_some(out)
}

/// Sum of intersection areas between `p` and every polygon in `others`.
pub fn total_overlap<T: Scalar>(p: &Polygon<T>, others: &[Polygon<T>]) -> T {
    others.iter().map(|o| intersection_area(p, o)).sum()
}

fn project<T: Scalar>(p: &Polygon<T>, axis: Point<T>) -> (T, T) {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for v in &p.vertices {
        let d = v.dot(axis);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

/// Separating-axis push-outs of `moving` from `fixed`, smallest first.
/// Empty when the polygons do not overlap.
fn push_outs<T: Scalar>(moving: &Polygon<T>, fixed: &Polygon<T>) -> Vec<Point<T>> {
    let slop = T::of(1e-9);
    let mut out: Vec<(T, Point<T>)> = Vec::new();
    for poly in [moving, fixed] {
        for (a, b) in poly.edges() {
            let e = b - a;
            let axis = Point::new(e.y, -e.x) * (T::one() / e.norm());
            let (amin, amax) = project(moving, axis);
            let (bmin, bmax) = project(fixed, axis);
            let back = amax - bmin;
            let fwd = bmax - amin;
            if back <= T::zero() || fwd <= T::zero() {
                return Vec::new();
            }
            if back < fwd {
                out.push((back, axis * -(back + slop)));
            } else {
                out.push((fwd, axis * (fwd + slop)));
            }
        }
    }
    out.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(std::cmp::Ordering::Equal));
    out.into_iter().map(|(_, d)| d).collect()
}

/// Translates `moving` out of `fixed` along minimum-translation vectors.
///
/// Each iteration pushes out of the deepest overlap. A push that would raise
/// the total overlap is replaced by the push-out (over all overlapping
/// neighbours and axes) that lowers it most; when nothing lowers it the
/// search stops. Returns the last polygon and whether every pairwise overlap
/// ended below [`OVERLAP_EPS`]. Rotation is never changed.
pub fn separate<T: Scalar>(moving: &Polygon<T>, fixed: &[Polygon<T>], max_iter: usize) -> (Polygon<T>, bool) {
    let eps = T::of(OVERLAP_EPS);
    let mut poly = moving.clone();
    for _ in 0..max_iter {
        let overlaps: Vec<T> = fixed.iter().map(|f| intersection_area(&poly, f)).collect();
        if overlaps.iter().all(|&o| o < eps) {
            return (poly, true);
        }
        let total: T = overlaps.iter().copied().sum();
        let mut order: Vec<usize> = (0..fixed.len()).filter(|&i| overlaps[i] > T::zero()).collect();
        order.sort_by(|&i, &j| overlaps[j].partial_cmp(&overlaps[i]).unwrap_or(std::cmp::Ordering::Equal));

        let deepest = push_outs(&poly, &fixed[order[0]]);
        let mut next = deepest.first().map(|&d| poly.translate(d)).filter(|c| total_overlap(c, fixed) <= total);
        if next.is_none() {
            let mut best: Option<(T, Polygon<T>)> = None;
            for &i in &order {
                for d in push_outs(&poly, &fixed[i]) {
                    let cand = poly.translate(d);
                    let t = total_overlap(&cand, fixed);
                    if t < total && best.as_ref().map_or(true, |(bt, _)| t < *bt) {
                        best = Some((t, cand));
                    }
                }
            }
            next = best.map(|(_, p)| p);
        }
        match next {
            Some(p) => poly = p,
            None => break,
        }
    }
    let resolved = fixed.iter().all(|f| intersection_area(&poly, f) < eps);
    (poly, resolved)
}

/// Boundary length of the union of interior-disjoint polygons.
///
/// Portions of an edge faced by an antiparallel edge of another polygon
/// across a gap of at most [`CONTACT_GAP`] are interior and not counted.
pub fn silhouette_perimeter<T: Scalar>(polygons: &[Polygon<T>]) -> T {
    let gap = T::of(CONTACT_GAP);
    let tol = T::of(1e-7);
    let mut total = T::zero();
    for (i, p) in polygons.iter().enumerate() {
        for (a, b) in p.edges() {
            let len = (b - a).norm();
            let u = (b - a) * (T::one() / len);
            let outward = Point::new(u.y, -u.x);
            let mut covered: Vec<(T, T)> = Vec::new();
            for (j, q) in polygons.iter().enumerate() {
                if i == j {
                    continue;
                }
                for (c, d) in q.edges() {
                    let w = d - c;
                    let wl = w.norm();
                    if u.cross(w).abs() > tol * wl || u.dot(w) >= T::zero() {
                        continue;
                    }
                    let dist = (c - a).dot(outward);
                    if dist < -tol || dist > gap {
                        continue;
                    }
                    let s0 = (c - a).dot(u);
                    let s1 = (d - a).dot(u);
                    let lo = s0.min(s1).max(T::zero());
                    let hi = s0.max(s1).min(len);
                    if hi > lo {
                        covered.push((lo, hi));
                    }
                }
            }
            total += len - union_length(&mut covered);
        }
    }
    total
}

fn union_length<T: Scalar>(iv: &mut [(T, T)]) -> T {
    iv.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut sum = T::zero();
    let mut cur: Option<(T, T)> = None;
    for &(lo, hi) in iv.iter() {
        cur = match cur {
            Some((clo, chi)) if lo <= chi => Some((clo, chi.max(hi))),
            Some((clo, chi)) => {
                sum += chi - clo;
                Some((lo, hi))
            }
            None => Some((lo, hi)),
        };
    }
    if let Some((lo, hi)) = cur {
        sum += hi - lo;
    }
    sum
}
