//! Builds the bundled hand-style corpus under `<out>/<family>/`.
//!
//! Pieces are attached edge to edge at multiples of 45 degrees, the finished
//! figure is centered, and every centroid is snapped to the action grid by
//! trying floor and ceil on each axis and keeping the valid combination
//! that covers the most pixels.
//!
//!     cargo run --example author_corpus -p tangram -- objects

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tangram::env::{Action, POS_BINS, WORKSPACE};
use tangram::geometry::{intersection_area, silhouette_perimeter, transform, Piece, PieceId, Point, Polygon, Pose};
use tangram::raster::rasterize;
use tangram::targetgen::{save, Family, TargetObject, MARGIN};

const PER_FAMILY: usize = 10;
const SUB_SHIFTS: usize = 3;
/// Below the overlap a target object tolerates.
const SNAP_OVERLAP: f64 = 5e-4;

fn pieces() -> Vec<Piece<f64>> {
    PieceId::ALL.iter().map(|&id| Piece::canonical(id)).collect()
}

fn overlaps(p: &Polygon<f64>, others: &[Polygon<f64>]) -> bool {
    others.iter().any(|o| intersection_area(p, o) > 1e-9)
}

/// Every pose that puts an edge of `piece` flush against an edge of `placed`,
/// sharing an endpoint, without overlap.
fn attachments(piece: &Piece<f64>, placed: &[Polygon<f64>]) -> Vec<Pose<f64>> {
    let mut out = Vec::new();
    for k in 0..8 {
        let theta = k as f64 * FRAC_PI_4;
        let at_origin = transform(piece, &Pose::new(0.0, 0.0, theta));
        for (a, b) in at_origin.edges() {
            for q in placed {
                for (c, d) in q.edges() {
                    let (u, w) = (b - a, d - c);
                    if u.cross(w).abs() > 1e-9 || u.dot(w) >= 0.0 {
                        continue;
                    }
                    for t in [d - a, c - b] {
                        let pose = Pose::new(t.x, t.y, theta);
                        let poly = transform(piece, &pose);
                        if !overlaps(&poly, placed) && !out.iter().any(|p: &Pose<f64>| (p.x - t.x).abs() + (p.y - t.y).abs() < 1e-9 && p.theta == pose.theta) {
                            out.push(pose);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Composes a figure; `greed` is the chance of taking the most compact
/// attachment rather than a uniformly random one.
fn compose(rng: &mut ChaCha8Rng, greed: f64) -> Option<[Pose<f64>; 7]> {
    let ps = pieces();
    let mut order: Vec<usize> = (0..7).collect();
    order.shuffle(rng);
    let mut poses = [Pose::new(0.0, 0.0, 0.0); 7];
    let mut placed: Vec<Polygon<f64>> = Vec::new();
    for (n, &i) in order.iter().enumerate() {
        let pose = if n == 0 {
            Pose::new(0.0, 0.0, rng.gen_range(0..8) as f64 * FRAC_PI_4)
        } else {
            let cands = attachments(&ps[i], &placed);
            if cands.is_empty() {
                return None;
            }
            if rng.gen_bool(greed) {
                let score = |p: &Pose<f64>| {
                    let mut all = placed.clone();
                    all.push(transform(&ps[i], p));
                    silhouette_perimeter(&all)
                };
                *cands.iter().min_by(|x, y| score(x).total_cmp(&score(y))).expect("non-empty")
            } else {
                *cands.choose(rng).expect("non-empty")
            }
        };
        placed.push(transform(&ps[i], &pose));
        poses[i] = pose;
    }
    Some(poses)
}

/// Centers the figure and snaps every centroid to the grid.
fn snap(poses: &[Pose<f64>; 7]) -> Option<TargetObject> {
    let ps = pieces();
    let polys: Vec<Polygon<f64>> = (0..7).map(|i| transform(&ps[i], &poses[i])).collect();
    let (mut lo, mut hi) = (Point::new(f64::MAX, f64::MAX), Point::new(f64::MIN, f64::MIN));
    for p in &polys {
        let b = p.bbox();
        lo = Point::new(lo.x.min(b.min.x), lo.y.min(b.min.y));
        hi = Point::new(hi.x.max(b.max.x), hi.y.max(b.max.y));
    }
    if hi.x - lo.x > WORKSPACE - 2.0 * MARGIN - 0.5 || hi.y - lo.y > WORKSPACE - 2.0 * MARGIN - 0.5 {
        return None;
    }
    let center = Point::new(WORKSPACE / 2.0, WORKSPACE / 2.0) - (lo + hi) * 0.5;
    let pitch = WORKSPACE / POS_BINS as f64;
    let bin = |v: f64| (v / pitch - 0.5).clamp(0.0, (POS_BINS - 1) as f64);
    let frame = tangram::env::frame();
    let mut best: Option<((usize, f64), [Pose<f64>; 7])> = None;
    for (sx, sy) in (0..SUB_SHIFTS).flat_map(|a| (0..SUB_SHIFTS).map(move |b| (a, b))) {
        let shift = center + Point::new(sx as f64, sy as f64) * (pitch / SUB_SHIFTS as f64);
        let choices: Vec<[Pose<f64>; 4]> = poses
            .iter()
            .map(|p| {
                let (bx, by) = (bin(p.x + shift.x), bin(p.y + shift.y));
                let at = |ix: f64, iy: f64| Action { ix: ix as usize, iy: iy as usize, itheta: Action::snap(p).itheta }.decode();
                [at(bx.floor(), by.floor()), at(bx.ceil(), by.floor()), at(bx.floor(), by.ceil()), at(bx.ceil(), by.ceil())]
            })
            .collect();
        for code in 0..4usize.pow(7) {
            let pick: [Pose<f64>; 7] = std::array::from_fn(|i| choices[i][(code >> (2 * i)) & 3]);
            let polys: Vec<Polygon<f64>> = (0..7).map(|i| transform(&ps[i], &pick[i])).collect();
            let clear = (0..7).all(|i| (i + 1..7).all(|j| intersection_area(&polys[i], &polys[j]) < SNAP_OVERLAP));
            if !clear {
                continue;
            }
            let key = (rasterize(&polys, &frame).count_on(), -silhouette_perimeter(&polys));
            if best.as_ref().map_or(true, |(b, _)| key.0 > b.0 || (key.0 == b.0 && key.1 > b.1 + 1e-12)) {
                best = Some((key, pick));
            }
        }
    }
    let (_, pick) = best?;
    TargetObject::from_poses(pick, None).ok()
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "objects".into()));
    let mut bins: BTreeMap<Family, Vec<TargetObject>> = BTreeMap::new();
    let wanted = [Family::HNormal, Family::HHard, Family::HFiendish];
    let mut seen: Vec<u64> = Vec::new();
    for seed in 0..20_000u64 {
        if wanted.iter().all(|f| bins.get(f).map_or(0, Vec::len) >= PER_FAMILY) {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let greed = [0.0, 0.3, 0.6, 0.9, 1.0][seed as usize % 5];
        let Some(poses) = compose(&mut rng, greed) else { continue };
        let Some(obj) = snap(&poses) else { continue };
        if !wanted.contains(&obj.family) || bins.get(&obj.family).map_or(0, Vec::len) >= PER_FAMILY {
            continue;
        }
        // Skip near-duplicates by silhouette.
        let sig = obj.silhouette().bits().iter().enumerate().filter(|(_, &b)| b).fold(0u64, |h, (i, _)| h.wrapping_mul(31).wrapping_add(i as u64));
        if seen.contains(&sig) {
            continue;
        }
        seen.push(sig);
        eprintln!("seed {seed}: {} perimeter {:.2}", obj.family, obj.perimeter);
        bins.entry(obj.family).or_default().push(obj);
    }
    for (family, objs) in &bins {
        let dir = out.join(family.dir_name());
        fs::create_dir_all(&dir).expect("create corpus directory");
        for (i, obj) in objs.iter().enumerate() {
            fs::write(dir.join(format!("{}-{:02}.json", family.dir_name(), i + 1)), save(obj) + "\n").expect("write object");
        }
        println!("{family}: {}", objs.len());
    }
}
