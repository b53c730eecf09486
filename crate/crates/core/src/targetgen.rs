//! Target objects: random generation, JSON storage, and difficulty families.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{frame, Action, POS_BINS, ROT_BINS, WORKSPACE};
use crate::geometry::{intersection_area, silhouette_perimeter, transform, Piece, PieceId, Polygon, Pose, OVERLAP_EPS};
use crate::raster::{piece_pixels, PixelSet, Raster};

/// Minimum clearance between any piece and the workspace border.
pub const MARGIN: f64 = 0.5;

/// Perimeter cut-offs (workspace units, inclusive) for the hand-made families.
pub const FIENDISH_MAX_PERIMETER: f64 = 18.0;
pub const HARD_MAX_PERIMETER: f64 = 22.0;
pub const NORMAL_MAX_PERIMETER: f64 = 27.0;

/// Overlap area above which the generator rejects a placement.
const GEN_OVERLAP: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("generation failed (seed {seed}, piece {piece})")]
    GenerationFailed { seed: u64, piece: PieceId },
    #[error("malformed object document: {0}")]
    Malformed(String),
    #[error("unsupported object version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown piece id {0:?}")]
    UnknownPiece(String),
    #[error("duplicate piece {0}")]
    DuplicatePiece(PieceId),
    #[error("all seven pieces required (missing {0:?})")]
    MissingPieces(Vec<PieceId>),
    #[error("ground-truth overlap between {0} and {1}")]
    Overlap(PieceId, PieceId),
    #[error("piece {0} outside the workspace margin")]
    OutOfWorkspace(PieceId),
    #[error("degenerate target region for {0}")]
    Degenerate(PieceId),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Difficulty family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    Random,
    HNormal,
    HHard,
    HFiendish,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Random, Family::HNormal, Family::HHard, Family::HFiendish];

    /// Directory name in a corpus tree.
    pub fn dir_name(self) -> &'static str {
        match self {
            Family::Random => "random",
            Family::HNormal => "h-normal",
            Family::HHard => "h-hard",
            Family::HFiendish => "h-fiendish",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        match norm.as_str() {
            "random" => Some(Family::Random),
            "hnormal" | "normal" => Some(Family::HNormal),
            "hhard" | "hard" => Some(Family::HHard),
            "hfiendish" | "fiendish" => Some(Family::HFiendish),
            _ => None,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Random => "Random",
            Family::HNormal => "H-Normal",
            Family::HHard => "H-Hard",
            Family::HFiendish => "H-Fiendish",
        })
    }
}

/// Family from silhouette perimeter alone.
pub fn classify_perimeter(perimeter: f64) -> Family {
    if perimeter <= FIENDISH_MAX_PERIMETER {
        Family::HFiendish
    } else if perimeter <= HARD_MAX_PERIMETER {
        Family::HHard
    } else if perimeter <= NORMAL_MAX_PERIMETER {
        Family::HNormal
    } else {
        Family::Random
    }
}

pub fn classify(obj: &TargetObject) -> Family {
    classify_perimeter(obj.perimeter)
}

/// Seven ground-truth poses plus everything derived from them.
#[derive(Clone, Debug)]
pub struct TargetObject {
    poses: [Pose<f64>; 7],
    polygons: Vec<Polygon<f64>>,
    silhouette: Raster<f64>,
    per_piece_target: Vec<PixelSet>,
    pub perimeter: f64,
    pub family: Family,
}

impl TargetObject {
    /// Validates the poses (indexed by `PieceId::index`) and derives the
    /// silhouette, per-piece targets and perimeter. The family is classified
    /// from the perimeter unless given.
    pub fn from_poses(poses: [Pose<f64>; 7], family: Option<Family>) -> Result<Self, TargetError> {
        let polygons: Vec<Polygon<f64>> =
            PieceId::ALL.iter().map(|&id| transform(&Piece::canonical(id), &poses[id.index()])).collect();
        for id in PieceId::ALL {
            if !polygons[id.index()].within(MARGIN, WORKSPACE - MARGIN) {
                return Err(TargetError::OutOfWorkspace(id));
            }
        }
        for i in 0..7 {
            for j in i + 1..7 {
                if intersection_area(&polygons[i], &polygons[j]) >= OVERLAP_EPS {
                    return Err(TargetError::Overlap(PieceId::ALL[i], PieceId::ALL[j]));
                }
            }
        }
        let f = frame();
        let per_piece_target: Vec<PixelSet> = polygons.iter().map(|p| piece_pixels(p, &f)).collect();
        if let Some(i) = per_piece_target.iter().position(|s| s.is_empty()) {
            return Err(TargetError::Degenerate(PieceId::ALL[i]));
        }
        let mut silhouette = Raster::empty(f);
        for s in &per_piece_target {
            silhouette.set_all(s);
        }
        let perimeter = silhouette_perimeter(&polygons);
        Ok(Self {
            poses,
            polygons,
            silhouette,
            per_piece_target,
            perimeter,
            family: family.unwrap_or_else(|| classify_perimeter(perimeter)),
        })
    }

    pub fn pose(&self, id: PieceId) -> Pose<f64> {
        self.poses[id.index()]
    }

    pub fn poses(&self) -> &[Pose<f64>; 7] {
        &self.poses
    }

    pub fn polygon(&self, id: PieceId) -> &Polygon<f64> {
        &self.polygons[id.index()]
    }

    pub fn polygons(&self) -> &[Polygon<f64>] {
        &self.polygons
    }

    /// The silhouette prompt.
    pub fn silhouette(&self) -> &Raster<f64> {
        &self.silhouette
    }

    /// Ground-truth pixel set of one piece on the silhouette.
    pub fn target_pixels(&self, id: PieceId) -> &PixelSet {
        &self.per_piece_target[id.index()]
    }

    /// Whether every ground-truth pose is exactly an action-grid pose.
    pub fn on_action_grid(&self) -> bool {
        self.poses.iter().all(|p| Action::snap(p).decode() == *p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenMode {
    RandomPlace,
    GravityCluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub mode: GenMode,
    pub seed: u64,
    /// Half-width of the square around the workspace center that the
    /// attraction point is drawn from.
    pub attraction_point_jitter: f64,
    /// Placement attempts per piece.
    pub max_rejection_tries: usize,
}

impl GenConfig {
    pub fn new(mode: GenMode, seed: u64) -> Self {
        Self { mode, seed, attraction_point_jitter: 1.5, max_rejection_tries: 2000 }
    }
}

/// Generates a random target. Poses lie on the action grid, so every
/// generated target is exactly reachable by some action sequence.
pub fn generate(config: &GenConfig) -> Result<TargetObject, TargetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut actions = random_layout(&mut rng, config)?;
    if config.mode == GenMode::GravityCluster {
        let j = config.attraction_point_jitter;
        let center = WORKSPACE / 2.0;
        let attractor = (center + rng.gen_range(-j..=j), center + rng.gen_range(-j..=j));
        gravity_cluster(&mut actions, attractor);
    }
    TargetObject::from_poses(actions.map(|a| a.decode()), Some(Family::Random))
}

fn placed_polygon(id: PieceId, a: Action) -> Polygon<f64> {
    transform(&Piece::canonical(id), &a.decode())
}

fn fits(poly: &Polygon<f64>, others: &[Polygon<f64>]) -> bool {
    poly.within(MARGIN, WORKSPACE - MARGIN) && others.iter().all(|o| intersection_area(poly, o) <= GEN_OVERLAP)
}

/// Uniform pose per piece in assembly order, rejecting overlaps.
fn random_layout(rng: &mut ChaCha8Rng, config: &GenConfig) -> Result<[Action; 7], TargetError> {
    let mut actions = [Action::default(); 7];
    let mut placed: Vec<Polygon<f64>> = Vec::with_capacity(7);
    for id in PieceId::ASSEMBLY_ORDER {
        let mut accepted = None;
        for _ in 0..config.max_rejection_tries.max(1) {
            let a = Action::new(rng.gen_range(0..POS_BINS), rng.gen_range(0..POS_BINS), rng.gen_range(0..ROT_BINS))
                .expect("bins in range");
            let poly = placed_polygon(id, a);
            if fits(&poly, &placed) {
                accepted = Some((a, poly));
                break;
            }
        }
        let (a, poly) = accepted.ok_or(TargetError::GenerationFailed { seed: config.seed, piece: id })?;
        actions[id.index()] = a;
        placed.push(poly);
    }
    Ok(actions)
}

/// Moves pieces one grid bin at a time toward `attractor` until every further
/// step toward it would overlap another piece or leave the margin.
fn gravity_cluster(actions: &mut [Action; 7], attractor: (f64, f64)) {
    let pitch = WORKSPACE / POS_BINS as f64;
    let mut polys: Vec<Polygon<f64>> = PieceId::ALL.iter().map(|&id| placed_polygon(id, actions[id.index()])).collect();
    let dist = |a: &Action| {
        let p = a.decode();
        (p.x - attractor.0).hypot(p.y - attractor.1)
    };
    for _pass in 0..4 * POS_BINS {
        let mut order: Vec<usize> = (0..7).collect();
        order.sort_by(|&i, &j| dist(&actions[i]).total_cmp(&dist(&actions[j])).then(i.cmp(&j)));
        let mut moved = false;
        for i in order {
            loop {
                let a = actions[i];
                let p = a.decode();
                let (dx, dy) = (attractor.0 - p.x, attractor.1 - p.y);
                let step_x = (dx.abs() > pitch / 2.0).then(|| if dx > 0.0 { 1 } else { -1 });
                let step_y = (dy.abs() > pitch / 2.0).then(|| if dy > 0.0 { 1 } else { -1 });
                let mut cands: Vec<Action> = Vec::with_capacity(2);
                let mut push = |sx: i64, sy: i64| {
                    let nx = a.ix as i64 + sx;
                    let ny = a.iy as i64 + sy;
                    if (0..POS_BINS as i64).contains(&nx) && (0..POS_BINS as i64).contains(&ny) {
                        cands.push(Action { ix: nx as usize, iy: ny as usize, itheta: a.itheta });
                    }
                };
                if dx.abs() >= dy.abs() {
                    if let Some(s) = step_x {
                        push(s, 0);
                    }
                    if let Some(s) = step_y {
                        push(0, s);
                    }
                } else {
                    if let Some(s) = step_y {
                        push(0, s);
                    }
                    if let Some(s) = step_x {
                        push(s, 0);
                    }
                }
                let id = PieceId::ALL[i];
                let others: Vec<Polygon<f64>> =
                    polys.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.clone()).collect();
                let next = cands.into_iter().find_map(|c| {
                    let poly = placed_polygon(id, c);
                    fits(&poly, &others).then_some((c, poly))
                });
                match next {
                    Some((c, poly)) => {
                        actions[i] = c;
                        polys[i] = poly;
                        moved = true;
                    }
                    None => break,
                }
            }
        }
        if !moved {
            break;
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PieceRecord {
    id: String,
    x: f64,
    y: f64,
    theta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDocument {
    version: u32,
    pieces: Vec<PieceRecord>,
}

pub const OBJECT_VERSION: u32 = 1;

/// Serializes the ground-truth poses as an object JSON document.
pub fn save(obj: &TargetObject) -> String {
    let doc = ObjectDocument {
        version: OBJECT_VERSION,
        pieces: PieceId::ALL
            .iter()
            .map(|&id| {
                let p = obj.pose(id);
                PieceRecord { id: id.name().to_string(), x: p.x, y: p.y, theta: p.theta }
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("object document serializes")
}

/// Parses and revalidates an object document.
pub fn load(text: &str) -> Result<TargetObject, TargetError> {
    let doc: ObjectDocument = serde_json::from_str(text).map_err(|e| TargetError::Malformed(e.to_string()))?;
    if doc.version != OBJECT_VERSION {
        return Err(TargetError::UnsupportedVersion(doc.version));
    }
    let mut poses: [Option<Pose<f64>>; 7] = [None; 7];
    for rec in &doc.pieces {
        let id = PieceId::parse(&rec.id).ok_or_else(|| TargetError::UnknownPiece(rec.id.clone()))?;
        if poses[id.index()].is_some() {
            return Err(TargetError::DuplicatePiece(id));
        }
        poses[id.index()] = Some(Pose::new(rec.x, rec.y, rec.theta));
    }
    let missing: Vec<PieceId> = PieceId::ALL.into_iter().filter(|id| poses[id.index()].is_none()).collect();
    if !missing.is_empty() {
        return Err(TargetError::MissingPieces(missing));
    }
    TargetObject::from_poses(poses.map(|p| p.expect("checked")), None)
}

pub fn load_file(path: &Path) -> Result<TargetObject, TargetError> {
    let text = std::fs::read_to_string(path).map_err(|source| TargetError::Io { path: path.to_path_buf(), source })?;
    load(&text)
}

/// One named object of a corpus.
#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub name: String,
    pub object: TargetObject,
}

/// Loads `<dir>/<family>/<name>.json`, sorted by family then name. The family
/// of each entry is its directory.
pub fn load_corpus(dir: &Path) -> Result<BTreeMap<Family, Vec<CorpusEntry>>, TargetError> {
    let mut out: BTreeMap<Family, Vec<CorpusEntry>> = BTreeMap::new();
    for family in Family::ALL {
        let sub = dir.join(family.dir_name());
        if !sub.is_dir() {
            continue;
        }
        let rd = std::fs::read_dir(&sub).map_err(|source| TargetError::Io { path: sub.clone(), source })?;
        let mut paths: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let mut object = load_file(&path)?;
            object.family = family;
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.entry(family).or_default().push(CorpusEntry { name, object });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_tiling(offset: (f64, f64)) -> [Pose<f64>; 7] {
        PieceId::ALL.map(|id| {
            let c = Piece::<f64>::canonical(id).centroid();
            Pose::new(c.x + offset.0, c.y + offset.1, 0.0)
        })
    }

    #[test]
    fn generation_is_deterministic() {
        for mode in [GenMode::RandomPlace, GenMode::GravityCluster] {
            let c = GenConfig::new(mode, 42);
            let a = generate(&c).unwrap();
            let b = generate(&c).unwrap();
            assert_eq!(a.poses(), b.poses());
            assert_eq!(a.silhouette(), b.silhouette());
            assert_eq!(a.family, Family::Random);
        }
    }

    #[test]
    fn generated_targets_satisfy_invariants() {
        for seed in 0..300 {
            for mode in [GenMode::RandomPlace, GenMode::GravityCluster] {
                let t = generate(&GenConfig::new(mode, seed)).unwrap();
                assert!(t.on_action_grid());
                for i in 0..7 {
                    assert!(t.polygons()[i].within(MARGIN, WORKSPACE - MARGIN));
                    for j in i + 1..7 {
                        assert!(intersection_area(&t.polygons()[i], &t.polygons()[j]) < OVERLAP_EPS);
                    }
                }
                let total: usize = PieceId::ALL.iter().map(|&id| t.target_pixels(id).len()).sum();
                assert_eq!(total, t.silhouette().count_on(), "per-piece sets partition the silhouette");
            }
        }
    }

    #[test]
    fn rejection_budget_is_enforced() {
        let mut c = GenConfig::new(GenMode::RandomPlace, 3);
        c.max_rejection_tries = 1;
        // With one try per piece some seed in a small range must fail.
        let failures = (0..50)
            .filter(|&s| {
                c.seed = s;
                matches!(generate(&c), Err(TargetError::GenerationFailed { .. }))
            })
            .count();
        assert!(failures > 0);
    }

    #[test]
    fn classify_thresholds() {
        let sq = TargetObject::from_poses(square_tiling((5.0, 5.0)), None).unwrap();
        assert!((sq.perimeter - 16.0).abs() < 1e-9);
        assert_eq!(classify(&sq), Family::HFiendish);
        assert_eq!(classify_perimeter(22.0), Family::HHard);
        assert_eq!(classify_perimeter(18.0), Family::HFiendish);
        assert_eq!(classify_perimeter(27.0), Family::HNormal);
        assert_eq!(classify_perimeter(27.01), Family::Random);
        let scattered = generate(&GenConfig::new(GenMode::RandomPlace, 0)).unwrap();
        assert_eq!(classify(&scattered), Family::Random);
    }

    #[test]
    fn json_round_trip() {
        let t = generate(&GenConfig::new(GenMode::GravityCluster, 9)).unwrap();
        let back = load(&save(&t)).unwrap();
        for (a, b) in t.poses().iter().zip(back.poses()) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9 && (a.theta - b.theta).abs() < 1e-9);
        }
        assert_eq!(t.silhouette(), back.silhouette());
        assert!((t.perimeter - back.perimeter).abs() < 1e-12);
    }

    #[test]
    fn load_errors_are_distinct() {
        let t = TargetObject::from_poses(square_tiling((5.0, 5.0)), None).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&save(&t)).unwrap();

        assert!(matches!(load("{not json"), Err(TargetError::Malformed(_))));

        let mut missing = doc.clone();
        missing["pieces"].as_array_mut().unwrap().pop();
        let err = load(&missing.to_string()).unwrap_err();
        assert!(matches!(err, TargetError::MissingPieces(_)));
        assert!(err.to_string().contains("all seven pieces required"));

        let mut unknown = doc.clone();
        unknown["pieces"][0]["id"] = "XX".into();
        assert!(matches!(load(&unknown.to_string()), Err(TargetError::UnknownPiece(_))));

        // Give ST2 the pose of ST1: two pieces stacked on one spot.
        let st1 = doc["pieces"][4].clone();
        doc["pieces"][5]["x"] = st1["x"].clone();
        doc["pieces"][5]["y"] = st1["y"].clone();
        doc["pieces"][5]["theta"] = st1["theta"].clone();
        let err = load(&doc.to_string()).unwrap_err();
        assert!(matches!(err, TargetError::Overlap(..)));
        assert!(err.to_string().contains("ground-truth overlap"));

        let mut version = serde_json::from_str::<serde_json::Value>(&save(&t)).unwrap();
        version["version"] = 2.into();
        assert!(matches!(load(&version.to_string()), Err(TargetError::UnsupportedVersion(2))));
    }

    #[test]
    fn gravity_shortens_perimeter() {
        let n = 1000u64;
        let mut not_longer = 0;
        let (mut sum_r, mut sum_g) = (0.0, 0.0);
        for seed in 0..n {
            let r = generate(&GenConfig::new(GenMode::RandomPlace, seed)).unwrap();
            let g = generate(&GenConfig::new(GenMode::GravityCluster, seed)).unwrap();
            // Clustering starts from the same random layout.
            if g.perimeter <= r.perimeter + 1e-9 {
                not_longer += 1;
            }
            sum_r += r.perimeter;
            sum_g += g.perimeter;
        }
        assert!(not_longer as f64 >= 0.9 * n as f64, "{not_longer}");
        assert!(sum_g < sum_r, "{} vs {}", sum_g / n as f64, sum_r / n as f64);
    }
}
