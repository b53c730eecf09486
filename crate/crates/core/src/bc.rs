//! Behavior cloning from disassembled targets.
//!
//! A target is taken apart smallest piece first; each removal yields the
//! observation before that piece was placed and its snapped ground-truth
//! action. Reversed, that is a seven-step assembly demonstration.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{frame, Action, Env, Observation, NUM_PIECES};
use crate::geometry::PieceId;
use crate::policy::{Adam, Input, LossTerms, PolicyNet, Sample};
use crate::raster::{PixelSet, Raster};
use crate::targetgen::TargetObject;

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSample {
    pub piece: PieceId,
    pub observation: Observation,
    pub action: Action,
}

/// Seven demonstration samples in assembly order.
pub fn disassemble(target: &Arc<TargetObject>) -> Vec<DemoSample> {
    let mut out: Vec<DemoSample> = (0..NUM_PIECES)
        .rev()
        .map(|k| {
            let env = Env::new(target.clone(), k, 0).expect("k < 7");
            let piece = PieceId::ASSEMBLY_ORDER[k];
            DemoSample { piece, observation: env.observation(), action: Action::snap(&target.pose(piece)) }
        })
        .collect();
    out.reverse();
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BcConfig {
    pub epochs: usize,
    pub lr: f64,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self { epochs: 60, lr: 2e-4, minibatch: 32, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of samples whose argmax bin is right, per head.
    pub accuracy: [f64; 3],
}

/// Per-head argmax accuracy of `net` on `inputs`.
pub fn head_accuracy(net: &PolicyNet<f32>, inputs: &[Input], actions: &[Action]) -> [f64; 3] {
    let hits = inputs
        .par_iter()
        .zip(actions)
        .map(|(i, a)| {
            let m = net.forward(i).0.mode();
            [(m.ix == a.ix) as usize, (m.iy == a.iy) as usize, (m.itheta == a.itheta) as usize]
        })
        .reduce(|| [0; 3], |x, y| [x[0] + y[0], x[1] + y[1], x[2] + y[2]]);
    hits.map(|h| h as f64 / inputs.len().max(1) as f64)
}

/// Minimizes the summed cross-entropy of the three heads with Adam.
/// Returns one entry per epoch; zero epochs leave `net` untouched.
pub fn train_bc(net: &mut PolicyNet<f32>, demos: &[DemoSample], config: &BcConfig, parallel: bool, mut progress: impl FnMut(&EpochStats)) -> Vec<EpochStats> {
    let inputs: Vec<Input> = demos.iter().map(|d| Input::from_observation(&d.observation)).collect();
    let actions: Vec<Action> = demos.iter().map(|d| d.action).collect();
    let mut adam = Adam::new(net.params(), config.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut stats = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for chunk in order.chunks(config.minibatch.max(1)) {
            let m = chunk.len() as f32;
            let batch: Vec<Sample<f32>> = chunk
                .iter()
                .map(|&i| Sample { input: &inputs[i], action: actions[i], terms: LossTerms { logp_weight: 1.0 / m, ..LossTerms::zero() } })
                .collect();
            let (g, l) = net.gradients(&batch, parallel);
            loss += l as f64 * m as f64;
            adam.step(net.params_mut(), &g);
        }
        let s = EpochStats { epoch, loss: loss / demos.len() as f64, accuracy: head_accuracy(net, &inputs, &actions) };
        progress(&s);
        stats.push(s);
    }
    stats
}

/// Splits named objects into (train, held-out) by a seeded shuffle. At
/// least one object lands on each side when there are two or more; both
/// halves come back sorted by name.
pub fn split_by_object<T: Clone>(objects: &[(String, T)], holdout: f64, seed: u64) -> (Vec<(String, T)>, Vec<(String, T)>) {
    let mut all = objects.to_vec();
    all.sort_by(|a, b| a.0.cmp(&b.0));
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = if all.len() < 2 { 0 } else { ((all.len() as f64 * holdout).round() as usize).clamp(1, all.len() - 1) };
    let mut held = all.split_off(all.len() - n_held);
    all.sort_by(|a, b| a.0.cmp(&b.0));
    held.sort_by(|a, b| a.0.cmp(&b.0));
    (all, held)
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("demo line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("missing raster {0}")]
    MissingRaster(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoLine {
    piece: PieceId,
    silhouette: String,
    workspace: String,
    action: Action,
}

fn raster_hash(pgm: &[u8]) -> String {
    hex::encode(Sha256::digest(pgm))
}

/// Writes `demos.jsonl` plus a `rasters/` directory of PGM files named by
/// the SHA-256 of their bytes.
pub fn save_demos(dir: &Path, demos: &[DemoSample]) -> Result<(), DemoError> {
    let rasters = dir.join("rasters");
    fs::create_dir_all(&rasters)?;
    let mut written = BTreeSet::new();
    let mut lines = String::new();
    for d in demos {
        let mut names = [String::new(), String::new()];
        for (name, r) in names.iter_mut().zip([&*d.observation.silhouette, &d.observation.workspace]) {
            let pgm = r.to_pgm();
            *name = raster_hash(&pgm);
            if written.insert(name.clone()) {
                fs::write(rasters.join(format!("{name}.pgm")), &pgm)?;
            }
        }
        let [silhouette, workspace] = names;
        let line = DemoLine { piece: d.piece, silhouette, workspace, action: d.action };
        lines.push_str(&serde_json::to_string(&line).expect("demo line serializes"));
        lines.push('\n');
    }
    let mut f = fs::File::create(dir.join("demos.jsonl"))?;
    f.write_all(lines.as_bytes())?;
    Ok(())
}

fn parse_pgm(bytes: &[u8]) -> Option<Raster<f64>> {
    let f = frame();
    let header = format!("P5\n{} {}\n255\n", f.width, f.height);
    let body = bytes.strip_prefix(header.as_bytes())?;
    if body.len() != f.len() {
        return None;
    }
    // PGM rows run top to bottom; raster row 0 is the bottom.
    let mut on = Vec::new();
    for (i, &v) in body.iter().enumerate() {
        if v != 0 {
            let (r, c) = (f.height - 1 - i / f.width, i % f.width);
            on.push((r * f.width + c) as u32);
        }
    }
    let mut raster = Raster::empty(f);
    raster.set_all(&PixelSet::from_indices(on));
    Some(raster)
}

pub fn load_demos(dir: &Path) -> Result<Vec<DemoSample>, DemoError> {
    let file = fs::File::open(dir.join("demos.jsonl"))?;
    let read = |name: &str| -> Result<Raster<f64>, DemoError> {
        let bytes = fs::read(dir.join("rasters").join(format!("{name}.pgm"))).map_err(|_| DemoError::MissingRaster(name.to_string()))?;
        parse_pgm(&bytes).ok_or_else(|| DemoError::MissingRaster(name.to_string()))
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DemoLine = serde_json::from_str(&line).map_err(|e| DemoError::Malformed { line: i + 1, msg: e.to_string() })?;
        let observation = Observation { silhouette: Arc::new(read(&d.silhouette)?), workspace: read(&d.workspace)? };
        out.push(DemoSample { piece: d.piece, observation, action: d.action });
    }
    Ok(out)
}
