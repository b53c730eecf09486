//! Self-checks run by `tangram env-check`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tangram::env::{Action, Env, NUM_PIECES, POS_BINS, ROT_BINS};
use tangram::geometry::{canonical_pieces, intersection_area, transform, PieceId};
use tangram::policy::{Architecture, ConvSpec, Input, LossTerms, PolicyNet, Sample};
use tangram::targetgen::{generate, save, GenConfig, GenMode};

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all() -> Vec<Check> {
    vec![tiling(), reward_bounds(), determinism(), gradients()]
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn tiling() -> Check {
    let pieces = canonical_pieces::<f64>();
    let polys: Vec<_> = pieces.iter().map(|p| transform(p, &p.canonical_pose())).collect();
    let total: f64 = polys.iter().map(|p| p.area()).sum();
    let mut worst = 0.0f64;
    for i in 0..polys.len() {
        for j in i + 1..polys.len() {
            worst = worst.max(intersection_area(&polys[i], &polys[j]));
        }
    }
    let inside = polys.iter().all(|p| p.within(0.0 - 1e-12, 4.0 + 1e-12));
    let passed = (total - 16.0).abs() <= 1e-9 && worst <= 1e-9 && inside;
    check("tiling", passed, format!("area sum {total:.12}, max pairwise overlap {worst:.3e}"))
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    Action { ix: rng.gen_range(0..POS_BINS), iy: rng.gen_range(0..POS_BINS), itheta: rng.gen_range(0..ROT_BINS) }
}

fn reward_bounds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exact_ok = true;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let episodes = 200;
    for seed in 0..episodes {
        let target = Arc::new(generate(&GenConfig::new(GenMode::RandomPlace, seed)).expect("generator succeeds"));
        let mut exact = Env::new(target.clone(), 0, 0).expect("valid");
        let r = exact.step_pose(&target.pose(PieceId::ASSEMBLY_ORDER[0])).expect("not finished").reward;
        exact_ok &= r == 1.0;
        let mut env = Env::new(target, rng.gen_range(0..NUM_PIECES), seed).expect("valid");
        while !env.is_done() {
            let r = env.step(random_action(&mut rng)).expect("not finished").reward;
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    let passed = exact_ok && lo >= 0.0 && hi <= 1.0;
    check("reward-bounds", passed, format!("{episodes} fuzzed episodes, rewards in [{lo:.4}, {hi:.4}], exact pose gives 1.0: {exact_ok}"))
}

fn determinism() -> Check {
    let gen = |mode, seed| save(&generate(&GenConfig::new(mode, seed)).expect("generator succeeds"));
    let files_equal = [GenMode::RandomPlace, GenMode::GravityCluster].into_iter().all(|m| (0..5).all(|s| gen(m, s) == gen(m, s)));
    let trace = |seed: u64| {
        let target = Arc::new(generate(&GenConfig::new(GenMode::RandomPlace, seed)).expect("generator succeeds"));
        let mut env = Env::new(target, 0, seed).expect("valid");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while !env.is_done() {
            env.step(random_action(&mut rng)).expect("not finished");
        }
        env.trace_jsonl()
    };
    let traces_equal = (0..5).all(|s| trace(s) == trace(s));
    check("determinism", files_equal && traces_equal, format!("generation identical: {files_equal}, traces identical: {traces_equal}"))
}

fn gradients() -> Check {
    let arch = Architecture {
        input: 13,
        convs: vec![
            ConvSpec { out_channels: 3, kernel: 5, stride: 2 },
            ConvSpec { out_channels: 4, kernel: 3, stride: 1 },
            ConvSpec { out_channels: 3, kernel: 2, stride: 1 },
        ],
        hidden: 6,
        heads: [5, 4, 3],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..3 {
        let mut net = PolicyNet::<f64>::new(arch.clone(), &mut rng);
        for t in &mut net.params_mut().tensors {
            for w in t.iter_mut() {
                *w += rng.gen_range(-0.5..0.5);
            }
        }
        let bits: Vec<Vec<bool>> = (0..2).map(|_| (0..13 * 13).map(|_| rng.gen_bool(0.4)).collect()).collect();
        let input = Input::from_bits(13, [&bits[0], &bits[1]]);
        let action = Action { ix: rng.gen_range(0..5), iy: rng.gen_range(0..4), itheta: rng.gen_range(0..3) };
        let terms = LossTerms {
            logp_weight: rng.gen_range(-1.0..1.0),
            value_weight: rng.gen_range(0.1..1.0),
            value_target: rng.gen_range(-1.0..1.0),
            entropy_weight: rng.gen_range(0.0..0.5),
        };
        let sample = Sample { input: &input, action, terms };
        let (g, _) = net.gradients(std::slice::from_ref(&sample), false);
        let h = 1e-4;
        for ti in 0..g.tensors.len() {
            for i in 0..g.tensors[ti].len() {
                let orig = net.params().tensors[ti][i];
                net.params_mut().tensors[ti][i] = orig + h;
                let up = net.loss(&sample);
                net.params_mut().tensors[ti][i] = orig - h;
                let down = net.loss(&sample);
                net.params_mut().tensors[ti][i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = g.tensors[ti][i];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    check("gradient", worst <= 1e-3, format!("{checked} parameters, max relative error {worst:.2e}"))
}
