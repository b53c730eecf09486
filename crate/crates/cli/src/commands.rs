use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tangram::bc::{disassemble, save_demos, split_by_object, train_bc, BcConfig};
use tangram::env::Env;
use tangram::eval::{
    corpus_tasks, evaluate, random_tasks, sha256_hex, Controller, EvalReport, LearnedPolicy, Oracle, Provenance, Task, UniformRandom,
};
use tangram::oracle::{solve, SearchConfig, SearchMode};
use tangram::policy::{Architecture, CheckpointError, PolicyNet};
use tangram::ppo::{train, ConfigError, TrainConfig, TrainOutput};
use tangram::targetgen::{self, generate, load_corpus, Family, GenConfig, GenMode, TargetError, TargetObject};

use crate::{
    check, Cli, Command, EvalArgs, Failure, GenArgs, ModeArg, PolicyArg, RenderArgs, SolveArgs, SolveMode, TrainBcArgs, TrainPpoArgs,
};

pub const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nobject format v1, checkpoint format v1\nnetwork: 3 conv + dense, heads 60/60/8, input 2x120x120"
);

type Result<T> = std::result::Result<T, Failure>;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => gen(cli, a),
        Command::Render(a) => render(a),
        Command::TrainPpo(a) => train_ppo(cli, a),
        Command::TrainBc(a) => train_bc_cmd(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Solve(a) => solve_cmd(cli, a),
        Command::EnvCheck => env_check(),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".tangram-write-probe");
    fs::write(&probe, b"").map_err(|e| usage(format!("output directory {} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display())).map_err(Failure::Internal)
}

fn load_target(path: &Path) -> Result<TargetObject> {
    targetgen::load_file(path).map_err(|e| match e {
        TargetError::Io { .. } => usage(e.to_string()),
        other => Failure::Artifact(format!("{}: {other}", path.display())),
    })
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    out_dir(&a.out)?;
    let mode = match a.mode {
        ModeArg::Random => GenMode::RandomPlace,
        ModeArg::Gravity => GenMode::GravityCluster,
    };
    let mut objects = Vec::with_capacity(a.count);
    let mut perimeter_sum = 0.0;
    for i in 0..a.count as u64 {
        let seed = cli.seed.wrapping_add(i);
        let obj = generate(&GenConfig::new(mode, seed)).map_err(|e| Failure::Internal(e.into()))?;
        let file = format!("obj_{i:05}.json");
        write(&a.out.join(&file), targetgen::save(&obj) + "\n")?;
        perimeter_sum += obj.perimeter;
        objects.push(json!({ "file": file, "seed": seed, "perimeter": obj.perimeter, "family": obj.family.dir_name() }));
    }
    let manifest = json!({
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "seed": cli.seed,
        "count": a.count,
        "mean_perimeter": perimeter_sum / a.count as f64,
        "objects": objects,
    });
    write(&a.out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    println!("wrote {} objects to {}", a.count, a.out.display());
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let obj = load_target(&a.target)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    write(&a.out, obj.silhouette().to_pgm())
}

fn config_failure(path: &Path, e: ConfigError) -> Failure {
    usage(format!("{}: {e}", path.display()))
}

fn train_ppo(cli: &Cli, a: &TrainPpoArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| usage(format!("cannot read {}: {e}", a.config.display())))?;
    let config = TrainConfig::from_toml(&text).map_err(|e| config_failure(&a.config, e))?;
    out_dir(&a.out)?;
    let outcome = train(&config, Some(TrainOutput { dir: &a.out }), cli.deterministic, |row| {
        if row.update % 50 == 0 || row.stage_switch {
            eprintln!("update {:>5} [{}] rela {:.3} entropy {:.2}", row.update, row.stage, row.mean_rela, row.entropy);
        }
    })
    .map_err(|e| Failure::Internal(e.into()))?;
    let tail = outcome.log.len().min(config.plateau_window);
    let recent = outcome.log[outcome.log.len() - tail..].iter().map(|r| r.mean_rela).sum::<f64>() / tail.max(1) as f64;
    let summary = json!({
        "updates": outcome.log.len(),
        "stage_switch_update": outcome.stage_switch,
        "config_hash": config.hash(),
        "checkpoints": outcome.checkpoints.iter().map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect::<Vec<_>>(),
        "recent_mean_rela": recent,
    });
    write(&a.out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    match outcome.stage_switch {
        Some(u) => println!("stage switch at update {u}"),
        None => println!("no stage switch"),
    }
    Ok(())
}

fn split_key(f: Family, name: &str) -> String {
    format!("{}/{name}", f.dir_name())
}

fn train_bc_cmd(cli: &Cli, a: &TrainBcArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(usage("--holdout must be in [0, 1)"));
    }
    if a.epochs == 0 || a.minibatch == 0 || !(a.lr > 0.0) {
        return Err(usage("--epochs, --minibatch and --lr must be positive"));
    }
    let corpus = load_corpus(&a.corpus).map_err(|e| Failure::Artifact(e.to_string()))?;
    let entries: Vec<(String, Arc<TargetObject>)> =
        corpus.iter().flat_map(|(f, es)| es.iter().map(|e| (split_key(*f, &e.name), Arc::new(e.object.clone())))).collect();
    if entries.len() < 2 {
        return Err(usage(format!("corpus {} needs at least two objects", a.corpus.display())));
    }
    out_dir(&a.out)?;
    let (trained, held) = split_by_object(&entries, a.holdout, cli.seed);
    let split = json!({
        "seed": cli.seed,
        "train": trained.iter().map(|e| &e.0).collect::<Vec<_>>(),
        "heldout": held.iter().map(|e| &e.0).collect::<Vec<_>>(),
    });
    write(&a.out.join("split.json"), serde_json::to_string_pretty(&split).expect("split serializes") + "\n")?;

    let demos: Vec<_> = trained.iter().flat_map(|(_, t)| disassemble(t)).collect();
    save_demos(&a.out.join("demos"), &demos).map_err(|e| Failure::Internal(e.into()))?;

    let mut net = PolicyNet::<f32>::new(Architecture::standard(), &mut ChaCha8Rng::seed_from_u64(cli.seed));
    let cfg = BcConfig { epochs: a.epochs, lr: a.lr, minibatch: a.minibatch, seed: cli.seed };
    let mut log = String::from("epoch,loss,acc_x,acc_y,acc_theta\n");
    let stats = train_bc(&mut net, &demos, &cfg, !cli.deterministic, |s| {
        if s.epoch % 10 == 0 {
            eprintln!("epoch {:>4} loss {:.4} acc {:.3}/{:.3}/{:.3}", s.epoch, s.loss, s.accuracy[0], s.accuracy[1], s.accuracy[2]);
        }
    });
    for s in &stats {
        writeln!(log, "{},{:.6},{:.6},{:.6},{:.6}", s.epoch, s.loss, s.accuracy[0], s.accuracy[1], s.accuracy[2]).expect("writing to a string");
    }
    write(&a.out.join("bc_log.csv"), log)?;
    write(&a.out.join("bc.bin"), net.to_bytes())?;

    let policy = LearnedPolicy { name: "bc".into(), net, stochastic: false };
    let as_tasks = |es: &[(String, Arc<TargetObject>)]| -> Vec<Task> { es.iter().map(|(n, t)| Task { name: n.clone(), target: t.clone() }).collect() };
    let mut summary = serde_json::Map::new();
    for (split, es) in [("train", &trained), ("heldout", &held)] {
        let (row, _) = evaluate(&policy, Family::Random, &as_tasks(es), 0, cli.seed);
        println!("{split:>8}: rela {:.3} final {:.3}", row.mean_rela, row.mean_final);
        summary.insert(
            split.into(),
            json!({ "n_episodes": row.n_episodes, "mean_rela": row.mean_rela, "mean_final": row.mean_final, "step_means": row.step_means }),
        );
    }
    write(&a.out.join("split_eval.json"), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    Ok(())
}

fn load_policy(path: &Path) -> Result<(PolicyNet<f32>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let net = PolicyNet::<f32>::load(bytes.as_slice(), Some(&Architecture::standard())).map_err(|e| match e {
        CheckpointError::Io(io) => Failure::Artifact(format!("{}: {io}", path.display())),
        other => Failure::Artifact(format!("{}: {other}", path.display())),
    })?;
    Ok((net, bytes))
}

/// Training config stored next to a PPO checkpoint, if any.
fn sibling_config(checkpoint: &Path) -> Option<String> {
    let text = fs::read_to_string(checkpoint.parent()?.join("config.toml")).ok()?;
    TrainConfig::from_toml(&text).ok().map(|c| c.to_toml())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let family = Family::parse(&a.family).ok_or_else(|| usage(format!("unknown family {:?}", a.family)))?;
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if a.pre_assembled >= tangram::env::NUM_PIECES {
        return Err(usage("--pre-assembled must be in 0..=6"));
    }
    let learned = matches!(a.policy, PolicyArg::Ppo | PolicyArg::Bc);
    if learned && a.checkpoint.is_none() {
        return Err(usage("--checkpoint is required for learned policies"));
    }
    let tasks = match family {
        Family::Random => random_tasks(a.n),
        f => {
            let corpus = load_corpus(&a.corpus).map_err(|e| Failure::Artifact(e.to_string()))?;
            let entries = corpus.get(&f).map(Vec::as_slice).unwrap_or_default();
            if entries.is_empty() {
                return Err(usage(format!("no {} objects under {}", f.dir_name(), a.corpus.display())));
            }
            corpus_tasks(&entries[..a.n.min(entries.len())])
        }
    };
    out_dir(&a.out)?;

    let mut checkpoint_hash = String::new();
    let mut train_config = String::new();
    let controller: Box<dyn Controller> = match a.policy {
        PolicyArg::Ppo | PolicyArg::Bc => {
            let path = a.checkpoint.as_ref().expect("checked above");
            let (net, bytes) = load_policy(path)?;
            checkpoint_hash = sha256_hex(&bytes);
            train_config = sibling_config(path).unwrap_or_default();
            let name = if a.policy == PolicyArg::Ppo { "ppo" } else { "bc" };
            Box::new(LearnedPolicy { name: name.into(), net, stochastic: a.stochastic })
        }
        PolicyArg::Oracle => Box::new(Oracle { config: SearchConfig { mode: SearchMode::GroundTruthGreedy, ..SearchConfig::default() } }),
        PolicyArg::Beam => Box::new(Oracle { config: SearchConfig::default() }),
        PolicyArg::Random => Box::new(UniformRandom),
    };
    let settings = format!(
        "policy={:?}\nfamily={}\nn={}\npre_assembled={}\nstochastic={}\n{train_config}",
        a.policy,
        family.dir_name(),
        tasks.len(),
        a.pre_assembled,
        a.stochastic
    );
    let (row, records) = evaluate(controller.as_ref(), family, &tasks, a.pre_assembled, cli.seed);
    let report = EvalReport { rows: vec![row], provenance: Provenance { seed: cli.seed, config_hash: sha256_hex(settings.as_bytes()), checkpoint_hash } };
    write(&a.out.join("report.csv"), report.to_csv())?;
    write(&a.out.join("report.json"), report.to_json())?;
    let episodes: String = records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect();
    write(&a.out.join("episodes.jsonl"), episodes)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn solve_cmd(cli: &Cli, a: &SolveArgs) -> Result<()> {
    if a.beam_width == 0 {
        return Err(usage("--beam-width must be at least 1"));
    }
    let target = Arc::new(load_target(&a.target)?);
    out_dir(&a.out)?;
    let mode = match a.mode {
        SolveMode::Greedy => SearchMode::GroundTruthGreedy,
        SolveMode::Beam => SearchMode::SilhouetteBeam,
    };
    let config = SearchConfig { mode, beam_width: a.beam_width, overlap_penalty: a.overlap_penalty };
    let start = Env::new(target.clone(), 0, cli.seed).map_err(|e| Failure::Internal(e.into()))?;
    let solution = solve(&start, &config);
    write(&a.out.join("trajectory.jsonl"), solution.env.trace_jsonl())?;
    write(&a.out.join("silhouette.pgm"), target.silhouette().to_pgm())?;

    let frames: PathBuf = a.out.join("frames");
    out_dir(&frames)?;
    let mut replay = start;
    write(&frames.join("frame_0.pgm"), replay.observation().workspace.to_pgm())?;
    for (k, &action) in solution.actions.iter().enumerate() {
        let step = replay.step(action).map_err(|e| Failure::Internal(e.into()))?;
        write(&frames.join(format!("frame_{}.pgm", k + 1)), step.observation.workspace.to_pgm())?;
    }
    let m = solution.env.episode_metrics().map_err(|e| Failure::Internal(e.into()))?;
    println!("rela {:.4} final {:.4}", m.rela, m.final_);
    Ok(())
}

fn env_check() -> Result<()> {
    let checks = check::run_all();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Internal(anyhow::anyhow!("environment self-check failed")))
    }
}
