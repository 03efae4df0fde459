mod data;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use sgnn_core::model::{GroundFeature, Model, ModelSpec, Variant};
use sgnn_core::rigid::Ransac;
use sgnn_core::rollout::{Playback, Projection};
use sgnn_core::scenes::{generate_scene, SceneConfig, Trajectory};
use sgnn_core::somp::Aggregation;
use sgnn_core::subeq::Gravity;
use sgnn_core::training::{
    comparison_csv, evaluate, evaluate_each, per_trajectory_csv, test_transforms, train,
    EvalConfig, NoiseScale, TestRotation, TrainConfig,
};
use sgnn_core::verify::{run_suite, SUITES};
use sgnn_core::{Error, Result};

use data::{manifest_text, sha256_hex, trajectory_name, DataDir, Entry, MANIFEST, SCENE_CONFIG};

const VARIANTS: [&str; 6] = ["sgnn", "gns", "egnn", "egnn_s", "gmn", "gmn_s"];

#[derive(Parser)]
#[command(
    name = "sgnn",
    version,
    about = "Learned rigid-body simulation with gravity-aware graph networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate falling-cube scenes into a data directory.
    Generate(GenerateArgs),
    /// Train a model on a data directory.
    Train(TrainArgs),
    /// Roll a checkpoint out on a data directory and score it.
    Eval(EvalArgs),
    /// Run numerical property suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene description (`key=value` lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    /// First scene seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Sum,
    Mean,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = VARIANTS)]
    variant: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Training samples visited per epoch (all when omitted).
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    /// Validation samples scored per epoch (all when omitted).
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 0.8)]
    decay: f64,
    #[arg(long, default_value_t = 10)]
    early_stop: usize,
    /// Input noise std as a fraction of the training velocity std.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Read `--noise` as an absolute length instead.
    #[arg(long)]
    noise_absolute: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden width of every MLP.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 16)]
    hidden_scalars: usize,
    #[arg(long, default_value_t = 16)]
    message_scalars: usize,
    /// Message-passing rounds (per stage for sgnn).
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, default_value_t = sgnn_core::graph::DEFAULT_CUTOFF)]
    cutoff: f64,
    #[arg(long, value_enum, default_value = "mean")]
    aggregation: AggregationArg,
    #[arg(long)]
    no_hierarchy: bool,
    #[arg(long)]
    no_object_aware: bool,
    #[arg(long)]
    no_edge_separation: bool,
    #[arg(long)]
    full_equivariance: bool,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("predictor").required(true).args(["checkpoint", "playback"]))]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Replay the recorded frames instead of a model (a sanity baseline with zero error).
    #[arg(long, conflicts_with = "variant")]
    playback: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Frames at which rollout error is reported.
    #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
    horizons: Vec<usize>,
    /// Also evaluate on test scenes turned about gravity: an angle in radians or `random`.
    #[arg(long, value_parser = parse_rotation)]
    rotate_test: Option<Rotation>,
    /// Seed for `--rotate-test random`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Snap rigid objects to their shape with RANSAC after each step.
    #[arg(long)]
    rigid: bool,
    /// Fail unless the checkpoint holds this variant.
    #[arg(long, value_parser = VARIANTS)]
    variant: Option<String>,
    /// Contact distance; twice the particle radius of the data when omitted.
    #[arg(long)]
    contact_threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
enum Rotation {
    Angle(f64),
    Random,
}

fn parse_rotation(s: &str) -> std::result::Result<Rotation, String> {
    if s == "random" {
        return Ok(Rotation::Random);
    }
    match s.parse::<f64>() {
        Ok(t) if t.is_finite() => Ok(Rotation::Angle(t)),
        _ => Err(format!(
            "expected an angle in radians or `random`, got {s:?}"
        )),
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = suite_names())]
    suite: String,
    /// Random instances per suite; suite-specific defaults when omitted.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    trials: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn suite_names() -> Vec<&'static str> {
    let mut v = SUITES.to_vec();
    v.push("all");
    v
}

fn default_trials(suite: &str) -> usize {
    match suite {
        "equivariance" => 200,
        "strictness" => 20,
        "reduction" => 50,
        "lemma5" => 1000,
        "gradients" => 100,
        _ => 1,
    }
}

/// Failures split by exit code: bad invocations and everything else.
enum Failure {
    Usage(String),
    Run(Error),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn threads() -> std::result::Result<(), Failure> {
    let Ok(raw) = std::env::var("SGNN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Usage(format!(
            "SGNN_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Run(Error::Contract(e.to_string())))
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn generate(args: &GenerateArgs) -> std::result::Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            SceneConfig::parse(&text)?
        }
        None => SceneConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let count = args.count as usize;
    let cfg_text = cfg.to_text();
    println!(
        "config: command=generate count={count} out={} {}",
        args.out.display(),
        cfg_text.split_whitespace().collect::<Vec<_>>().join(" ")
    );
    let scenes: Vec<(u64, Trajectory)> = (0..count)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k as u64);
            let scene = SceneConfig {
                seed,
                ..cfg.clone()
            };
            generate_scene(&scene).map(|t| (seed, t))
        })
        .collect::<Result<_>>()?;
    create_out(&args.out)?;
    std::fs::write(args.out.join(SCENE_CONFIG), &cfg_text).map_err(Error::from)?;
    let mut entries = Vec::with_capacity(count);
    for (k, (seed, traj)) in scenes.iter().enumerate() {
        let bytes = traj.to_bytes()?;
        let file = trajectory_name(k);
        std::fs::write(args.out.join(&file), &bytes).map_err(Error::from)?;
        entries.push(Entry {
            file,
            seed: *seed,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = manifest_text(&sha256_hex(cfg_text.as_bytes()), &entries);
    std::fs::write(args.out.join(MANIFEST), manifest).map_err(Error::from)?;
    println!("wrote {count} trajectories to {}", args.out.display());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> std::result::Result<(), Failure> {
    let variant = Variant::from_name(&args.variant).expect("clap restricts variants");
    let ablated = args.no_hierarchy
        || args.no_object_aware
        || args.no_edge_separation
        || args.full_equivariance;
    if ablated && variant != Variant::Sgnn {
        return Err(Failure::Usage(
            "ablation flags apply to the sgnn variant only".into(),
        ));
    }
    let data = DataDir::open(&args.data)?;
    let trajs = data.load()?;
    let width = trajs[0].attrs.cols();
    let mut spec = ModelSpec::new(variant, width + usize::from(data.scene.ground.is_some()));
    spec.cutoff = args.cutoff;
    spec.length_scale = args.cutoff;
    spec.ground = data.scene.ground.map(|height| GroundFeature {
        height,
        scale: args.cutoff,
    });
    spec.shape.hidden = args.hidden;
    spec.hidden_scalars = args.hidden_scalars;
    spec.message_scalars = args.message_scalars;
    if let Some(i) = args.iterations {
        spec.iterations = i;
    }
    spec.aggregation = match args.aggregation {
        AggregationArg::Sum => Aggregation::Sum,
        AggregationArg::Mean => Aggregation::Mean,
    };
    spec.ablations.no_hierarchy = args.no_hierarchy;
    spec.ablations.no_object_aware = args.no_object_aware;
    spec.ablations.no_edge_separation = args.no_edge_separation;
    spec.ablations.full_equivariance = args.full_equivariance;
    spec.seed = args.seed;
    spec.validate()?;
    let mut cfg = TrainConfig {
        plateau_patience: args.patience,
        decay: args.decay,
        early_stop: args.early_stop,
        noise: if args.noise_absolute {
            NoiseScale::Absolute(args.noise)
        } else {
            NoiseScale::Relative(args.noise)
        },
        batch_size: args.batch_size,
        max_epochs: args.epochs,
        samples_per_epoch: args.samples_per_epoch,
        val_samples: args.val_samples,
        seed: args.seed,
        ..TrainConfig::default()
    };
    cfg.adam.lr = args.lr;
    cfg.validate()?;
    println!(
        "config: command=train data={} out={} {} {}",
        args.data.display(),
        args.out.display(),
        spec.to_header()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" "),
        cfg.describe()
    );
    let start = Instant::now();
    let outcome = train(Model::new(spec)?, &trajs, &cfg)?;
    create_out(&args.out)?;
    outcome.model.save(args.out.join("model.sgck"))?;
    std::fs::write(args.out.join("history.csv"), outcome.history.to_csv()).map_err(Error::from)?;
    println!(
        "trained {} epochs in {:.1}s; best epoch {} val loss {:.4e} (initial {:.4e})",
        outcome.history.records.len(),
        start.elapsed().as_secs_f64(),
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.initial_val_loss
    );
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> std::result::Result<(), Failure> {
    if let Some(path) = &args.checkpoint {
        if !path.is_file() {
            return Err(Failure::Run(Error::Config(format!(
                "{} is not a file",
                path.display()
            ))));
        }
    }
    let data = DataDir::open(&args.data)?;
    let model = match &args.checkpoint {
        Some(path) => Some(load_checked(path, args.variant.as_deref())?),
        None => None,
    };
    let trajs = data.load()?;
    if let Some(model) = &model {
        let width = trajs[0].attrs.cols() + usize::from(model.spec().ground.is_some());
        if width != model.spec().attr_dim {
            return Err(Failure::Run(Error::Format(format!(
                "checkpoint expects {} attribute columns, data provides {width}",
                model.spec().attr_dim
            ))));
        }
    }
    let threshold = args
        .contact_threshold
        .unwrap_or(2.0 * data.scene.particle_radius);
    let cfg = EvalConfig {
        horizons: args.horizons.clone(),
        projection: if args.rigid {
            Projection::Ransac(Ransac::default())
        } else {
            Projection::Off
        },
        pairs: None,
        contact_threshold: threshold,
    };
    let rotation = match args.rotate_test {
        None => TestRotation::None,
        Some(Rotation::Angle(t)) => TestRotation::Angle(t),
        Some(Rotation::Random) => TestRotation::Random(args.seed),
    };
    let horizons: Vec<String> = args.horizons.iter().map(usize::to_string).collect();
    println!(
        "config: command=eval predictor={} variant={} data={} out={} horizons={} rotate_test={} seed={} rigid={} contact_threshold={threshold}",
        args.checkpoint.as_ref().map_or("playback".into(), |p| p.display().to_string()),
        model.as_ref().map_or("playback", |m| m.variant().name()),
        args.data.display(),
        args.out.display(),
        horizons.join(","),
        match args.rotate_test {
            None => "none".to_string(),
            Some(Rotation::Angle(t)) => t.to_string(),
            Some(Rotation::Random) => "random".to_string(),
        },
        args.seed,
        args.rigid
    );
    let score = |trajs: &[Trajectory]| match &model {
        Some(m) => evaluate(m, trajs, &cfg),
        None => evaluate_each(Playback, trajs, &cfg),
    };
    let base = score(&trajs)?;
    create_out(&args.out)?;
    let metrics = if rotation == TestRotation::None {
        base.to_csv()
    } else {
        let g = model.as_ref().map_or(Gravity::default(), |m| *m.gravity());
        let transforms = test_transforms(rotation, &g, trajs.len());
        let turned: Vec<Trajectory> = trajs
            .iter()
            .zip(&transforms)
            .map(|(t, r)| t.transformed(r))
            .collect();
        let rotated = score(&turned)?;
        std::fs::write(
            args.out.join("per_trajectory.csv"),
            per_trajectory_csv(&base, &rotated),
        )
        .map_err(Error::from)?;
        comparison_csv(&base, &rotated)
    };
    std::fs::write(args.out.join("metrics.csv"), &metrics).map_err(Error::from)?;
    print!("{metrics}");
    Ok(())
}

fn load_checked(path: &Path, variant: Option<&str>) -> Result<Model> {
    let model = Model::load(path).map_err(|e| match e {
        Error::Io(_) | Error::Format(_) => e,
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    match variant {
        Some(v) if model.variant().name() != v => Err(Error::Format(format!(
            "checkpoint holds a {} model, expected {v}",
            model.variant().name()
        ))),
        _ => Ok(model),
    }
}

fn verify_cmd(args: &VerifyArgs) -> std::result::Result<(), Failure> {
    let suites: Vec<&str> = if args.suite == "all" {
        SUITES.to_vec()
    } else {
        vec![args.suite.as_str()]
    };
    let trials = |s: &str| args.trials.map_or(default_trials(s), |t| t as usize);
    let plan: Vec<String> = suites
        .iter()
        .map(|s| format!("{s}:{}", trials(s)))
        .collect();
    println!(
        "config: command=verify suites={} seed={}",
        plan.join(","),
        args.seed
    );
    let mut ok = true;
    for s in suites {
        let start = Instant::now();
        let report = run_suite(s, trials(s), args.seed)?;
        print!("{report}");
        println!(
            "[{s}] {} in {:.2}s",
            if report.passed() { "passed" } else { "FAILED" },
            start.elapsed().as_secs_f64()
        );
        ok &= report.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = threads().and_then(|()| match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Verify) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
    }
}
