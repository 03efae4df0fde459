//! End-to-end acceptance run: one pass/fail line per criterion, nonzero exit
//! when any fails. Property criteria run the verification suites in-process;
//! the behavioral and determinism criteria drive the `sgnn` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use sgnn_core::verify::run_suite;

const SEED: u64 = 0;

/// Training budget shared by the two models compared on rotated scenes.
const EPOCHS: &str = "10";
const SAMPLES_PER_EPOCH: &str = "300";
const VAL_SAMPLES: &str = "100";
const LR: &str = "3e-4";
const TRAIN_LIMIT: Duration = Duration::from_secs(600);

/// Ablations report trends only: each runs on a smaller shared budget next to
/// an unablated model trained the same way.
const ABLATION_EPOCHS: &str = "4";
const ABLATION_SAMPLES: &str = "150";

const ABLATIONS: [&str; 4] = [
    "--no-hierarchy",
    "--no-object-aware",
    "--no-edge-separation",
    "--full-equivariance",
];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn suite(name: &str, trials: usize, limit: Option<Duration>) -> Outcome {
    let start = Instant::now();
    let report = match run_suite(name, trials, SEED) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("{name} suite errored: {e}")),
    };
    let elapsed = start.elapsed();
    print!("{report}");
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let worst = report
        .checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.clone())
        .collect::<Vec<_>>();
    let mut detail = format!("{name} x{trials} in {:.1}s", elapsed.as_secs_f64());
    if let Some(l) = limit {
        detail += &format!(" (limit {}s)", l.as_secs());
    }
    if !worst.is_empty() {
        detail += &format!("; failing: {}", worst.join(", "));
    }
    outcome(report.passed() && in_time, detail)
}

fn sgnn(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sgnn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`sgnn {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read(path: PathBuf) -> Result<String, String> {
    std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

/// `(trajectory, horizon, mse, rotated_mse)` rows.
fn per_trajectory(text: &str) -> Result<Vec<(usize, usize, f64, f64)>, String> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || format!("bad per-trajectory row {l:?}");
            if f.len() != 4 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

fn write_configs(dir: &Path) -> Result<(), String> {
    // Training pushes stay inside a narrow heading window, so a randomly turned
    // test scene is off-distribution for a model that sees absolute directions.
    let biased = "objects=3\nlattice=3\nframes=41\nheading=0\nheading_spread=0.5\n";
    std::fs::write(dir.join("train.cfg"), format!("{biased}seed=1000\n"))
        .map_err(|e| e.to_string())?;
    std::fs::write(dir.join("test.cfg"), format!("{biased}seed=900000\n"))
        .map_err(|e| e.to_string())
}

fn train(
    dir: &Path,
    variant: &str,
    out: &str,
    extra: &[&str],
    budget: [&str; 2],
) -> Result<Duration, String> {
    let mut args = vec![
        "train",
        "--variant",
        variant,
        "--data",
        "train",
        "--out",
        out,
        "--epochs",
        budget[0],
        "--samples-per-epoch",
        budget[1],
        "--val-samples",
        VAL_SAMPLES,
        "--lr",
        LR,
        "--early-stop",
        "1000",
    ];
    args.extend(extra);
    let start = Instant::now();
    let log = sgnn(&args, dir)?;
    print!(
        "{}",
        log.lines()
            .last()
            .map(|l| format!("  {out}: {l}\n"))
            .unwrap_or_default()
    );
    Ok(start.elapsed())
}

fn eval(dir: &Path, run: &str) -> Result<String, String> {
    let ckpt = format!("{run}/model.sgck");
    let out = format!("{run}-eval");
    sgnn(
        &[
            "eval",
            "--checkpoint",
            &ckpt,
            "--data",
            "test",
            "--out",
            &out,
            "--horizons",
            "10,20,40",
            "--rotate-test",
            "random",
            "--seed",
            "7",
            "--rigid",
        ],
        dir,
    )?;
    read(dir.join(&out).join("per_trajectory.csv"))
}

fn at_horizon(rows: &[(usize, usize, f64, f64)], h: usize) -> (f64, f64) {
    let sel: Vec<_> = rows.iter().filter(|r| r.1 == h).collect();
    let n = sel.len() as f64;
    (
        sel.iter().map(|r| r.2).sum::<f64>() / n,
        sel.iter().map(|r| r.3).sum::<f64>() / n,
    )
}

fn rotated_generalization(dir: &Path) -> Result<Outcome, String> {
    write_configs(dir)?;
    sgnn(
        &[
            "generate",
            "--config",
            "train.cfg",
            "--count",
            "50",
            "--out",
            "train",
        ],
        dir,
    )?;
    sgnn(
        &[
            "generate", "--config", "test.cfg", "--count", "10", "--out", "test",
        ],
        dir,
    )?;

    let budget = [EPOCHS, SAMPLES_PER_EPOCH];
    let t_sgnn = train(dir, "sgnn", "sgnn", &[], budget)?;
    let t_gns = train(dir, "gns", "gns", &[], budget)?;
    let sgnn_rows = per_trajectory(&eval(dir, "sgnn")?)?;
    let gns_rows = per_trajectory(&eval(dir, "gns")?)?;

    let gap = sgnn_rows
        .iter()
        .map(|r| (r.2 - r.3).abs())
        .fold(0.0, f64::max);
    let gns_gap = gns_rows
        .iter()
        .map(|r| (r.2 - r.3).abs())
        .fold(0.0, f64::max);
    println!("  model  horizon  mse  rotated_mse");
    for h in [10, 20, 40] {
        let (a, b) = at_horizon(&sgnn_rows, h);
        let (c, d) = at_horizon(&gns_rows, h);
        println!("  sgnn  {h}  {a:.4e}  {b:.4e}");
        println!("  gns   {h}  {c:.4e}  {d:.4e}");
    }
    let (sgnn40, sgnn40_rot) = at_horizon(&sgnn_rows, 40);
    let (_, gns40_rot) = at_horizon(&gns_rows, 40);

    let mut ablation_rows = 0;
    println!("  ablation  mse@10  mse@20  mse@40");
    for flag in [None].into_iter().chain(ABLATIONS.map(Some)) {
        let run = flag.map_or("reference", |f| f.trim_start_matches('-'));
        train(
            dir,
            "sgnn",
            run,
            flag.as_slice(),
            [ABLATION_EPOCHS, ABLATION_SAMPLES],
        )?;
        let rows = per_trajectory(&eval(dir, run)?)?;
        let mse = [10, 20, 40].map(|h| at_horizon(&rows, h).0);
        println!("  {run}  {:.4e}  {:.4e}  {:.4e}", mse[0], mse[1], mse[2]);
        ablation_rows +=
            usize::from(flag.is_some() && !rows.is_empty() && mse.iter().all(|m| !m.is_nan()));
    }

    let checks = [
        (
            gap <= 1e-7,
            format!("sgnn per-trajectory rotation gap {gap:.2e} (need <= 1e-7)"),
        ),
        (
            sgnn40.max(sgnn40_rot) < gns40_rot,
            format!("sgnn t=40 mse {sgnn40:.4e} vs gns rotated {gns40_rot:.4e}"),
        ),
        (
            t_sgnn <= TRAIN_LIMIT && t_gns <= TRAIN_LIMIT,
            format!(
                "train time sgnn {:.0}s gns {:.0}s",
                t_sgnn.as_secs_f64(),
                t_gns.as_secs_f64()
            ),
        ),
        (
            ablation_rows == ABLATIONS.len(),
            format!("{ablation_rows}/4 ablations reported"),
        ),
    ];
    let passed = checks.iter().all(|c| c.0);
    let detail = checks
        .iter()
        .map(|c| c.1.clone())
        .collect::<Vec<_>>()
        .join("; ");
    Ok(outcome(
        passed,
        format!("{detail}; gns rotation gap {gns_gap:.2e}"),
    ))
}

fn same_files(a: &Path, b: &Path) -> Result<Vec<String>, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.file_name()).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    names.sort();
    let mut differing = Vec::new();
    for n in names {
        let x = std::fs::read(a.join(&n)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(&n)).map_err(|e| e.to_string())?;
        if x != y {
            differing.push(n.to_string_lossy().into_owned());
        }
    }
    Ok(differing)
}

fn determinism(dir: &Path) -> Result<Outcome, String> {
    write_configs(dir)?;
    let mut differing = Vec::new();
    for run in ["a", "b"] {
        let data = format!("data-{run}");
        sgnn(
            &[
                "generate",
                "--config",
                "train.cfg",
                "--count",
                "6",
                "--out",
                &data,
            ],
            dir,
        )?;
        for variant in ["sgnn", "gns"] {
            let model = format!("{variant}-{run}");
            sgnn(
                &[
                    "train",
                    "--variant",
                    variant,
                    "--data",
                    &data,
                    "--out",
                    &model,
                    "--epochs",
                    "2",
                    "--samples-per-epoch",
                    "20",
                    "--val-samples",
                    "10",
                    "--seed",
                    "5",
                ],
                dir,
            )?;
            let ckpt = format!("{model}/model.sgck");
            let out = format!("{model}-eval");
            sgnn(
                &[
                    "eval",
                    "--checkpoint",
                    &ckpt,
                    "--data",
                    &data,
                    "--out",
                    &out,
                    "--horizons",
                    "20,40",
                    "--rotate-test",
                    "random",
                    "--rigid",
                ],
                dir,
            )?;
        }
    }
    for (a, b) in [
        ("data-a", "data-b"),
        ("sgnn-a", "sgnn-b"),
        ("gns-a", "gns-b"),
        ("sgnn-a-eval", "sgnn-b-eval"),
        ("gns-a-eval", "gns-b-eval"),
    ] {
        differing.extend(
            same_files(&dir.join(a), &dir.join(b))?
                .into_iter()
                .map(|f| format!("{a}/{f}")),
        );
    }
    Ok(outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "trajectories, checkpoints, histories and metrics identical across reruns".to_string()
        } else {
            format!("differing: {}", differing.join(", "))
        },
    ))
}

type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

fn scratch() -> tempfile::TempDir {
    tempfile::Builder::new()
        .prefix("sgnn-acceptance")
        .tempdir()
        .expect("temp dir")
}

fn main() -> ExitCode {
    // The libtest flags cargo passes (e.g. `--list`) do not apply here.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: Vec<Criterion> = vec![
        (
            "subgroup equivariance",
            Box::new(|| suite("equivariance", 200, Some(Duration::from_secs(60)))),
        ),
        (
            "strictness witnesses",
            Box::new(|| suite("strictness", 20, None)),
        ),
        (
            "masked reductions",
            Box::new(|| suite("reduction", 50, None)),
        ),
        (
            "subgroup witness recovery",
            Box::new(|| suite("lemma5", 1000, None)),
        ),
        (
            "gravity expressivity",
            Box::new(|| suite("expressivity", 1, Some(Duration::from_secs(300)))),
        ),
        (
            "gradient checks",
            Box::new(|| suite("gradients", 100, None)),
        ),
        ("oracle physics", Box::new(|| suite("oracle", 1, None))),
        (
            "rotated-scene generalization",
            Box::new(|| {
                let tmp = scratch();
                rotated_generalization(tmp.path()).unwrap_or_else(|e| outcome(false, e))
            }),
        ),
        (
            "determinism",
            Box::new(|| {
                let tmp = scratch();
                determinism(tmp.path()).unwrap_or_else(|e| outcome(false, e))
            }),
        ),
    ];
    let mut results = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        println!("== criterion {}: {name}", k + 1);
        let o = run();
        results.push((k + 1, *name, o));
    }
    println!();
    let mut failed = 0;
    for (k, name, o) in &results {
        println!(
            "criterion {k} {}: {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
