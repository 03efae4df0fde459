//! Next-step supervised training with input noise, plateau decay and early
//! stopping, plus rollout evaluation tables.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{build_edges, ParticleSystem};
use crate::math::{AdamConfig, Mat, Tape};
use crate::model::{Frame, Model};
use crate::rollout::{rollout, Predictor, Projection};
use crate::scenes::{in_contact, rollout_mse, Trajectory};
use crate::subeq::{Gravity, SubgroupTransform, Vec3};

/// Standard deviation of the Gaussian noise added to input positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseScale {
    /// Fraction of the per-coordinate std of training velocities.
    Relative(f64),
    Absolute(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub plateau_patience: usize,
    pub decay: f64,
    pub early_stop: usize,
    pub noise: NoiseScale,
    /// Samples whose gradients are averaged into one step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Random subset of training samples visited per epoch; all when `None`.
    pub samples_per_epoch: Option<usize>,
    /// Fixed subset of validation samples; all when `None`.
    pub val_samples: Option<usize>,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            plateau_patience: 3,
            decay: 0.8,
            early_stop: 10,
            noise: NoiseScale::Relative(0.05),
            batch_size: 1,
            max_epochs: 100,
            samples_per_epoch: None,
            val_samples: None,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch count must be positive");
        }
        if self.samples_per_epoch == Some(0) || self.val_samples == Some(0) {
            return bad("sample caps must be positive");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)");
        }
        let scale = match self.noise {
            NoiseScale::Relative(s) | NoiseScale::Absolute(s) => s,
        };
        if !(scale >= 0.0 && scale.is_finite()) {
            return bad("noise scale must be non-negative");
        }
        Ok(())
    }

    /// `key=value` echo of every field.
    pub fn describe(&self) -> String {
        let noise = match self.noise {
            NoiseScale::Relative(s) => format!("relative:{s}"),
            NoiseScale::Absolute(s) => format!("absolute:{s}"),
        };
        let opt = |v: Option<usize>| v.map_or("all".into(), |v| v.to_string());
        format!(
            "lr={} beta1={} beta2={} patience={} decay={} early_stop={} noise={noise} batch={} epochs={} samples_per_epoch={} val_samples={} val_fraction={} seed={}",
            self.adam.lr,
            self.adam.beta1,
            self.adam.beta2,
            self.plateau_patience,
            self.decay,
            self.early_stop,
            self.batch_size,
            self.max_epochs,
            opt(self.samples_per_epoch),
            opt(self.val_samples),
            self.val_fraction,
            self.seed
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e}",
                r.epoch, r.train_loss, r.val_loss, r.lr
            );
        }
        s
    }
}

pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub model: Model,
    pub history: History,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss before any update.
    pub initial_val_loss: f64,
}

/// One supervision pair: input frame `t` of trajectory `traj`, target `t + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub traj: usize,
    pub t: usize,
}

/// Trajectory indices for training and validation (a seeded 9:1-style split).
/// A single trajectory serves both roles.
pub fn split(count: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    if count < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = ((count as f64 * val_fraction).round() as usize).clamp(1, count - 1);
    let (v, t) = idx.split_at(val);
    let (mut t, mut v) = (t.to_vec(), v.to_vec());
    t.sort_unstable();
    v.sort_unstable();
    (t, v)
}

/// Pairs with a backward-difference velocity: `t` runs over `1..T-1`.
pub fn samples(trajs: &[Trajectory], which: &[usize]) -> Vec<Sample> {
    which
        .iter()
        .flat_map(|&traj| (1..trajs[traj].len().saturating_sub(1)).map(move |t| Sample { traj, t }))
        .collect()
}

/// Per-coordinate standard deviation of one-frame velocities over `samples`.
pub fn velocity_std(trajs: &[Trajectory], samples: &[Sample]) -> Vec3 {
    let mut sum = Vec3::zeros();
    let mut sq = Vec3::zeros();
    let mut n = 0.0;
    for s in samples {
        let tr = &trajs[s.traj];
        for (a, b) in tr.frames[s.t].iter().zip(&tr.frames[s.t - 1]) {
            let v = a - b;
            sum += v;
            sq += v.component_mul(&v);
            n += 1.0;
        }
    }
    if n == 0.0 {
        return Vec3::zeros();
    }
    let mean = sum / n;
    (sq / n - mean.component_mul(&mean)).map(|v| v.max(0.0).sqrt())
}

/// Input state for a sample, positions optionally perturbed; the velocity is
/// recomputed from the perturbed positions.
fn input_state(traj: &Trajectory, t: usize, noise: Option<&[Vec3]>) -> Result<ParticleSystem> {
    let mut positions = traj.frames[t].clone();
    if let Some(eps) = noise {
        for (p, e) in positions.iter_mut().zip(eps) {
            *p += e;
        }
    }
    let velocities = positions
        .iter()
        .zip(&traj.frames[t - 1])
        .map(|(a, b)| a - b)
        .collect();
    ParticleSystem::new(
        positions,
        velocities,
        traj.attrs.clone(),
        traj.object_of.clone(),
        traj.objects(),
    )
}

fn target(traj: &Trajectory, t: usize) -> Result<Mat> {
    Mat::from_vec(
        traj.particles(),
        3,
        traj.frames[t + 1]
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect(),
    )
}

/// Single-step loss and, when asked, its parameter gradients.
pub fn sample_loss(
    model: &Model,
    sys: &ParticleSystem,
    target: &Mat,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Mat>>)> {
    let sys = model.featurize(sys)?;
    let edges = build_edges(&sys, model.spec().cutoff)?;
    let frame = Frame::new(&sys, edges)?;
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let pred = model.forward(&mut tape, &bound, &frame)?;
    let y = tape.leaf(target.clone());
    let loss = tape.squared_error(pred, y)?;
    let value = tape.value(loss).get(0, 0);
    if !with_grads {
        return Ok((value, None));
    }
    let grads = tape.backward_scalar(loss)?;
    Ok((value, Some(model.store.collect_grads(&bound, &grads))))
}

/// Mean unperturbed single-step loss over `samples`.
pub fn mean_loss(model: &Model, trajs: &[Trajectory], samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        let tr = &trajs[s.traj];
        let (l, _) = sample_loss(
            model,
            &input_state(tr, s.t, None)?,
            &target(tr, s.t)?,
            false,
        )?;
        total += l;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `model` and returns its best-validation parameters.
pub fn train(model: Model, trajs: &[Trajectory], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if trajs.is_empty() {
        return Err(Error::Contract(
            "training needs at least one trajectory".into(),
        ));
    }
    for (i, t) in trajs.iter().enumerate() {
        t.validate()?;
        if t.attrs.cols() + usize::from(model.spec().ground.is_some()) != model.spec().attr_dim {
            return Err(Error::Shape(format!(
                "trajectory {i} has {} attribute columns; the model expects {}",
                t.attrs.cols(),
                model.spec().attr_dim
            )));
        }
    }
    let (train_ids, val_ids) = split(trajs.len(), cfg.val_fraction, cfg.seed);
    let train_samples = samples(trajs, &train_ids);
    let mut val_samples = samples(trajs, &val_ids);
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::Contract(
            "training needs trajectories with at least 3 frames".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
    if let Some(cap) = cfg.val_samples {
        if cap < val_samples.len() {
            val_samples.shuffle(&mut rng);
            val_samples.truncate(cap);
            val_samples.sort_unstable_by_key(|s| (s.traj, s.t));
        }
    }
    let sigma = match cfg.noise {
        NoiseScale::Relative(f) => velocity_std(trajs, &train_samples) * f,
        NoiseScale::Absolute(s) => Vec3::repeat(s),
    };
    let noise: Vec<Normal<f64>> = sigma
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("finite non-negative std"))
        .collect();

    let mut model = model;
    model.store.reset_optimizer();
    let initial_val_loss = mean_loss(&model, trajs, &val_samples)?;
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = History::default();
    let mut adam = cfg.adam;
    let mut plateau = 0;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut order = train_samples.clone();
        order.shuffle(&mut rng);
        if let Some(cap) = cfg.samples_per_epoch {
            order.truncate(cap);
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Mat>> = None;
            for s in batch {
                let tr = &trajs[s.traj];
                let eps: Vec<Vec3> = (0..tr.particles())
                    .map(|_| {
                        Vec3::new(
                            noise[0].sample(&mut rng),
                            noise[1].sample(&mut rng),
                            noise[2].sample(&mut rng),
                        )
                    })
                    .collect();
                let sys = input_state(tr, s.t, Some(&eps))?;
                let (loss, grads) = sample_loss(&model, &sys, &target(tr, s.t)?, true)?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        location: format!("epoch {epoch}, trajectory {} frame {}", s.traj, s.t),
                        message: format!("loss is {loss}"),
                    });
                }
                total += loss;
                let grads = grads.expect("requested");
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f64;
                grads.iter_mut().for_each(|g| *g = g.scale(inv));
            }
            model.store.adam_step(&grads, &adam).map_err(|e| match e {
                Error::Training { location, message } => Error::Training {
                    location: format!(
                        "epoch {epoch}, batch at trajectory {} frame {}: {location}",
                        batch[0].traj, batch[0].t
                    ),
                    message,
                },
                other => other,
            })?;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = mean_loss(&model, trajs, &val_samples)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: adam.lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
            plateau = 0;
            since_best = 0;
        } else {
            plateau += 1;
            since_best += 1;
            if plateau >= cfg.plateau_patience {
                adam.lr *= cfg.decay;
                plateau = 0;
            }
            if since_best >= cfg.early_stop {
                break;
            }
        }
    }
    best.store.reset_optimizer();
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val_loss: best_val,
        initial_val_loss,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Frames at which rollout error is reported; each must be at least 2.
    pub horizons: Vec<usize>,
    pub projection: Projection,
    /// Object pairs scored for contact; every pair when `None`.
    pub pairs: Option<Vec<(usize, usize)>>,
    pub contact_threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub horizon: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub contact_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<EvalRow>,
    /// `[trajectory][horizon]` rollout errors.
    pub per_trajectory: Vec<Vec<f64>>,
    pub rollouts: Vec<Trajectory>,
}

pub const EVAL_HEADER: &str = "horizon,mse_mean,mse_std,contact_accuracy";

impl Evaluation {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{}",
                r.horizon, r.mse_mean, r.mse_std, r.contact_accuracy
            );
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn truncated(t: &Trajectory, frames: usize) -> Trajectory {
    Trajectory {
        frames: t.frames[..frames].to_vec(),
        ..t.clone()
    }
}

/// Rolls every trajectory out from its first two frames and scores it.
pub fn evaluate(
    predictor: &dyn Predictor,
    trajs: &[Trajectory],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    evaluate_each(|_| predictor, trajs, cfg)
}

/// [`evaluate`] with a predictor chosen per trajectory, e.g. a recording's playback.
pub fn evaluate_each<'a, P, F>(
    predictor: F,
    trajs: &'a [Trajectory],
    cfg: &EvalConfig,
) -> Result<Evaluation>
where
    P: Predictor + 'a,
    F: Fn(&'a Trajectory) -> P + Sync,
{
    if trajs.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    if cfg.horizons.is_empty() || cfg.horizons.iter().any(|&h| h < 2) {
        return Err(Error::Config(
            "horizons must be non-empty and at least 2".into(),
        ));
    }
    let last = *cfg.horizons.iter().max().expect("non-empty");
    if let Some(i) = trajs.iter().position(|t| t.len() <= last) {
        return Err(Error::Config(format!(
            "trajectory {i} has {} frames; horizon {last} needs {}",
            trajs[i].len(),
            last + 1
        )));
    }
    let rollouts: Vec<Trajectory> = trajs
        .par_iter()
        .map(|t| rollout(&predictor(t), t, last - 1, cfg.projection))
        .collect::<Result<_>>()?;
    let per_trajectory: Vec<Vec<f64>> = rollouts
        .iter()
        .zip(trajs)
        .map(|(p, t)| {
            let t = truncated(t, last + 1);
            cfg.horizons
                .iter()
                .map(|&h| rollout_mse(p, &t, h))
                .collect()
        })
        .collect::<Result<_>>()?;
    let objects = trajs[0].objects();
    let pairs = cfg.pairs.clone().unwrap_or_else(|| {
        (0..objects)
            .flat_map(|k| (k + 1..objects).map(move |l| (k, l)))
            .collect()
    });
    let rows = cfg
        .horizons
        .iter()
        .enumerate()
        .map(|(c, &h)| {
            let column: Vec<f64> = per_trajectory.iter().map(|r| r[c]).collect();
            let (mse_mean, mse_std) = mean_std(&column);
            let mut agree = 0usize;
            for (p, t) in rollouts.iter().zip(trajs) {
                let (p, t) = (truncated(p, h + 1), truncated(t, h + 1));
                agree += pairs
                    .iter()
                    .filter(|&&pair| {
                        in_contact(&p, pair, cfg.contact_threshold)
                            == in_contact(&t, pair, cfg.contact_threshold)
                    })
                    .count();
            }
            let contact_accuracy = if pairs.is_empty() {
                f64::NAN
            } else {
                agree as f64 / (pairs.len() * trajs.len()) as f64
            };
            EvalRow {
                horizon: h,
                mse_mean,
                mse_std,
                contact_accuracy,
            }
        })
        .collect();
    Ok(Evaluation {
        rows,
        per_trajectory,
        rollouts,
    })
}

/// How test trajectories are turned about gravity before evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TestRotation {
    None,
    /// The same rotation by `theta` radians for every trajectory.
    Angle(f64),
    /// An independent random element of `O_g(3)` per trajectory.
    Random(u64),
}

/// Transforms applied by a [`TestRotation`], one per trajectory.
pub fn test_transforms(rot: TestRotation, g: &Gravity, count: usize) -> Vec<SubgroupTransform> {
    match rot {
        TestRotation::None => vec![SubgroupTransform::identity(); count],
        TestRotation::Angle(theta) => {
            vec![SubgroupTransform::about_gravity(g, theta, false, Vec3::zeros()); count]
        }
        TestRotation::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let reflect = rng.random_bool(0.5);
                    SubgroupTransform::about_gravity(g, theta, reflect, Vec3::zeros())
                })
                .collect()
        }
    }
}

/// Side-by-side table of an evaluation and its rotated-input counterpart.
/// `max_gap` is the largest per-trajectory difference at that horizon.
pub fn comparison_csv(base: &Evaluation, rotated: &Evaluation) -> String {
    let mut s = String::from(
        "horizon,mse_mean,mse_std,contact_accuracy,rotated_mse_mean,rotated_mse_std,rotated_contact_accuracy,max_gap\n",
    );
    for (c, (a, b)) in base.rows.iter().zip(&rotated.rows).enumerate() {
        let gap = base
            .per_trajectory
            .iter()
            .zip(&rotated.per_trajectory)
            .map(|(x, y)| (x[c] - y[c]).abs())
            .fold(0.0, f64::max);
        let _ = writeln!(
            s,
            "{},{:e},{:e},{},{:e},{:e},{},{:e}",
            a.horizon,
            a.mse_mean,
            a.mse_std,
            a.contact_accuracy,
            b.mse_mean,
            b.mse_std,
            b.contact_accuracy,
            gap
        );
    }
    s
}

/// Per-trajectory rows: `trajectory,horizon,mse,rotated_mse`.
pub fn per_trajectory_csv(base: &Evaluation, rotated: &Evaluation) -> String {
    let mut s = String::from("trajectory,horizon,mse,rotated_mse\n");
    for (i, (a, b)) in base
        .per_trajectory
        .iter()
        .zip(&rotated.per_trajectory)
        .enumerate()
    {
        for (c, row) in base.rows.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{:e},{:e}", row.horizon, a[c], b[c]);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_nine_to_one_and_seeded() {
        let (t, v) = split(50, 0.1, 3);
        assert_eq!((t.len(), v.len()), (45, 5));
        assert_eq!(split(50, 0.1, 3), (t.clone(), v.clone()));
        assert!(t.iter().all(|i| !v.contains(i)));
        assert_ne!(split(50, 0.1, 4).1, v);
        let (t, v) = split(1, 0.1, 0);
        assert_eq!((t, v), (vec![0], vec![0]));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig {
                decay: 1.0,
                ..Default::default()
            },
            TrainConfig {
                plateau_patience: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                noise: NoiseScale::Absolute(-1.0),
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn std_of_constant_velocity_is_zero() {
        let traj = Trajectory {
            dt: 1.0,
            object_of: vec![0],
            attrs: Mat::zeros(1, 0),
            frames: (0..4)
                .map(|t| vec![Vec3::new(t as f64, 0.0, 0.0)])
                .collect(),
        };
        let s = samples(std::slice::from_ref(&traj), &[0]);
        assert_eq!(s.len(), 2);
        assert_eq!(velocity_std(&[traj], &s), Vec3::zeros());
    }
}
