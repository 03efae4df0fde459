//! Autoregressive rollouts driven by any next-position predictor.

use crate::error::{Error, Result};
use crate::graph::{build_edges, ParticleSystem};
use crate::model::Model;
use crate::rigid::{rigid_project, Ransac};
use crate::scenes::Trajectory;
use crate::subeq::Vec3;

/// Something that maps the state at frame `t` to positions at frame `t + 1`.
pub trait Predictor: Sync {
    fn next_positions(&self, t: usize, sys: &ParticleSystem) -> Result<Vec<Vec3>>;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn next_positions(&self, t: usize, sys: &ParticleSystem) -> Result<Vec<Vec3>> {
        (**self).next_positions(t, sys)
    }
}

impl Predictor for Model {
    fn next_positions(&self, _t: usize, sys: &ParticleSystem) -> Result<Vec<Vec3>> {
        let sys = self.featurize(sys)?;
        let edges = build_edges(&sys, self.spec().cutoff)?;
        self.predict_step(&sys, &edges)
    }
}

/// Replays recorded frames; a rollout of it reproduces the recording.
pub struct Playback<'a>(pub &'a Trajectory);

impl Predictor for Playback<'_> {
    fn next_positions(&self, t: usize, _sys: &ParticleSystem) -> Result<Vec<Vec3>> {
        self.0
            .frames
            .get(t + 1)
            .cloned()
            .ok_or_else(|| Error::Rollout {
                step: t,
                message: "playback ran past the recording".into(),
            })
    }
}

/// Predicts that nothing moves.
pub struct Stationary;

impl Predictor for Stationary {
    fn next_positions(&self, _t: usize, sys: &ParticleSystem) -> Result<Vec<Vec3>> {
        Ok(sys.positions.clone())
    }
}

/// How predicted clouds of rigid objects are snapped back to their shape.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Projection {
    #[default]
    Off,
    Procrustes,
    Ransac(Ransac),
}

/// State at frame `t` of a growing frame list, velocity from the previous frame.
fn state(frames: &[Vec<Vec3>], template: &Trajectory, t: usize) -> Result<ParticleSystem> {
    let velocities = frames[t]
        .iter()
        .zip(&frames[t - 1])
        .map(|(a, b)| a - b)
        .collect();
    ParticleSystem::new(
        frames[t].clone(),
        velocities,
        template.attrs.clone(),
        template.object_of.clone(),
        template.objects(),
    )
}

/// Seeds from frames 0 and 1 of `initial` and predicts `steps` further frames.
/// The result holds `steps + 2` frames.
pub fn rollout(
    predictor: &dyn Predictor,
    initial: &Trajectory,
    steps: usize,
    projection: Projection,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Contract("a rollout needs at least one step".into()));
    }
    if initial.len() < 2 {
        return Err(Error::Contract(format!(
            "a rollout seeds from two frames, the trajectory has {}",
            initial.len()
        )));
    }
    initial.validate()?;
    let members = initial.members();
    let references: Vec<Option<Vec<Vec3>>> = members
        .iter()
        .enumerate()
        .map(|(k, ids)| {
            (projection != Projection::Off && initial.is_rigid(k) && ids.len() >= 3)
                .then(|| ids.iter().map(|&i| initial.frames[0][i]).collect())
        })
        .collect();

    let mut frames = initial.frames[..2].to_vec();
    for step in 0..steps {
        let t = frames.len() - 1;
        let sys = state(&frames, initial, t).map_err(|e| Error::Rollout {
            step,
            message: e.to_string(),
        })?;
        let mut next = predictor.next_positions(t, &sys).map_err(|e| match e {
            Error::Rollout { .. } => e,
            other => Error::Rollout {
                step,
                message: other.to_string(),
            },
        })?;
        if next.len() != initial.particles()
            || next.iter().any(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::Rollout {
                step,
                message: "prediction is not finite".into(),
            });
        }
        for (k, reference) in references.iter().enumerate() {
            let Some(reference) = reference else { continue };
            let ids = &members[k];
            let cloud: Vec<Vec3> = ids.iter().map(|&i| next[i]).collect();
            let ransac = match projection {
                Projection::Ransac(r) => Some(Ransac {
                    seed: r.seed.wrapping_add((step * members.len() + k) as u64),
                    ..r
                }),
                _ => None,
            };
            let fit = rigid_project(&cloud, reference, ransac.as_ref())?;
            for (&i, p) in ids.iter().zip(fit.points) {
                next[i] = p;
            }
        }
        frames.push(next);
    }
    Ok(Trajectory {
        dt: initial.dt,
        object_of: initial.object_of.clone(),
        attrs: initial.attrs.clone(),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat;

    fn drift() -> Trajectory {
        let frames = (0..5)
            .map(|t| {
                (0..4)
                    .map(|i| {
                        Vec3::new(
                            i as f64 * 0.1,
                            (i % 2) as f64 * 0.1,
                            (i / 2) as f64 * 0.1 + t as f64 * 0.01,
                        )
                    })
                    .collect()
            })
            .collect();
        Trajectory {
            dt: 0.02,
            object_of: vec![0; 4],
            attrs: Mat::filled(4, 1, 1.0),
            frames,
        }
    }

    struct Exploding;

    impl Predictor for Exploding {
        fn next_positions(&self, t: usize, sys: &ParticleSystem) -> Result<Vec<Vec3>> {
            let mut out = sys.positions.clone();
            if t == 3 {
                out[0].x = f64::NAN;
            }
            Ok(out)
        }
    }

    #[test]
    fn playback_reproduces_the_recording() {
        let t = drift();
        let out = rollout(&Playback(&t), &t, 3, Projection::Off).unwrap();
        assert_eq!(out, t);
        let out = rollout(&Playback(&t), &t, 3, Projection::Procrustes).unwrap();
        for (a, b) in out.frames.iter().flatten().zip(t.frames.iter().flatten()) {
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn stationary_keeps_frame_one() {
        let t = drift();
        let out = rollout(&Stationary, &t, 1, Projection::Off).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.frames[2], t.frames[1]);
    }

    #[test]
    fn reports_the_diverging_step() {
        let t = drift();
        match rollout(&Exploding, &t, 4, Projection::Off) {
            Err(Error::Rollout { step, .. }) => assert_eq!(step, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_short_inputs() {
        let mut t = drift();
        assert!(rollout(&Stationary, &t, 0, Projection::Off).is_err());
        t.frames.truncate(1);
        assert!(rollout(&Stationary, &t, 1, Projection::Off).is_err());
    }
}
