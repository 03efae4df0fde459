//! Rollout error and contact agreement between predicted and true trajectories.

use crate::error::{shape_err, Result};
use crate::scenes::trajectory::Trajectory;

fn check_pair(pred: &Trajectory, truth: &Trajectory) -> Result<()> {
    if pred.particles() != truth.particles() || pred.len() != truth.len() {
        return shape_err(format!(
            "prediction is {}×{} (frames × particles), truth is {}×{}",
            pred.len(),
            pred.particles(),
            truth.len(),
            truth.particles()
        ));
    }
    Ok(())
}

/// Mean over particles of the squared position error at frame `t`.
pub fn rollout_mse(pred: &Trajectory, truth: &Trajectory, t: usize) -> Result<f64> {
    check_pair(pred, truth)?;
    if t >= truth.len() {
        return shape_err(format!("frame {t} of a {}-frame trajectory", truth.len()));
    }
    let n = truth.particles();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred.frames[t]
        .iter()
        .zip(&truth.frames[t])
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / n as f64)
}

/// Whether objects `k` and `l` come closer than `threshold` in any frame.
pub fn in_contact(traj: &Trajectory, pair: (usize, usize), threshold: f64) -> bool {
    let members = traj.members();
    let (Some(a), Some(b)) = (members.get(pair.0), members.get(pair.1)) else {
        return false;
    };
    traj.frames.iter().any(|frame| {
        a.iter()
            .any(|&i| b.iter().any(|&j| (frame[i] - frame[j]).norm() < threshold))
    })
}

/// Fraction of trajectories where predicted and true contact of `pair` agree.
pub fn contact_accuracy(
    preds: &[Trajectory],
    truths: &[Trajectory],
    pair: (usize, usize),
    threshold: f64,
) -> Result<f64> {
    if preds.len() != truths.len() {
        return shape_err(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        ));
    }
    if truths.is_empty() {
        return Ok(1.0);
    }
    let agree = preds
        .iter()
        .zip(truths)
        .filter(|(p, t)| in_contact(p, pair, threshold) == in_contact(t, pair, threshold))
        .count();
    Ok(agree as f64 / truths.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat;
    use crate::subeq::Vec3;

    fn line(offset: f64) -> Trajectory {
        Trajectory {
            dt: 1.0,
            object_of: vec![0, 1],
            attrs: Mat::zeros(2, 0),
            frames: (0..3)
                .map(|t| vec![Vec3::zeros(), Vec3::new(offset - t as f64 * 0.1, 0.0, 0.0)])
                .collect(),
        }
    }

    #[test]
    fn identical_is_zero_and_offset_is_three_d_squared() {
        let t = line(1.0);
        assert_eq!(rollout_mse(&t, &t, 2).unwrap(), 0.0);
        let mut p = t.clone();
        for f in &mut p.frames {
            for x in f.iter_mut() {
                *x += Vec3::repeat(0.5);
            }
        }
        assert!((rollout_mse(&p, &t, 1).unwrap() - 0.75).abs() < 1e-15);
        assert!(rollout_mse(&p, &t, 3).is_err());
    }

    #[test]
    fn contact_scan() {
        assert!(in_contact(&line(0.25), (0, 1), 0.1));
        assert!(!in_contact(&line(1.0), (0, 1), 0.1));
        let near = vec![line(0.25); 3];
        let far = vec![line(5.0); 3];
        assert_eq!(contact_accuracy(&near, &near, (0, 1), 0.1).unwrap(), 1.0);
        assert_eq!(contact_accuracy(&far, &near, (0, 1), 0.1).unwrap(), 0.0);
    }
}
