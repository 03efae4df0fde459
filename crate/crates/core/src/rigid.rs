//! Least-squares rigid alignment of a reference shape onto a predicted cloud,
//! with a RANSAC variant for clouds carrying a few stray particles.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::subeq::{Mat3, Vec3};

/// Subset size drawn per RANSAC hypothesis.
pub const RANSAC_SUBSET: usize = 4;
pub const RANSAC_ITERATIONS: usize = 20;
pub const RANSAC_THRESHOLD: f64 = 0.01;

/// Second-to-first singular value ratio below which a reference counts as collinear.
const COLLINEAR_RATIO: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ransac {
    pub iterations: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for Ransac {
    fn default() -> Self {
        Self {
            iterations: RANSAC_ITERATIONS,
            threshold: RANSAC_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidFit {
    pub points: Vec<Vec3>,
    pub rotation: Mat3,
    pub translation: Vec3,
    /// Set when the reference was collinear and only a translation was fitted.
    pub translation_only: bool,
    pub inliers: usize,
}

fn centroid(points: &[Vec3], idx: &[usize]) -> Vec3 {
    idx.iter().map(|&i| points[i]).sum::<Vec3>() / idx.len() as f64
}

/// Proper rotation and translation minimizing `Σ ‖R·ref_i + t − pred_i‖²` over `idx`.
fn kabsch(reference: &[Vec3], predicted: &[Vec3], idx: &[usize]) -> (Mat3, Vec3, bool) {
    let cr = centroid(reference, idx);
    let cp = centroid(predicted, idx);
    let mut cov = Mat3::zeros();
    let mut spread = Mat3::zeros();
    for &i in idx {
        let a = reference[i] - cr;
        cov += (predicted[i] - cp) * a.transpose();
        spread += a * a.transpose();
    }
    let mut sv = spread.symmetric_eigenvalues();
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= COLLINEAR_RATIO * COLLINEAR_RATIO * sv[0] {
        return (Mat3::identity(), cp - cr, true);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        // nalgebra leaves singular values unsorted.
        let (k, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        d[(k, k)] = -1.0;
    }
    let r = u * d * v_t;
    (r, cp - r * cr, false)
}

fn apply(r: &Mat3, t: &Vec3, reference: &[Vec3]) -> Vec<Vec3> {
    reference.iter().map(|p| r * p + t).collect()
}

/// Replaces `predicted` by the best rigid placement of `reference`.
pub fn rigid_project(
    predicted: &[Vec3],
    reference: &[Vec3],
    ransac: Option<&Ransac>,
) -> Result<RigidFit> {
    let n = reference.len();
    if predicted.len() != n {
        return shape_err(format!(
            "{} predicted particles against a {n}-particle reference",
            predicted.len()
        ));
    }
    if n < 3 {
        return shape_err(format!("rigid projection needs 3 particles, got {n}"));
    }
    let all: Vec<usize> = (0..n).collect();
    let Some(cfg) = ransac else {
        let (r, t, flat) = kabsch(reference, predicted, &all);
        return Ok(RigidFit {
            points: apply(&r, &t, reference),
            rotation: r,
            translation: t,
            translation_only: flat,
            inliers: n,
        });
    };

    let inliers_of = |r: &Mat3, t: &Vec3| -> Vec<usize> {
        (0..n)
            .filter(|&i| (r * reference[i] + t - predicted[i]).norm() < cfg.threshold)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = RANSAC_SUBSET.min(n);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..cfg.iterations {
        let subset = sample(&mut rng, n, k).into_vec();
        let (r, t, _) = kabsch(reference, predicted, &subset);
        let inl = inliers_of(&r, &t);
        if inl.len() > best.len() {
            best = inl;
        }
    }
    if best.len() < 3 {
        best = all;
    }
    let (r, t, flat) = kabsch(reference, predicted, &best);
    Ok(RigidFit {
        points: apply(&r, &t, reference),
        rotation: r,
        translation: t,
        translation_only: flat,
        inliers: best.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subeq::geo::{random_orthogonal, random_vec};

    fn cube() -> Vec<Vec3> {
        let mut out = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out.push(Vec3::new(i as f64, j as f64, k as f64) * 0.05);
                }
            }
        }
        out
    }

    fn proper(rng: &mut ChaCha8Rng) -> Mat3 {
        let o = random_orthogonal(rng);
        if o.determinant() < 0.0 {
            -o
        } else {
            o
        }
    }

    #[test]
    fn identity_is_fixed() {
        let r = cube();
        let fit = rigid_project(&r, &r, None).unwrap();
        assert!((fit.rotation - Mat3::identity()).amax() < 1e-12);
        assert!(fit.translation.amax() < 1e-12);
        assert!(!fit.translation_only);
    }

    #[test]
    fn recovers_known_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = cube();
        for _ in 0..20 {
            let r0 = proper(&mut rng);
            let t0 = random_vec(&mut rng, 2.0);
            let pred = apply(&r0, &t0, &reference);
            let fit = rigid_project(&pred, &reference, None).unwrap();
            assert!((fit.rotation - r0).amax() < 1e-10);
            assert!((fit.translation - t0).amax() < 1e-10);
            for (a, b) in fit.points.iter().zip(&pred) {
                assert!((a - b).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn reflected_target_still_gets_a_rotation() {
        let reference = cube();
        let mirror = -Mat3::identity();
        let pred = apply(&mirror, &Vec3::zeros(), &reference);
        let fit = rigid_project(&pred, &reference, None).unwrap();
        assert!((fit.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn output_keeps_reference_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reference = cube();
        let pred: Vec<Vec3> = reference
            .iter()
            .map(|p| p + random_vec(&mut rng, 0.02))
            .collect();
        let fit = rigid_project(&pred, &reference, None).unwrap();
        for i in 0..reference.len() {
            for j in 0..i {
                let a = (fit.points[i] - fit.points[j]).norm();
                let b = (reference[i] - reference[j]).norm();
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ransac_ignores_one_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reference = cube();
        for seed in 0..10 {
            let r0 = proper(&mut rng);
            let t0 = random_vec(&mut rng, 1.0);
            let mut pred = apply(&r0, &t0, &reference);
            pred[7] += Vec3::new(1.0, 0.0, 0.0) * 10.0 * RANSAC_THRESHOLD;
            let cfg = Ransac {
                seed,
                ..Ransac::default()
            };
            let fit = rigid_project(&pred, &reference, Some(&cfg)).unwrap();
            assert!((fit.rotation - r0).amax() < 1e-6);
            assert!((fit.translation - t0).amax() < 1e-6);
            assert_eq!(fit.inliers, reference.len() - 1);
            let plain = rigid_project(&pred, &reference, None).unwrap();
            assert!((plain.translation - t0).amax() > 1e-6);
        }
    }

    #[test]
    fn collinear_reference_falls_back_to_translation() {
        let reference: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let shift = Vec3::new(0.5, -1.0, 2.0);
        let pred: Vec<Vec3> = reference.iter().map(|p| p + shift).collect();
        let fit = rigid_project(&pred, &reference, None).unwrap();
        assert!(fit.translation_only);
        assert_eq!(fit.rotation, Mat3::identity());
        assert!((fit.translation - shift).amax() < 1e-12);
    }

    #[test]
    fn size_errors() {
        let r = cube();
        assert!(rigid_project(&r[..5], &r, None).is_err());
        assert!(rigid_project(&r[..2], &r[..2], None).is_err());
    }
}
