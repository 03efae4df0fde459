//! Numerical equivariance checks by direct evaluation.

use rand::Rng;

use super::geo::{
    random_horizontal_axis_rotation, random_orthogonal, random_vec, Gravity, Mat3,
    SubgroupTransform, Vec3,
};
use crate::error::Result;

/// Inputs or outputs of a checked function: points translate, vectors only
/// rotate, scalars are invariant.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sample {
    pub points: Vec<Vec3>,
    pub vectors: Vec<Vec3>,
    pub scalars: Vec<f64>,
}

impl Sample {
    pub fn transformed(&self, t: &SubgroupTransform) -> Sample {
        Sample {
            points: self.points.iter().map(|p| t.apply_point(p)).collect(),
            vectors: self.vectors.iter().map(|v| t.apply_vector(v)).collect(),
            scalars: self.scalars.clone(),
        }
    }

    /// `‖self − other‖∞` over all entries; infinite on layout mismatch.
    pub fn deviation(&self, other: &Sample) -> f64 {
        if self.points.len() != other.points.len()
            || self.vectors.len() != other.vectors.len()
            || self.scalars.len() != other.scalars.len()
        {
            return f64::INFINITY;
        }
        let p = self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a - b).amax());
        let v = self
            .vectors
            .iter()
            .zip(&other.vectors)
            .map(|(a, b)| (a - b).amax());
        let s = self
            .scalars
            .iter()
            .zip(&other.scalars)
            .map(|(a, b)| (a - b).abs());
        p.chain(v).chain(s).fold(0.0, |acc, d| {
            if d.is_nan() {
                f64::INFINITY
            } else {
                acc.max(d)
            }
        })
    }
}

/// Transform family to sample from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Group {
    /// Full orthogonal group, no translation.
    O3,
    /// Rotations/reflections fixing gravity, no translation.
    Og3(Gravity),
    Translation,
    /// `O(3)` plus translation.
    E3,
    /// `O_g(3)` plus translation.
    Og3Translation(Gravity),
    /// Rotations about a horizontal axis. Not a group; used to search for
    /// counterexamples to full `O(3)` equivariance.
    HorizontalAxis(Gravity),
}

impl Group {
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        translation_scale: f64,
    ) -> SubgroupTransform {
        let (o, t): (Mat3, Vec3) = match self {
            Group::O3 => (random_orthogonal(rng), Vec3::zeros()),
            Group::Og3(g) => (SubgroupTransform::sample(rng, g, 0.0).o, Vec3::zeros()),
            Group::Translation => (Mat3::identity(), random_vec(rng, translation_scale)),
            Group::E3 => (random_orthogonal(rng), random_vec(rng, translation_scale)),
            Group::Og3Translation(g) => {
                let s = SubgroupTransform::sample(rng, g, translation_scale);
                (s.o, s.t)
            }
            Group::HorizontalAxis(g) => (random_horizontal_axis_rotation(rng, g), Vec3::zeros()),
        };
        SubgroupTransform { o, t }
    }
}

/// Max over `trials` sampled transforms `T` of `‖f(T·x) − T·f(x)‖∞`, with
/// scalar outputs compared for invariance.
pub fn check_equivariance<F, R>(
    f: F,
    input: &Sample,
    group: Group,
    trials: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&Sample) -> Result<Sample>,
    R: Rng + ?Sized,
{
    let base = f(input)?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let t = group.sample(rng, 1.0);
        let moved = f(&input.transformed(&t))?;
        worst = worst.max(moved.deviation(&base.transformed(&t)));
    }
    Ok(worst)
}
