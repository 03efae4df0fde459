use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;

use crate::error::{shape_err, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `‖g‖ = 1`.
pub const UNIT_TOLERANCE: f64 = 1e-12;

/// A stack of `m` 3D column vectors (a `3 × m` matrix).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GeoTensor {
    cols: Vec<Vec3>,
}

impl GeoTensor {
    pub fn new(cols: Vec<Vec3>) -> Self {
        Self { cols }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn channels(&self) -> usize {
        self.cols.len()
    }

    pub fn columns(&self) -> &[Vec3] {
        &self.cols
    }

    pub fn column(&self, i: usize) -> Vec3 {
        self.cols[i]
    }

    /// Channel-major flattening `[c0x, c0y, c0z, c1x, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.cols.iter().flat_map(|c| [c.x, c.y, c.z]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return shape_err(format!(
                "{} values are not a stack of 3D vectors",
                flat.len()
            ));
        }
        Ok(Self {
            cols: flat
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        })
    }

    pub fn transformed(&self, o: &Mat3) -> Self {
        Self {
            cols: self.cols.iter().map(|c| o * c).collect(),
        }
    }

    /// Stacks channels of `self` then `other`.
    pub fn concat(&self, other: &GeoTensor) -> Self {
        let mut cols = self.cols.clone();
        cols.extend_from_slice(&other.cols);
        Self { cols }
    }

    pub fn is_finite(&self) -> bool {
        self.cols.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &GeoTensor) -> f64 {
        assert_eq!(self.channels(), other.channels());
        self.cols
            .iter()
            .zip(&other.cols)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}

/// Stacks tensors with `channels` channels as rows of a channel-major matrix.
pub fn stack_rows(tensors: &[GeoTensor], channels: usize) -> Result<crate::math::Mat> {
    if let Some(bad) = tensors.iter().find(|t| t.channels() != channels) {
        return shape_err(format!(
            "expected {channels} channels, got {}",
            bad.channels()
        ));
    }
    let data = tensors.iter().flat_map(|t| t.to_flat()).collect();
    crate::math::Mat::from_vec(tensors.len(), 3 * channels, data)
}

/// Inverse of [`stack_rows`].
pub fn unstack_rows(m: &crate::math::Mat) -> Result<Vec<GeoTensor>> {
    (0..m.rows())
        .map(|r| GeoTensor::from_flat(m.row(r)))
        .collect()
}

/// Gravity as a unit direction plus a magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gravity {
    direction: Vec3,
    magnitude: f64,
}

impl Default for Gravity {
    fn default() -> Self {
        Self {
            direction: Vec3::new(0.0, 0.0, -1.0),
            magnitude: 9.8,
        }
    }
}

impl Gravity {
    pub fn new(direction: Vec3, magnitude: f64) -> Result<Self> {
        if ((direction.norm() - 1.0).abs()) > UNIT_TOLERANCE {
            return Err(Error::Contract(format!(
                "gravity direction has norm {}, expected 1",
                direction.norm()
            )));
        }
        if !magnitude.is_finite() || magnitude < 0.0 {
            return Err(Error::Contract(format!("gravity magnitude {magnitude}")));
        }
        Ok(Self {
            direction,
            magnitude,
        })
    }

    /// Builds from an unnormalized acceleration vector.
    pub fn from_acceleration(acc: Vec3) -> Result<Self> {
        let n = acc.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Contract("zero or non-finite gravity vector".into()));
        }
        Self::new(acc / n, n)
    }

    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn acceleration(&self) -> Vec3 {
        self.direction * self.magnitude
    }

    pub fn check_unit(&self) -> Result<()> {
        if ((self.direction.norm() - 1.0).abs()) > UNIT_TOLERANCE {
            return Err(Error::Contract("gravity direction is not unit".into()));
        }
        Ok(())
    }

    /// Orthonormal basis `(e1, e2)` of the plane perpendicular to gravity, with
    /// `e1 × e2 = -g`.
    pub fn horizontal_basis(&self) -> (Vec3, Vec3) {
        let g = self.direction;
        let seed = if g.x.abs() < 0.9 {
            Vec3::x()
        } else {
            Vec3::y()
        };
        let e1 = (seed - g * g.dot(&seed)).normalize();
        let e2 = (-g).cross(&e1);
        (e1, e2)
    }
}

/// Orthogonal transform plus translation: `x ↦ O·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubgroupTransform {
    pub o: Mat3,
    pub t: Vec3,
}

impl SubgroupTransform {
    pub fn identity() -> Self {
        Self {
            o: Mat3::identity(),
            t: Vec3::zeros(),
        }
    }

    /// Rotation by `theta` about the upward axis `-g` (right-handed), optionally
    /// preceded by a reflection across a vertical plane, then translation `t`.
    pub fn about_gravity(g: &Gravity, theta: f64, reflect: bool, t: Vec3) -> Self {
        let up = -g.direction();
        let rot = rotation_about(&up, theta);
        let o = if reflect {
            let (_, e2) = g.horizontal_basis();
            rot * (Mat3::identity() - 2.0 * e2 * e2.transpose())
        } else {
            rot
        };
        Self { o, t }
    }

    /// Uniform angle, fair-coin reflection, translation with entries in `[-scale, scale]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, g: &Gravity, translation_scale: f64) -> Self {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let reflect = rng.random_bool(0.5);
        let t = random_vec(rng, translation_scale);
        Self::about_gravity(g, theta, reflect, t)
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.o * p + self.t
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.o * v
    }

    pub fn determinant(&self) -> f64 {
        self.o.determinant()
    }

    pub fn orthogonality_error(&self) -> f64 {
        (self.o.transpose() * self.o - Mat3::identity()).amax()
    }

    /// `‖O·g − g‖∞`.
    pub fn gravity_error(&self, g: &Gravity) -> f64 {
        (self.o * g.direction() - g.direction()).amax()
    }
}

/// Rodrigues rotation about a unit axis.
pub fn rotation_about(axis: &Vec3, theta: f64) -> Mat3 {
    let k = axis.cross_matrix();
    let (s, c) = theta.sin_cos();
    Mat3::identity() * c + k * s + axis * axis.transpose() * (1.0 - c)
}

pub fn random_vec<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-scale..=scale),
        rng.random_range(-scale..=scale),
        rng.random_range(-scale..=scale),
    )
}

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = random_vec(rng, 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Random rotation (uniform axis and angle), negated half the time.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let axis = random_unit(rng);
    let q = UnitQuaternion::from_axis_angle(
        &nalgebra::Unit::new_normalize(axis),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let r = q.to_rotation_matrix().into_inner();
    if rng.random_bool(0.5) {
        -r
    } else {
        r
    }
}

/// Rotation about a random horizontal axis by an angle in `[π/6, 5π/6]`; never in `O_g(3)`.
pub fn random_horizontal_axis_rotation<R: Rng + ?Sized>(rng: &mut R, g: &Gravity) -> Mat3 {
    let (e1, e2) = g.horizontal_basis();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let axis = e1 * phi.cos() + e2 * phi.sin();
    let theta = rng.random_range(std::f64::consts::FRAC_PI_6..5.0 * std::f64::consts::FRAC_PI_6);
    rotation_about(&axis, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_angle_is_identity() {
        let g = Gravity::default();
        let t = SubgroupTransform::about_gravity(&g, 0.0, false, Vec3::zeros());
        assert_eq!(t.o, Mat3::identity());
    }

    #[test]
    fn quarter_turn_maps_x_to_y() {
        let g = Gravity::default();
        let t =
            SubgroupTransform::about_gravity(&g, std::f64::consts::FRAC_PI_2, false, Vec3::zeros());
        assert!((t.o * Vec3::x() - Vec3::y()).amax() < 1e-15);
    }

    #[test]
    fn sampled_transforms_fix_gravity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let g = Gravity::new(random_unit(&mut rng), 9.8).unwrap();
            let t = SubgroupTransform::sample(&mut rng, &g, 1.0);
            assert!(t.orthogonality_error() < 1e-12);
            assert!(t.gravity_error(&g) < 1e-12);
        }
    }

    #[test]
    fn horizontal_rotation_moves_gravity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Gravity::default();
        for _ in 0..100 {
            let o = random_horizontal_axis_rotation(&mut rng, &g);
            assert!((o * g.direction() - g.direction()).amax() > 0.4);
        }
    }

    #[test]
    fn rejects_non_unit_direction() {
        assert!(Gravity::new(Vec3::new(0.0, 0.0, -1.1), 9.8).is_err());
    }
}
