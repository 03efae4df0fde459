//! Constructive witness that equal gravity-augmented Grams imply inputs
//! related by an element of `O_g(3)`.

use nalgebra::Matrix2;

use super::geo::{GeoTensor, Gravity, Mat3, SubgroupTransform, Vec3};
use crate::error::{shape_err, Error, Result};

/// Tolerance on the Gram equality precondition.
pub const GRAM_TOLERANCE: f64 = 1e-8;
/// Bound on `‖O·Z2 − Z1‖∞` the witness must meet.
pub const RECOVERY_TOLERANCE: f64 = 1e-6;

fn augmented_gram(z: &GeoTensor, g: &Vec3) -> Vec<f64> {
    let mut cols = z.columns().to_vec();
    cols.push(*g);
    let k = cols.len();
    let mut out = Vec::with_capacity(k * k);
    for a in &cols {
        for b in &cols {
            out.push(a.dot(b));
        }
    }
    out
}

/// Returns `O ∈ O_g(3)` with `O·Z2 = Z1`, assembled as `ggᵀ + B·O′·Bᵀ` where `B`
/// spans the horizontal plane and `O′` is the 2×2 orthogonal Procrustes solution
/// (reflections allowed). When the horizontal parts are rank-deficient the SVD
/// still yields an orthogonal `O′`; any such choice maps `Z2` onto `Z1`.
pub fn lemma5_witness(z1: &GeoTensor, z2: &GeoTensor, g: &Gravity) -> Result<SubgroupTransform> {
    if z1.channels() != z2.channels() {
        return shape_err("witness operands differ in channel count");
    }
    g.check_unit()?;
    let gd = g.direction();
    let g1 = augmented_gram(z1, &gd);
    let g2 = augmented_gram(z2, &gd);
    let gap = g1
        .iter()
        .zip(&g2)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if !(gap <= GRAM_TOLERANCE) {
        return Err(Error::Precondition(format!(
            "augmented Gram matrices differ by {gap:e}"
        )));
    }
    let (e1, e2) = g.horizontal_basis();
    let mut cross = Matrix2::zeros();
    for (a, b) in z1.columns().iter().zip(z2.columns()) {
        let ha = nalgebra::Vector2::new(e1.dot(a), e2.dot(a));
        let hb = nalgebra::Vector2::new(e1.dot(b), e2.dot(b));
        cross += ha * hb.transpose();
    }
    let svd = cross.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => (Matrix2::identity(), Matrix2::identity()),
    };
    let rot2 = u * vt;
    let basis = nalgebra::Matrix3x2::from_columns(&[e1, e2]);
    let o: Mat3 = gd * gd.transpose() + basis * rot2 * basis.transpose();
    let witness = SubgroupTransform {
        o,
        t: Vec3::zeros(),
    };
    let err = z2.transformed(&o).max_abs_diff(z1);
    if !(err < RECOVERY_TOLERANCE) {
        return Err(Error::Precondition(format!(
            "no O_g(3) element aligns the inputs (residual {err:e})"
        )));
    }
    Ok(witness)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subeq::geo::random_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_inputs_recover_themselves() {
        let z = GeoTensor::new(vec![Vec3::new(1., 2., 3.), Vec3::new(-1., 0.5, 0.)]);
        let o = lemma5_witness(&z, &z, &Gravity::default()).unwrap();
        assert!(z.transformed(&o.o).max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn construct_then_recover() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Gravity::default();
        for m in 0..4 {
            for _ in 0..50 {
                let z2 = GeoTensor::new((0..m).map(|_| random_vec(&mut rng, 2.0)).collect());
                let truth = SubgroupTransform::sample(&mut rng, &g, 0.0);
                let z1 = z2.transformed(&truth.o);
                let w = lemma5_witness(&z1, &z2, &g).unwrap();
                assert!(w.gravity_error(&g) < 1e-12);
                assert!(w.orthogonality_error() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_one_horizontal_part() {
        let g = Gravity::default();
        let z2 = GeoTensor::new(vec![Vec3::new(1., 0., 0.5), Vec3::new(2., 0., -1.)]);
        let truth = SubgroupTransform::about_gravity(&g, 1.1, true, Vec3::zeros());
        let z1 = z2.transformed(&truth.o);
        lemma5_witness(&z1, &z2, &g).unwrap();
    }

    #[test]
    fn vertical_mismatch_is_rejected() {
        let g = Gravity::default();
        let z1 = GeoTensor::new(vec![Vec3::new(1., 0., 0.)]);
        let z2 = GeoTensor::new(vec![Vec3::new(0., 0., 1.)]);
        assert!(matches!(
            lemma5_witness(&z1, &z2, &g),
            Err(Error::Precondition(_))
        ));
    }
}
