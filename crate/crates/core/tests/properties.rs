use proptest::prelude::*;
use sgnn_core::math::Checkpoint;
use sgnn_core::model::{Model, ModelSpec, Variant};
use sgnn_core::rigid::rigid_project;
use sgnn_core::scenes::{generate_scene, SceneConfig, Trajectory};
use sgnn_core::subeq::geo::rotation_about;
use sgnn_core::subeq::{lemma5_witness, GeoTensor, Gravity, SubgroupTransform, Vec3};

fn vec3() -> impl Strategy<Value = Vec3> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn small_trajectory() -> Vec<u8> {
    let cfg = SceneConfig {
        objects: 2,
        frames: 4,
        ..SceneConfig::default()
    };
    generate_scene(&cfg).unwrap().to_bytes().unwrap()
}

fn small_checkpoint() -> Vec<u8> {
    let mut spec = ModelSpec::new(Variant::Sgnn, 2);
    spec.hidden_scalars = 2;
    spec.message_scalars = 2;
    spec.iterations = 1;
    spec.shape.hidden = 4;
    spec.shape.eta_hidden = 2;
    Model::new(spec)
        .unwrap()
        .to_checkpoint()
        .to_bytes()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn parsers_survive_arbitrary_bytes(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = Trajectory::from_bytes(&bytes);
        if let Ok(c) = Checkpoint::from_bytes(&bytes) {
            let _ = Model::from_checkpoint(&c);
        }
        let text = String::from_utf8_lossy(&bytes);
        let _ = SceneConfig::parse(&text);
        let _ = ModelSpec::from_header(&text);
    }

    #[test]
    fn corrupted_files_never_panic(cut in 0usize..4096, at in 0usize..4096, xor in 1u8..=255) {
        for valid in [small_trajectory(), small_checkpoint()] {
            let mut b = valid.clone();
            let i = at % b.len();
            b[i] ^= xor;
            b.truncate(b.len() - cut % b.len());
            let _ = Trajectory::from_bytes(&b);
            if let Ok(c) = Checkpoint::from_bytes(&b) {
                let _ = Model::from_checkpoint(&c);
            }
        }
    }

    #[test]
    fn scene_configs_round_trip(
        objects in 1usize..6,
        frames in 3usize..80,
        heading in -4.0..4.0f64,
        spread in 0.0..7.0f64,
        seed in any::<u64>(),
    ) {
        let cfg = SceneConfig { objects, frames, heading, heading_spread: spread, seed, ..SceneConfig::default() };
        let back = SceneConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn witness_recovers_subgroup_elements(
        cols in prop::collection::vec(vec3(), 1..5),
        theta in 0.0..std::f64::consts::TAU,
        reflect: bool,
    ) {
        let g = Gravity::default();
        let z2 = GeoTensor::new(cols);
        let o = SubgroupTransform::about_gravity(&g, theta, reflect, Vec3::zeros()).o;
        let z1 = z2.transformed(&o);
        let w = lemma5_witness(&z1, &z2, &g).unwrap();
        prop_assert!(z2.transformed(&w.o).max_abs_diff(&z1) < 1e-9);
        prop_assert!(w.gravity_error(&g) < 1e-12);
    }

    #[test]
    fn procrustes_recovers_rigid_motions(
        reference in prop::collection::vec(vec3(), 4..12),
        axis in vec3(),
        theta in -3.0..3.0f64,
        t in vec3(),
    ) {
        prop_assume!(axis.norm() > 0.1);
        let centre = reference.iter().sum::<Vec3>() / reference.len() as f64;
        let spread = reference.iter().map(|p| (p - centre).norm_squared()).sum::<f64>();
        prop_assume!(spread > 0.1);
        let r = rotation_about(&axis.normalize(), theta);
        let moved: Vec<Vec3> = reference.iter().map(|p| r * p + t).collect();
        let fit = rigid_project(&moved, &reference, None).unwrap();
        for (a, b) in fit.points.iter().zip(&moved) {
            prop_assert!((a - b).norm() < 1e-9);
        }
    }
}
