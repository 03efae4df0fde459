mod common;

use sgnn_core::baselines::BaselineKind;
use sgnn_core::math::AdamConfig;
use sgnn_core::model::{GroundFeature, Model, ModelSpec, Variant};
use sgnn_core::rollout::{rollout, Playback, Predictor, Projection, Stationary};
use sgnn_core::scenes::{generate_scene, rollout_mse, simulate, Body, SceneConfig, Trajectory};
use sgnn_core::somp::Aggregation;
use sgnn_core::subeq::{Gravity, SubgroupTransform, Vec3};
use sgnn_core::training::{
    evaluate, sample_loss, test_transforms, train, EvalConfig, NoiseScale, TestRotation,
    TrainConfig, EVAL_HEADER,
};
use sgnn_core::Error;

fn spec(variant: Variant) -> ModelSpec {
    let mut s = ModelSpec::new(variant, 2);
    s.ground = Some(GroundFeature::default());
    s.hidden_scalars = 6;
    s.message_scalars = 6;
    s.iterations = 2;
    s.shape = common::small_shape();
    s.aggregation = Aggregation::Mean;
    s
}

fn scenes(count: u64, frames: usize) -> Vec<Trajectory> {
    (0..count)
        .map(|seed| {
            generate_scene(&SceneConfig {
                objects: 2,
                frames,
                seed,
                ..SceneConfig::default()
            })
            .unwrap()
        })
        .collect()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        samples_per_epoch: Some(6),
        val_samples: Some(4),
        seed,
        ..TrainConfig::default()
    }
}

fn eval_cfg(horizons: Vec<usize>) -> EvalConfig {
    EvalConfig {
        horizons,
        projection: Projection::Off,
        pairs: None,
        contact_threshold: 0.05,
    }
}

#[test]
fn exact_model_has_zero_loss() {
    let still: Vec<Vec3> = (0..8)
        .map(|i| Vec3::new(i as f64 * 0.03, 0.0, 0.5))
        .collect();
    let traj = Trajectory {
        dt: 0.02,
        object_of: vec![0, 0, 0, 0, 1, 1, 1, 1],
        attrs: sgnn_core::math::Mat::filled(8, 1, 1.0),
        frames: vec![still; 4],
    };
    let model = Model::new(spec(Variant::Sgnn)).unwrap();
    let sys = traj.system_at(1).unwrap();
    let target = sgnn_core::math::Mat::from_vec(
        8,
        3,
        traj.frames[2]
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect(),
    )
    .unwrap();
    let (loss, _) = sample_loss(&model, &sys, &target, false).unwrap();
    assert!(loss < 1e-20);
    let cfg = TrainConfig {
        noise: NoiseScale::Absolute(0.0),
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let out = train(model, &[traj.clone(), traj], &cfg).unwrap();
    assert!(out.history.records[0].train_loss < 1e-20);
}

#[test]
fn loss_is_the_one_step_rollout_error() {
    let trajs = scenes(2, 8);
    let mut model = Model::new(spec(Variant::Sgnn)).unwrap();
    model.randomize_update_layers(3, 0.2);
    for t in 1..6 {
        let truth = &trajs[0];
        let sys = truth.system_at(t).unwrap();
        let target = sgnn_core::math::Mat::from_vec(
            truth.particles(),
            3,
            truth.frames[t + 1]
                .iter()
                .flat_map(|p| p.iter().copied())
                .collect(),
        )
        .unwrap();
        let (loss, _) = sample_loss(&model, &sys, &target, false).unwrap();
        let mut pred = truth.clone();
        pred.frames[t + 1] = model.next_positions(t, &sys).unwrap();
        let mse = rollout_mse(&pred, truth, t + 1).unwrap();
        assert!((loss - mse).abs() <= 1e-12 * mse, "{loss} vs {mse}");
    }
}

#[test]
fn noise_perturbs_inputs_only() {
    let still: Vec<Vec3> = (0..6)
        .map(|i| Vec3::new(i as f64 * 0.03, 0.0, 0.5))
        .collect();
    let traj = Trajectory {
        dt: 0.02,
        object_of: vec![0, 0, 0, 1, 1, 1],
        attrs: sgnn_core::math::Mat::filled(6, 1, 1.0),
        frames: vec![still; 60],
    };
    let sigma = 0.01;
    let cfg = TrainConfig {
        noise: NoiseScale::Absolute(sigma),
        adam: AdamConfig {
            lr: 1e-14,
            ..AdamConfig::default()
        },
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let model = Model::new(spec(Variant::Sgnn)).unwrap();
    let out = train(model, &[traj.clone(), traj], &cfg).unwrap();
    let r = out.history.records[0];
    // The identity model's error is the injected noise itself.
    assert!(
        (r.train_loss / (3.0 * sigma * sigma) - 1.0).abs() < 0.15,
        "{}",
        r.train_loss
    );
    assert!(r.val_loss < 1e-20);
}

#[test]
fn training_is_deterministic() {
    let trajs = scenes(4, 10);
    let run = || {
        let model = Model::new(spec(Variant::Sgnn)).unwrap();
        let out = train(model, &trajs, &quick(5)).unwrap();
        (
            out.model.to_checkpoint().to_bytes().unwrap(),
            out.history.to_csv(),
        )
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert!(ha.starts_with("epoch,train_loss,val_loss,lr\n"));
    assert_eq!(ha.lines().count(), 3);
}

#[test]
fn training_reduces_validation_loss() {
    let trajs = scenes(6, 12);
    let model = Model::new(spec(Variant::Sgnn)).unwrap();
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        max_epochs: 4,
        samples_per_epoch: Some(40),
        ..TrainConfig::default()
    };
    let out = train(model, &trajs, &cfg).unwrap();
    assert!(
        out.best_val_loss < out.initial_val_loss,
        "{} vs {}",
        out.best_val_loss,
        out.initial_val_loss
    );
    let best = out
        .history
        .records
        .iter()
        .map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best, out.best_val_loss);
}

#[test]
fn scheduler_decays_after_patience_and_stops_early() {
    // The zero-initialized model is exact on motionless data, so validation
    // never improves on its first epoch.
    let still: Vec<Vec3> = (0..6)
        .map(|i| Vec3::new(i as f64 * 0.03, 0.0, 0.5))
        .collect();
    let traj = Trajectory {
        dt: 0.02,
        object_of: vec![0, 0, 0, 1, 1, 1],
        attrs: sgnn_core::math::Mat::filled(6, 1, 1.0),
        frames: vec![still; 6],
    };
    let model = Model::new(spec(Variant::Baseline(BaselineKind::Gns))).unwrap();
    let cfg = TrainConfig {
        noise: NoiseScale::Absolute(0.01),
        plateau_patience: 2,
        early_stop: 5,
        max_epochs: 50,
        ..TrainConfig::default()
    };
    let out = train(model, &[traj.clone(), traj], &cfg).unwrap();
    let rec = &out.history.records;
    assert_eq!(rec.len(), 1 + cfg.early_stop);
    assert_eq!(out.best_epoch, 1);
    let lrs: Vec<f64> = rec.iter().map(|r| r.lr).collect();
    let lr = cfg.adam.lr;
    let d = cfg.decay;
    assert_eq!(lrs, vec![lr, lr, lr, lr * d, lr * d, lr * d * d]);
}

#[test]
fn non_finite_loss_names_the_sample() {
    let trajs = scenes(2, 6);
    let mut model = Model::new(spec(Variant::Sgnn)).unwrap();
    let id = model.store.ids().next().unwrap();
    model.store.value_mut(id).data_mut()[0] = f64::NAN;
    match train(model, &trajs, &quick(0)) {
        Err(Error::Training { location, .. }) => {
            assert!(location.contains("trajectory"), "{location}")
        }
        other => panic!("{:?}", other.map(|o| o.best_epoch)),
    }
}

#[test]
fn playback_scores_perfectly() {
    let trajs = scenes(3, 12);
    for t in &trajs {
        let eval = evaluate(
            &Playback(t),
            std::slice::from_ref(t),
            &eval_cfg(vec![2, 5, 11]),
        )
        .unwrap();
        assert_eq!(eval.rows.len(), 3);
        for r in &eval.rows {
            assert_eq!(r.mse_mean, 0.0);
            assert_eq!(r.contact_accuracy, 1.0);
        }
        assert!(eval.to_csv().starts_with(EVAL_HEADER));
        assert_eq!(eval.to_csv().lines().count(), 4);
    }
}

#[test]
fn stationary_error_on_free_fall_matches_closed_form() {
    let cfg = SceneConfig {
        objects: 1,
        ground: None,
        frames: 20,
        ..SceneConfig::default()
    };
    let traj = simulate(&cfg, &[Body::at_rest(Vec3::new(0.0, 0.0, 2.0))]).unwrap();
    let horizons = vec![5, 10, 19];
    let eval = evaluate(
        &Stationary,
        std::slice::from_ref(&traj),
        &eval_cfg(horizons.clone()),
    )
    .unwrap();
    let g = cfg.gravity;
    for (row, &h) in eval.rows.iter().zip(&horizons) {
        let (t1, th) = (traj.dt, h as f64 * traj.dt);
        let drop = 0.5 * g * (th * th - t1 * t1);
        let err = row.mse_mean.sqrt();
        assert!(
            (err - drop).abs() <= 0.5 * g * cfg.dt * (th - t1) + 1e-12,
            "h={h}: {err} vs {drop}"
        );
        assert_eq!(row.mse_std, 0.0);
    }
}

#[test]
fn evaluation_rejects_bad_horizons() {
    let trajs = scenes(1, 6);
    assert!(evaluate(&Stationary, &trajs, &eval_cfg(vec![])).is_err());
    assert!(evaluate(&Stationary, &trajs, &eval_cfg(vec![1])).is_err());
    assert!(evaluate(&Stationary, &trajs, &eval_cfg(vec![6])).is_err());
}

#[test]
fn rotated_rollouts_match_for_the_subequivariant_model() {
    let g = Gravity::default();
    let trajs = scenes(2, 41);
    let model = Model::new(spec(Variant::Sgnn)).unwrap();
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 3e-4,
            ..AdamConfig::default()
        },
        samples_per_epoch: Some(20),
        ..quick(1)
    };
    let model = train(model, &trajs, &cfg).unwrap().model;
    let transforms = test_transforms(TestRotation::Random(4), &g, trajs.len());
    for (traj, t) in trajs.iter().zip(&transforms) {
        let base = rollout(&model, traj, 39, Projection::Off).unwrap();
        let turned = rollout(&model, &traj.transformed(t), 39, Projection::Off).unwrap();
        let expected = base.transformed(t);
        for (s, (a, b)) in turned.frames.iter().zip(&expected.frames).enumerate() {
            let dev = a
                .iter()
                .zip(b)
                .map(|(p, q)| (p - q).amax())
                .fold(0.0, f64::max);
            assert!(dev < 1e-7, "step {s}: {dev}");
        }
        // The rollout actually moves.
        assert!(rollout_mse(&base, traj, 40).unwrap() > 0.0);
    }
    let gns = Model::new(spec(Variant::Baseline(BaselineKind::Gns))).unwrap();
    let gns = train(gns, &trajs, &cfg).unwrap().model;
    let t = SubgroupTransform::about_gravity(&g, 1.0, false, Vec3::zeros());
    let base = rollout(&gns, &trajs[0], 10, Projection::Off)
        .unwrap()
        .transformed(&t);
    let turned = rollout(&gns, &trajs[0].transformed(&t), 10, Projection::Off).unwrap();
    assert_ne!(base.frames[11], turned.frames[11]);
}

#[test]
fn rigid_projection_preserves_shapes_in_rollouts() {
    let trajs = scenes(1, 10);
    let mut model = Model::new(spec(Variant::Sgnn)).unwrap();
    model.randomize_update_layers(2, 0.002);
    for projection in [
        Projection::Procrustes,
        Projection::Ransac(Default::default()),
    ] {
        let out = rollout(&model, &trajs[0], 8, projection).unwrap();
        for ids in out.members() {
            let d = |f: &Vec<Vec3>| (f[ids[0]] - f[ids[26]]).norm();
            for (k, f) in out.frames.iter().enumerate() {
                assert!(f[0].norm() < 10.0, "frame {k} left the scene");
                assert!(
                    (d(f) - d(&out.frames[0])).abs() < 1e-10,
                    "frame {k}: {} {} {projection:?}",
                    d(f),
                    d(&out.frames[0])
                );
            }
        }
    }
}
