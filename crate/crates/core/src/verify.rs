//! Property suites behind `sgnn verify` and the acceptance run. Every check
//! reports its worst value and the seed of the instance that produced it.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{BaselineConfig, BaselineKind, BaselineLayer, EgnnLayer, GmnLayer};
use crate::error::{Error, Result};
use crate::graph::{build_edges, pool_objects, EdgeIndex, ObjectFeatures, ParticleSystem};
use crate::math::gradcheck::gradient_check;
use crate::math::{Activation, AdamConfig, Init, Mat, ParamStore, Tape};
use crate::model::{Ablations, GroundFeature, Model, ModelSpec, Variant};
use crate::reduction::{gmn_masking_egnn, somp_masking_gmn};
use crate::scenes::{generate_scene, simulate, spawn_bodies, Body, SceneConfig, Trajectory};
use crate::somp::{somp_forward, Aggregation, EdgeInput, ObjectInputs, SompConfig, SompLayer};
use crate::subeq::geo::{random_horizontal_axis_rotation, random_vec};
use crate::subeq::{
    check_equivariance, lemma5_witness, scalarize_subequivariant, stack_rows, BlockSpec, GeoTensor,
    Gravity, Group, MlpShape, Sample, ScalarizeBlock, SubgroupTransform, Vec3,
};
use crate::training::{train, TrainConfig};

pub const SUITES: &[&str] = &[
    "equivariance",
    "strictness",
    "reduction",
    "lemma5",
    "gradients",
    "expressivity",
    "oracle",
];

/// Which side of the threshold passes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Limit {
    Below(f64),
    Above(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: Limit,
    /// Seed of the instance behind `value`.
    pub seed: u64,
}

impl Check {
    pub fn passed(&self) -> bool {
        match self.limit {
            Limit::Below(t) => self.value < t,
            Limit::Above(t) => self.value > t,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (op, t) = match self.limit {
            Limit::Below(t) => ("<", t),
            Limit::Above(t) => (">", t),
        };
        let verdict = if self.passed() { "pass" } else { "FAIL" };
        write!(
            f,
            "{verdict} {}: {:.3e} (need {op} {t:e}, seed {})",
            self.name, self.value, self.seed
        )
    }
}

/// Worst value over instances: the largest for `Below`, the smallest for `Above`.
struct Worst {
    name: String,
    limit: Limit,
    value: Option<f64>,
    seed: u64,
}

impl Worst {
    fn new(name: impl Into<String>, limit: Limit) -> Self {
        Self {
            name: name.into(),
            limit,
            value: None,
            seed: 0,
        }
    }

    fn see(&mut self, v: f64, seed: u64) {
        let v = if v.is_nan() {
            match self.limit {
                Limit::Below(_) => f64::INFINITY,
                Limit::Above(_) => f64::NEG_INFINITY,
            }
        } else {
            v
        };
        let worse = match (self.value, self.limit) {
            (None, _) => true,
            (Some(w), Limit::Below(_)) => v > w,
            (Some(w), Limit::Above(_)) => v < w,
        };
        if worse {
            self.value = Some(v);
            self.seed = seed;
        }
    }

    fn done(self) -> Check {
        Check {
            name: self.name,
            value: self.value.unwrap_or(f64::NAN),
            limit: self.limit,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {c}", self.suite)?;
        }
        Ok(())
    }
}

/// Runs one named suite. `trials` counts random instances where a suite has them.
pub fn run_suite(name: &str, trials: usize, seed: u64) -> Result<Report> {
    if trials == 0 {
        return Err(Error::Contract(
            "verification needs at least one trial".into(),
        ));
    }
    let checks = match name {
        "equivariance" => equivariance(trials, seed)?,
        "strictness" => strictness(trials, seed)?,
        "reduction" => reduction(trials, seed)?,
        "lemma5" => lemma5(trials, seed)?,
        "gradients" => gradients(trials, seed)?,
        "expressivity" => expressivity(seed)?,
        "oracle" => oracle(seed)?,
        other => return Err(Error::Contract(format!("unknown suite {other:?}"))),
    };
    Ok(Report {
        suite: name.to_string(),
        checks,
    })
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_shape() -> MlpShape {
    MlpShape {
        hidden: 16,
        layers: 3,
        eta_hidden: 8,
        activation: Activation::Silu,
    }
}

fn baseline_config() -> BaselineConfig {
    BaselineConfig {
        node_scalars: 3,
        message_channels: 2,
        message_scalars: 4,
        iterations: 2,
        normalize: true,
        shape: small_shape(),
        zero_init_update: false,
    }
}

fn somp_config(use_objects: bool, aggregation: Aggregation) -> SompConfig {
    SompConfig {
        node_channels: 2,
        node_scalars: 3,
        object_channels: 2,
        object_scalars: 3,
        use_objects,
        edge_input: EdgeInput::Nodes,
        message_channels: 2,
        message_scalars: 4,
        iterations: 2,
        gravity: true,
        normalize: true,
        aggregation,
        shape: small_shape(),
        zero_init_update: false,
    }
}

fn model_spec(variant: Variant, seed: u64) -> ModelSpec {
    let mut spec = ModelSpec::new(variant, 2);
    spec.hidden_scalars = 6;
    spec.message_scalars = 5;
    spec.shape = small_shape();
    spec.iterations = 2;
    spec.seed = seed;
    spec
}

/// A model with every update layer re-drawn so no output is trivially zero.
fn generic_model(spec: ModelSpec) -> Result<Model> {
    let seed = spec.seed;
    let mut m = Model::new(spec)?;
    m.randomize_update_layers(seed.wrapping_add(1000), 0.3);
    Ok(m)
}

/// Unit-scale random particles with three scalar features and a random
/// symmetric edge list.
fn random_system<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    objects: usize,
) -> Result<(ParticleSystem, Vec<(usize, usize)>)> {
    let positions = (0..n).map(|_| random_vec(rng, 1.0)).collect();
    let velocities = (0..n).map(|_| random_vec(rng, 1.0)).collect();
    let attrs = Mat::from_vec(
        n,
        3,
        (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let object_of = (0..n).map(|i| i % objects).collect();
    let sys = ParticleSystem::new(positions, velocities, attrs, object_of, objects)?;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.4) {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }
    edges.sort_unstable();
    Ok((sys, edges))
}

/// Two touching clusters at cube scale, attributes in `[0, 1)`.
fn two_clusters<R: Rng + ?Sized>(rng: &mut R, per: usize, gap: f64) -> Result<ParticleSystem> {
    let mut positions = Vec::new();
    let mut object_of = Vec::new();
    for k in 0..2 {
        for _ in 0..per {
            let offset = Vec3::new(k as f64 * gap, 0.0, 0.0);
            positions.push(offset + random_vec(rng, 0.05).add_scalar(0.05));
            object_of.push(k);
        }
    }
    let n = positions.len();
    let velocities = (0..n).map(|_| random_vec(rng, 0.02)).collect();
    let attrs = Mat::from_vec(
        n,
        2,
        (0..2 * n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    ParticleSystem::new(positions, velocities, attrs, object_of, 2)
}

fn system_sample(sys: &ParticleSystem) -> Sample {
    Sample {
        points: sys.positions.clone(),
        vectors: sys.velocities.clone(),
        scalars: sys.attrs.data().to_vec(),
    }
}

fn with_sample(sys: &ParticleSystem, s: &Sample) -> ParticleSystem {
    let mut out = sys.clone();
    out.positions.clone_from(&s.points);
    out.velocities.clone_from(&s.vectors);
    out
}

fn outputs_sample(z: &[GeoTensor], h: &[Vec<f64>]) -> Sample {
    let mut s = Sample::default();
    for t in z {
        s.points.push(t.column(0));
        s.vectors.extend_from_slice(&t.columns()[1..]);
    }
    s.scalars = h.concat();
    s
}

fn moved(sys: &ParticleSystem, t: &SubgroupTransform) -> ParticleSystem {
    with_sample(sys, &system_sample(sys).transformed(t))
}

fn position_deviation(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).amax())
        .fold(0.0, f64::max)
}

fn somp_run(
    layer: &SompLayer,
    store: &ParamStore,
    sys: &ParticleSystem,
    edges: &[(usize, usize)],
    g: Option<&Gravity>,
) -> Result<Sample> {
    let particles: Vec<GeoTensor> = (0..sys.len()).map(|i| sys.geo(i)).collect();
    let scalars: Vec<Vec<f64>> = (0..sys.len()).map(|i| sys.attrs.row(i).to_vec()).collect();
    let objects = pool_objects(sys)?;
    let objects = layer
        .config
        .use_objects
        .then_some((&objects, sys.object_of.as_slice()));
    let (z, h) = somp_forward(layer, store, &particles, &scalars, objects, edges, g)?;
    Ok(outputs_sample(&z, &h))
}

fn baseline_run(
    layer: &BaselineLayer,
    store: &ParamStore,
    sys: &ParticleSystem,
    edges: &[(usize, usize)],
    g: Option<&Gravity>,
) -> Result<Sample> {
    let particles: Vec<GeoTensor> = (0..sys.len()).map(|i| sys.geo(i)).collect();
    let scalars: Vec<Vec<f64>> = (0..sys.len()).map(|i| sys.attrs.row(i).to_vec()).collect();
    let (z, h) = layer.apply(store, &particles, &scalars, edges, g)?;
    Ok(outputs_sample(&z, &h))
}

/// Gravity-augmented scalarization, message passing and the full model step
/// commute with `O_g(3)` and translations; scalar outputs are invariant.
pub fn equivariance(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let g = Gravity::default();
    let group = Group::Og3Translation(g);
    let mut scal = Worst::new("scalarize_subequivariant under O_g(3)", Limit::Below(1e-9));
    let mut somp = Worst::new(
        "object-aware message passing under O_g(3)+T",
        Limit::Below(1e-9),
    );
    let mut model = Worst::new("SGNN predict_step under O_g(3)+T", Limit::Below(1e-9));
    for k in 0..trials as u64 {
        let s = seed.wrapping_add(k);
        let mut rng = rng_for(s);

        let channels = rng.random_range(1..=3);
        let spec = BlockSpec {
            in_channels: channels,
            out_channels: rng.random_range(1..=2),
            scalar_dim: 2,
            extra: 2,
            gravity: true,
            normalize: rng.random_bool(0.5),
        };
        let mut store = ParamStore::new();
        let block = ScalarizeBlock::new(
            &mut store,
            "b",
            spec,
            &small_shape(),
            Init::XavierUniform,
            &mut rng,
        );
        let input = Sample {
            points: Vec::new(),
            vectors: (0..channels).map(|_| random_vec(&mut rng, 1.0)).collect(),
            scalars: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        };
        let f = |x: &Sample| {
            let (z, extra) = scalarize_subequivariant(
                &GeoTensor::new(x.vectors.clone()),
                &x.scalars,
                &g,
                &block,
                &store,
            )?;
            Ok(Sample {
                points: Vec::new(),
                vectors: z.columns().to_vec(),
                scalars: extra,
            })
        };
        scal.see(
            check_equivariance(f, &input, Group::Og3(g), 1, &mut rng)?,
            s,
        );

        let mut store = ParamStore::new();
        let aggregation = if rng.random_bool(0.5) {
            Aggregation::Sum
        } else {
            Aggregation::Mean
        };
        let layer = SompLayer::new(&mut store, "s", somp_config(true, aggregation), &mut rng);
        let (sys, edges) = random_system(&mut rng, 8, 2)?;
        let f = |x: &Sample| somp_run(&layer, &store, &with_sample(&sys, x), &edges, Some(&g));
        somp.see(
            check_equivariance(f, &system_sample(&sys), group, 1, &mut rng)?,
            s,
        );

        let m = generic_model(model_spec(Variant::Sgnn, s))?;
        let sys = two_clusters(&mut rng, 8, 0.1)?;
        let edges = build_edges(&sys, m.spec().cutoff)?;
        let base = m.predict_step(&sys, &edges)?;
        let t = group.sample(&mut rng, 2.0);
        let pred = m.predict_step(&moved(&sys, &t), &edges)?;
        let expected: Vec<Vec3> = base.iter().map(|p| t.apply_point(p)).collect();
        model.see(position_deviation(&pred, &expected), s);
    }
    Ok(vec![scal.done(), somp.done(), model.done()])
}

fn strictness_scenes(seed: u64) -> Result<Vec<Trajectory>> {
    (0..2)
        .map(|k| {
            generate_scene(&SceneConfig {
                objects: 2,
                frames: 12,
                seed: seed.wrapping_add(k),
                ..SceneConfig::default()
            })
        })
        .collect()
}

/// A briefly trained model: non-degenerate σ fitted to falling cubes.
fn trained_sgnn(seed: u64, trajs: &[Trajectory]) -> Result<Model> {
    let mut spec = model_spec(Variant::Sgnn, seed);
    spec.ground = Some(GroundFeature::default());
    spec.hidden_scalars = 6;
    spec.message_scalars = 6;
    spec.aggregation = Aggregation::Mean;
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        max_epochs: 3,
        samples_per_epoch: Some(20),
        val_samples: Some(4),
        seed,
        ..TrainConfig::default()
    };
    Ok(train(Model::new(spec)?, trajs, &cfg)?.model)
}

/// Largest `‖f(R·x) − R·f(x)‖∞` over sampled rotations about horizontal axes.
fn horizontal_witness(
    model: &Model,
    sys: &ParticleSystem,
    tries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let g = *model.gravity();
    let edges = build_edges(sys, model.spec().cutoff)?;
    let base = model.predict_step(sys, &edges)?;
    let mut best: f64 = 0.0;
    for _ in 0..tries {
        let t = SubgroupTransform {
            o: random_horizontal_axis_rotation(rng, &g),
            t: Vec3::zeros(),
        };
        let pred = model.predict_step(&moved(sys, &t), &edges)?;
        let expected: Vec<Vec3> = base.iter().map(|p| t.apply_point(p)).collect();
        best = best.max(position_deviation(&pred, &expected));
    }
    Ok(best)
}

/// Subequivariance is strictly weaker than full `O(3)` equivariance: a trained
/// SGNN fails it, while the gravity-free EGNN and GMN satisfy it.
pub fn strictness(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let g = Gravity::default();
    let mut sgnn = Worst::new("trained SGNN breaks full O(3)", Limit::Above(1e-3));
    let models = trials.clamp(1, 3) as u64;
    for k in 0..models {
        let s = seed.wrapping_add(k);
        let trajs = strictness_scenes(s)?;
        let model = trained_sgnn(s, &trajs)?;
        let sys = model.featurize(&trajs[0].system_at(6)?)?;
        let mut rng = rng_for(s);
        sgnn.see(horizontal_witness(&model, &sys, 10, &mut rng)?, s);
    }

    let mut egnn = Worst::new("EGNN under O(3)+T", Limit::Below(1e-9));
    let mut gmn = Worst::new("GMN under O(3)+T", Limit::Below(1e-9));
    let mut gns = Worst::new("GNS breaks O_g(3)", Limit::Above(1e-3));
    for k in 0..trials as u64 {
        let s = seed.wrapping_add(k);
        let mut rng = rng_for(s);
        for (kind, worst, group) in [
            (BaselineKind::Egnn, &mut egnn, Group::E3),
            (BaselineKind::Gmn, &mut gmn, Group::E3),
            (BaselineKind::Gns, &mut gns, Group::Og3(g)),
        ] {
            let mut store = ParamStore::new();
            let layer = BaselineLayer::new(&mut store, "b", kind, baseline_config(), &mut rng);
            let (sys, edges) = random_system(&mut rng, 8, 2)?;
            let f = |x: &Sample| baseline_run(&layer, &store, &with_sample(&sys, x), &edges, None);
            worst.see(
                check_equivariance(f, &system_sample(&sys), group, 1, &mut rng)?,
                s,
            );
        }
    }
    Ok(vec![sgnn.done(), egnn.done(), gmn.done(), gns.done()])
}

fn sample_gap(a: &Sample, b: &Sample) -> f64 {
    a.deviation(b)
}

/// Masked object-aware layers reproduce GMN, masked GMN reproduces EGNN.
pub fn reduction(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let g = Gravity::default();
    let mut somp_gmn = Worst::new("masked SOMP vs GMN", Limit::Below(1e-10));
    let mut gmn_egnn = Worst::new("masked GMN vs EGNN", Limit::Below(1e-10));
    for k in 0..trials as u64 {
        let s = seed.wrapping_add(k);
        let mut rng = rng_for(s);
        let mut store = ParamStore::new();
        let gmn = GmnLayer::new(&mut store, "gmn", baseline_config(), false, &mut rng);
        let somp = somp_masking_gmn(&mut store, &gmn, &mut rng)?;
        let (sys, edges) = random_system(&mut rng, 8, 2)?;
        let a = somp_run(&somp, &store, &sys, &edges, Some(&g))?;
        let b = baseline_run(&BaselineLayer::Gmn(gmn), &store, &sys, &edges, None)?;
        somp_gmn.see(sample_gap(&a, &b), s);

        let mut store = ParamStore::new();
        let egnn = EgnnLayer::new(&mut store, "egnn", baseline_config(), false, &mut rng);
        let gmn = gmn_masking_egnn(&mut store, &egnn, &mut rng)?;
        let (sys, edges) = random_system(&mut rng, 8, 2)?;
        let a = baseline_run(&BaselineLayer::Egnn(egnn), &store, &sys, &edges, None)?;
        let b = baseline_run(&BaselineLayer::Gmn(gmn), &store, &sys, &edges, None)?;
        gmn_egnn.see(sample_gap(&a, &b), s);
    }
    Ok(vec![somp_gmn.done(), gmn_egnn.done()])
}

/// Random channels, sometimes degenerate: collinear, vertical or horizontal.
fn witness_input<R: Rng + ?Sized>(rng: &mut R, g: &Gravity) -> GeoTensor {
    let m = rng.random_range(1..=4);
    let kind = rng.random_range(0..4);
    let (e1, _) = g.horizontal_basis();
    let base = random_vec(rng, 1.0);
    GeoTensor::new(
        (0..m)
            .map(|_| match kind {
                0 => base * rng.random_range(-2.0..2.0),
                1 => g.direction() * rng.random_range(-2.0..2.0),
                2 => e1 * rng.random_range(-1.0..1.0) + random_vec(rng, 1.0).cross(&g.direction()),
                _ => random_vec(rng, 1.0),
            })
            .collect(),
    )
}

/// Construct `Z1 = O·Z2` for sampled `O ∈ O_g(3)`, recover a witness from the
/// Grams alone, and reject pairs whose gravity-augmented Grams differ.
pub fn lemma5(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let g = Gravity::default();
    let mut recover = Worst::new("witness ‖O·Z2 − Z1‖∞", Limit::Below(1e-6));
    let mut group = Worst::new("witness distance from O_g(3)", Limit::Below(1e-9));
    let mut count = 0.0;
    let mut tried = 0;
    for k in 0..trials as u64 {
        let s = seed.wrapping_add(k);
        let mut rng = rng_for(s);
        let z2 = witness_input(&mut rng, &g);
        let truth = SubgroupTransform::sample(&mut rng, &g, 0.0);
        let z1 = z2.transformed(&truth.o);
        let o = lemma5_witness(&z1, &z2, &g)?;
        recover.see(z2.transformed(&o.o).max_abs_diff(&z1), s);
        group.see(o.orthogonality_error().max(o.gravity_error(&g)), s);

        // Same plain Gram, different angle to gravity: a tilt off the vertical axis.
        let tilt = random_horizontal_axis_rotation(&mut rng, &g);
        let tilted = z2.transformed(&tilt);
        let shifted = {
            let mut cols = z2.columns().to_vec();
            cols[0] += random_vec(&mut rng, 1.0).add_scalar(0.5);
            GeoTensor::new(cols)
        };
        for other in [tilted, shifted] {
            if gram_gap(&other, &z2, &g) > 1e-6 {
                tried += 1;
                if lemma5_witness(&other, &z2, &g).is_ok() {
                    count += 1.0;
                }
            }
        }
    }
    let mut accepted = Worst::new(
        format!("Gram mismatches accepted, of {tried}"),
        Limit::Below(0.5),
    );
    accepted.see(if tried == 0 { f64::NAN } else { count }, seed);
    Ok(vec![recover.done(), group.done(), accepted.done()])
}

fn gram_gap(a: &GeoTensor, b: &GeoTensor, g: &Gravity) -> f64 {
    let d = g.direction();
    let cols = |z: &GeoTensor| {
        let mut c = z.columns().to_vec();
        c.push(d);
        c
    };
    let (ca, cb) = (cols(a), cols(b));
    let mut gap: f64 = 0.0;
    for i in 0..ca.len() {
        for j in 0..ca.len() {
            gap = gap.max((ca[i].dot(&ca[j]) - cb[i].dot(&cb[j])).abs());
        }
    }
    gap
}

const FD_STEP: f64 = 1e-5;
const FD_COORDS: usize = 4;

/// Tape gradients of every layer variant against central differences.
pub fn gradients(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let g = Gravity::default();
    let mut checks = Vec::new();

    for gravity in [true, false] {
        let mut worst = Worst::new(
            format!(
                "scalarization block ({}) gradients",
                if gravity { "gravity" } else { "plain" }
            ),
            Limit::Below(1e-4),
        );
        for k in 0..trials as u64 {
            let s = seed.wrapping_add(k);
            let mut rng = rng_for(s);
            let spec = BlockSpec {
                in_channels: 2,
                out_channels: 2,
                scalar_dim: 2,
                extra: 2,
                gravity,
                normalize: rng.random_bool(0.5),
            };
            let mut store = ParamStore::new();
            let block = ScalarizeBlock::new(
                &mut store,
                "b",
                spec,
                &small_shape(),
                Init::XavierUniform,
                &mut rng,
            );
            let rows = 3;
            let rand_mat = |rng: &mut ChaCha8Rng, c: usize| {
                Mat::from_vec(
                    rows,
                    c,
                    (0..rows * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            };
            let inputs = vec![
                rand_mat(&mut rng, 6)?,
                rand_mat(&mut rng, 2)?,
                rand_mat(&mut rng, 6)?,
                rand_mat(&mut rng, 2)?,
            ];
            let report = gradient_check(
                &store,
                &inputs,
                |t, b, v| {
                    let (z, extra) = block.forward(t, b, v[0], v[1], gravity.then_some(&g))?;
                    let a = t.squared_error(z, v[2])?;
                    let e = t.squared_error(extra.expect("block has extra outputs"), v[3])?;
                    t.add(a, e)
                },
                FD_STEP,
                FD_COORDS,
                &mut rng,
            )?;
            worst.see(report.max_rel_err, s);
        }
        checks.push(worst.done());
    }

    for (use_objects, aggregation, label) in [
        (true, Aggregation::Sum, "object-aware, sum"),
        (true, Aggregation::Mean, "object-aware, mean"),
        (false, Aggregation::Sum, "plain, sum"),
    ] {
        let mut worst = Worst::new(
            format!("message passing ({label}) gradients"),
            Limit::Below(1e-4),
        );
        for k in 0..trials as u64 {
            let s = seed.wrapping_add(k);
            let mut rng = rng_for(s);
            let mut store = ParamStore::new();
            let layer = SompLayer::new(
                &mut store,
                "s",
                somp_config(use_objects, aggregation),
                &mut rng,
            );
            let (sys, edges) = random_system(&mut rng, 6, 2)?;
            let edges = EdgeIndex::new(&edges);
            let pooled: ObjectFeatures = pool_objects(&sys)?;
            let object_of: std::sync::Arc<[usize]> = sys.object_of.clone().into();
            let particles: Vec<GeoTensor> = (0..sys.len()).map(|i| sys.geo(i)).collect();
            let inputs = vec![
                stack_rows(&particles, 2)?,
                sys.attrs.clone(),
                stack_rows(&pooled.geo, 2)?,
                Mat::from_vec(2, 3, pooled.scalars.concat())?,
                Mat::from_vec(6, 6, (0..36).map(|_| rng.random_range(-1.0..1.0)).collect())?,
            ];
            let report = gradient_check(
                &store,
                &inputs,
                |t, b, v| {
                    let objects = ObjectInputs {
                        geo: v[2],
                        scalars: v[3],
                        object_of: object_of.clone(),
                    };
                    let objects = use_objects.then_some(&objects);
                    let (z, _) =
                        layer.forward(t, b, v[0], v[1], objects, &edges, None, Some(&g))?;
                    t.squared_error(z, v[4])
                },
                FD_STEP,
                FD_COORDS,
                &mut rng,
            )?;
            worst.see(report.max_rel_err, s);
        }
        checks.push(worst.done());
    }

    for kind in BaselineKind::ALL {
        let mut worst = Worst::new(
            format!("{} layer gradients", kind.name()),
            Limit::Below(1e-4),
        );
        for k in 0..trials as u64 {
            let s = seed.wrapping_add(k);
            let mut rng = rng_for(s);
            let mut store = ParamStore::new();
            let layer = BaselineLayer::new(&mut store, "b", kind, baseline_config(), &mut rng);
            let (sys, edges) = random_system(&mut rng, 6, 2)?;
            let edges = EdgeIndex::new(&edges);
            let particles: Vec<GeoTensor> = (0..sys.len()).map(|i| sys.geo(i)).collect();
            let inputs = vec![
                stack_rows(&particles, 2)?,
                sys.attrs.clone(),
                Mat::from_vec(6, 6, (0..36).map(|_| rng.random_range(-1.0..1.0)).collect())?,
            ];
            let report = gradient_check(
                &store,
                &inputs,
                |t, b, v| {
                    let (z, _) = layer.forward(t, b, v[0], v[1], &edges, Some(&g))?;
                    t.squared_error(z, v[2])
                },
                FD_STEP,
                FD_COORDS,
                &mut rng,
            )?;
            worst.see(report.max_rel_err, s);
        }
        checks.push(worst.done());
    }

    let ablated = |a: Ablations| {
        move |s: u64| {
            let mut spec = model_spec(Variant::Sgnn, s);
            spec.ablations = a;
            spec
        }
    };
    let mut models: Vec<(String, Box<dyn Fn(u64) -> ModelSpec>)> = vec![
        ("sgnn".into(), Box::new(ablated(Ablations::default()))),
        (
            "sgnn --no-hierarchy".into(),
            Box::new(ablated(Ablations {
                no_hierarchy: true,
                ..Default::default()
            })),
        ),
        (
            "sgnn --no-object-aware".into(),
            Box::new(ablated(Ablations {
                no_object_aware: true,
                ..Default::default()
            })),
        ),
        (
            "sgnn --no-edge-separation".into(),
            Box::new(ablated(Ablations {
                no_edge_separation: true,
                ..Default::default()
            })),
        ),
        (
            "sgnn --full-equivariance".into(),
            Box::new(ablated(Ablations {
                full_equivariance: true,
                ..Default::default()
            })),
        ),
        (
            "sgnn mean aggregation".into(),
            Box::new(|s| {
                let mut spec = model_spec(Variant::Sgnn, s);
                spec.aggregation = Aggregation::Mean;
                spec
            }),
        ),
    ];
    for kind in BaselineKind::ALL {
        models.push((
            format!("{} model", kind.name()),
            Box::new(move |s| model_spec(Variant::Baseline(kind), s)),
        ));
    }
    for (label, make) in models {
        let mut worst = Worst::new(format!("{label} gradients"), Limit::Below(1e-4));
        for k in 0..trials as u64 {
            let s = seed.wrapping_add(k);
            let mut rng = rng_for(s);
            let model = generic_model(make(s))?;
            let sys = two_clusters(&mut rng, 5, 0.1)?;
            let edges = build_edges(&sys, model.spec().cutoff)?;
            let frame = crate::model::Frame::new(&sys, edges)?;
            let target = Mat::from_vec(
                sys.len(),
                3,
                sys.positions
                    .iter()
                    .flat_map(|p| {
                        (p + random_vec(&mut rng, 0.01))
                            .iter()
                            .copied()
                            .collect::<Vec<_>>()
                    })
                    .collect(),
            )?;
            let report = gradient_check(
                &model.store,
                &[target],
                |t, b, v| {
                    let pred = model.forward(t, b, &frame)?;
                    t.squared_error(pred, v[0])
                },
                FD_STEP,
                FD_COORDS,
                &mut rng,
            )?;
            worst.see(report.max_rel_err, s);
        }
        checks.push(worst.done());
    }
    Ok(checks)
}

const FIT_SAMPLES: usize = 64;
const FIT_STEPS: usize = 60_000;

/// Fits one block to the constant target `g` on horizontal inputs and
/// returns the final full-batch loss.
fn fit_gravity(gravity: bool, seed: u64) -> Result<f64> {
    let g = Gravity::default();
    let mut rng = rng_for(seed);
    let spec = BlockSpec {
        in_channels: 2,
        out_channels: 1,
        scalar_dim: 2,
        extra: 0,
        gravity,
        normalize: true,
    };
    let mut store = ParamStore::new();
    let block = ScalarizeBlock::new(
        &mut store,
        "fit",
        spec,
        &small_shape(),
        Init::XavierUniform,
        &mut rng,
    );
    let (e1, e2) = g.horizontal_basis();
    let mut z = Mat::zeros(FIT_SAMPLES, 6);
    let mut h = Mat::zeros(FIT_SAMPLES, 2);
    let mut target = Mat::zeros(FIT_SAMPLES, 3);
    let d = g.direction();
    for r in 0..FIT_SAMPLES {
        for c in 0..2 {
            let v = e1 * rng.random_range(-1.0..1.0) + e2 * rng.random_range(-1.0..1.0);
            z.row_mut(r)[3 * c..3 * c + 3].copy_from_slice(v.as_slice());
            h.row_mut(r)[c] = rng.random_range(-1.0..1.0);
        }
        target.row_mut(r).copy_from_slice(d.as_slice());
    }
    let mut loss = f64::INFINITY;
    for step in 0..FIT_STEPS {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let hv = tape.leaf(h.clone());
        let y = tape.leaf(target.clone());
        let (out, _) = block.forward(&mut tape, &bound, zv, hv, Some(&g))?;
        let l = tape.squared_error(out, y)?;
        loss = tape.value(l).get(0, 0);
        if loss < 1e-8 {
            break;
        }
        let grads = tape.backward_scalar(l)?;
        let grads = store.collect_grads(&bound, &grads);
        let lr = 1e-2 * 0.5f64.powi((step / (FIT_STEPS / 12)) as i32);
        store.adam_step(
            &grads,
            &AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        )?;
    }
    Ok(loss)
}

/// The gravity-augmented block learns the constant vector `g`; the plain
/// block cannot leave the horizontal span of its inputs.
pub fn expressivity(seed: u64) -> Result<Vec<Check>> {
    let sub = fit_gravity(true, seed)?;
    let plain = fit_gravity(false, seed)?;
    // Any Z·V with horizontal Z is horizontal, so the exact least-squares
    // residual against the unit vertical target is 1 for every sample.
    let g = Gravity::default();
    let (e1, e2) = g.horizontal_basis();
    let d = g.direction();
    let projection = d - e1 * e1.dot(&d) - e2 * e2.dot(&d);
    Ok(vec![
        Check {
            name: "gravity-augmented block fit loss".into(),
            value: sub,
            limit: Limit::Below(1e-6),
            seed,
        },
        Check {
            name: "plain block trained residual / target norm".into(),
            value: plain.sqrt(),
            limit: Limit::Above(0.1),
            seed,
        },
        Check {
            name: "plain block least-squares residual / target norm".into(),
            value: projection.norm(),
            limit: Limit::Above(0.1),
            seed,
        },
    ])
}

fn centers(traj: &Trajectory, t: usize) -> Vec<Vec3> {
    traj.members()
        .iter()
        .map(|ids| ids.iter().map(|&i| traj.frames[t][i]).sum::<Vec3>() / ids.len() as f64)
        .collect()
}

/// Ground-truth simulator: free fall against the parabola, rigid shapes, and
/// commuting with rotations about gravity.
pub fn oracle(seed: u64) -> Result<Vec<Check>> {
    let cfg = SceneConfig {
        objects: 1,
        ground: None,
        frames: 30,
        ..SceneConfig::default()
    };
    let z0 = 1.0;
    let drop = |cfg: &SceneConfig| simulate(cfg, &[Body::at_rest(Vec3::new(0.0, 0.0, z0))]);
    let coarse = drop(&cfg)?;
    let fine_cfg = SceneConfig {
        dt: cfg.dt / 2.0,
        substeps: cfg.substeps * 2,
        ..cfg.clone()
    };
    let fine = drop(&fine_cfg)?;
    let last = coarse.len() - 1;
    let time = (last * cfg.substeps) as f64 * cfg.dt;
    let closed = z0 - 0.5 * cfg.gravity * time * time;
    let gap = |t: &Trajectory| (centers(t, last)[0].z - closed).abs();
    // First-order integrator: halving dt halves the gap.
    let order = (gap(&coarse) / gap(&fine)).log2();
    let mut discrete: f64 = 0.0;
    for t in 0..coarse.len() {
        let n = (t * cfg.substeps) as f64;
        let exact = z0 - cfg.gravity * cfg.dt * cfg.dt * n * (n + 1.0) / 2.0;
        discrete = discrete.max((centers(&coarse, t)[0].z - exact).abs());
    }

    let g = Gravity::default();
    let mut rigid = Worst::new("intra-object distance drift", Limit::Below(1e-10));
    let mut commute = Worst::new("oracle vs rotated initial condition", Limit::Below(1e-9));
    for k in 0..3u64 {
        let s = seed.wrapping_add(k);
        let cfg = SceneConfig {
            seed: s,
            ..SceneConfig::default()
        };
        let bodies = spawn_bodies(&cfg);
        let truth = simulate(&cfg, &bodies)?;
        let mut drift: f64 = 0.0;
        for ids in truth.members() {
            for t in 1..truth.len() {
                for (a, &i) in ids.iter().enumerate() {
                    for &j in &ids[..a] {
                        let d0 = (truth.frames[0][i] - truth.frames[0][j]).norm();
                        let dt = (truth.frames[t][i] - truth.frames[t][j]).norm();
                        drift = drift.max((d0 - dt).abs());
                    }
                }
            }
        }
        rigid.see(drift, s);

        let mut rng = rng_for(s);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let shift = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            0.0,
        );
        let t = SubgroupTransform::about_gravity(&g, theta, false, shift);
        let moved: Vec<Body> = bodies
            .iter()
            .map(|b| b.transformed(&t))
            .collect::<Result<_>>()?;
        let resim = simulate(&cfg, &moved)?;
        let expected = truth.transformed(&t);
        let dev = resim
            .frames
            .iter()
            .zip(&expected.frames)
            .map(|(a, b)| position_deviation(a, b))
            .fold(0.0, f64::max);
        commute.see(dev, s);
    }
    Ok(vec![
        Check {
            name: "free fall vs exact discrete solution".into(),
            value: discrete,
            limit: Limit::Below(1e-12),
            seed,
        },
        Check {
            name: "free fall |observed order - 1|".into(),
            value: (order - 1.0).abs(),
            limit: Limit::Below(0.05),
            seed,
        },
        rigid.done(),
        commute.done(),
    ])
}
