#![allow(dead_code)]

use rand::Rng;
use sgnn_core::graph::{pool_objects, ObjectFeatures, ParticleSystem};
use sgnn_core::math::{Activation, Mat};
use sgnn_core::somp::{Aggregation, EdgeInput, SompConfig};
use sgnn_core::subeq::geo::random_vec;
use sgnn_core::subeq::{GeoTensor, MlpShape, Sample, Vec3};

pub fn small_shape() -> MlpShape {
    MlpShape {
        hidden: 16,
        layers: 3,
        eta_hidden: 8,
        activation: Activation::Silu,
    }
}

pub fn somp_config(use_objects: bool, gravity: bool, scalars: usize) -> SompConfig {
    SompConfig {
        node_channels: 2,
        node_scalars: scalars,
        object_channels: 2,
        object_scalars: scalars,
        use_objects,
        edge_input: EdgeInput::Nodes,
        message_channels: 2,
        message_scalars: 4,
        iterations: 1,
        gravity,
        normalize: true,
        aggregation: Aggregation::Sum,
        shape: small_shape(),
        zero_init_update: false,
    }
}

/// Random particles with scalar features, pooled object features and a random
/// symmetric edge list.
pub struct Instance {
    pub sys: ParticleSystem,
    pub particles: Vec<GeoTensor>,
    pub scalars: Vec<Vec<f64>>,
    pub objects: ObjectFeatures,
    pub edges: Vec<(usize, usize)>,
}

impl Instance {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, objects: usize, scalars: usize) -> Self {
        let positions: Vec<Vec3> = (0..n).map(|_| random_vec(rng, 1.0)).collect();
        let velocities: Vec<Vec3> = (0..n).map(|_| random_vec(rng, 1.0)).collect();
        let attrs = Mat::from_vec(
            n,
            scalars,
            (0..n * scalars)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let object_of: Vec<usize> = (0..n).map(|i| i % objects).collect();
        let sys = ParticleSystem::new(positions, velocities, attrs, object_of, objects).unwrap();
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
        Self::from_system(sys, edges)
    }

    pub fn from_system(sys: ParticleSystem, edges: Vec<(usize, usize)>) -> Self {
        let particles = (0..sys.len()).map(|i| sys.geo(i)).collect();
        let scalars = (0..sys.len()).map(|i| sys.attrs.row(i).to_vec()).collect();
        let objects = pool_objects(&sys).unwrap();
        Self {
            sys,
            particles,
            scalars,
            objects,
            edges,
        }
    }

    /// Positions as points and velocities as vectors, then object positions
    /// and velocities, scalars flattened.
    pub fn to_sample(&self) -> Sample {
        let mut s = Sample::default();
        for z in self.particles.iter().chain(&self.objects.geo) {
            s.points.push(z.column(0));
            s.vectors.extend_from_slice(&z.columns()[1..]);
        }
        s.scalars = self.scalars.concat();
        s
    }

    pub fn with_sample(&self, s: &Sample) -> Self {
        let mut out = Self {
            sys: self.sys.clone(),
            particles: self.particles.clone(),
            scalars: self.scalars.clone(),
            objects: self.objects.clone(),
            edges: self.edges.clone(),
        };
        let mut p = s.points.iter();
        let mut v = s.vectors.iter();
        for z in out.particles.iter_mut().chain(out.objects.geo.iter_mut()) {
            let mut cols = vec![*p.next().unwrap()];
            for _ in 1..z.channels() {
                cols.push(*v.next().unwrap());
            }
            *z = GeoTensor::new(cols);
        }
        for (i, z) in out.particles.iter().enumerate() {
            out.sys.positions[i] = z.column(0);
            out.sys.velocities[i] = z.column(1);
        }
        out
    }
}

/// Geometric outputs as points (first channel) and vectors, plus scalars.
pub fn outputs_to_sample(z: &[GeoTensor], h: &[Vec<f64>]) -> Sample {
    let mut s = Sample::default();
    for t in z {
        s.points.push(t.column(0));
        s.vectors.extend_from_slice(&t.columns()[1..]);
    }
    s.scalars = h.concat();
    s
}

use sgnn_core::math::ParamStore;
use sgnn_core::somp::SompLayer;
use sgnn_core::subeq::{ominus, scalarize_equivariant, scalarize_subequivariant, Gravity};

fn add_geo(a: &GeoTensor, b: &GeoTensor) -> GeoTensor {
    GeoTensor::new(
        a.columns()
            .iter()
            .zip(b.columns())
            .map(|(x, y)| x + y)
            .collect(),
    )
}

fn scalarize(
    z: &GeoTensor,
    h: &[f64],
    g: Option<&Gravity>,
    block: &sgnn_core::subeq::ScalarizeBlock,
    store: &ParamStore,
) -> (GeoTensor, Vec<f64>) {
    match g {
        Some(g) => scalarize_subequivariant(z, h, g, block, store).unwrap(),
        None => scalarize_equivariant(z, h, block, store).unwrap(),
    }
}

/// Straight-line per-edge/per-node transcription of an object-aware layer.
/// `objects` are `(C, c, o)`; `given` replaces the per-edge inputs.
#[allow(clippy::too_many_arguments)]
pub fn naive_somp(
    layer: &SompLayer,
    store: &ParamStore,
    particles: &[GeoTensor],
    scalars: &[Vec<f64>],
    objects: Option<(&[GeoTensor], &[Vec<f64>], &[usize])>,
    edges: &[(usize, usize)],
    given: Option<(&[GeoTensor], &[Vec<f64>])>,
    g: Option<&Gravity>,
) -> (Vec<GeoTensor>, Vec<Vec<f64>>) {
    let cfg = &layer.config;
    let n = particles.len();
    let mut z = particles.to_vec();
    let mut h = scalars.to_vec();
    for _ in 0..cfg.iterations {
        let node_obj: Option<(Vec<GeoTensor>, Vec<Vec<f64>>)> = objects.map(|(c, cs, of)| {
            (
                (0..n).map(|i| ominus(&z[i], &c[of[i]]).unwrap()).collect(),
                (0..n)
                    .map(|i| [h[i].clone(), cs[of[i]].clone()].concat())
                    .collect(),
            )
        });
        let mut sum_z = vec![GeoTensor::new(vec![Vec3::zeros(); cfg.message_channels]); n];
        let mut sum_h = vec![vec![0.0; cfg.message_scalars]; n];
        for (e, &(i, j)) in edges.iter().enumerate() {
            let (zij, hij) = match (given, &node_obj) {
                (Some((gz, gh)), _) => (gz[e].clone(), gh[e].clone()),
                (None, Some((zc, hc))) => (
                    zc[i].concat(&zc[j]).concat(&ominus(&z[i], &z[j]).unwrap()),
                    [hc[i].clone(), hc[j].clone()].concat(),
                ),
                (None, None) => (
                    ominus(&z[i], &z[j]).unwrap(),
                    [h[i].clone(), h[j].clone()].concat(),
                ),
            };
            let (m, ms) = scalarize(&zij, &hij, g, &layer.phi, store);
            sum_z[i] = add_geo(&sum_z[i], &m);
            for (a, b) in sum_h[i].iter_mut().zip(ms) {
                *a += b;
            }
        }
        for i in 0..n {
            let (uz, uh) = match &node_obj {
                Some((zc, hc)) => (
                    sum_z[i].concat(&zc[i]),
                    [sum_h[i].clone(), hc[i].clone()].concat(),
                ),
                None => (sum_z[i].clone(), [sum_h[i].clone(), h[i].clone()].concat()),
            };
            let (dz, dh) = scalarize(&uz, &uh, g, &layer.psi, store);
            z[i] = add_geo(&z[i], &dz);
            for (a, b) in h[i].iter_mut().zip(dh) {
                *a += b;
            }
        }
    }
    (z, h)
}
