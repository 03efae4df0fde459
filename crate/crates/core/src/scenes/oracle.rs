//! Falling-cube ground truth: rigid bodies with penalty contacts, stepped by
//! semi-implicit Euler.

use nalgebra::{Quaternion, Rotation3, Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::scenes::config::SceneConfig;
use crate::scenes::trajectory::Trajectory;
use crate::subeq::geo::random_unit;
use crate::subeq::{SubgroupTransform, Vec3};

/// Rigid-body state of one cube.
#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub position: Vec3,
    pub velocity: Vec3,
    pub orientation: UnitQuaternion<f64>,
    pub angular_velocity: Vec3,
}

impl Body {
    pub fn at_rest(position: Vec3) -> Self {
        Self {
            position,
            velocity: Vec3::zeros(),
            orientation: UnitQuaternion::identity(),
            angular_velocity: Vec3::zeros(),
        }
    }

    /// The body moved by a proper rotation about the vertical plus a translation.
    pub fn transformed(&self, t: &SubgroupTransform) -> Result<Self> {
        if t.determinant() < 0.0 {
            return Err(Error::Contract(
                "reflections relabel cube particles; only rotations are supported".into(),
            ));
        }
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(t.o));
        Ok(Self {
            position: t.apply_point(&self.position),
            velocity: t.apply_vector(&self.velocity),
            orientation: rot * self.orientation,
            angular_velocity: t.apply_vector(&self.angular_velocity),
        })
    }
}

pub const UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);

/// Body-frame particle offsets of a lattice cube, centered on the origin.
pub fn cube_lattice(cfg: &SceneConfig) -> Vec<Vec3> {
    let k = cfg.lattice;
    let step = cfg.side / (k - 1) as f64;
    let half = cfg.side / 2.0;
    let mut out = Vec::with_capacity(k * k * k);
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                out.push(Vec3::new(
                    i as f64 * step - half,
                    j as f64 * step - half,
                    l as f64 * step - half,
                ));
            }
        }
    }
    out
}

/// Random spawn: a loose stack of cubes, each with a random orientation, a
/// horizontal push and a spin.
pub fn spawn_bodies(cfg: &SceneConfig) -> Vec<Body> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ground = cfg.ground.unwrap_or(0.0);
    (0..cfg.objects)
        .map(|k| {
            let s = cfg.spawn_spread;
            let position = Vec3::new(
                rng.random_range(-s..=s),
                rng.random_range(-s..=s),
                ground + cfg.spawn_height + k as f64 * cfg.spawn_gap,
            );
            let axis = Unit::new_normalize(random_unit(&mut rng));
            let orientation = UnitQuaternion::from_axis_angle(
                &axis,
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            let heading = cfg.heading + cfg.heading_spread * (rng.random::<f64>() - 0.5);
            let speed = rng.random_range(0.0..=cfg.max_speed);
            let velocity = Vec3::new(heading.cos(), heading.sin(), 0.0) * speed;
            let angular_velocity = random_unit(&mut rng) * rng.random_range(0.0..=cfg.max_spin);
            Body {
                position,
                velocity,
                orientation,
                angular_velocity,
            }
        })
        .collect()
}

/// Penalty force on a contact with penetration `depth` along unit `normal`,
/// where `rel` is the velocity of the pushed particle relative to the other side.
fn contact_force(cfg: &SceneConfig, depth: f64, normal: &Vec3, rel: &Vec3) -> Vec3 {
    let vn = rel.dot(normal);
    let fn_ = (cfg.stiffness * depth - cfg.damping * vn).max(0.0);
    let tangential = rel - normal * vn;
    let speed = tangential.norm();
    let mut f = normal * fn_;
    if speed > 0.0 {
        let ft = (cfg.friction * fn_).min(cfg.damping * speed);
        f -= tangential * (ft / speed);
    }
    f
}

struct World<'a> {
    cfg: &'a SceneConfig,
    lattice: Vec<Vec3>,
    particle_mass: f64,
    /// Scalar inertia; a symmetric lattice cube has an isotropic tensor.
    inertia: f64,
}

impl<'a> World<'a> {
    fn new(cfg: &'a SceneConfig) -> Self {
        let lattice = cube_lattice(cfg);
        let particle_mass = cfg.mass / lattice.len() as f64;
        let inertia = particle_mass * lattice.iter().map(|r| r.y * r.y + r.z * r.z).sum::<f64>();
        Self {
            cfg,
            lattice,
            particle_mass,
            inertia,
        }
    }

    fn particles(&self, b: &Body) -> (Vec<Vec3>, Vec<Vec3>) {
        let rot = b.orientation.to_rotation_matrix();
        let arms: Vec<Vec3> = self.lattice.iter().map(|r| rot * r).collect();
        let pos = arms.iter().map(|a| b.position + a).collect();
        let vel = arms
            .iter()
            .map(|a| b.velocity + b.angular_velocity.cross(a))
            .collect();
        (pos, vel)
    }

    fn step(&self, bodies: &mut [Body]) -> Result<()> {
        let cfg = self.cfg;
        let states: Vec<_> = bodies.iter().map(|b| self.particles(b)).collect();
        let n = self.lattice.len();
        let mut forces = vec![vec![Vec3::zeros(); n]; bodies.len()];
        let r = cfg.particle_radius;

        if let Some(ground) = cfg.ground {
            for (b, (pos, vel)) in states.iter().enumerate() {
                for i in 0..n {
                    let depth = r - (pos[i].dot(&UP) - ground);
                    if depth > cfg.side {
                        return Err(Error::Generation(format!(
                            "particle sank {depth:.4} into the ground; use a smaller dt"
                        )));
                    }
                    if depth > 0.0 {
                        forces[b][i] += contact_force(cfg, depth, &UP, &vel[i]);
                    }
                }
            }
        }

        let reach = cfg.side * 3f64.sqrt() + 2.0 * r;
        for a in 0..bodies.len() {
            for b in a + 1..bodies.len() {
                if (bodies[a].position - bodies[b].position).norm() > reach {
                    continue;
                }
                let (pa, va) = &states[a];
                let (pb, vb) = &states[b];
                for i in 0..n {
                    for j in 0..n {
                        let d = pa[i] - pb[j];
                        let dist = d.norm();
                        if dist >= 2.0 * r || dist == 0.0 {
                            continue;
                        }
                        let depth = 2.0 * r - dist;
                        if depth > cfg.side {
                            return Err(Error::Generation(format!(
                                "cubes {a} and {b} interpenetrate by {depth:.4}; use a smaller dt"
                            )));
                        }
                        let f = contact_force(cfg, depth, &(d / dist), &(va[i] - vb[j]));
                        forces[a][i] += f;
                        forces[b][j] -= f;
                    }
                }
            }
        }

        let mass = self.particle_mass * n as f64;
        let dt = cfg.dt;
        for (b, body) in bodies.iter_mut().enumerate() {
            let (pos, _) = &states[b];
            let mut force = -UP * (cfg.gravity * mass);
            let mut torque = Vec3::zeros();
            for i in 0..n {
                force += forces[b][i];
                torque += (pos[i] - body.position).cross(&forces[b][i]);
            }
            body.velocity += force * (dt / mass);
            // Isotropic inertia: no gyroscopic term.
            body.angular_velocity += torque * (dt / self.inertia);
            body.position += body.velocity * dt;
            let w = body.angular_velocity;
            let spin = Quaternion::new(0.0, w.x, w.y, w.z) * body.orientation.into_inner();
            body.orientation =
                UnitQuaternion::new_normalize(body.orientation.into_inner() + spin * (0.5 * dt));
        }
        Ok(())
    }
}

/// Simulates from given initial bodies, recording every `substeps`-th state.
pub fn simulate(cfg: &SceneConfig, initial: &[Body]) -> Result<Trajectory> {
    cfg.validate()?;
    if initial.len() != cfg.objects {
        return Err(Error::Config(format!(
            "{} bodies for a {}-object scene",
            initial.len(),
            cfg.objects
        )));
    }
    let world = World::new(cfg);
    let n = world.lattice.len();
    let mut bodies = initial.to_vec();
    let record = |bodies: &[Body]| -> Vec<Vec3> {
        bodies.iter().flat_map(|b| world.particles(b).0).collect()
    };
    let mut frames = Vec::with_capacity(cfg.frames);
    if cfg.frames > 0 {
        frames.push(record(&bodies));
    }
    for _ in 1..cfg.frames {
        for _ in 0..cfg.substeps {
            world.step(&mut bodies)?;
        }
        frames.push(record(&bodies));
    }
    let total = n * cfg.objects;
    Ok(Trajectory {
        dt: cfg.dt * cfg.substeps as f64,
        object_of: (0..total).map(|i| i / n).collect(),
        attrs: Mat::filled(total, 1, 1.0),
        frames,
    })
}

/// One scene from the configured seed.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Trajectory> {
    simulate(cfg, &spawn_bodies(cfg))
}

/// Kinetic plus potential energy of the bodies.
pub fn mechanical_energy(cfg: &SceneConfig, bodies: &[Body]) -> f64 {
    let inertia = World::new(cfg).inertia;
    bodies
        .iter()
        .map(|b| {
            0.5 * cfg.mass * b.velocity.norm_squared()
                + 0.5 * inertia * b.angular_velocity.norm_squared()
                + cfg.mass * cfg.gravity * b.position.dot(&UP)
        })
        .sum()
}

/// Advances `bodies` by `steps` integrator steps without recording.
pub fn advance(cfg: &SceneConfig, bodies: &mut [Body], steps: usize) -> Result<()> {
    cfg.validate()?;
    let world = World::new(cfg);
    for _ in 0..steps {
        world.step(bodies)?;
    }
    Ok(())
}
