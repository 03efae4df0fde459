//! `key=value` scene descriptions.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Parameters of a falling-cubes scene. Lengths in meters, times in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub objects: usize,
    /// Particles per cube edge; a cube holds `lattice³` particles.
    pub lattice: usize,
    pub side: f64,
    pub particle_radius: f64,
    pub gravity: f64,
    /// `None` removes the ground plane.
    pub ground: Option<f64>,
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub friction: f64,
    /// Integrator step.
    pub dt: f64,
    /// Integrator steps per recorded frame.
    pub substeps: usize,
    pub frames: usize,
    /// Lowest cube center at spawn, above the ground.
    pub spawn_height: f64,
    /// Vertical spacing between spawned cubes.
    pub spawn_gap: f64,
    /// Half-width of the horizontal spawn square.
    pub spawn_spread: f64,
    pub max_speed: f64,
    /// Mean direction of the horizontal push, radians from +x.
    pub heading: f64,
    /// Width of the push direction window; a full turn is isotropic.
    pub heading_spread: f64,
    pub max_spin: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects: 3,
            lattice: 3,
            side: 0.1,
            particle_radius: 0.025,
            gravity: 9.8,
            ground: Some(0.0),
            mass: 1.0,
            stiffness: 5000.0,
            damping: 20.0,
            friction: 0.3,
            dt: 0.004,
            substeps: 5,
            frames: 41,
            spawn_height: 0.15,
            spawn_gap: 0.22,
            spawn_spread: 0.06,
            max_speed: 0.3,
            heading: 0.0,
            heading_spread: std::f64::consts::TAU,
            max_spin: 3.0,
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "objects",
    "lattice",
    "side",
    "particle_radius",
    "gravity",
    "ground",
    "mass",
    "stiffness",
    "damping",
    "friction",
    "dt",
    "substeps",
    "frames",
    "spawn_height",
    "spawn_gap",
    "spawn_spread",
    "max_speed",
    "heading",
    "heading_spread",
    "max_spin",
    "seed",
];

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value for {key}: {v:?}")))
}

impl SceneConfig {
    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {line}: unknown key {k:?}")));
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {k:?}")));
            }
            cfg.set(line, k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, k: &str, v: &str) -> Result<()> {
        match k {
            "objects" => self.objects = parse_num(line, k, v)?,
            "lattice" => self.lattice = parse_num(line, k, v)?,
            "side" => self.side = parse_num(line, k, v)?,
            "particle_radius" => self.particle_radius = parse_num(line, k, v)?,
            "gravity" => self.gravity = parse_num(line, k, v)?,
            "ground" => {
                self.ground = match v {
                    "none" => None,
                    _ => Some(parse_num(line, k, v)?),
                }
            }
            "mass" => self.mass = parse_num(line, k, v)?,
            "stiffness" => self.stiffness = parse_num(line, k, v)?,
            "damping" => self.damping = parse_num(line, k, v)?,
            "friction" => self.friction = parse_num(line, k, v)?,
            "dt" => self.dt = parse_num(line, k, v)?,
            "substeps" => self.substeps = parse_num(line, k, v)?,
            "frames" => self.frames = parse_num(line, k, v)?,
            "spawn_height" => self.spawn_height = parse_num(line, k, v)?,
            "spawn_gap" => self.spawn_gap = parse_num(line, k, v)?,
            "spawn_spread" => self.spawn_spread = parse_num(line, k, v)?,
            "max_speed" => self.max_speed = parse_num(line, k, v)?,
            "heading" => self.heading = parse_num(line, k, v)?,
            "heading_spread" => self.heading_spread = parse_num(line, k, v)?,
            "max_spin" => self.max_spin = parse_num(line, k, v)?,
            "seed" => self.seed = parse_num(line, k, v)?,
            _ => unreachable!("key list and setter disagree"),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("objects", self.objects.to_string());
        kv("lattice", self.lattice.to_string());
        kv("side", self.side.to_string());
        kv("particle_radius", self.particle_radius.to_string());
        kv("gravity", self.gravity.to_string());
        kv(
            "ground",
            self.ground.map_or("none".into(), |g| g.to_string()),
        );
        kv("mass", self.mass.to_string());
        kv("stiffness", self.stiffness.to_string());
        kv("damping", self.damping.to_string());
        kv("friction", self.friction.to_string());
        kv("dt", self.dt.to_string());
        kv("substeps", self.substeps.to_string());
        kv("frames", self.frames.to_string());
        kv("spawn_height", self.spawn_height.to_string());
        kv("spawn_gap", self.spawn_gap.to_string());
        kv("spawn_spread", self.spawn_spread.to_string());
        kv("max_speed", self.max_speed.to_string());
        kv("heading", self.heading.to_string());
        kv("heading_spread", self.heading_spread.to_string());
        kv("max_spin", self.max_spin.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("side", self.side),
            ("particle_radius", self.particle_radius),
            ("gravity", self.gravity),
            ("mass", self.mass),
            ("stiffness", self.stiffness),
            ("damping", self.damping),
            ("friction", self.friction),
            ("dt", self.dt),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive and finite, got {v}"));
            }
        }
        let non_negative = [
            ("spawn_height", self.spawn_height),
            ("spawn_gap", self.spawn_gap),
            ("spawn_spread", self.spawn_spread),
            ("max_speed", self.max_speed),
            ("heading_spread", self.heading_spread),
            ("max_spin", self.max_spin),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative and finite, got {v}"));
            }
        }
        if !self.heading.is_finite() {
            return bad("heading must be finite".into());
        }
        if self.ground.is_some_and(|g| !g.is_finite()) {
            return bad("ground height must be finite".into());
        }
        if self.objects == 0 || self.lattice < 2 || self.substeps == 0 {
            return bad("objects, substeps must be positive and lattice at least 2".into());
        }
        let particles = self
            .lattice
            .checked_pow(3)
            .and_then(|p| p.checked_mul(self.objects));
        if particles.is_none_or(|p| p > 1 << 20) {
            return bad("scene has too many particles".into());
        }
        if self.frames > 1 << 20 || self.substeps > 1 << 20 {
            return bad("frame or substep count is implausibly large".into());
        }
        let total = self.dt * self.substeps as f64 * self.frames as f64;
        if !total.is_finite() {
            return bad("simulated duration overflows".into());
        }
        Ok(())
    }

    pub fn particles_per_object(&self) -> usize {
        self.lattice.pow(3)
    }
}
