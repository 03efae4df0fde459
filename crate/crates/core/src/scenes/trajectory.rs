//! Recorded particle trajectories and the `SGTJ` binary format.
//!
//! Layout, little-endian: `"SGTJ"`, version `u32`, `N u32`, `T u32`, frame
//! `dt f64`, `N` object ids `u32`, attribute width `u32`, `N × width` attribute
//! `f64`s, then `T` frames of `N × 3` position `f64`s.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::graph::ParticleSystem;
use crate::io::{usize_to_u32, ByteReader, ByteWriter};
use crate::math::Mat;
use crate::subeq::{SubgroupTransform, Vec3};

pub const MAGIC: &[u8; 4] = b"SGTJ";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Time between recorded frames.
    pub dt: f64,
    pub object_of: Vec<usize>,
    /// `N × n` static attributes; column 0 flags rigid objects.
    pub attrs: Mat,
    pub frames: Vec<Vec<Vec3>>,
}

impl Trajectory {
    pub fn particles(&self) -> usize {
        self.object_of.len()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn objects(&self) -> usize {
        self.object_of.iter().max().map_or(0, |m| m + 1)
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.objects()];
        for (i, &o) in self.object_of.iter().enumerate() {
            out[o].push(i);
        }
        out
    }

    /// Whether object `k` is flagged rigid (attribute 0 of its first particle).
    pub fn is_rigid(&self, k: usize) -> bool {
        self.object_of
            .iter()
            .position(|&o| o == k)
            .is_some_and(|i| self.attrs.cols() > 0 && self.attrs.get(i, 0) > 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.particles();
        if self.attrs.rows() != n {
            return shape_err(format!(
                "{} attribute rows for {n} particles",
                self.attrs.rows()
            ));
        }
        if let Some(t) = self.frames.iter().position(|f| f.len() != n) {
            return shape_err(format!(
                "frame {t} has {} particles, expected {n}",
                self.frames[t].len()
            ));
        }
        let mut seen = vec![false; self.objects()];
        for &o in &self.object_of {
            seen[o] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("object {k} has no particles")));
        }
        Ok(())
    }

    /// State at frame `t` with the one-frame backward difference as velocity
    /// (zero at frame 0).
    pub fn system_at(&self, t: usize) -> Result<ParticleSystem> {
        if t >= self.len() {
            return shape_err(format!("frame {t} of a {}-frame trajectory", self.len()));
        }
        let velocities = if t == 0 {
            vec![Vec3::zeros(); self.particles()]
        } else {
            self.frames[t]
                .iter()
                .zip(&self.frames[t - 1])
                .map(|(a, b)| a - b)
                .collect()
        };
        ParticleSystem::new(
            self.frames[t].clone(),
            velocities,
            self.attrs.clone(),
            self.object_of.clone(),
            self.objects(),
        )
    }

    /// Every frame moved by the same transform.
    pub fn transformed(&self, t: &SubgroupTransform) -> Self {
        let mut out = self.clone();
        for frame in &mut out.frames {
            for p in frame.iter_mut() {
                *p = t.apply_point(p);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(usize_to_u32(self.particles(), "particle count")?);
        w.u32(usize_to_u32(self.len(), "frame count")?);
        w.f64(self.dt);
        for &o in &self.object_of {
            w.u32(usize_to_u32(o, "object id")?);
        }
        w.u32(usize_to_u32(self.attrs.cols(), "attribute width")?);
        w.f64s(self.attrs.data());
        for frame in &self.frames {
            for p in frame {
                w.f64s(p.as_slice());
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "not a trajectory file (bad magic)".into(),
            });
        }
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: at,
                message: format!("unsupported version {version}"),
            });
        }
        let n = r.u32("particle count")? as usize;
        let t = r.u32("frame count")? as usize;
        let at = r.offset();
        let dt = r.f64("dt")?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Parse {
                offset: at,
                message: format!("frame interval {dt} must be positive"),
            });
        }
        if n.saturating_mul(4) > r.remaining() {
            return r.error(format!("truncated object ids: {n} particles"));
        }
        let mut object_of = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let o = r.u32("object id")? as usize;
            if o >= n {
                return Err(Error::Parse {
                    offset: at,
                    message: format!("object id {o} out of range for {n} particles"),
                });
            }
            object_of.push(o);
        }
        let mut seen = vec![false; n];
        for &o in &object_of {
            seen[o] = true;
        }
        let objects = object_of.iter().max().map_or(0, |m| m + 1);
        if let Some(k) = seen[..objects].iter().position(|s| !s) {
            return r.error(format!("object {k} has no particles"));
        }
        let width = r.u32("attribute width")? as usize;
        let attrs = match n.checked_mul(width) {
            Some(count) => r.f64s(count, "attributes")?,
            None => return r.error("attribute block overflows"),
        };
        let attrs = Mat::from_vec(n, width, attrs)?;
        let per_frame = n * 3;
        if per_frame > 0 && t > r.remaining() / (per_frame * 8) {
            return r.error(format!(
                "truncated frames: {t} frames of {n} particles declared"
            ));
        }
        let mut frames = Vec::with_capacity(t);
        for k in 0..t {
            let at = r.offset();
            let raw = r.f64s(per_frame, "frame")?;
            if raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    offset: at,
                    message: format!("non-finite position in frame {k}"),
                });
            }
            frames.push(raw.chunks_exact(3).map(Vec3::from_column_slice).collect());
        }
        if !r.is_empty() {
            return r.error(format!("{} trailing bytes", r.remaining()));
        }
        Ok(Self {
            dt,
            object_of,
            attrs,
            frames,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let object_of = vec![0, 0, 1];
        let frames = (0..4)
            .map(|t| {
                (0..3)
                    .map(|i| Vec3::new(i as f64 * 0.1, t as f64 * 0.01, 1.0 / 3.0))
                    .collect()
            })
            .collect();
        Trajectory {
            dt: 0.02,
            object_of,
            attrs: Mat::filled(3, 1, 1.0),
            frames,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let bytes = t.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Trajectory::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_only_is_valid() {
        let mut t = sample();
        t.frames.clear();
        let back = Trajectory::from_bytes(&t.to_bytes().unwrap()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.particles(), 3);
    }

    #[test]
    fn every_truncation_is_a_parse_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            match Trajectory::from_bytes(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Trajectory::from_bytes(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(Trajectory::from_bytes(&bad).is_err());
        // object id 7 among 3 particles
        let mut bad = bytes.clone();
        bad[24..28].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Trajectory::from_bytes(&bad),
            Err(Error::Parse { offset: 24, .. })
        ));
        // a gap in object ids
        let mut bad = bytes;
        bad[28..32].copy_from_slice(&2u32.to_le_bytes());
        bad[32..36].copy_from_slice(&2u32.to_le_bytes());
        assert!(Trajectory::from_bytes(&bad).is_err());
    }

    #[test]
    fn system_at_uses_backward_difference() {
        let t = sample();
        let s0 = t.system_at(0).unwrap();
        assert!(s0.velocities.iter().all(|v| *v == Vec3::zeros()));
        let s2 = t.system_at(2).unwrap();
        assert_eq!(s2.velocities[1], t.frames[2][1] - t.frames[1][1]);
        assert!(t.system_at(4).is_err());
        assert!(t.is_rigid(0) && t.is_rigid(1));
    }
}
