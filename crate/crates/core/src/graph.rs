//! Particle systems, cutoff graphs split by object membership, and object pooling.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::math::Mat;
use crate::subeq::{ominus, GeoTensor, Vec3};

/// Default interaction cutoff.
pub const DEFAULT_CUTOFF: f64 = 0.08;

/// One frame of particles with their object assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    /// `N × n` static scalar features.
    pub attrs: Mat,
    pub object_of: Vec<usize>,
    pub objects: usize,
}

impl ParticleSystem {
    pub fn new(
        positions: Vec<Vec3>,
        velocities: Vec<Vec3>,
        attrs: Mat,
        object_of: Vec<usize>,
        objects: usize,
    ) -> Result<Self> {
        let sys = Self {
            positions,
            velocities,
            attrs,
            object_of,
            objects,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn attr_dim(&self) -> usize {
        self.attrs.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.velocities.len() != n || self.object_of.len() != n || self.attrs.rows() != n {
            return shape_err(format!(
                "particle arrays disagree: {n} positions, {} velocities, {} objects, {} attr rows",
                self.velocities.len(),
                self.object_of.len(),
                self.attrs.rows()
            ));
        }
        let mut seen = vec![false; self.objects];
        for &o in &self.object_of {
            if o >= self.objects {
                return Err(Error::Contract(format!(
                    "object index {o} out of {}",
                    self.objects
                )));
            }
            seen[o] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("object {empty} has no particles")));
        }
        let finite = |v: &Vec3| v.iter().all(|c| c.is_finite());
        if !self.positions.iter().all(finite) || !self.velocities.iter().all(finite) {
            return Err(Error::Contract("non-finite particle state".into()));
        }
        Ok(())
    }

    /// Per-particle `[x, v]`.
    pub fn geo(&self, i: usize) -> GeoTensor {
        GeoTensor::new(vec![self.positions[i], self.velocities[i]])
    }

    /// Particle indices of each object, in increasing order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.objects];
        for (i, &o) in self.object_of.iter().enumerate() {
            out[o].push(i);
        }
        out
    }
}

/// Cutoff edges split into inter-object, inner-object and object-level sets.
/// Edge `(i, j)` carries a message from `j` to receiver `i`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSets {
    pub inter: Vec<(usize, usize)>,
    pub inner: Vec<(usize, usize)>,
    pub obj: Vec<(usize, usize)>,
}

impl EdgeSets {
    /// Every particle edge, lexicographically ordered.
    pub fn all(&self) -> Vec<(usize, usize)> {
        let mut all: Vec<_> = self.inter.iter().chain(&self.inner).copied().collect();
        all.sort_unstable();
        all
    }

    /// For each inter edge, the index of its object edge in `obj`.
    pub fn inter_to_obj(&self, object_of: &[usize]) -> Result<Vec<usize>> {
        self.inter
            .iter()
            .map(|&(i, j)| {
                self.obj
                    .binary_search(&(object_of[i], object_of[j]))
                    .map_err(|_| {
                        Error::Contract(format!("inter edge ({i},{j}) has no object edge"))
                    })
            })
            .collect()
    }

    /// Object edges derived from `edges` treated as inter-object pairs.
    pub fn object_pairs(edges: &[(usize, usize)], object_of: &[usize]) -> Vec<(usize, usize)> {
        let mut obj: Vec<_> = edges
            .iter()
            .map(|&(i, j)| (object_of[i], object_of[j]))
            .collect();
        obj.sort_unstable();
        obj.dedup();
        obj
    }
}

fn partition(pairs: Vec<(usize, usize)>, object_of: &[usize]) -> EdgeSets {
    let (inter, inner): (Vec<_>, Vec<_>) = pairs
        .into_iter()
        .partition(|&(i, j)| object_of[i] != object_of[j]);
    let obj = EdgeSets::object_pairs(&inter, object_of);
    EdgeSets { inter, inner, obj }
}

fn check_cutoff(r: f64) -> Result<()> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Contract(format!("cutoff must be positive, got {r}")));
    }
    Ok(())
}

/// Cutoff graph via a uniform cell list with cell size `r`.
pub fn build_edges(sys: &ParticleSystem, r: f64) -> Result<EdgeSets> {
    check_cutoff(r)?;
    // Keeps cell indices, and their neighbours, well inside i64.
    let limit = r * 1e15;
    if let Some(p) = sys.positions.iter().find(|p| !(p.amax() < limit)) {
        return Err(Error::Contract(format!(
            "position {:?} is too far out for a cutoff of {r}",
            p.as_slice()
        )));
    }
    let cell = |p: &Vec3| {
        (
            (p.x / r).floor() as i64,
            (p.y / r).floor() as i64,
            (p.z / r).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in sys.positions.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let r2 = r * r;
    let mut pairs = Vec::new();
    for (i, p) in sys.positions.iter().enumerate() {
        let (cx, cy, cz) = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &j in bucket {
                        if j != i && (sys.positions[j] - p).norm_squared() < r2 {
                            pairs.push((i, j));
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    Ok(partition(pairs, &sys.object_of))
}

/// Quadratic pair scan; the reference for [`build_edges`].
pub fn build_edges_brute_force(sys: &ParticleSystem, r: f64) -> Result<EdgeSets> {
    check_cutoff(r)?;
    let n = sys.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && (sys.positions[i] - sys.positions[j]).norm() < r {
                pairs.push((i, j));
            }
        }
    }
    Ok(partition(pairs, &sys.object_of))
}

/// Pooled object features: `C_k = mean [x, v]`, `c_k = Σ h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectFeatures {
    pub geo: Vec<GeoTensor>,
    pub scalars: Vec<Vec<f64>>,
}

pub fn pool_objects(sys: &ParticleSystem) -> Result<ObjectFeatures> {
    sys.validate()?;
    let members = sys.members();
    let mut geo = Vec::with_capacity(sys.objects);
    let mut scalars = Vec::with_capacity(sys.objects);
    for ids in &members {
        let n = ids.len() as f64;
        let x = ids.iter().map(|&i| sys.positions[i]).sum::<Vec3>() / n;
        let v = ids.iter().map(|&i| sys.velocities[i]).sum::<Vec3>() / n;
        geo.push(GeoTensor::new(vec![x, v]));
        let mut s = vec![0.0; sys.attr_dim()];
        for &i in ids {
            for (acc, a) in s.iter_mut().zip(sys.attrs.row(i)) {
                *acc += a;
            }
        }
        scalars.push(s);
    }
    Ok(ObjectFeatures { geo, scalars })
}

/// Channel-wise mean of `Z'_i ⊖ Z'_j` over inter edges from object `k` to `l`.
pub fn object_level_ominus(
    zp: &[GeoTensor],
    object_of: &[usize],
    edges: &EdgeSets,
    k: usize,
    l: usize,
) -> Result<GeoTensor> {
    let mut acc: Option<Vec<Vec3>> = None;
    let mut count = 0usize;
    for &(i, j) in &edges.inter {
        if object_of[i] != k || object_of[j] != l {
            continue;
        }
        let d = ominus(&zp[i], &zp[j])?;
        match &mut acc {
            None => acc = Some(d.columns().to_vec()),
            Some(a) => {
                if a.len() != d.channels() {
                    return shape_err("inconsistent channel counts while pooling");
                }
                for (s, c) in a.iter_mut().zip(d.columns()) {
                    *s += c;
                }
            }
        }
        count += 1;
    }
    let acc =
        acc.ok_or_else(|| Error::Contract(format!("no inter edges from object {k} to {l}")))?;
    Ok(GeoTensor::new(
        acc.into_iter().map(|c| c / count as f64).collect(),
    ))
}

/// Mean of `h'_i ‖ h'_j` over inter edges from object `k` to `l`.
pub fn object_level_scalars(
    hp: &[Vec<f64>],
    object_of: &[usize],
    edges: &EdgeSets,
    k: usize,
    l: usize,
) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for &(i, j) in &edges.inter {
        if object_of[i] != k || object_of[j] != l {
            continue;
        }
        let pair: Vec<f64> = hp[i].iter().chain(&hp[j]).copied().collect();
        if acc.is_empty() {
            acc = pair;
        } else {
            for (a, p) in acc.iter_mut().zip(pair) {
                *a += p;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract(format!(
            "no inter edges from object {k} to {l}"
        )));
    }
    Ok(acc.into_iter().map(|a| a / count as f64).collect())
}

/// Edge list split into receiver and sender index arrays for gather/scatter.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub receivers: Arc<[usize]>,
    pub senders: Arc<[usize]>,
}

impl EdgeIndex {
    pub fn new(edges: &[(usize, usize)]) -> Self {
        Self {
            receivers: edges.iter().map(|e| e.0).collect(),
            senders: edges.iter().map(|e| e.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.receivers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.receivers.is_empty()
    }

    /// In-degree of every node, for mean aggregation.
    pub fn in_degree(&self, nodes: usize) -> Vec<usize> {
        let mut deg = vec![0; nodes];
        for &r in self.receivers.iter() {
            deg[r] += 1;
        }
        deg
    }
}
