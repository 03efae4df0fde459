//! Comparison layers over particle states `Z = [x, v]`: GNS (raw coordinates),
//! EGNN / EGNN-S (distance-based) and GMN / GMN-S (multichannel scalarization).

use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::EdgeIndex;
use crate::math::{Bound, Init, Mat, Mlp, ParamStore, Tape, Var};
use crate::subeq::{
    ominus_rows, stack_rows, unstack_rows, BlockSpec, GeoTensor, Gravity, MlpShape, ScalarizeBlock,
};

/// Default message-passing rounds for the baselines.
pub const BASELINE_ITERATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    Gns,
    Egnn,
    EgnnS,
    Gmn,
    GmnS,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Gns,
        BaselineKind::Egnn,
        BaselineKind::EgnnS,
        BaselineKind::Gmn,
        BaselineKind::GmnS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Gns => "gns",
            BaselineKind::Egnn => "egnn",
            BaselineKind::EgnnS => "egnn_s",
            BaselineKind::Gmn => "gmn",
            BaselineKind::GmnS => "gmn_s",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn subequivariant(self) -> bool {
        matches!(self, BaselineKind::EgnnS | BaselineKind::GmnS)
    }
}

/// Shared sizing for the baseline layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineConfig {
    pub node_scalars: usize,
    pub message_channels: usize,
    pub message_scalars: usize,
    pub iterations: usize,
    pub normalize: bool,
    pub shape: MlpShape,
    pub zero_init_update: bool,
}

fn check_nodes(tape: &Tape, z: Var, h: Var, scalars: usize) -> Result<usize> {
    let (n, zw) = tape.shape(z);
    if zw != 6 || tape.shape(h) != (n, scalars) {
        return shape_err(format!(
            "expected {n}x6 states and {n}x{scalars} scalars, got {:?} and {:?}",
            tape.shape(z),
            tape.shape(h)
        ));
    }
    Ok(n)
}

fn check_edges(edges: &EdgeIndex, n: usize) -> Result<()> {
    if edges
        .receivers
        .iter()
        .chain(edges.senders.iter())
        .any(|&i| i >= n)
    {
        return shape_err("edge references a missing node");
    }
    Ok(())
}

fn mlp_init(zero: bool) -> Init {
    if zero {
        Init::ZeroLast
    } else {
        Init::XavierUniform
    }
}

fn edge_sum(
    tape: &mut Tape,
    x: Option<Var>,
    idx: &Arc<[usize]>,
    n: usize,
    width: usize,
) -> Result<Var> {
    match x {
        Some(x) => tape.scatter_add(x, idx.clone(), n),
        None => Ok(tape.leaf(Mat::zeros(n, width))),
    }
}

/// Multichannel scalarization layer: message from `Z_i ⊖ Z_j` and `h_i ‖ h_j`,
/// update from `[ΣM, v_i]` and `Σm ‖ h_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmnLayer {
    pub config: BaselineConfig,
    pub gravity: bool,
    pub phi: ScalarizeBlock,
    pub psi: ScalarizeBlock,
}

impl GmnLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: BaselineConfig,
        gravity: bool,
        rng: &mut R,
    ) -> Self {
        let n = config.node_scalars;
        let phi = ScalarizeBlock::new(
            store,
            &format!("{name}.phi"),
            BlockSpec {
                in_channels: 3,
                out_channels: config.message_channels,
                scalar_dim: 2 * n,
                extra: config.message_scalars,
                gravity,
                normalize: config.normalize,
            },
            &config.shape,
            Init::XavierUniform,
            rng,
        );
        let psi = ScalarizeBlock::new(
            store,
            &format!("{name}.psi"),
            BlockSpec {
                in_channels: config.message_channels + 1,
                out_channels: 2,
                scalar_dim: config.message_scalars + n,
                extra: n,
                gravity,
                normalize: config.normalize,
            },
            &config.shape,
            mlp_init(config.zero_init_update),
            rng,
        );
        Self {
            config,
            gravity,
            phi,
            psi,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        mut z: Var,
        mut h: Var,
        edges: &EdgeIndex,
        g: Option<&Gravity>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let n = check_nodes(tape, z, h, cfg.node_scalars)?;
        check_edges(edges, n)?;
        for _ in 0..cfg.iterations {
            let (m_geo, m_s) = if edges.is_empty() {
                (None, None)
            } else {
                let zi = tape.gather(z, edges.receivers.clone())?;
                let zj = tape.gather(z, edges.senders.clone())?;
                let rel = ominus_rows(tape, zi, 2, zj, 2)?;
                let hi = tape.gather(h, edges.receivers.clone())?;
                let hj = tape.gather(h, edges.senders.clone())?;
                let hij = tape.concat(&[hi, hj])?;
                let (m, ms) = self.phi.forward(tape, bound, rel, hij, g)?;
                (Some(m), ms)
            };
            let sum_z = edge_sum(tape, m_geo, &edges.receivers, n, 3 * cfg.message_channels)?;
            let sum_h = edge_sum(tape, m_s, &edges.receivers, n, cfg.message_scalars)?;
            let v = tape.columns(z, 3, 3)?;
            let uz = tape.concat(&[sum_z, v])?;
            let uh = tape.concat(&[sum_h, h])?;
            let (dz, dh) = self.psi.forward(tape, bound, uz, uh, g)?;
            z = tape.add(z, dz)?;
            if let Some(dh) = dh {
                h = tape.add(h, dh)?;
            }
        }
        Ok((z, h))
    }
}

/// Distance-based equivariant layer:
/// `m_ij = φ_e(h_i, h_j, ‖x_i − x_j‖²)`,
/// `v' = φ_v(h)v [+ φ_g(h)g] + Σ_j (x_i − x_j)φ_x(m_ij)`, `x' = x + v'`,
/// `h' = h + φ_h(h, Σm)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EgnnLayer {
    pub config: BaselineConfig,
    pub phi_e: Mlp,
    pub phi_x: Mlp,
    pub phi_v: Mlp,
    pub phi_h: Mlp,
    /// Present for the subequivariant variant.
    pub phi_g: Option<Mlp>,
}

impl EgnnLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: BaselineConfig,
        gravity: bool,
        rng: &mut R,
    ) -> Self {
        let n = config.node_scalars;
        let ms = config.message_scalars;
        let act = config.shape.activation;
        let dims = |i, o| config.shape.dims(i, o);
        let zero = mlp_init(config.zero_init_update);
        let phi_e = Mlp::new(
            store,
            &format!("{name}.phi_e"),
            &dims(2 * n + 1, ms),
            act,
            Init::XavierUniform,
            rng,
        );
        let phi_x = Mlp::new(
            store,
            &format!("{name}.phi_x"),
            &dims(ms, 1),
            act,
            zero,
            rng,
        );
        let phi_v = Mlp::new(
            store,
            &format!("{name}.phi_v"),
            &dims(n, 1),
            act,
            Init::XavierUniform,
            rng,
        );
        let phi_h = Mlp::new(
            store,
            &format!("{name}.phi_h"),
            &dims(n + ms, n),
            act,
            zero,
            rng,
        );
        let phi_g =
            gravity.then(|| Mlp::new(store, &format!("{name}.phi_g"), &dims(n, 1), act, zero, rng));
        Self {
            config,
            phi_e,
            phi_x,
            phi_v,
            phi_h,
            phi_g,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        mut z: Var,
        mut h: Var,
        edges: &EdgeIndex,
        g: Option<&Gravity>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let n = check_nodes(tape, z, h, cfg.node_scalars)?;
        check_edges(edges, n)?;
        let gdir = match (&self.phi_g, g) {
            (Some(_), Some(g)) => {
                g.check_unit()?;
                let d = g.direction();
                let mut m = Mat::zeros(n, 3);
                for r in 0..n {
                    m.row_mut(r).copy_from_slice(&[d.x, d.y, d.z]);
                }
                Some(tape.leaf(m))
            }
            (Some(_), None) => return Err(Error::Contract("EGNN-S needs gravity".into())),
            (None, _) => None,
        };
        for _ in 0..cfg.iterations {
            let x = tape.columns(z, 0, 3)?;
            let v = tape.columns(z, 3, 3)?;
            let (msg_x, msg_h) = if edges.is_empty() {
                (None, None)
            } else {
                let xi = tape.gather(x, edges.receivers.clone())?;
                let xj = tape.gather(x, edges.senders.clone())?;
                let xij = tape.sub(xi, xj)?;
                let d2 = tape.gram(xij, 1)?;
                let hi = tape.gather(h, edges.receivers.clone())?;
                let hj = tape.gather(h, edges.senders.clone())?;
                let e_in = tape.concat(&[hi, hj, d2])?;
                let m = self.phi_e.forward(tape, bound, e_in)?;
                let coef = self.phi_x.forward(tape, bound, m)?;
                (Some(tape.row_scale(coef, xij)?), Some(m))
            };
            let sum_x = edge_sum(tape, msg_x, &edges.receivers, n, 3)?;
            let sum_h = edge_sum(tape, msg_h, &edges.receivers, n, cfg.message_scalars)?;
            let gate_v = self.phi_v.forward(tape, bound, h)?;
            let mut v_new = tape.row_scale(gate_v, v)?;
            v_new = tape.add(v_new, sum_x)?;
            if let (Some(phi_g), Some(gdir)) = (&self.phi_g, gdir) {
                let gate_g = phi_g.forward(tape, bound, h)?;
                let gv = tape.row_scale(gate_g, gdir)?;
                v_new = tape.add(v_new, gv)?;
            }
            let x_new = tape.add(x, v_new)?;
            z = tape.concat(&[x_new, v_new])?;
            let node_in = tape.concat(&[h, sum_h])?;
            let dh = self.phi_h.forward(tape, bound, node_in)?;
            h = tape.add(h, dh)?;
        }
        Ok((z, h))
    }
}

/// Non-equivariant layer on raw coordinates:
/// `m_ij = φ(x_i − x_j, v_i, v_j, h_i, h_j)`, `(Δx, Δv, Δh) = ψ(Σm, v_i, h_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GnsLayer {
    pub config: BaselineConfig,
    pub phi: Mlp,
    pub psi: Mlp,
}

impl GnsLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: BaselineConfig,
        rng: &mut R,
    ) -> Self {
        let n = config.node_scalars;
        let ms = config.message_scalars;
        let act = config.shape.activation;
        let phi = Mlp::new(
            store,
            &format!("{name}.phi"),
            &config.shape.dims(9 + 2 * n, ms),
            act,
            Init::XavierUniform,
            rng,
        );
        let psi = Mlp::new(
            store,
            &format!("{name}.psi"),
            &config.shape.dims(ms + 3 + n, 6 + n),
            act,
            mlp_init(config.zero_init_update),
            rng,
        );
        Self { config, phi, psi }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        mut z: Var,
        mut h: Var,
        edges: &EdgeIndex,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let n = check_nodes(tape, z, h, cfg.node_scalars)?;
        check_edges(edges, n)?;
        for _ in 0..cfg.iterations {
            let msg = if edges.is_empty() {
                None
            } else {
                let zi = tape.gather(z, edges.receivers.clone())?;
                let zj = tape.gather(z, edges.senders.clone())?;
                let rel = ominus_rows(tape, zi, 2, zj, 2)?;
                let hi = tape.gather(h, edges.receivers.clone())?;
                let hj = tape.gather(h, edges.senders.clone())?;
                let e_in = tape.concat(&[rel, hi, hj])?;
                Some(self.phi.forward(tape, bound, e_in)?)
            };
            let sum = edge_sum(tape, msg, &edges.receivers, n, cfg.message_scalars)?;
            let v = tape.columns(z, 3, 3)?;
            let u_in = tape.concat(&[sum, v, h])?;
            let out = self.psi.forward(tape, bound, u_in)?;
            let dz = tape.columns(out, 0, 6)?;
            let dh = tape.columns(out, 6, cfg.node_scalars)?;
            z = tape.add(z, dz)?;
            h = tape.add(h, dh)?;
        }
        Ok((z, h))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineLayer {
    Gns(GnsLayer),
    Egnn(EgnnLayer),
    Gmn(GmnLayer),
}

impl BaselineLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: BaselineKind,
        config: BaselineConfig,
        rng: &mut R,
    ) -> Self {
        let sub = kind.subequivariant();
        match kind {
            BaselineKind::Gns => BaselineLayer::Gns(GnsLayer::new(store, name, config, rng)),
            BaselineKind::Egnn | BaselineKind::EgnnS => {
                BaselineLayer::Egnn(EgnnLayer::new(store, name, config, sub, rng))
            }
            BaselineKind::Gmn | BaselineKind::GmnS => {
                BaselineLayer::Gmn(GmnLayer::new(store, name, config, sub, rng))
            }
        }
    }

    pub fn config(&self) -> &BaselineConfig {
        match self {
            BaselineLayer::Gns(l) => &l.config,
            BaselineLayer::Egnn(l) => &l.config,
            BaselineLayer::Gmn(l) => &l.config,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        h: Var,
        edges: &EdgeIndex,
        g: Option<&Gravity>,
    ) -> Result<(Var, Var)> {
        match self {
            BaselineLayer::Gns(l) => l.forward(tape, bound, z, h, edges),
            BaselineLayer::Egnn(l) => l.forward(tape, bound, z, h, edges, g),
            BaselineLayer::Gmn(l) => l.forward(tape, bound, z, h, edges, g),
        }
    }

    /// Per-node convenience wrapper.
    pub fn apply(
        &self,
        store: &ParamStore,
        particles: &[GeoTensor],
        scalars: &[Vec<f64>],
        edges: &[(usize, usize)],
        g: Option<&Gravity>,
    ) -> Result<(Vec<GeoTensor>, Vec<Vec<f64>>)> {
        let n = self.config().node_scalars;
        if scalars.iter().any(|s| s.len() != n) {
            return shape_err("ragged scalar features");
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let z = tape.leaf(stack_rows(particles, 2)?);
        let h = tape.leaf(Mat::from_vec(scalars.len(), n, scalars.concat())?);
        let (z, h) = self.forward(&mut tape, &bound, z, h, &EdgeIndex::new(edges), g)?;
        let hv = tape.value(h);
        Ok((
            unstack_rows(tape.value(z))?,
            (0..hv.rows()).map(|r| hv.row(r).to_vec()).collect(),
        ))
    }
}
