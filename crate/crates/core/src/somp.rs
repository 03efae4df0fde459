//! Subequivariant object-aware message passing.
//!
//! Per edge `(i, j)` (message from `j` to receiver `i`):
//! `Z_ij = (Z_i ⊖ C_o(i)) ‖ (Z_j ⊖ C_o(j)) ‖ (Z_i ⊖ Z_j)`,
//! `h_ij = h_i ‖ c_o(i) ‖ h_j ‖ c_o(j)`, `(M_ij, m_ij) = φ(Z_ij, h_ij)`.
//! Per node: `(ΔZ_i, Δh_i) = ψ(ΣM ‖ (Z_i ⊖ C_o(i)), Σm ‖ h_i ‖ c_o(i))` added
//! residually. Without object features the `C`/`c` terms are dropped.

use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
pub use crate::graph::EdgeIndex;
use crate::graph::ObjectFeatures;
use crate::math::{Bound, Init, Mat, ParamStore, Tape, Var};
use crate::subeq::{
    ominus_rows, stack_rows, unstack_rows, BlockSpec, GeoTensor, Gravity, MlpShape, ScalarizeBlock,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    Mean,
}

/// Where edge inputs come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeInput {
    /// Built from node (and object) states each iteration.
    Nodes,
    /// Supplied per edge by the caller, fixed across iterations.
    Given { channels: usize, scalars: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SompConfig {
    pub node_channels: usize,
    pub node_scalars: usize,
    pub object_channels: usize,
    pub object_scalars: usize,
    pub use_objects: bool,
    pub edge_input: EdgeInput,
    pub message_channels: usize,
    pub message_scalars: usize,
    pub iterations: usize,
    /// Gravity-augmented (subequivariant) scalarization; `false` gives the fully
    /// `O(3)`-equivariant form.
    pub gravity: bool,
    pub normalize: bool,
    pub aggregation: Aggregation,
    pub shape: MlpShape,
    /// Zero the final layer of ψ so a fresh layer is the identity.
    pub zero_init_update: bool,
}

impl SompConfig {
    /// Channels of `Z_i ⊖ C_o(i)`.
    pub fn node_object_channels(&self) -> usize {
        self.node_channels + self.object_channels - 1
    }

    pub fn message_in_channels(&self) -> usize {
        match self.edge_input {
            EdgeInput::Given { channels, .. } => channels,
            EdgeInput::Nodes => {
                let rel = 2 * self.node_channels - 1;
                if self.use_objects {
                    rel + 2 * self.node_object_channels()
                } else {
                    rel
                }
            }
        }
    }

    pub fn message_in_scalars(&self) -> usize {
        match self.edge_input {
            EdgeInput::Given { scalars, .. } => scalars,
            EdgeInput::Nodes => {
                let per = self.node_scalars
                    + if self.use_objects {
                        self.object_scalars
                    } else {
                        0
                    };
                2 * per
            }
        }
    }

    pub fn update_in_channels(&self) -> usize {
        self.message_channels
            + if self.use_objects {
                self.node_object_channels()
            } else {
                0
            }
    }

    pub fn update_in_scalars(&self) -> usize {
        self.message_scalars
            + self.node_scalars
            + if self.use_objects {
                self.object_scalars
            } else {
                0
            }
    }

    pub fn message_spec(&self) -> BlockSpec {
        BlockSpec {
            in_channels: self.message_in_channels(),
            out_channels: self.message_channels,
            scalar_dim: self.message_in_scalars(),
            extra: self.message_scalars,
            gravity: self.gravity,
            normalize: self.normalize,
        }
    }

    pub fn update_spec(&self) -> BlockSpec {
        BlockSpec {
            in_channels: self.update_in_channels(),
            out_channels: self.node_channels,
            scalar_dim: self.update_in_scalars(),
            extra: self.node_scalars,
            gravity: self.gravity,
            normalize: self.normalize,
        }
    }
}

/// Node-level inputs shared by every edge touching an object.
#[derive(Clone, Debug)]
pub struct ObjectInputs {
    /// `M × 3·object_channels`.
    pub geo: Var,
    /// `M × object_scalars`.
    pub scalars: Var,
    pub object_of: Arc<[usize]>,
}

/// One message function φ and update function ψ, shared across iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct SompLayer {
    pub config: SompConfig,
    pub phi: ScalarizeBlock,
    pub psi: ScalarizeBlock,
}

impl SompLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: SompConfig,
        rng: &mut R,
    ) -> Self {
        let phi = ScalarizeBlock::new(
            store,
            &format!("{name}.phi"),
            config.message_spec(),
            &config.shape,
            Init::XavierUniform,
            rng,
        );
        let init = if config.zero_init_update {
            Init::ZeroLast
        } else {
            Init::XavierUniform
        };
        let psi = ScalarizeBlock::new(
            store,
            &format!("{name}.psi"),
            config.update_spec(),
            &config.shape,
            init,
            rng,
        );
        Self { config, phi, psi }
    }

    /// Runs all iterations. `z` is `N × 3·node_channels`, `h` is `N × node_scalars`.
    /// `given` supplies per-edge inputs when the layer is configured for them.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        mut z: Var,
        mut h: Var,
        objects: Option<&ObjectInputs>,
        edges: &EdgeIndex,
        given: Option<(Var, Var)>,
        g: Option<&Gravity>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let (n, zw) = tape.shape(z);
        if zw != 3 * cfg.node_channels || tape.shape(h) != (n, cfg.node_scalars) {
            return shape_err(format!(
                "message passing expects {n}x{} geometry and {n}x{} scalars, got {:?} and {:?}",
                3 * cfg.node_channels,
                cfg.node_scalars,
                tape.shape(z),
                tape.shape(h)
            ));
        }
        if edges
            .receivers
            .iter()
            .chain(edges.senders.iter())
            .any(|&i| i >= n)
        {
            return shape_err("edge references a missing node");
        }
        let objects = match (cfg.use_objects, objects) {
            (true, Some(o)) => {
                let m = tape.shape(o.geo).0;
                if tape.shape(o.geo).1 != 3 * cfg.object_channels
                    || tape.shape(o.scalars) != (m, cfg.object_scalars)
                    || o.object_of.len() != n
                    || o.object_of.iter().any(|&k| k >= m)
                {
                    return shape_err("object inputs disagree with the layer layout");
                }
                Some(o)
            }
            (true, None) => return Err(Error::Contract("layer needs object features".into())),
            (false, _) => None,
        };
        let given = match (cfg.edge_input, given) {
            (EdgeInput::Given { channels, scalars }, Some((gz, gh))) => {
                if tape.shape(gz) != (edges.len(), 3 * channels)
                    || tape.shape(gh) != (edges.len(), scalars)
                {
                    return shape_err("given edge inputs disagree with the edge list");
                }
                Some((gz, gh))
            }
            (EdgeInput::Given { .. }, None) => {
                return Err(Error::Contract("layer needs per-edge inputs".into()))
            }
            (EdgeInput::Nodes, _) => None,
        };

        let inv_degree = match cfg.aggregation {
            Aggregation::Sum => None,
            Aggregation::Mean => {
                let deg = edges.in_degree(n);
                let data = deg
                    .iter()
                    .map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 })
                    .collect();
                Some(tape.leaf(Mat::from_raw(n, 1, data)))
            }
        };

        for _ in 0..cfg.iterations {
            let node_obj = match objects {
                Some(o) => {
                    let cz = tape.gather(o.geo, o.object_of.clone())?;
                    let cs = tape.gather(o.scalars, o.object_of.clone())?;
                    let zc = ominus_rows(tape, z, cfg.node_channels, cz, cfg.object_channels)?;
                    let hc = tape.concat(&[h, cs])?;
                    Some((zc, hc))
                }
                None => None,
            };

            let (sum_z, sum_h) = if edges.is_empty() {
                (
                    tape.leaf(Mat::zeros(n, 3 * cfg.message_channels)),
                    tape.leaf(Mat::zeros(n, cfg.message_scalars)),
                )
            } else {
                let (zij, hij) = match given {
                    Some(pair) => pair,
                    None => {
                        let zi = tape.gather(z, edges.receivers.clone())?;
                        let zj = tape.gather(z, edges.senders.clone())?;
                        let rel = ominus_rows(tape, zi, cfg.node_channels, zj, cfg.node_channels)?;
                        match node_obj {
                            Some((zc, hc)) => {
                                let zci = tape.gather(zc, edges.receivers.clone())?;
                                let zcj = tape.gather(zc, edges.senders.clone())?;
                                let hci = tape.gather(hc, edges.receivers.clone())?;
                                let hcj = tape.gather(hc, edges.senders.clone())?;
                                (tape.concat(&[zci, zcj, rel])?, tape.concat(&[hci, hcj])?)
                            }
                            None => {
                                let hi = tape.gather(h, edges.receivers.clone())?;
                                let hj = tape.gather(h, edges.senders.clone())?;
                                (rel, tape.concat(&[hi, hj])?)
                            }
                        }
                    }
                };
                let (m_geo, m_scalar) = self.phi.forward(tape, bound, zij, hij, g)?;
                let m_scalar = m_scalar
                    .ok_or_else(|| Error::Contract("message without invariant part".into()))?;
                let mut sz = tape.scatter_add(m_geo, edges.receivers.clone(), n)?;
                let mut sh = tape.scatter_add(m_scalar, edges.receivers.clone(), n)?;
                if let Some(inv) = inv_degree {
                    sz = tape.row_scale(inv, sz)?;
                    sh = tape.row_scale(inv, sh)?;
                }
                (sz, sh)
            };

            let (uz, uh) = match node_obj {
                Some((zc, hc)) => (tape.concat(&[sum_z, zc])?, tape.concat(&[sum_h, hc])?),
                None => (sum_z, tape.concat(&[sum_h, h])?),
            };
            let (dz, dh) = self.psi.forward(tape, bound, uz, uh, g)?;
            z = tape.add(z, dz)?;
            if let Some(dh) = dh {
                h = tape.add(h, dh)?;
            }
        }
        Ok((z, h))
    }
}

fn scalar_rows(rows: &[Vec<f64>], width: usize) -> Result<Mat> {
    if rows.iter().any(|r| r.len() != width) {
        return shape_err("ragged scalar features");
    }
    Mat::from_vec(rows.len(), width, rows.concat())
}

/// Convenience wrapper over [`SompLayer::forward`] for per-node tensors.
pub fn somp_forward(
    layer: &SompLayer,
    store: &ParamStore,
    particles: &[GeoTensor],
    scalars: &[Vec<f64>],
    objects: Option<(&ObjectFeatures, &[usize])>,
    edges: &[(usize, usize)],
    g: Option<&Gravity>,
) -> Result<(Vec<GeoTensor>, Vec<Vec<f64>>)> {
    let cfg = &layer.config;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let z = tape.leaf(stack_rows(particles, cfg.node_channels)?);
    let h = tape.leaf(scalar_rows(scalars, cfg.node_scalars)?);
    let objects = match objects {
        Some((f, object_of)) => Some(ObjectInputs {
            geo: tape.leaf(stack_rows(&f.geo, cfg.object_channels)?),
            scalars: tape.leaf(scalar_rows(&f.scalars, cfg.object_scalars)?),
            object_of: object_of.into(),
        }),
        None => None,
    };
    let (z, h) = layer.forward(
        &mut tape,
        &bound,
        z,
        h,
        objects.as_ref(),
        &EdgeIndex::new(edges),
        None,
        g,
    )?;
    let hv = tape.value(h);
    Ok((
        unstack_rows(tape.value(z))?,
        (0..hv.rows()).map(|r| hv.row(r).to_vec()).collect(),
    ))
}
