//! Masking constructions showing one layer family contains another:
//! an object-aware subequivariant layer whose σ ignores the gravity and object
//! channels computes a multichannel (GMN) layer, and a GMN layer restricted to
//! the relative-position channel computes an EGNN layer.

use rand::Rng;

use crate::baselines::{BaselineConfig, EgnnLayer, GmnLayer};
use crate::error::{Error, Result};
use crate::math::ParamStore;
use crate::somp::{Aggregation, EdgeInput, SompConfig, SompLayer};
use crate::subeq::{MaskedSigma, Sigma};

/// An object-aware layer whose σ maps are `f_out ∘ σ_gmn ∘ f_in`.
pub fn somp_masking_gmn<R: Rng + ?Sized>(
    store: &mut ParamStore,
    gmn: &GmnLayer,
    rng: &mut R,
) -> Result<SompLayer> {
    if gmn.gravity {
        return Err(Error::Contract(
            "reduction starts from the non-gravity GMN".into(),
        ));
    }
    let c = gmn.config;
    let n = c.node_scalars;
    let cfg = SompConfig {
        node_channels: 2,
        node_scalars: n,
        object_channels: 2,
        object_scalars: n,
        use_objects: true,
        edge_input: EdgeInput::Nodes,
        message_channels: c.message_channels,
        message_scalars: c.message_scalars,
        iterations: c.iterations,
        gravity: true,
        normalize: c.normalize,
        aggregation: Aggregation::Sum,
        shape: c.shape,
        zero_init_update: false,
    };
    let mut layer = SompLayer::new(store, "masked_somp", cfg, rng);
    // Message channels: (Z_i ⊖ C) 0..3, (Z_j ⊖ C) 3..6, (Z_i ⊖ Z_j) 6..9, gravity 9.
    // Message scalars: h_i, c_i, h_j, c_j.
    layer.phi.sigma = Sigma::Masked(Box::new(MaskedSigma {
        keep_channels: vec![6, 7, 8],
        keep_scalars: (0..n).chain(2 * n..3 * n).collect(),
        out_channels: c.message_channels,
        extra: c.message_scalars,
        renormalize: c.normalize,
        inner: gmn.phi.sigma.clone(),
    }));
    // Update channels: ΣM, then (Z_i ⊖ C) = [x_i − C_x, v_i, C_v], gravity last.
    // Update scalars: Σm, h_i, c_i.
    let mm = c.message_channels;
    layer.psi.sigma = Sigma::Masked(Box::new(MaskedSigma {
        keep_channels: (0..mm).chain([mm + 1]).collect(),
        keep_scalars: (0..c.message_scalars + n).collect(),
        out_channels: 2,
        extra: n,
        renormalize: c.normalize,
        inner: gmn.psi.sigma.clone(),
    }));
    Ok(layer)
}

/// A single-message-channel GMN layer (Gram normalization off) whose σ maps
/// reproduce the EGNN edge and node functions.
pub fn gmn_masking_egnn<R: Rng + ?Sized>(
    store: &mut ParamStore,
    egnn: &EgnnLayer,
    rng: &mut R,
) -> Result<GmnLayer> {
    if egnn.phi_g.is_some() {
        return Err(Error::Contract(
            "reduction starts from the non-gravity EGNN".into(),
        ));
    }
    let c = egnn.config;
    let cfg = BaselineConfig {
        message_channels: 1,
        normalize: false,
        ..c
    };
    let mut layer = GmnLayer::new(store, "masked_gmn", cfg, false, rng);
    layer.phi.sigma = Sigma::Masked(Box::new(MaskedSigma {
        keep_channels: vec![0],
        keep_scalars: (0..2 * c.node_scalars).collect(),
        out_channels: 1,
        extra: c.message_scalars,
        renormalize: false,
        inner: Sigma::EgnnEdge {
            phi_e: egnn.phi_e.clone(),
            phi_x: egnn.phi_x.clone(),
        },
    }));
    layer.psi.sigma = Sigma::EgnnNode {
        phi_v: egnn.phi_v.clone(),
        phi_h: egnn.phi_h.clone(),
        message_dim: c.message_scalars,
    };
    Ok(layer)
}
