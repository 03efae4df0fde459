//! Scalarization: equivariant outputs built as `Z·σ(ZᵀZ, h)`, with the
//! gravity-augmented variant `[Z, η(h)g]·σ([Z, η(h)g]ᵀ[Z, η(h)g], h)`.

use std::sync::Arc;

use rand::Rng;

use super::geo::{GeoTensor, Gravity};
use crate::error::{shape_err, Error, Result};
use crate::math::{Activation, Bound, Init, Mat, Mlp, ParamStore, Tape, Var};

/// The invariant map `σ(Gram, h) → [vec(V) | extra]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Sigma {
    Mlp(Mlp),
    /// Runs `inner` on a sub-block of channels/scalars and zero-pads `V`.
    Masked(Box<MaskedSigma>),
    /// EGNN edge function written as a scalarization over `[x_i − x_j]`:
    /// `V = φ_x(m_ij)`, extra `m_ij = φ_e(h_i, h_j, ‖x_i − x_j‖²)`.
    EgnnEdge {
        phi_e: Mlp,
        phi_x: Mlp,
    },
    /// EGNN node update over channels `[ΣM, v_i]` and scalars `[Σm | h_i]`:
    /// `Δx = ΣM + φ_v(h_i)v_i`, `Δv = ΣM + (φ_v(h_i) − 1)v_i`, `Δh = φ_h(h_i, Σm)`.
    EgnnNode {
        phi_v: Mlp,
        phi_h: Mlp,
        message_dim: usize,
    },
}

/// Channel/scalar masking around an inner σ: `σ₁ = f_out ∘ σ₂ ∘ f_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSigma {
    pub keep_channels: Vec<usize>,
    pub keep_scalars: Vec<usize>,
    pub out_channels: usize,
    pub extra: usize,
    /// Re-normalize the kept Gram block, matching an inner layer that normalizes.
    pub renormalize: bool,
    pub inner: Sigma,
}

impl Sigma {
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        gram: Var,
        h: Var,
        channels: usize,
        out_channels: usize,
    ) -> Result<Var> {
        match self {
            Sigma::Mlp(mlp) => {
                let x = tape.concat(&[gram, h])?;
                mlp.forward(tape, bound, x)
            }
            Sigma::Masked(masked) => masked.forward(tape, bound, gram, h, channels, out_channels),
            Sigma::EgnnEdge { phi_e, phi_x } => {
                if channels != 1 || out_channels != 1 {
                    return shape_err("EGNN edge map works on one channel");
                }
                let x = tape.concat(&[h, gram])?;
                let m = phi_e.forward(tape, bound, x)?;
                let coef = phi_x.forward(tape, bound, m)?;
                tape.concat(&[coef, m])
            }
            Sigma::EgnnNode {
                phi_v,
                phi_h,
                message_dim,
            } => {
                if channels != 2 || out_channels != 2 {
                    return shape_err("EGNN node map works on channels [ΣM, v]");
                }
                let (rows, n) = tape.shape(h);
                if n < *message_dim {
                    return shape_err("EGNN node scalars shorter than the message");
                }
                let sum_m = tape.columns(h, 0, *message_dim)?;
                let hi = tape.columns(h, *message_dim, n - message_dim)?;
                let pv = phi_v.forward(tape, bound, hi)?;
                let ones = tape.leaf(Mat::filled(rows, 1, 1.0));
                let pv_minus = tape.sub(pv, ones)?;
                let node_in = tape.concat(&[hi, sum_m])?;
                let dh = phi_h.forward(tape, bound, node_in)?;
                tape.concat(&[ones, ones, pv, pv_minus, dh])
            }
        }
    }
}

impl MaskedSigma {
    fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        gram: Var,
        h: Var,
        channels: usize,
        out_channels: usize,
    ) -> Result<Var> {
        if out_channels != self.out_channels {
            return shape_err("masked σ output channel mismatch");
        }
        if self.keep_channels.iter().any(|&c| c >= channels) {
            return shape_err("masked σ keeps a channel that does not exist");
        }
        let kk = self.keep_channels.len();
        let gram_map: Arc<[Option<usize>]> = self
            .keep_channels
            .iter()
            .flat_map(|&a| {
                self.keep_channels
                    .iter()
                    .map(move |&b| Some(a * channels + b))
            })
            .collect();
        let mut sub_gram = tape.column_map(gram, gram_map)?;
        if self.renormalize {
            sub_gram = tape.normalize_rows(sub_gram);
        }
        let scalar_map: Arc<[Option<usize>]> = self.keep_scalars.iter().map(|&c| Some(c)).collect();
        let sub_h = tape.column_map(h, scalar_map)?;
        let inner = self
            .inner
            .forward(tape, bound, sub_gram, sub_h, kk, out_channels)?;
        if tape.shape(inner).1 != kk * out_channels + self.extra {
            return shape_err("masked σ inner output width");
        }
        let mut out_map: Vec<Option<usize>> =
            Vec::with_capacity(channels * out_channels + self.extra);
        for a in 0..channels {
            let pos = self.keep_channels.iter().position(|&k| k == a);
            for c in 0..out_channels {
                out_map.push(pos.map(|j| j * out_channels + c));
            }
        }
        out_map.extend((0..self.extra).map(|e| Some(kk * out_channels + e)));
        tape.column_map(inner, out_map.into())
    }
}

/// Shape of one scalarization block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    /// Input channels `m`, not counting the gravity channel.
    pub in_channels: usize,
    /// Output channels `m'`.
    pub out_channels: usize,
    /// Scalar input width `|h|`.
    pub scalar_dim: usize,
    /// Extra invariant outputs beside `V`.
    pub extra: usize,
    /// Augment with gravity (subequivariant) or not (fully O(3)-equivariant).
    pub gravity: bool,
    pub normalize: bool,
}

impl BlockSpec {
    pub fn channels(&self) -> usize {
        self.in_channels + usize::from(self.gravity)
    }

    pub fn sigma_in(&self) -> usize {
        self.channels() * self.channels() + self.scalar_dim
    }

    pub fn sigma_out(&self) -> usize {
        self.channels() * self.out_channels + self.extra
    }
}

/// MLP sizing shared by blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub hidden: usize,
    /// Number of affine layers in σ.
    pub layers: usize,
    pub eta_hidden: usize,
    pub activation: Activation,
}

impl Default for MlpShape {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 3,
            eta_hidden: 16,
            activation: Activation::Silu,
        }
    }
}

impl MlpShape {
    pub fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat_n(
            self.hidden,
            self.layers.saturating_sub(1),
        ));
        d.push(output);
        d
    }
}

/// One scalarization function with its σ and (when gravity-augmented) η gate.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarizeBlock {
    pub spec: BlockSpec,
    pub sigma: Sigma,
    pub eta: Option<Mlp>,
}

impl ScalarizeBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: BlockSpec,
        shape: &MlpShape,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let sigma = Mlp::new(
            store,
            &format!("{name}.sigma"),
            &shape.dims(spec.sigma_in(), spec.sigma_out()),
            shape.activation,
            init,
            rng,
        );
        let eta = spec.gravity.then(|| {
            Mlp::new(
                store,
                &format!("{name}.eta"),
                &[spec.scalar_dim, shape.eta_hidden, 1],
                shape.activation,
                Init::XavierUniform,
                rng,
            )
        });
        Self {
            spec,
            sigma: Sigma::Mlp(sigma),
            eta,
        }
    }

    /// Parameters of σ when it is a plain MLP, plus η's.
    pub fn sigma_params(&self) -> impl Iterator<Item = crate::math::ParamId> + '_ {
        let sigma = match &self.sigma {
            Sigma::Mlp(m) => Some(m),
            _ => None,
        };
        sigma
            .into_iter()
            .chain(self.eta.as_ref())
            .flat_map(|m| m.param_ids())
    }

    /// The basis `[Z, η(h)g]` (or `Z`) and the (normalized) Gram fed to σ.
    pub fn basis_and_gram(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        h: Var,
        g: Option<&Gravity>,
    ) -> Result<(Var, Var)> {
        let (rows, zw) = tape.shape(z);
        let spec = &self.spec;
        if zw != 3 * spec.in_channels {
            return shape_err(format!(
                "block expects {} channels, got width {zw}",
                spec.in_channels
            ));
        }
        if tape.shape(h) != (rows, spec.scalar_dim) {
            return shape_err(format!(
                "block expects {rows}x{} scalars, got {:?}",
                spec.scalar_dim,
                tape.shape(h)
            ));
        }
        let basis = if spec.gravity {
            let g = g.ok_or_else(|| Error::Contract("gravity-augmented block needs g".into()))?;
            g.check_unit()?;
            let eta = self
                .eta
                .as_ref()
                .ok_or_else(|| Error::Contract("gravity-augmented block without η".into()))?;
            let gate = eta.forward(tape, bound, h)?;
            let d = g.direction();
            let mut dirs = Mat::zeros(rows, 3);
            for r in 0..rows {
                dirs.row_mut(r).copy_from_slice(&[d.x, d.y, d.z]);
            }
            let dirs = tape.leaf(dirs);
            let gcol = tape.row_scale(gate, dirs)?;
            if spec.in_channels == 0 {
                gcol
            } else {
                tape.concat(&[z, gcol])?
            }
        } else {
            z
        };
        let k = spec.channels();
        let mut gram = tape.gram(basis, k)?;
        if spec.normalize {
            gram = tape.normalize_rows(gram);
        }
        Ok((basis, gram))
    }

    /// Batched forward. Returns the `3·m'`-wide geometric output and the extra invariants.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        h: Var,
        g: Option<&Gravity>,
    ) -> Result<(Var, Option<Var>)> {
        let (basis, gram) = self.basis_and_gram(tape, bound, z, h, g)?;
        let spec = &self.spec;
        let k = spec.channels();
        let out = self
            .sigma
            .forward(tape, bound, gram, h, k, spec.out_channels)?;
        if tape.shape(out).1 != spec.sigma_out() {
            return shape_err(format!(
                "σ produced width {}, expected {}",
                tape.shape(out).1,
                spec.sigma_out()
            ));
        }
        let v = tape.columns(out, 0, k * spec.out_channels)?;
        let geo = tape.combine(basis, v, k, spec.out_channels)?;
        let extra = if spec.extra > 0 {
            Some(tape.columns(out, k * spec.out_channels, spec.extra)?)
        } else {
            None
        };
        Ok((geo, extra))
    }
}

fn single(
    block: &ScalarizeBlock,
    store: &ParamStore,
    z: &GeoTensor,
    h: &[f64],
    g: Option<&Gravity>,
) -> Result<(GeoTensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let zv = tape.leaf(Mat::from_raw(1, 3 * z.channels(), z.to_flat()));
    let hv = tape.leaf(Mat::row_vector(h));
    let (geo, extra) = block.forward(&mut tape, &bound, zv, hv, g)?;
    let out = GeoTensor::from_flat(tape.value(geo).data())?;
    let extra = extra
        .map(|e| tape.value(e).data().to_vec())
        .unwrap_or_default();
    Ok((out, extra))
}

/// `Z·σ(ZᵀZ, h)` for one instance; the block must not be gravity-augmented.
pub fn scalarize_equivariant(
    z: &GeoTensor,
    h: &[f64],
    block: &ScalarizeBlock,
    store: &ParamStore,
) -> Result<(GeoTensor, Vec<f64>)> {
    if block.spec.gravity {
        return Err(Error::Contract(
            "equivariant scalarization with a gravity block".into(),
        ));
    }
    single(block, store, z, h, None)
}

/// `[Z, η(h)g]·σ(Gram, h)` for one instance.
pub fn scalarize_subequivariant(
    z: &GeoTensor,
    h: &[f64],
    g: &Gravity,
    block: &ScalarizeBlock,
    store: &ParamStore,
) -> Result<(GeoTensor, Vec<f64>)> {
    if !block.spec.gravity {
        return Err(Error::Contract(
            "subequivariant scalarization needs a gravity block".into(),
        ));
    }
    single(block, store, z, h, Some(g))
}

/// The Gram input σ sees for one instance.
pub fn sigma_gram(
    z: &GeoTensor,
    h: &[f64],
    g: Option<&Gravity>,
    block: &ScalarizeBlock,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let zv = tape.leaf(Mat::from_raw(1, 3 * z.channels(), z.to_flat()));
    let hv = tape.leaf(Mat::row_vector(h));
    let (_, gram) = block.basis_and_gram(&mut tape, &bound, zv, hv, g)?;
    Ok(tape.value(gram).data().to_vec())
}

/// `Z_i ⊖ Z_j = [x_i − x_j, v-channels of i, v-channels of j]`.
pub fn ominus(zi: &GeoTensor, zj: &GeoTensor) -> Result<GeoTensor> {
    if zi.channels() == 0 || zj.channels() == 0 {
        return shape_err("⊖ needs a position channel on both operands");
    }
    let mut cols = vec![zi.column(0) - zj.column(0)];
    cols.extend_from_slice(&zi.columns()[1..]);
    cols.extend_from_slice(&zj.columns()[1..]);
    Ok(GeoTensor::new(cols))
}

/// Batched `⊖` on rows of channel-major tensors with `ma` and `mb` channels.
pub fn ominus_rows(tape: &mut Tape, a: Var, ma: usize, b: Var, mb: usize) -> Result<Var> {
    if ma == 0 || mb == 0 {
        return shape_err("⊖ needs a position channel on both operands");
    }
    if tape.shape(a).1 != 3 * ma || tape.shape(b).1 != 3 * mb {
        return shape_err("⊖ operand width mismatch");
    }
    let pa = tape.columns(a, 0, 3)?;
    let pb = tape.columns(b, 0, 3)?;
    let rel = tape.sub(pa, pb)?;
    let mut parts = vec![rel];
    if ma > 1 {
        parts.push(tape.columns(a, 3, 3 * (ma - 1))?);
    }
    if mb > 1 {
        parts.push(tape.columns(b, 3, 3 * (mb - 1))?);
    }
    tape.concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subeq::geo::Vec3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt(cols: &[[f64; 3]]) -> GeoTensor {
        GeoTensor::new(cols.iter().map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }

    #[test]
    fn ominus_reads_the_definition() {
        let zi = gt(&[[1., 0., 0.], [0., 1., 0.]]);
        let zj = gt(&[[0., 0., 0.], [0., 0., 1.]]);
        assert_eq!(
            ominus(&zi, &zj).unwrap(),
            gt(&[[1., 0., 0.], [0., 1., 0.], [0., 0., 1.]])
        );
        let z = gt(&[[0.3, -1., 2.], [4., 5., 6.]]);
        assert_eq!(
            ominus(&z, &z).unwrap(),
            gt(&[[0., 0., 0.], [4., 5., 6.], [4., 5., 6.]])
        );
        assert!(ominus(&GeoTensor::empty(), &z).is_err());
    }

    #[test]
    fn ominus_channel_count() {
        let zi = gt(&[[1., 0., 0.], [0., 1., 0.], [1., 1., 1.]]);
        let zj = gt(&[[0., 0., 0.]]);
        assert_eq!(ominus(&zi, &zj).unwrap().channels(), 3);
    }

    fn constant_block(store: &mut ParamStore, spec: BlockSpec, v: &[f64]) -> ScalarizeBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = MlpShape {
            hidden: 4,
            layers: 2,
            eta_hidden: 3,
            activation: Activation::Silu,
        };
        let block = ScalarizeBlock::new(store, "c", spec, &shape, Init::XavierUniform, &mut rng);
        let Sigma::Mlp(m) = &block.sigma else {
            unreachable!()
        };
        m.zero_last_layer(store);
        let last = m.layers().last().unwrap().bias;
        store.value_mut(last).data_mut().copy_from_slice(v);
        block
    }

    #[test]
    fn selector_sigma_returns_first_channel() {
        let mut store = ParamStore::new();
        let spec = BlockSpec {
            in_channels: 2,
            out_channels: 1,
            scalar_dim: 1,
            extra: 0,
            gravity: false,
            normalize: true,
        };
        let block = constant_block(&mut store, spec, &[1.0, 0.0]);
        let z = gt(&[[1., 2., 3.], [4., 5., 6.]]);
        let (out, _) = scalarize_equivariant(&z, &[0.7], &block, &store).unwrap();
        assert_eq!(out, gt(&[[1., 2., 3.]]));
        let zero = gt(&[[0.; 3], [0.; 3]]);
        let (out, _) = scalarize_equivariant(&zero, &[0.7], &block, &store).unwrap();
        assert_eq!(out, gt(&[[0.; 3]]));
    }

    #[test]
    fn empty_input_yields_gated_gravity() {
        let mut store = ParamStore::new();
        let spec = BlockSpec {
            in_channels: 0,
            out_channels: 1,
            scalar_dim: 2,
            extra: 0,
            gravity: true,
            normalize: true,
        };
        let block = constant_block(&mut store, spec, &[1.0]);
        let g = Gravity::default();
        let h = [0.4, -1.2];
        let (out, _) =
            scalarize_subequivariant(&GeoTensor::empty(), &h, &g, &block, &store).unwrap();
        let gate = block.eta.as_ref().unwrap().eval(&store, &h).unwrap()[0];
        assert!((out.column(0) - g.direction() * gate).amax() < 1e-15);
    }

    #[test]
    fn selector_on_augmented_basis() {
        let mut store = ParamStore::new();
        let spec = BlockSpec {
            in_channels: 1,
            out_channels: 1,
            scalar_dim: 1,
            extra: 0,
            gravity: true,
            normalize: true,
        };
        let block = constant_block(&mut store, spec, &[1.0, 0.0]);
        let (out, _) = scalarize_subequivariant(
            &gt(&[[1., 0., 0.]]),
            &[0.2],
            &Gravity::default(),
            &block,
            &store,
        )
        .unwrap();
        assert_eq!(out, gt(&[[1., 0., 0.]]));
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let mut store = ParamStore::new();
        let spec = BlockSpec {
            in_channels: 2,
            out_channels: 1,
            scalar_dim: 1,
            extra: 0,
            gravity: true,
            normalize: true,
        };
        let block = constant_block(&mut store, spec, &[0.0, 0.0, 0.0]);
        let z = gt(&[[1., 2., 3.]]);
        assert!(matches!(
            scalarize_subequivariant(&z, &[0.0], &Gravity::default(), &block, &store),
            Err(Error::Shape(_))
        ));
        assert!(scalarize_equivariant(&z, &[0.0], &block, &store).is_err());
    }
}
