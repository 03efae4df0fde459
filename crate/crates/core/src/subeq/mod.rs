//! Geometry, scalarization and symmetry checks.

pub mod equivariance;
pub mod geo;
pub mod lemma5;
pub mod scalarize;

pub use equivariance::{check_equivariance, Group, Sample};
pub use geo::{stack_rows, unstack_rows, GeoTensor, Gravity, Mat3, SubgroupTransform, Vec3};
pub use lemma5::lemma5_witness;
pub use scalarize::{
    ominus, ominus_rows, scalarize_equivariant, scalarize_subequivariant, sigma_gram, BlockSpec,
    MaskedSigma, MlpShape, ScalarizeBlock, Sigma,
};
