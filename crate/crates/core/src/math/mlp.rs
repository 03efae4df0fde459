use rand::Rng;

use super::mat::Mat;
use super::tape::{Activation, Tape, Var};
use crate::error::{shape_err, Error, Result};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable tensors with their Adam moment buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    first_moment: Vec<Mat>,
    second_moment: Vec<Mat>,
    step: u64,
}

/// The leaves a [`ParamStore`] occupies on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    base: usize,
    count: usize,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        debug_assert!(id.0 < self.count);
        Var(self.base + id.0)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let (r, c) = value.shape();
        self.names.push(name.into());
        self.values.push(value);
        self.first_moment.push(Mat::zeros(r, c));
        self.second_moment.push(Mat::zeros(r, c));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Pushes every tensor onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let base = tape.len();
        for v in &self.values {
            tape.leaf(v.clone());
        }
        Bound {
            base,
            count: self.values.len(),
        }
    }

    /// Gradients of every tensor, in store order.
    pub fn collect_grads(&self, bound: &Bound, grads: &super::tape::Grads) -> Vec<Mat> {
        self.ids().map(|id| grads.get(bound.var(id))).collect()
    }

    /// Bias-corrected Adam update over all tensors.
    pub fn adam_step(&mut self, grads: &[Mat], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.values.len() {
            return shape_err(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.values.len()
            ));
        }
        for (i, (g, v)) in grads.iter().zip(&self.values).enumerate() {
            if g.shape() != v.shape() {
                return shape_err(format!(
                    "gradient {i} shape {:?} vs {:?}",
                    g.shape(),
                    v.shape()
                ));
            }
            if !g.is_finite() {
                return Err(Error::Training {
                    location: format!("parameter {i} ({})", self.names[i]),
                    message: "non-finite gradient".into(),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = self.values[i].data_mut();
            for k in 0..g.data().len() {
                let gk = g.data()[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// `(name, value)` pairs for serialization.
    pub fn named_tensors(&self) -> Vec<(String, Mat)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Overwrites values by name; every stored tensor must be present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Mat)]) -> Result<()> {
        for i in 0..self.values.len() {
            let Some((_, m)) = tensors.iter().find(|(n, _)| n == &self.names[i]) else {
                return Err(Error::Format(format!("missing tensor {}", self.names[i])));
            };
            if m.shape() != self.values[i].shape() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    self.names[i],
                    m.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = m.clone();
        }
        Ok(())
    }

    /// Drops optimizer state (moments and step counter).
    pub fn reset_optimizer(&mut self) {
        for m in self
            .first_moment
            .iter_mut()
            .chain(self.second_moment.iter_mut())
        {
            for v in m.data_mut() {
                *v = 0.0;
            }
        }
        self.step = 0;
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    XavierUniform,
    /// Xavier everywhere except a zeroed final layer.
    ZeroLast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

/// Multilayer perceptron whose tensors live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    dims: Vec<usize>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last is linear.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let last = l + 1 == n;
                let w = if last && init == Init::ZeroLast {
                    Mat::zeros(fan_in, fan_out)
                } else {
                    xavier(fan_in, fan_out, rng)
                };
                Layer {
                    weight: store.add(format!("{name}.{l}.weight"), w),
                    bias: store.add(format!("{name}.{l}.bias"), Mat::zeros(1, fan_out)),
                    activation: if last { Activation::Identity } else { hidden },
                }
            })
            .collect();
        Self {
            layers,
            dims: dims.to_vec(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Batched forward: `x` is `batch × in`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        if tape.shape(x).1 != self.in_dim() {
            return shape_err(format!(
                "MLP expects width {}, got {}",
                self.in_dim(),
                tape.shape(x).1
            ));
        }
        let mut h = x;
        for layer in &self.layers {
            h = tape.affine(h, bound.var(layer.weight), Some(bound.var(layer.bias)))?;
            h = tape.act(h, layer.activation);
        }
        Ok(h)
    }

    /// Single-input evaluation without a caller-managed tape.
    pub fn eval(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Mat::row_vector(input));
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn zero_last_layer(&self, store: &mut ParamStore) {
        let last = self.layers.last().unwrap();
        for id in [last.weight, last.bias] {
            for v in store.value_mut(id).data_mut() {
                *v = 0.0;
            }
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Mat {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Mat::from_raw(fan_in, fan_out, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "id",
            &[3, 3],
            Activation::Silu,
            Init::XavierUniform,
            &mut rng,
        );
        *store.value_mut(mlp.layers()[0].weight) = Mat::identity(3);
        assert_eq!(
            mlp.eval(&store, &[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "z",
            &[4, 5, 2],
            Activation::Silu,
            Init::XavierUniform,
            &mut rng,
        );
        mlp.zero_last_layer(&mut store);
        store
            .value_mut(mlp.layers()[1].bias)
            .data_mut()
            .copy_from_slice(&[0.25, -3.0]);
        for x in [[0.0; 4], [1.0, -2.0, 3.0, 9.0]] {
            assert_eq!(mlp.eval(&store, &x).unwrap(), vec![0.25, -3.0]);
        }
    }

    #[test]
    fn matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "h",
            &[2, 3, 2],
            Activation::Silu,
            Init::XavierUniform,
            &mut rng,
        );
        for l in mlp.layers() {
            for v in store.value_mut(l.bias).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let x = [0.5, -0.3];
        let w0 = store.value(mlp.layers()[0].weight).clone();
        let b0 = store.value(mlp.layers()[0].bias).clone();
        let w1 = store.value(mlp.layers()[1].weight).clone();
        let b1 = store.value(mlp.layers()[1].bias).clone();
        let silu = |z: f64| z / (1.0 + (-z).exp());
        let hidden: Vec<f64> = (0..3)
            .map(|j| silu(x[0] * w0.get(0, j) + x[1] * w0.get(1, j) + b0.get(0, j)))
            .collect();
        let expected: Vec<f64> = (0..2)
            .map(|k| (0..3).map(|j| hidden[j] * w1.get(j, k)).sum::<f64>() + b1.get(0, k))
            .collect();
        let got = mlp.eval(&store, &x).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "w",
            &[3, 2],
            Activation::Silu,
            Init::XavierUniform,
            &mut rng,
        );
        assert!(matches!(mlp.eval(&store, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn three_layer_silu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "g",
            &[4, 8, 8, 3],
            Activation::Silu,
            Init::XavierUniform,
            &mut rng,
        );
        for _ in 0..10 {
            let x = Mat::from_raw(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
            let y = Mat::from_raw(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect());
            let report = gradient_check(
                &store,
                &[x, y],
                |t, b, v| {
                    let out = mlp.forward(t, b, v[0])?;
                    t.squared_error(out, v[1])
                },
                1e-5,
                10,
                &mut rng,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
        }
    }

    #[test]
    fn zero_gradient_step() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::filled(2, 2, 0.7));
        store
            .adam_step(&[Mat::zeros(2, 2)], &AdamConfig::default())
            .unwrap();
        assert_eq!(store.value(w), &Mat::filled(2, 2, 0.7));
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn hand_computed_adam_step() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::filled(1, 1, 1.0));
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        store.adam_step(&[Mat::filled(1, 1, 1.0)], &cfg).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.value(w).get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::filled(1, 3, 0.2));
        let b = store.add("b", Mat::filled(1, 3, 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let g = Mat::from_raw(1, 3, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
            store
                .adam_step(&[g.clone(), g], &AdamConfig::default())
                .unwrap();
        }
        assert_eq!(store.value(a), store.value(b));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        store.add("first", Mat::zeros(1, 1));
        store.add("second", Mat::zeros(1, 1));
        let err = store
            .adam_step(
                &[Mat::zeros(1, 1), Mat::filled(1, 1, f64::NAN)],
                &AdamConfig::default(),
            )
            .unwrap_err();
        match err {
            Error::Training { location, .. } => assert!(location.contains("parameter 1")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
