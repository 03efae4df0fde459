//! The three-stage hierarchical simulator and the baseline wrappers, behind one
//! next-position predictor with checkpoint I/O.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{BaselineConfig, BaselineKind, BaselineLayer, BASELINE_ITERATIONS};
use crate::error::{shape_err, Error, Result};
use crate::graph::{EdgeIndex, EdgeSets, ParticleSystem, DEFAULT_CUTOFF};
use crate::math::{Activation, Bound, Checkpoint, Init, Mat, Mlp, ParamStore, Tape, Var};
use crate::somp::{Aggregation, EdgeInput, ObjectInputs, SompConfig, SompLayer};
use crate::subeq::{ominus_rows, Gravity, MlpShape, Vec3};

/// Message-passing rounds per stage of the hierarchical model.
pub const SGNN_ITERATIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Sgnn,
    Baseline(BaselineKind),
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Sgnn => "sgnn",
            Variant::Baseline(k) => k.name(),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        if name == "sgnn" {
            Some(Variant::Sgnn)
        } else {
            BaselineKind::from_name(name).map(Variant::Baseline)
        }
    }
}

/// Switches that remove one ingredient of the hierarchical model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// One flat object-aware stage over all edges.
    pub no_hierarchy: bool,
    /// Zero object features in the first stage.
    pub no_object_aware: bool,
    /// Every stage uses the full cutoff graph.
    pub no_edge_separation: bool,
    /// Scalarize without the gravity channel (fully `O(3)`-equivariant blocks).
    pub full_equivariance: bool,
}

/// Which particle states the third stage consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage3Input {
    /// The states the step started from.
    Original,
    /// The first stage's outputs.
    Stage1,
}

/// Height above a horizontal ground plane, appended as the last attribute
/// column by [`Model::featurize`]: `clamp((-g·x - height) / scale, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundFeature {
    pub height: f64,
    pub scale: f64,
}

impl Default for GroundFeature {
    fn default() -> Self {
        Self {
            height: 0.0,
            scale: DEFAULT_CUTOFF,
        }
    }
}

/// Everything needed to rebuild a model's structure; stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Width of the attribute rows the network consumes, including the ground column.
    pub attr_dim: usize,
    /// Graph cutoff used when the model drives a rollout.
    pub cutoff: f64,
    pub ground: Option<GroundFeature>,
    pub hidden_scalars: usize,
    pub message_channels: usize,
    pub message_scalars: usize,
    pub iterations: usize,
    pub shape: MlpShape,
    pub normalize: bool,
    /// Positions and velocities are divided by this inside the network.
    pub length_scale: f64,
    pub gravity: Gravity,
    pub ablations: Ablations,
    pub stage3_input: Stage3Input,
    pub aggregation: Aggregation,
    pub zero_init_update: bool,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(variant: Variant, attr_dim: usize) -> Self {
        Self {
            variant,
            attr_dim,
            cutoff: DEFAULT_CUTOFF,
            ground: None,
            hidden_scalars: 16,
            message_channels: 2,
            message_scalars: 16,
            iterations: match variant {
                Variant::Sgnn => SGNN_ITERATIONS,
                Variant::Baseline(_) => BASELINE_ITERATIONS,
            },
            shape: MlpShape::default(),
            normalize: true,
            length_scale: DEFAULT_CUTOFF,
            gravity: Gravity::default(),
            ablations: Ablations::default(),
            stage3_input: Stage3Input::Original,
            aggregation: Aggregation::Sum,
            zero_init_update: true,
            seed: 0,
        }
    }

    pub fn to_header(&self) -> String {
        let d = self.gravity.direction();
        let a = &self.ablations;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("variant", self.variant.name().into());
        kv("attr_dim", self.attr_dim.to_string());
        kv("cutoff", self.cutoff.to_string());
        kv(
            "ground",
            match self.ground {
                None => "none".into(),
                Some(g) => format!("{},{}", g.height, g.scale),
            },
        );
        kv("hidden_scalars", self.hidden_scalars.to_string());
        kv("message_channels", self.message_channels.to_string());
        kv("message_scalars", self.message_scalars.to_string());
        kv("iterations", self.iterations.to_string());
        kv("hidden", self.shape.hidden.to_string());
        kv("mlp_layers", self.shape.layers.to_string());
        kv("eta_hidden", self.shape.eta_hidden.to_string());
        kv("activation", self.shape.activation.name().into());
        kv("normalize", self.normalize.to_string());
        kv("length_scale", self.length_scale.to_string());
        kv("gravity_direction", format!("{},{},{}", d.x, d.y, d.z));
        kv("gravity_magnitude", self.gravity.magnitude().to_string());
        kv("no_hierarchy", a.no_hierarchy.to_string());
        kv("no_object_aware", a.no_object_aware.to_string());
        kv("no_edge_separation", a.no_edge_separation.to_string());
        kv("full_equivariance", a.full_equivariance.to_string());
        kv(
            "stage3_input",
            match self.stage3_input {
                Stage3Input::Original => "original",
                Stage3Input::Stage1 => "stage1",
            }
            .into(),
        );
        kv(
            "aggregation",
            match self.aggregation {
                Aggregation::Sum => "sum",
                Aggregation::Mean => "mean",
            }
            .into(),
        );
        kv("zero_init_update", self.zero_init_update.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        let mut pairs = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fmt(format!("header line without '=': {line}")))?;
            if pairs.insert(k.trim(), v.trim()).is_some() {
                return Err(fmt(format!("duplicate header key {k}")));
            }
        }
        let mut take = |k: &str| -> Result<&str> {
            pairs
                .remove(k)
                .ok_or_else(|| fmt(format!("header lacks {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad value for {k}: {v}")))
        }
        let variant_name = take("variant")?;
        let variant = Variant::from_name(variant_name)
            .ok_or_else(|| fmt(format!("unknown variant {variant_name}")))?;
        let mut spec = ModelSpec::new(variant, num("attr_dim", take("attr_dim")?)?);
        spec.cutoff = num("cutoff", take("cutoff")?)?;
        spec.ground = match take("ground")? {
            "none" => None,
            v => {
                let (h, sc) = v
                    .split_once(',')
                    .ok_or_else(|| fmt(format!("bad value for ground: {v}")))?;
                Some(GroundFeature {
                    height: num("ground", h.trim())?,
                    scale: num("ground", sc.trim())?,
                })
            }
        };
        spec.hidden_scalars = num("hidden_scalars", take("hidden_scalars")?)?;
        spec.message_channels = num("message_channels", take("message_channels")?)?;
        spec.message_scalars = num("message_scalars", take("message_scalars")?)?;
        spec.iterations = num("iterations", take("iterations")?)?;
        spec.shape.hidden = num("hidden", take("hidden")?)?;
        spec.shape.layers = num("mlp_layers", take("mlp_layers")?)?;
        spec.shape.eta_hidden = num("eta_hidden", take("eta_hidden")?)?;
        let act = take("activation")?;
        spec.shape.activation =
            Activation::from_name(act).ok_or_else(|| fmt(format!("unknown activation {act}")))?;
        spec.normalize = num("normalize", take("normalize")?)?;
        spec.length_scale = num("length_scale", take("length_scale")?)?;
        let dir: Vec<f64> = take("gravity_direction")?
            .split(',')
            .map(|c| num("gravity_direction", c.trim()))
            .collect::<Result<_>>()?;
        if dir.len() != 3 {
            return Err(fmt("gravity_direction needs three components".into()));
        }
        let magnitude = num("gravity_magnitude", take("gravity_magnitude")?)?;
        spec.gravity = Gravity::new(Vec3::new(dir[0], dir[1], dir[2]), magnitude)
            .map_err(|e| fmt(e.to_string()))?;
        spec.ablations = Ablations {
            no_hierarchy: num("no_hierarchy", take("no_hierarchy")?)?,
            no_object_aware: num("no_object_aware", take("no_object_aware")?)?,
            no_edge_separation: num("no_edge_separation", take("no_edge_separation")?)?,
            full_equivariance: num("full_equivariance", take("full_equivariance")?)?,
        };
        spec.stage3_input = match take("stage3_input")? {
            "original" => Stage3Input::Original,
            "stage1" => Stage3Input::Stage1,
            other => return Err(fmt(format!("unknown stage3_input {other}"))),
        };
        spec.aggregation = match take("aggregation")? {
            "sum" => Aggregation::Sum,
            "mean" => Aggregation::Mean,
            other => return Err(fmt(format!("unknown aggregation {other}"))),
        };
        spec.zero_init_update = num("zero_init_update", take("zero_init_update")?)?;
        spec.seed = num("seed", take("seed")?)?;
        if let Some(k) = pairs.keys().next() {
            return Err(fmt(format!("unknown header key {k}")));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.hidden_scalars == 0 || self.message_channels == 0 || self.message_scalars == 0 {
            return bad("widths must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.shape.layers == 0 || self.shape.hidden == 0 || self.shape.eta_hidden == 0 {
            return bad("MLP sizes must be positive");
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return bad("length_scale must be positive");
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return bad("cutoff must be positive");
        }
        if let Some(g) = self.ground {
            if self.attr_dim == 0 {
                return bad("the ground feature needs an attribute column");
            }
            if !(g.scale > 0.0 && g.scale.is_finite() && g.height.is_finite()) {
                return bad("ground scale must be positive and height finite");
            }
        }
        if self.variant != Variant::Sgnn && self.ablations != Ablations::default() {
            return bad("ablations apply to the hierarchical model only");
        }
        if self.attr_dim > 1 << 16 || self.hidden_scalars > 1 << 16 || self.shape.hidden > 1 << 16 {
            return bad("implausibly large width");
        }
        Ok(())
    }

    fn gravity_blocks(&self) -> bool {
        !self.ablations.full_equivariance
    }

    fn somp_config(&self, use_objects: bool, edge_input: EdgeInput) -> SompConfig {
        let d = self.hidden_scalars;
        SompConfig {
            node_channels: 2,
            node_scalars: d,
            object_channels: 2,
            object_scalars: d,
            use_objects,
            edge_input,
            message_channels: self.message_channels,
            message_scalars: self.message_scalars,
            iterations: self.iterations,
            gravity: self.gravity_blocks(),
            normalize: self.normalize,
            aggregation: self.aggregation,
            shape: self.shape,
            zero_init_update: self.zero_init_update,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Network {
    Hierarchical {
        stage1: SompLayer,
        stage2: SompLayer,
        stage3: SompLayer,
    },
    Flat(SompLayer),
    Baseline(BaselineLayer),
}

/// One frame prepared for the network.
#[derive(Clone, Debug)]
pub struct Frame {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub attrs: Mat,
    pub object_of: Arc<[usize]>,
    pub objects: usize,
    pub edges: EdgeSets,
}

impl Frame {
    pub fn new(sys: &ParticleSystem, edges: EdgeSets) -> Result<Self> {
        sys.validate()?;
        let n = sys.len();
        if edges
            .inter
            .iter()
            .chain(&edges.inner)
            .any(|&(i, j)| i >= n || j >= n)
            || edges
                .obj
                .iter()
                .any(|&(k, l)| k >= sys.objects || l >= sys.objects)
        {
            return shape_err("edge set does not belong to this system");
        }
        Ok(Self {
            positions: sys.positions.clone(),
            velocities: sys.velocities.clone(),
            attrs: sys.attrs.clone(),
            object_of: sys.object_of.clone().into(),
            objects: sys.objects,
            edges,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A trainable next-position predictor.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    pub store: ParamStore,
    embed: Mlp,
    network: Network,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.store.named_tensors() == other.store.named_tensors()
    }
}

impl Model {
    /// Fresh parameters drawn from `spec.seed`.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let d = spec.hidden_scalars;
        let embed = Mlp::new(
            &mut store,
            "embed",
            &[spec.attr_dim, d],
            spec.shape.activation,
            Init::XavierUniform,
            &mut rng,
        );
        let network = match spec.variant {
            Variant::Baseline(kind) => {
                let cfg = BaselineConfig {
                    node_scalars: d,
                    message_channels: spec.message_channels,
                    message_scalars: spec.message_scalars,
                    iterations: spec.iterations,
                    normalize: spec.normalize,
                    shape: spec.shape,
                    zero_init_update: spec.zero_init_update,
                };
                Network::Baseline(BaselineLayer::new(
                    &mut store,
                    kind.name(),
                    kind,
                    cfg,
                    &mut rng,
                ))
            }
            Variant::Sgnn if spec.ablations.no_hierarchy => Network::Flat(SompLayer::new(
                &mut store,
                "flat",
                spec.somp_config(true, EdgeInput::Nodes),
                &mut rng,
            )),
            Variant::Sgnn => {
                let stage1 = SompLayer::new(
                    &mut store,
                    "stage1",
                    spec.somp_config(true, EdgeInput::Nodes),
                    &mut rng,
                );
                let stage2 = SompLayer::new(
                    &mut store,
                    "stage2",
                    spec.somp_config(
                        false,
                        EdgeInput::Given {
                            channels: 3,
                            scalars: 2 * d,
                        },
                    ),
                    &mut rng,
                );
                let stage3 = SompLayer::new(
                    &mut store,
                    "stage3",
                    spec.somp_config(true, EdgeInput::Nodes),
                    &mut rng,
                );
                Network::Hierarchical {
                    stage1,
                    stage2,
                    stage3,
                }
            }
        };
        Ok(Self {
            spec,
            store,
            embed,
            network,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn gravity(&self) -> &Gravity {
        &self.spec.gravity
    }

    pub fn embedding(&self) -> &Mlp {
        &self.embed
    }

    /// The three stages of the hierarchical model, if this is one.
    pub fn stages(&self) -> Option<(&SompLayer, &SompLayer, &SompLayer)> {
        match &self.network {
            Network::Hierarchical {
                stage1,
                stage2,
                stage3,
            } => Some((stage1, stage2, stage3)),
            _ => None,
        }
    }

    /// Final linear layers of every update function, for tests that need a
    /// non-trivial or an all-zero model.
    pub fn update_layers(&self) -> Vec<&Mlp> {
        use crate::subeq::Sigma;
        fn sigma_mlp(l: &SompLayer) -> Option<&Mlp> {
            match &l.psi.sigma {
                Sigma::Mlp(m) => Some(m),
                _ => None,
            }
        }
        match &self.network {
            Network::Hierarchical {
                stage1,
                stage2,
                stage3,
            } => [stage1, stage2, stage3]
                .into_iter()
                .filter_map(sigma_mlp)
                .collect(),
            Network::Flat(l) => sigma_mlp(l).into_iter().collect(),
            Network::Baseline(BaselineLayer::Gns(l)) => vec![&l.psi],
            Network::Baseline(BaselineLayer::Gmn(l)) => match &l.psi.sigma {
                Sigma::Mlp(m) => vec![m],
                _ => vec![],
            },
            Network::Baseline(BaselineLayer::Egnn(l)) => {
                let mut v = vec![&l.phi_x, &l.phi_h];
                v.extend(&l.phi_g);
                v
            }
        }
    }

    /// Re-draws every update function's final layer (they start at zero by default).
    pub fn randomize_update_layers(&mut self, seed: u64, scale: f64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = self
            .update_layers()
            .iter()
            .flat_map(|m| {
                let l = m.layers().last().unwrap();
                [l.weight, l.bias]
            })
            .collect();
        for id in ids {
            for v in self.store.value_mut(id).data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    /// Records a forward pass; returns the `N × 3` predicted next positions.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, frame: &Frame) -> Result<Var> {
        let n = frame.len();
        if frame.attrs.shape() != (n, self.spec.attr_dim) {
            return shape_err(format!(
                "model expects {n}x{} attributes, got {:?}",
                self.spec.attr_dim,
                frame.attrs.shape()
            ));
        }
        if frame.velocities.len() != n || frame.object_of.len() != n {
            return shape_err("frame arrays disagree in length");
        }
        let scale = 1.0 / self.spec.length_scale;
        let mut zdata = Vec::with_capacity(6 * n);
        for (x, v) in frame.positions.iter().zip(&frame.velocities) {
            zdata.extend((x * scale).iter());
            zdata.extend((v * scale).iter());
        }
        let z0 = tape.leaf(Mat::from_vec(n, 6, zdata)?);
        let attrs = tape.leaf(frame.attrs.clone());
        let h0 = self.embed.forward(tape, bound, attrs)?;
        let g = self.spec.gravity_blocks().then_some(&self.spec.gravity);
        let edges = &frame.edges;

        let z_out = match &self.network {
            Network::Baseline(layer) => {
                let all = EdgeIndex::new(&edges.all());
                let g = self.spec.variant_gravity();
                layer.forward(tape, bound, z0, h0, &all, g.as_ref())?.0
            }
            Network::Flat(layer) => {
                let objects =
                    self.pool(tape, z0, h0, frame, self.spec.ablations.no_object_aware)?;
                let all = EdgeIndex::new(&edges.all());
                layer
                    .forward(tape, bound, z0, h0, Some(&objects), &all, None, g)?
                    .0
            }
            Network::Hierarchical {
                stage1,
                stage2,
                stage3,
            } => {
                let separated = !self.spec.ablations.no_edge_separation;
                let (inter, obj, inner) = if separated {
                    (edges.inter.clone(), edges.obj.clone(), edges.inner.clone())
                } else {
                    let all = edges.all();
                    let obj = EdgeSets::object_pairs(&all, &frame.object_of);
                    (all.clone(), obj, all)
                };
                let objects =
                    self.pool(tape, z0, h0, frame, self.spec.ablations.no_object_aware)?;
                let (z1, h1) = stage1.forward(
                    tape,
                    bound,
                    z0,
                    h0,
                    Some(&objects),
                    &EdgeIndex::new(&inter),
                    None,
                    g,
                )?;
                let clean = self.pool(tape, z0, h0, frame, false)?;
                let given = pool_edge_features(tape, z1, h1, &inter, &obj, &frame.object_of)?;
                let (c2, s2) = stage2.forward(
                    tape,
                    bound,
                    clean.geo,
                    clean.scalars,
                    None,
                    &EdgeIndex::new(&obj),
                    Some(given),
                    g,
                )?;
                let updated = ObjectInputs {
                    geo: c2,
                    scalars: s2,
                    object_of: frame.object_of.clone(),
                };
                let (z3_in, h3_in) = match self.spec.stage3_input {
                    Stage3Input::Original => (z0, h0),
                    Stage3Input::Stage1 => (z1, h1),
                };
                stage3
                    .forward(
                        tape,
                        bound,
                        z3_in,
                        h3_in,
                        Some(&updated),
                        &EdgeIndex::new(&inner),
                        None,
                        g,
                    )?
                    .0
            }
        };
        // x + ℓ·Δx, so a zero update returns the input positions exactly.
        let x_raw: Vec<f64> = frame
            .positions
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect();
        let x_raw = tape.leaf(Mat::from_vec(n, 3, x_raw)?);
        let x_out = tape.columns(z_out, 0, 3)?;
        let x_in = tape.columns(z0, 0, 3)?;
        let delta = tape.sub(x_out, x_in)?;
        let delta = tape.scale(delta, self.spec.length_scale);
        tape.add(x_raw, delta)
    }

    /// Object features `C_k = mean [x, v]`, `c_k = Σ h`, or zeros.
    fn pool(
        &self,
        tape: &mut Tape,
        z: Var,
        h: Var,
        frame: &Frame,
        zero: bool,
    ) -> Result<ObjectInputs> {
        let m = frame.objects;
        let (geo, scalars) = if zero {
            (
                tape.leaf(Mat::zeros(m, 6)),
                tape.leaf(Mat::zeros(m, self.spec.hidden_scalars)),
            )
        } else {
            let mut count = vec![0.0; m];
            for &k in frame.object_of.iter() {
                count[k] += 1.0;
            }
            let inv = tape.leaf(Mat::from_vec(
                m,
                1,
                count.iter().map(|c| 1.0 / c).collect(),
            )?);
            let sum = tape.scatter_add(z, frame.object_of.clone(), m)?;
            (
                tape.row_scale(inv, sum)?,
                tape.scatter_add(h, frame.object_of.clone(), m)?,
            )
        };
        Ok(ObjectInputs {
            geo,
            scalars,
            object_of: frame.object_of.clone(),
        })
    }

    /// Appends the ground column when the spec asks for one.
    pub fn featurize(&self, sys: &ParticleSystem) -> Result<ParticleSystem> {
        let Some(ground) = self.spec.ground else {
            return Ok(sys.clone());
        };
        let n = sys.len();
        let w = sys.attr_dim();
        let down = self.spec.gravity.direction();
        let mut data = Vec::with_capacity(n * (w + 1));
        for (i, p) in sys.positions.iter().enumerate() {
            data.extend_from_slice(sys.attrs.row(i));
            let above = -down.dot(p) - ground.height;
            data.push((above / ground.scale).clamp(0.0, 1.0));
        }
        let mut out = sys.clone();
        out.attrs = Mat::from_vec(n, w + 1, data)?;
        Ok(out)
    }

    /// Next positions for one system.
    pub fn predict_step(&self, sys: &ParticleSystem, edges: &EdgeSets) -> Result<Vec<Vec3>> {
        let frame = Frame::new(sys, edges.clone())?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, &frame)?;
        let v = tape.value(out);
        let pred: Vec<Vec3> = (0..v.rows())
            .map(|r| Vec3::new(v.get(r, 0), v.get(r, 1), v.get(r, 2)))
            .collect();
        Ok(pred)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: self.spec.to_header(),
            tensors: self.store.named_tensors(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec = ModelSpec::from_header(&ckpt.header)?;
        let mut model = Self::new(spec)?;
        if ckpt.tensors.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, the {} model has {}",
                ckpt.tensors.len(),
                model.spec.variant.name(),
                model.store.len()
            )));
        }
        model.store.load_named(&ckpt.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl ModelSpec {
    fn variant_gravity(&self) -> Option<Gravity> {
        match self.variant {
            Variant::Baseline(k) if k.subequivariant() => Some(self.gravity),
            _ => None,
        }
    }
}

/// Mean over inter edges `(i, j)` with `o(i) = k`, `o(j) = l` of `Z_i ⊖ Z_j` and
/// `h_i ‖ h_j`, one row per object edge `(k, l)`.
pub fn pool_edge_features(
    tape: &mut Tape,
    z: Var,
    h: Var,
    inter: &[(usize, usize)],
    obj: &[(usize, usize)],
    object_of: &[usize],
) -> Result<(Var, Var)> {
    let d = tape.shape(h).1;
    if obj.is_empty() {
        return Ok((tape.leaf(Mat::zeros(0, 9)), tape.leaf(Mat::zeros(0, 2 * d))));
    }
    let idx = EdgeIndex::new(inter);
    let target: Vec<usize> = inter
        .iter()
        .map(|&(i, j)| {
            obj.binary_search(&(object_of[i], object_of[j]))
                .map_err(|_| Error::Contract(format!("edge ({i},{j}) has no object edge")))
        })
        .collect::<Result<_>>()?;
    let mut count = vec![0.0; obj.len()];
    for &t in &target {
        count[t] += 1.0;
    }
    if count.contains(&0.0) {
        return Err(Error::Contract("object edge without particle edges".into()));
    }
    let target: Arc<[usize]> = target.into();
    let zi = tape.gather(z, idx.receivers.clone())?;
    let zj = tape.gather(z, idx.senders.clone())?;
    let rel = ominus_rows(tape, zi, 2, zj, 2)?;
    let hi = tape.gather(h, idx.receivers.clone())?;
    let hj = tape.gather(h, idx.senders.clone())?;
    let hij = tape.concat(&[hi, hj])?;
    let inv = tape.leaf(Mat::from_vec(
        obj.len(),
        1,
        count.iter().map(|c| 1.0 / c).collect(),
    )?);
    let sz = tape.scatter_add(rel, target.clone(), obj.len())?;
    let sh = tape.scatter_add(hij, target, obj.len())?;
    Ok((tape.row_scale(inv, sz)?, tape.row_scale(inv, sh)?))
}
