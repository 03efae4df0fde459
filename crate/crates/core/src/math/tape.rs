//! Reverse-mode differentiation over batched dense matrices.
//!
//! Every node holds a `rows × cols` value; batched geometric quantities use
//! one row per item with channel-major 3D columns (`[c0x, c0y, c0z, c1x, ...]`).

use std::sync::Arc;

use super::mat::{gemm, Mat};
use crate::error::{shape_err, Error, Result};

/// Frobenius norms below this are left unnormalized.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s + x * s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "identity" => Activation::Identity,
            "relu" => Activation::Relu,
            "silu" => Activation::Silu,
            "tanh" => Activation::Tanh,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    RowScale {
        s: Var,
        x: Var,
    },
    Gather {
        x: Var,
        idx: Arc<[usize]>,
    },
    ScatterAdd {
        x: Var,
        idx: Arc<[usize]>,
        n: usize,
    },
    Concat(Vec<Var>),
    ColumnMap {
        x: Var,
        map: Arc<[Option<usize>]>,
    },
    Gram {
        z: Var,
        m: usize,
    },
    Normalize(Var),
    Combine {
        z: Var,
        v: Var,
        m: usize,
        out: usize,
    },
    SquaredError {
        pred: Var,
        target: Var,
    },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Mat,
}

/// Records primitive operations for a reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient of `var`; zeros when the output does not depend on it.
    pub fn get(&self, var: Var) -> Mat {
        match self.grads.get(var.0) {
            Some(Some(g)) => g.clone(),
            _ => {
                let (r, c) = self.shapes[var.0];
                Mat::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, var: Var) -> Option<&Mat> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Adds an input or parameter node.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Var {
        let value = compute(&op, |v| &self.nodes[v.0].value);
        self.push(op, value)
    }

    /// `x · w + b`, with `b` a `1 × out` row broadcast over the batch.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (_, xc) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if xc != wr {
            return shape_err(format!("affine input width {xc} vs weight rows {wr}"));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, wc) {
                return shape_err(format!("bias shape {:?} vs width {wc}", self.shape(b)));
            }
        }
        Ok(self.record(Op::Affine { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.record(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.record(Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.record(Op::Scale(a, s))
    }

    pub fn act(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        self.record(Op::Act(a, act))
    }

    /// Multiplies row `r` of `x` by `s[r, 0]`.
    pub fn row_scale(&mut self, s: Var, x: Var) -> Result<Var> {
        let (sr, sc) = self.shape(s);
        if sc != 1 || sr != self.shape(x).0 {
            return shape_err(format!("row_scale {sr}x{sc} against {:?}", self.shape(x)));
        }
        Ok(self.record(Op::RowScale { s, x }))
    }

    /// Selects rows `idx` of `x`.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let rows = self.shape(x).0;
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err(format!("gather index {bad} out of {rows} rows"));
        }
        Ok(self.record(Op::Gather { x, idx }))
    }

    /// Sums row `r` of `x` into output row `idx[r]` of an `n`-row result.
    pub fn scatter_add(&mut self, x: Var, idx: Arc<[usize]>, n: usize) -> Result<Var> {
        if idx.len() != self.shape(x).0 {
            return shape_err("scatter index length differs from rows");
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err(format!("scatter index {bad} out of {n} rows"));
        }
        Ok(self.record(Op::ScatterAdd { x, idx, n }))
    }

    /// Concatenates along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let rows = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return shape_err("concat row mismatch");
        }
        Ok(self.record(Op::Concat(parts.to_vec())))
    }

    /// Output column `c` is input column `map[c]`, or zero for `None`.
    pub fn column_map(&mut self, x: Var, map: Arc<[Option<usize>]>) -> Result<Var> {
        let cols = self.shape(x).1;
        if map.iter().flatten().any(|&c| c >= cols) {
            return shape_err("column map index out of range");
        }
        Ok(self.record(Op::ColumnMap { x, map }))
    }

    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let cols = self.shape(x).1;
        if start + len > cols {
            return shape_err(format!("columns {start}..{} of {cols}", start + len));
        }
        if start == 0 && len == cols {
            return Ok(x);
        }
        let map: Arc<[Option<usize>]> = (start..start + len).map(Some).collect();
        Ok(self.record(Op::ColumnMap { x, map }))
    }

    /// Per-row Gram matrix `ZᵀZ` of `m` 3D channels, flattened row-major (`m²` columns).
    pub fn gram(&mut self, z: Var, m: usize) -> Result<Var> {
        if self.shape(z).1 != 3 * m {
            return shape_err(format!("gram of {m} channels on width {}", self.shape(z).1));
        }
        Ok(self.record(Op::Gram { z, m }))
    }

    /// Divides each row by its Euclidean norm unless the norm is below [`NORM_FLOOR`].
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        self.record(Op::Normalize(x))
    }

    /// Per-row `Z · V` for `Z` with `m` channels and `V` an `m × out` block.
    pub fn combine(&mut self, z: Var, v: Var, m: usize, out: usize) -> Result<Var> {
        let (zr, zc) = self.shape(z);
        let (vr, vc) = self.shape(v);
        if zc != 3 * m || vc != m * out || zr != vr {
            return shape_err(format!(
                "combine {zr}x{zc} with {vr}x{vc} for m={m}, out={out}"
            ));
        }
        Ok(self.record(Op::Combine { z, v, m, out }))
    }

    /// Mean over rows of the per-row squared error sum.
    pub fn squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "squared_error")?;
        Ok(self.record(Op::SquaredError { pred, target }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.record(Op::Sum(x))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    /// Recomputes every non-leaf value from the leaves.
    pub fn replay(&self) -> Vec<Mat> {
        let mut values: Vec<Mat> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => compute(op, |v| &values[v.0]),
            };
            values.push(v);
        }
        values
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: Mat) -> Result<Grads> {
        if output.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "backward from node {} but the tape holds {} nodes",
                output.0,
                self.nodes.len()
            )));
        }
        if seed.shape() != self.shape(output) {
            return shape_err("backward seed shape differs from output");
        }
        let mut grads: Vec<Option<Mat>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    /// Backward from a `1 × 1` output.
    pub fn backward_scalar(&self, output: Var) -> Result<Grads> {
        if output.0 < self.nodes.len() && self.shape(output) != (1, 1) {
            return shape_err("backward_scalar needs a 1x1 output");
        }
        self.backward(output, Mat::filled(1, 1, 1.0))
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Affine { x, w, b } => {
                let xv = val(x);
                let wv = val(w);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                gemm(g, false, wv, true, &mut gx, 0.0);
                accumulate(grads, x, gx);
                let mut gw = Mat::zeros(wv.rows(), wv.cols());
                gemm(xv, true, g, false, &mut gw, 0.0);
                accumulate(grads, w, gw);
                if let Some(b) = b {
                    let mut gb = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.scale(-1.0));
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.scale(s)),
            &Op::Act(a, act) => {
                let x = val(a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, g)| g * act.derivative(*x))
                    .collect();
                accumulate(grads, a, Mat::from_raw(x.rows(), x.cols(), data));
            }
            &Op::RowScale { s, x } => {
                let sv = val(s);
                let xv = val(x);
                let mut gs = Mat::zeros(sv.rows(), 1);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let sr = sv.get(r, 0);
                    let gr = g.row(r);
                    gs.set(r, 0, gr.iter().zip(xv.row(r)).map(|(a, b)| a * b).sum());
                    for (o, gv) in gx.row_mut(r).iter_mut().zip(gr) {
                        *o = gv * sr;
                    }
                }
                accumulate(grads, s, gs);
                accumulate(grads, x, gx);
            }
            Op::Gather { x, idx } => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, gv) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ScatterAdd { x, idx, .. } => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    gx.row_mut(r).copy_from_slice(g.row(i));
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = val(p).shape();
                    let mut gp = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        gp.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    accumulate(grads, p, gp);
                }
            }
            Op::ColumnMap { x, map } => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let gr = g.row(r);
                    let out = gx.row_mut(r);
                    for (c, src) in map.iter().enumerate() {
                        if let Some(s) = src {
                            out[*s] += gr[c];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            &Op::Gram { z, m } => {
                let zv = val(z);
                let mut gz = Mat::zeros(zv.rows(), zv.cols());
                for r in 0..zv.rows() {
                    let zr = zv.row(r);
                    let gr = g.row(r);
                    let out = gz.row_mut(r);
                    for a in 0..m {
                        for b in 0..m {
                            let w = gr[a * m + b] + gr[b * m + a];
                            if w == 0.0 {
                                continue;
                            }
                            for d in 0..3 {
                                out[3 * a + d] += w * zr[3 * b + d];
                            }
                        }
                    }
                }
                accumulate(grads, z, gz);
            }
            &Op::Normalize(x) => {
                let xv = val(x);
                let yv = &self.nodes[idx].value;
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = norm(xv.row(r));
                    let gr = g.row(r);
                    let out = gx.row_mut(r);
                    if n < NORM_FLOOR {
                        out.copy_from_slice(gr);
                        continue;
                    }
                    let yr = yv.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                accumulate(grads, x, gx);
            }
            &Op::Combine { z, v, m, out } => {
                let zv = val(z);
                let vv = val(v);
                let mut gz = Mat::zeros(zv.rows(), zv.cols());
                let mut gv = Mat::zeros(vv.rows(), vv.cols());
                for r in 0..zv.rows() {
                    let zr = zv.row(r);
                    let vr = vv.row(r);
                    let gr = g.row(r);
                    let gzr = gz.row_mut(r);
                    for a in 0..m {
                        for c in 0..out {
                            let coef = vr[a * out + c];
                            for d in 0..3 {
                                gzr[3 * a + d] += gr[3 * c + d] * coef;
                            }
                        }
                    }
                    let gvr = gv.row_mut(r);
                    for a in 0..m {
                        for c in 0..out {
                            gvr[a * out + c] = (0..3).map(|d| gr[3 * c + d] * zr[3 * a + d]).sum();
                        }
                    }
                }
                accumulate(grads, z, gz);
                accumulate(grads, v, gv);
            }
            &Op::SquaredError { pred, target } => {
                let p = val(pred);
                let t = val(target);
                let rows = p.rows().max(1) as f64;
                let s = 2.0 * g.get(0, 0) / rows;
                let gp = Mat::from_raw(
                    p.rows(),
                    p.cols(),
                    p.data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| s * (a - b))
                        .collect(),
                );
                accumulate(grads, target, gp.scale(-1.0));
                accumulate(grads, pred, gp);
            }
            &Op::Sum(x) => {
                let (r, c) = val(x).shape();
                accumulate(grads, x, Mat::filled(r, c, g.get(0, 0)));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn compute<'a>(op: &Op, val: impl Fn(Var) -> &'a Mat) -> Mat {
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        &Op::Affine { x, w, b } => {
            let xv = val(x);
            let wv = val(w);
            let mut out = match b {
                Some(b) => {
                    let bv = val(b);
                    let mut out = Mat::zeros(xv.rows(), wv.cols());
                    for r in 0..out.rows() {
                        out.row_mut(r).copy_from_slice(bv.data());
                    }
                    out
                }
                None => Mat::zeros(xv.rows(), wv.cols()),
            };
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            gemm(xv, false, wv, false, &mut out, beta);
            out
        }
        &Op::Add(a, b) => {
            let mut out = val(a).clone();
            out.add_assign(val(b));
            out
        }
        &Op::Sub(a, b) => val(a).sub(val(b)),
        &Op::Scale(a, s) => val(a).scale(s),
        &Op::Act(a, act) => {
            let x = val(a);
            Mat::from_raw(
                x.rows(),
                x.cols(),
                x.data().iter().map(|v| act.apply(*v)).collect(),
            )
        }
        &Op::RowScale { s, x } => {
            let sv = val(s);
            let xv = val(x);
            let mut out = xv.clone();
            for r in 0..xv.rows() {
                let sr = sv.get(r, 0);
                for o in out.row_mut(r) {
                    *o *= sr;
                }
            }
            out
        }
        Op::Gather { x, idx } => {
            let xv = val(*x);
            let mut out = Mat::zeros(idx.len(), xv.cols());
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).copy_from_slice(xv.row(i));
            }
            out
        }
        Op::ScatterAdd { x, idx, n } => {
            let xv = val(*x);
            let mut out = Mat::zeros(*n, xv.cols());
            for (r, &i) in idx.iter().enumerate() {
                for (o, v) in out.row_mut(i).iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            out
        }
        Op::Concat(parts) => {
            let rows = val(parts[0]).rows();
            let cols: usize = parts.iter().map(|&p| val(p).cols()).sum();
            let mut out = Mat::zeros(rows, cols);
            for r in 0..rows {
                let mut offset = 0;
                let dst = out.row_mut(r);
                for &p in parts {
                    let src = val(p).row(r);
                    dst[offset..offset + src.len()].copy_from_slice(src);
                    offset += src.len();
                }
            }
            out
        }
        Op::ColumnMap { x, map } => {
            let xv = val(*x);
            let mut out = Mat::zeros(xv.rows(), map.len());
            for r in 0..xv.rows() {
                let src = xv.row(r);
                for (o, m) in out.row_mut(r).iter_mut().zip(map.iter()) {
                    if let Some(c) = m {
                        *o = src[*c];
                    }
                }
            }
            out
        }
        &Op::Gram { z, m } => {
            let zv = val(z);
            let mut out = Mat::zeros(zv.rows(), m * m);
            for r in 0..zv.rows() {
                let zr = zv.row(r);
                let o = out.row_mut(r);
                for a in 0..m {
                    for b in a..m {
                        let d = zr[3 * a] * zr[3 * b]
                            + zr[3 * a + 1] * zr[3 * b + 1]
                            + zr[3 * a + 2] * zr[3 * b + 2];
                        o[a * m + b] = d;
                        o[b * m + a] = d;
                    }
                }
            }
            out
        }
        &Op::Normalize(x) => {
            let xv = val(x);
            let mut out = xv.clone();
            for r in 0..xv.rows() {
                let n = norm(xv.row(r));
                if n >= NORM_FLOOR {
                    for o in out.row_mut(r) {
                        *o /= n;
                    }
                }
            }
            out
        }
        &Op::Combine { z, v, m, out: k } => {
            let zv = val(z);
            let vv = val(v);
            let mut out = Mat::zeros(zv.rows(), 3 * k);
            for r in 0..zv.rows() {
                let zr = zv.row(r);
                let vr = vv.row(r);
                let o = out.row_mut(r);
                for c in 0..k {
                    for a in 0..m {
                        let coef = vr[a * k + c];
                        o[3 * c] += zr[3 * a] * coef;
                        o[3 * c + 1] += zr[3 * a + 1] * coef;
                        o[3 * c + 2] += zr[3 * a + 2] * coef;
                    }
                }
            }
            out
        }
        &Op::SquaredError { pred, target } => {
            let p = val(pred);
            let t = val(target);
            let total: f64 = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Mat::filled(1, 1, total / p.rows().max(1) as f64)
        }
        &Op::Sum(x) => Mat::filled(1, 1, val(x).data().iter().sum()),
    }
}
