//! Central finite-difference checks of tape gradients.

use rand::Rng;

use super::mat::Mat;
use super::mlp::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{shape_err, Result};

/// Outcome of one gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    /// Worst relative error over all probes.
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Relative error with a small absolute floor so that two near-zero values compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of a scalar-valued `f` with central differences
/// of step `h`, along one random direction over everything plus `coords` random
/// single coordinates. `f` receives the bound store and one leaf per input.
pub fn gradient_check<F, R>(
    store: &ParamStore,
    inputs: &[Mat],
    f: F,
    h: f64,
    coords: usize,
    rng: &mut R,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |store: &ParamStore, inputs: &[Mat]| -> Result<(Tape, Bound, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &bound, &vars)?;
        if tape.shape(out) != (1, 1) {
            return shape_err("gradient check needs a scalar output");
        }
        Ok((tape, bound, vars, out))
    };
    let (tape, bound, vars, out) = eval(store, inputs)?;
    let grads = tape.backward_scalar(out)?;
    let mut analytic: Vec<Mat> = store.collect_grads(&bound, &grads);
    analytic.extend(vars.iter().map(|&v| grads.get(v)));

    let mut base: Vec<Mat> = store.ids().map(|id| store.value(id).clone()).collect();
    base.extend(inputs.iter().cloned());
    let n_params = store.len();

    let value_at = |offset: &dyn Fn(usize, usize) -> f64| -> Result<f64> {
        let mut s = store.clone();
        let mut ins: Vec<Mat> = inputs.to_vec();
        for (t, m) in base.iter().enumerate() {
            let target = if t < n_params {
                s.value_mut(super::mlp::ParamId(t))
            } else {
                &mut ins[t - n_params]
            };
            for (k, (dst, src)) in target.data_mut().iter_mut().zip(m.data()).enumerate() {
                *dst = src + offset(t, k);
            }
        }
        let (tape, _, _, out) = eval(&s, &ins)?;
        Ok(tape.value(out).get(0, 0))
    };

    let mut worst: f64 = 0.0;
    let mut probes = 0;

    let dir: Vec<Vec<f64>> = base
        .iter()
        .map(|m| {
            m.data()
                .iter()
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let a: f64 = analytic
        .iter()
        .zip(&dir)
        .map(|(g, d)| g.data().iter().zip(d).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    let plus = value_at(&|t, k| h * dir[t][k])?;
    let minus = value_at(&|t, k| -h * dir[t][k])?;
    worst = worst.max(rel_err(a, (plus - minus) / (2.0 * h)));
    probes += 1;

    let sizes: Vec<usize> = base.iter().map(|m| m.data().len()).collect();
    let total: usize = sizes.iter().sum();
    for _ in 0..coords.min(total) {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let a = analytic[t].data()[flat];
        let plus = value_at(&|tt, kk| if tt == t && kk == flat { h } else { 0.0 })?;
        let minus = value_at(&|tt, kk| if tt == t && kk == flat { -h } else { 0.0 })?;
        worst = worst.max(rel_err(a, (plus - minus) / (2.0 * h)));
        probes += 1;
    }
    Ok(GradReport {
        max_rel_err: worst,
        probes,
    })
}
