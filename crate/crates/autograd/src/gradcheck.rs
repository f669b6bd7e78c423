//! Central finite-difference gradient checks (64-bit).
//!
//! The numeric side only ever evaluates the forward pass on a no-grad tape,
//! so it is independent of every backward closure it checks.

use crate::params::{Binding, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error `|a - n|_2 / max(|a|_2, |n|_2)` per checked tensor.
    pub rel_errors: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.rel_errors.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Indices to probe: all of them, or an evenly strided subset.
fn coords(len: usize, max_coords: Option<usize>) -> Vec<usize> {
    match max_coords {
        Some(m) if m < len => {
            let stride = len as f64 / m as f64;
            (0..m).map(|k| (k as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Check d f / d inputs for a scalar-valued `f`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, step: f64, max_coords: Option<usize>) -> GradCheckReport
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);

    let eval = |values: &[Tensor<f64>]| -> f64 {
        let t = Tape::no_grad();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let o = f(&t, &vs);
        t.value(o).item()
    };

    let mut rel_errors = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let analytic_full = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let idx = coords(input.numel(), max_coords);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for &j in &idx {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
            analytic.push(analytic_full.data()[j]);
        }
        rel_errors.push((format!("input{i}"), rel_error(&analytic, &numeric)));
    }
    GradCheckReport { rel_errors }
}

/// Check d f / d params for every parameter of `store` (or those in `only`).
pub fn check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    step: f64,
    max_coords: Option<usize>,
    only: Option<&[ParamId]>,
) -> GradCheckReport
where
    F: Fn(&Binding<'_, f64>) -> Var,
{
    let tape = Tape::new();
    let out = f(&Binding::trainable(&tape, store));
    let grads = tape.backward(out);

    let eval = |s: &ParamStore<f64>| -> f64 {
        let t = Tape::no_grad();
        let o = f(&Binding::frozen(&t, s));
        t.value(o).item()
    };

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut work = store.clone();
    let mut rel_errors = Vec::new();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let analytic_full = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let idx = coords(analytic_full.numel(), max_coords);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
            analytic.push(analytic_full.data()[j]);
        }
        rel_errors.push((store.name(id).to_string(), rel_error(&analytic, &numeric)));
    }
    GradCheckReport { rel_errors }
}
