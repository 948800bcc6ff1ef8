//! Central finite-difference checks for 64-bit computations.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Differences below this absolute size count as exact agreement, so that
/// gradients which are identically zero do not produce a spurious 100% error.
const ABS_FLOOR: f64 = 1e-10;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    rel_err_above(analytic, numeric, ABS_FLOOR)
}

/// Like [`rel_err`], with differences below `floor` counted as agreement.
pub fn rel_err_above(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    if diff < floor {
        return 0.0;
    }
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn)
}

/// Outcome of a check: one error per input (or parameter) plus the worst.
#[derive(Debug, Clone)]
pub struct Report {
    pub entries: Vec<(String, f64)>,
}

impl Report {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

/// Rounding noise of a central difference of a function of size `f`:
/// each evaluation carries about `ε·|f|`, divided by `2h`.
fn roundoff_floor(f: f64, h: f64) -> f64 {
    ABS_FLOOR.max(4.0 * f64::EPSILON * f.abs() / h)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.scalar(out)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h` for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, mut f: F) -> Result<Report>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut inputs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let floor = roundoff_floor(tape.scalar(out)?, h);
    let grads = tape.backward(out)?;
    let mut entries = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let analytic = grads
            .get(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + h;
            let plus = eval(&inputs, &mut f)?;
            inputs[i].data_mut()[j] = orig - h;
            let minus = eval(&inputs, &mut f)?;
            inputs[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        entries.push((format!("input{i}"), rel_err_above(&analytic, &numeric, floor * (analytic.len() as f64).sqrt())));
    }
    Ok(Report { entries })
}

/// Finite-difference check over every parameter held by a model.
///
/// `stores` exposes the model's parameter stores for perturbation and `f`
/// builds the scalar objective. Parameters with more than `max_entries`
/// elements are probed at evenly spaced positions only.
pub fn check_model<M, S, F>(model: &mut M, h: f64, max_entries: usize, mut stores: S, mut f: F) -> Result<Report>
where
    S: FnMut(&mut M) -> Vec<&mut ParamStore<f64>>,
    F: FnMut(&mut Tape<f64>, &M) -> Result<Var>,
{
    for s in stores(model) {
        s.zero_grads();
    }
    let floor = {
        let mut tape = Tape::new();
        let out = f(&mut tape, model)?;
        let floor = roundoff_floor(tape.scalar(out)?, h);
        let grads = tape.backward(out)?;
        for s in stores(model) {
            grads.accumulate_into(s)?;
        }
        floor
    };
    let n_stores = stores(model).len();
    let mut entries = Vec::new();
    for si in 0..n_stores {
        let ids: Vec<_> = stores(model)[si].iter().map(|(id, _)| id).collect();
        for id in ids {
            let (name, numel, grad) = {
                let s = &stores(model)[si];
                let t = s.tensor(id);
                let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
                (s.param(id).name.clone(), t.numel(), grad)
            };
            let positions: Vec<usize> = if numel <= max_entries {
                (0..numel).collect()
            } else {
                (0..max_entries).map(|k| k * numel / max_entries).collect()
            };
            let mut analytic = Vec::with_capacity(positions.len());
            let mut numeric = Vec::with_capacity(positions.len());
            for &j in &positions {
                let orig = stores(model)[si].tensor(id).data()[j];
                let mut probe = |m: &mut M, v: f64| -> Result<f64> {
                    stores(m)[si].tensor_mut(id).data_mut()[j] = v;
                    let mut tape = Tape::new();
                    let out = f(&mut tape, m)?;
                    tape.scalar(out)
                };
                let plus = probe(model, orig + h)?;
                let minus = probe(model, orig - h)?;
                stores(model)[si].tensor_mut(id).data_mut()[j] = orig;
                analytic.push(grad[j]);
                numeric.push((plus - minus) / (2.0 * h));
            }
            entries.push((name, rel_err_above(&analytic, &numeric, floor * (analytic.len() as f64).sqrt())));
        }
    }
    for s in stores(model) {
        s.zero_grads();
    }
    Ok(Report { entries })
}
