//! Central finite-difference oracle for the reverse-mode engine.
//!
//! The checker only ever calls the user function forwards; it shares no code
//! path with [`Graph::backward`] beyond the forward kernels themselves.

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Result of a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Input index and flat coordinate of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Which coordinates of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// An evenly strided subset of at most this many coordinates per input.
    Strided(usize),
}

fn coords(len: usize, cov: Coverage) -> Vec<usize> {
    match cov {
        Coverage::All => (0..len).collect(),
        Coverage::Strided(k) if k >= len => (0..len).collect(),
        Coverage::Strided(k) => {
            let step = len as f64 / k as f64;
            (0..k).map(|i| (i as f64 * step) as usize).collect()
        }
    }
}

fn eval_scalar<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = point.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(NumError::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences of step `h`.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    Ok(grad_check_report(f, point, h, Coverage::All)?.max_rel_error)
}

pub fn grad_check_report<F>(f: F, point: &[Tensor], h: f64, cov: Coverage) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if h <= 0.0 {
        return Err(NumError::Invalid(format!("step {h} must be positive")));
    }
    let g = Graph::new();
    let vars: Vec<Var<'_>> = point.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = point.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(point[i].shape()));
        for c in coords(point[i].numel(), cov) {
            let x0 = point[i].data()[c];
            probe[i].data_mut()[c] = x0 + h;
            let up = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[c] = x0 - h;
            let down = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}

/// Gradient check over every tensor of a parameter store. `f` must obtain
/// its parameters through [`Graph::param`] so gradients land on them.
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64, cov: Coverage) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    if h <= 0.0 {
        return Err(NumError::Invalid(format!("step {h} must be positive")));
    }
    param_report(store, &f, h, cov)
}

fn param_report<F>(store: &ParamStore, f: &F, h: f64, cov: Coverage) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    let grads = g.backward(out)?.params();

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        Ok(f(&g, s)?.value().item())
    };
    let mut probe = store.clone();
    for (i, (name, t)) in store.iter().enumerate() {
        let analytic = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for c in coords(t.numel(), cov) {
            let x0 = t.data()[c];
            probe.get_mut(name).expect("same keys").data_mut()[c] = x0 + h;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("same keys").data_mut()[c] = x0 - h;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("same keys").data_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}
