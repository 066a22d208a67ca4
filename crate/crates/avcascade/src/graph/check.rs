//! Finite-difference gradient checking. The checker re-runs the caller's
//! graph builder with individually perturbed parameters and compares the
//! central difference against the recorded analytic gradient.

use super::{Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Elements probed per parameter tensor; large tensors are sampled.
    pub max_elems_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            tol: 1e-4,
            max_elems_per_param: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct FdSample {
    pub param: String,
    pub index: usize,
    pub value: f64,
}

fn forward_scalar<F>(build: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = build(&mut g, params)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract("grad check needs a scalar output".into()));
    }
    Ok(g.value(out).item())
}

/// Central differences at sampled elements of every non-frozen parameter.
pub fn fd_samples<F>(
    build: &F,
    params: &ParamSet,
    opts: &GradCheckOptions,
) -> Result<Vec<FdSample>>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    let mut rng = crate::rng::stream(opts.seed, "grad-check", &[]);
    let mut samples = Vec::new();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, _, frozen)| !frozen)
        .map(|(n, _, _)| n.to_string())
        .collect();
    for name in names {
        let numel = params.get(&name).expect("listed").numel();
        let mut picks: Vec<usize> = (0..numel).collect();
        if numel > opts.max_elems_per_param {
            picks.shuffle(&mut rng);
            picks.truncate(opts.max_elems_per_param);
            picks.sort_unstable();
        }
        for idx in picks {
            let mut perturbed = params.clone();
            let base = perturbed.get(&name).expect("listed").data()[idx];
            perturbed.tensor_mut(&name).expect("listed").data_mut()[idx] = base + opts.eps;
            let fp = forward_scalar(build, &perturbed)?;
            perturbed.tensor_mut(&name).expect("listed").data_mut()[idx] = base - opts.eps;
            let fm = forward_scalar(build, &perturbed)?;
            samples.push(FdSample {
                param: name.clone(),
                index: idx,
                value: (fp - fm) / (2.0 * opts.eps),
            });
        }
    }
    Ok(samples)
}

/// Relative error between analytic gradients and finite-difference samples.
/// Parameters missing from `analytic` are treated as zero gradient.
pub fn compare_grads(
    analytic: &BTreeMap<String, Tensor>,
    samples: &[FdSample],
    tol: f64,
) -> GradCheckReport {
    let mut max_rel_err = 0.0;
    let mut worst_param = String::new();
    for s in samples {
        let a = analytic
            .get(&s.param)
            .map(|t| t.data()[s.index])
            .unwrap_or(0.0);
        let rel = (a - s.value).abs() / (a.abs() + s.value.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_param = format!("{}[{}]", s.param, s.index);
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_param,
        checked: samples.len(),
        pass: max_rel_err < tol,
    }
}

/// Build the graph once for analytic gradients, probe finite differences,
/// and report the worst element.
pub fn grad_check<F>(build: F, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = build(&mut g, params)?;
    let analytic = g.backward(out)?;
    let samples = fd_samples(&build, params, opts)?;
    Ok(compare_grads(&analytic, &samples, opts.tol))
}
