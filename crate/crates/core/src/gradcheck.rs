//! Central finite-difference verification of analytic gradients.

use crate::adapters::{AdapterSet, AdapterSiteId};
use crate::autograd::{NodeId, Tape};
use crate::backbone::{Model, Session};
use crate::config::{ModelConfig, BOS, EOS, NO, YES};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Compares the analytic gradient returned by `f` at `x` with central
/// differences of step `h`. `f` returns the scalar value and the gradient.
///
/// Returns the max over components of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_with<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(x)?;
    if analytic.len() != x.numel() {
        return Err(Error::invalid("grad_check", "gradient length differs from input"));
    }
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (f(&plus)?.0 - f(&minus)?.0) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`grad_check_with`] for a scalar function built on a tape.
pub fn grad_check<'a, F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, NodeId) -> Result<NodeId>,
{
    grad_check_with(
        |probe| {
            let mut tape = Tape::new();
            let xid = tape.leaf(probe.clone().with_grad());
            let out = f(&mut tape, xid)?;
            if tape.value(out).len() != 1 {
                return Err(Error::invalid("grad_check", "function must be scalar-valued"));
            }
            let value = tape.item(out);
            tape.backward(out)?;
            let g = tape.grad(xid).map_or_else(|| vec![0.0; probe.numel()], <[f64]>::to_vec);
            Ok((value, g))
        },
        x,
        h,
    )
}

/// A model tensor addressed for gradient checking.
#[derive(Clone, Copy, Debug)]
pub enum Target<'p> {
    Backbone(&'p str),
    Adapter(Modality, AdapterSiteId, &'p str),
}

/// Gradient check of the classification loss of `sample` with respect to
/// one model tensor. The target must be trainable in `params`' freeze state
/// (adapters always are).
pub fn check_model_gradient(
    config: &ModelConfig,
    params: &ParamStore,
    adapters: Option<&AdapterSet>,
    sample: &Sample,
    target: Target<'_>,
    h: f64,
) -> Result<f64> {
    let answer = if sample.is_directed() { YES } else { NO };
    let start = match target {
        Target::Backbone(path) => params.tensor(path)?.clone(),
        Target::Adapter(m, site, which) => {
            let a = adapters
                .and_then(|a| a.get(m, site))
                .ok_or(Error::MissingAdapter(m))?;
            a.tensors()
                .into_iter()
                .find(|(n, _)| *n == which)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::invalid("grad_check", format!("no adapter tensor {which:?}")))?
        }
    };
    let grad_name = match target {
        Target::Backbone(path) => path.to_string(),
        Target::Adapter(m, site, which) => AdapterSet::param_path(m, site, which),
    };
    grad_check_with(
        |probe| {
            let mut p = params.clone();
            let mut a = adapters.cloned();
            match target {
                Target::Backbone(path) => {
                    let entry = p.get_mut(path).expect("checked above");
                    entry.tensor = probe.clone();
                }
                Target::Adapter(m, site, which) => {
                    let entry = a.as_mut().and_then(|a| a.get_mut(m, site)).expect("checked above");
                    for (n, t) in entry.tensors_mut() {
                        if n == which {
                            *t = probe.clone();
                        }
                    }
                }
            }
            let view = a.as_ref().map(|a| a.view());
            let mut s = Session::new(Model { config, params: &p, adapters: view }, true);
            let input = s.build_input(sample)?;
            let enc = s.encode(&input)?;
            let logits = s.decode(enc, &input.keep, &[BOS, answer])?;
            let loss = s.tape.cross_entropy(logits, &[answer, EOS])?;
            let value = s.tape.item(loss);
            s.tape.backward(loss)?;
            let g = s
                .gradients()
                .into_iter()
                .find(|(n, _)| *n == grad_name)
                .map(|(_, g)| g)
                .ok_or_else(|| Error::invalid("grad_check", format!("{grad_name} received no gradient")))?;
            Ok((value, g))
        },
        &start,
        h,
    )
}
