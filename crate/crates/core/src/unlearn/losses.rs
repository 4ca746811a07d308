//! Forget and retain objectives, both as graph terms for optimization and as
//! plain scalar evaluations.

use crate::error::{Error, Result};
use crate::model::{bind, embed_tokens, forward_from_embeddings, token_logprobs_var, Bound, LMParams, TokenId};
use crate::numcore::{Graph, Scalar, Tensor, Var};

use super::ControlVector;

/// Total log-likelihood `log π(y)` of a token sequence.
pub fn sequence_loglik<T: Scalar>(params: &LMParams<T>, tokens: &[TokenId]) -> Result<f64> {
    Ok(crate::model::sequence_logprobs(params, tokens)?.iter().sum())
}

/// `-(2/β)·ln σ(-β·(ll_θ - ll_ref))` for one sequence.
pub(crate) fn npo_term<T: Scalar>(
    g: &mut Graph<T>,
    params: &LMParams<T>,
    bound: &Bound,
    tokens: &[TokenId],
    ref_loglik: f64,
    beta: f64,
) -> Result<Var> {
    let lp = token_logprobs_var(g, &params.config, bound, tokens)?;
    let ll = g.sum(lp);
    let reference = g.constant(Tensor::scalar(T::from_f64c(ref_loglik)));
    let ratio = g.sub(ll, reference)?;
    let z = g.scale(ratio, -beta);
    let ls = g.log_sigmoid(z);
    Ok(g.scale(ls, -2.0 / beta))
}

/// Summed next-token negative log-likelihood and the number of predicted tokens.
pub(crate) fn nll_sum_term<T: Scalar>(
    g: &mut Graph<T>,
    params: &LMParams<T>,
    bound: &Bound,
    tokens: &[TokenId],
) -> Result<(Var, usize)> {
    let lp = token_logprobs_var(g, &params.config, bound, tokens)?;
    let s = g.sum(lp);
    Ok((g.scale(s, -1.0), tokens.len() - 1))
}

/// Layer-`layer` activations for `tokens`, `[len, d_model]`.
pub(crate) fn hidden_at<T: Scalar>(
    g: &mut Graph<T>,
    params: &LMParams<T>,
    bound: &Bound,
    tokens: &[TokenId],
    layer: usize,
) -> Result<Var> {
    let rows = embed_tokens(g, &params.config, bound, tokens)?;
    let out = forward_from_embeddings(g, &params.config, bound, rows, Some(layer))?;
    Ok(out.hidden[layer])
}

/// `(1/L)·Σ_t ‖h_t - c·u‖²` for one sequence.
pub(crate) fn rmu_forget_term<T: Scalar>(
    g: &mut Graph<T>,
    params: &LMParams<T>,
    bound: &Bound,
    tokens: &[TokenId],
    layer: usize,
    target: &Tensor<T>,
) -> Result<Var> {
    let h = hidden_at(g, params, bound, tokens, layer)?;
    let neg = g.constant(Tensor::from_vec(target.data().iter().map(|&x| -x).collect()));
    let diff = g.add_row(h, neg)?;
    let sq = g.sum_sq(diff);
    Ok(g.scale(sq, 1.0 / tokens.len() as f64))
}

/// `(1/L)·Σ_t ‖h_t - h_ref,t‖²` for one sequence.
pub(crate) fn rmu_retain_term<T: Scalar>(
    g: &mut Graph<T>,
    params: &LMParams<T>,
    bound: &Bound,
    tokens: &[TokenId],
    layer: usize,
    ref_hidden: &Tensor<T>,
) -> Result<Var> {
    let h = hidden_at(g, params, bound, tokens, layer)?;
    if g.value(h).shape() != ref_hidden.shape() {
        return Err(Error::contract("reference activations do not match sequence shape"));
    }
    let r = g.constant(ref_hidden.clone());
    let diff = g.sub(h, r)?;
    let sq = g.sum_sq(diff);
    Ok(g.scale(sq, 1.0 / tokens.len() as f64))
}

/// Activations of `params` at `layer`, without gradient tracking.
pub fn layer_activations<T: Scalar>(params: &LMParams<T>, tokens: &[TokenId], layer: usize) -> Result<Tensor<T>> {
    if layer >= params.config.n_layers {
        return Err(Error::contract(format!("layer {layer} >= n_layers {}", params.config.n_layers)));
    }
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let h = hidden_at(&mut g, params, &bound, tokens, layer)?;
    Ok(g.value(h).clone())
}

pub(crate) fn control_target<T: Scalar>(u: &ControlVector, c: f64) -> Tensor<T> {
    Tensor::from_vec(u.u.iter().map(|&x| T::from_f64c(c * x)).collect())
}

/// Mean NPO forget loss of `batch` under `theta` relative to `reference`.
pub fn npo_forget_loss<T: Scalar, S: AsRef<[TokenId]>>(
    theta: &LMParams<T>,
    reference: &LMParams<T>,
    batch: &[S],
    beta: f64,
) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::contract("NPO requires beta > 0"));
    }
    if batch.is_empty() {
        return Err(Error::contract("empty forget batch"));
    }
    let mut g = Graph::new();
    let bound = bind(&mut g, theta, false);
    let mut total = 0.0;
    for s in batch {
        let ll_ref = sequence_loglik(reference, s.as_ref())?;
        let t = npo_term(&mut g, theta, &bound, s.as_ref(), ll_ref, beta)?;
        total += g.scalar_value(t).to_f64().unwrap_or(f64::NAN);
    }
    Ok(total / batch.len() as f64)
}

/// Token-level mean cross entropy over every predicted token in `batch`.
pub fn npo_retain_loss<T: Scalar, S: AsRef<[TokenId]>>(theta: &LMParams<T>, batch: &[S]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty retain batch"));
    }
    let mut g = Graph::new();
    let bound = bind(&mut g, theta, false);
    let (mut nll, mut count) = (0.0, 0usize);
    for s in batch {
        let (t, n) = nll_sum_term(&mut g, theta, &bound, s.as_ref())?;
        nll += g.scalar_value(t).to_f64().unwrap_or(f64::NAN);
        count += n;
    }
    Ok(nll / count as f64)
}

/// Decomposed representation-misdirection loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmuLoss {
    pub forget: f64,
    pub retain: f64,
    pub lambda: f64,
    pub total: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn rmu_loss<T: Scalar, S: AsRef<[TokenId]>>(
    theta: &LMParams<T>,
    reference: &LMParams<T>,
    forget_batch: &[S],
    retain_batch: &[S],
    c: f64,
    u: &ControlVector,
    layer: usize,
    lambda: f64,
) -> Result<RmuLoss> {
    theta.check_compatible(reference)?;
    if layer >= theta.config.n_layers {
        return Err(Error::contract(format!("layer {layer} >= n_layers {}", theta.config.n_layers)));
    }
    if lambda < 0.0 {
        return Err(Error::contract("lambda must be >= 0"));
    }
    if u.u.len() != theta.config.d_model {
        return Err(Error::contract("control vector width differs from d_model"));
    }
    let target = control_target::<T>(u, c);
    let mut g = Graph::new();
    let bound = bind(&mut g, theta, false);
    let mut forget = 0.0;
    for s in forget_batch {
        let t = rmu_forget_term(&mut g, theta, &bound, s.as_ref(), layer, &target)?;
        forget += g.scalar_value(t).to_f64().unwrap_or(f64::NAN);
    }
    let mut retain = 0.0;
    for s in retain_batch {
        let reference_h = layer_activations(reference, s.as_ref(), layer)?;
        let t = rmu_retain_term(&mut g, theta, &bound, s.as_ref(), layer, &reference_h)?;
        retain += g.scalar_value(t).to_f64().unwrap_or(f64::NAN);
    }
    let forget = if forget_batch.is_empty() { 0.0 } else { forget / forget_batch.len() as f64 };
    let retain = if retain_batch.is_empty() { 0.0 } else { retain / retain_batch.len() as f64 };
    Ok(RmuLoss { forget, retain, lambda, total: forget + lambda * retain })
}
