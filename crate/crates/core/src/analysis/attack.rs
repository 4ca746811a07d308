//! Greedy coordinate-gradient search over an adversarial question prefix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::databench::McqItem;
use crate::error::{Error, Result};
use crate::evalsuite::unlearning_effectiveness;
use crate::model::{bind, embed_tokens, forward_from_embeddings, Bound, KvDecoder, LMParams, TokenId};
use crate::numcore::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub prefix_len: usize,
    pub iterations: usize,
    /// Substitutions shortlisted per prefix position.
    pub top_k: usize,
    /// Orders candidate evaluation; exact loss ties go to the earliest.
    pub seed: u64,
    pub init_token: TokenId,
}

impl AttackConfig {
    pub fn new(init_token: TokenId) -> Self {
        Self { prefix_len: 8, iterations: 50, top_k: 16, seed: 0, init_token }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    /// UE with no prefix.
    pub ue_before: f64,
    /// UE with the initial prefix.
    pub ue_init: f64,
    pub ue_after: f64,
    pub prefix: Vec<TokenId>,
    /// Objective at the initial prefix and after every accepted substitution.
    pub trace: Vec<f64>,
}

fn with_prefix(items: &[McqItem], prefix: &[TokenId]) -> Result<Vec<McqItem>> {
    items
        .iter()
        .map(|it| {
            let mut q = prefix.to_vec();
            q.extend(&it.question);
            McqItem::new(q, it.options.clone(), it.answer)
        })
        .collect()
}

/// Summed negative log-likelihood of each item's correct option after
/// `prefix ++ question`.
pub fn correct_option_nll<T: Scalar>(params: &LMParams<T>, prefix: &[TokenId], items: &[McqItem]) -> Result<f64> {
    let mut base = KvDecoder::new(params);
    let mut base_logits = Vec::new();
    for &t in prefix {
        base_logits = base.step(t)?;
    }
    let per_item = items
        .iter()
        .map(|item| {
            let mut dec = base.clone();
            let mut logits = base_logits.clone();
            for &t in &item.question {
                logits = dec.step(t)?;
            }
            let option = &item.options[item.answer];
            let mut nll = 0.0;
            for (i, &t) in option.iter().enumerate() {
                nll -= log_prob(&logits, t)?;
                if i + 1 < option.len() {
                    logits = dec.step(t)?;
                }
            }
            Ok(nll)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_item.iter().sum())
}

fn log_prob<T: Scalar>(logits: &[T], t: TokenId) -> Result<f64> {
    let xs: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    let target = *xs.get(t as usize).ok_or_else(|| Error::contract(format!("token {t} out of range")))?;
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(target - max - xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}

/// Objective node for prefix embedding rows `leaf` (`[m, d_model]`).
fn objective_node<T: Scalar>(
    g: &mut Graph<T>,
    params: &LMParams<T>,
    bound: &Bound,
    leaf: Var,
    items: &[McqItem],
) -> Result<Var> {
    let cfg = &params.config;
    let m = g.value(leaf).dims2().0;
    let mut total = None;
    for item in items {
        let option = &item.options[item.answer];
        let rest: Vec<TokenId> = item.question.iter().chain(option).copied().collect();
        let rest_rows = embed_tokens(g, cfg, bound, &rest)?;
        let x = g.concat_rows(&[leaf, rest_rows])?;
        let out = forward_from_embeddings(g, cfg, bound, x, None)?;
        let logits = out.logits.expect("full pass");
        let slice = g.slice_rows(logits, m + item.question.len() - 1, option.len())?;
        let logp = g.log_softmax(slice);
        let targets: Vec<usize> = option.iter().map(|&t| t as usize).collect();
        let picked = g.pick(logp, &targets)?;
        let s = g.sum(picked);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::contract("no items to attack"))?;
    Ok(g.scale(total, -1.0))
}

/// Gradient of the objective with respect to the prefix embedding rows.
pub(crate) fn prefix_gradient<T: Scalar>(
    params: &LMParams<T>,
    prefix: &[TokenId],
    items: &[McqItem],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let rows = embed_tokens(&mut g, &params.config, &bound, prefix)?;
    let rows_value = g.value(rows).clone();
    let leaf = g.param(rows_value);
    let loss = objective_node(&mut g, params, &bound, leaf, items)?;
    let mut grads = g.backward(loss)?;
    Ok(grads.take(leaf).expect("prefix rows require grad"))
}

/// Top-`k` substitutions per position by first-order loss decrease
/// `-grad_i · E_v`, skipping the current token.
fn shortlist<T: Scalar>(params: &LMParams<T>, grad: &Tensor<T>, prefix: &[TokenId], k: usize) -> Vec<(usize, TokenId)> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let emb = params.tensor(0).data();
    let mut out = Vec::new();
    for (i, &cur) in prefix.iter().enumerate() {
        let gi = &grad.data()[i * d..(i + 1) * d];
        let mut scored: Vec<(f64, TokenId)> = (0..cfg.vocab_size as TokenId)
            .filter(|&v| v != cur)
            .map(|v| {
                let ev = &emb[v as usize * d..(v as usize + 1) * d];
                let dot: f64 = gi.iter().zip(ev).map(|(&a, &b)| (a * b).to_f64().unwrap_or(f64::NAN)).sum();
                (-dot, v)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        out.extend(scored.into_iter().take(k).map(|(_, v)| (i, v)));
    }
    out
}

/// Searches for a prefix that makes the correct options more likely, then
/// reports UE with it prepended to every question.
pub fn prefix_attack<T: Scalar>(
    params: &LMParams<T>,
    forget_eval: &[McqItem],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if cfg.prefix_len == 0 || cfg.top_k == 0 {
        return Err(Error::contract("prefix_len and top_k must be >= 1"));
    }
    if forget_eval.is_empty() {
        return Err(Error::contract("no items to attack"));
    }
    let budget = params.config.max_seq_len;
    for item in forget_eval {
        let need = cfg.prefix_len + item.question.len() + item.options.iter().map(Vec::len).max().unwrap_or(0);
        if need > budget {
            return Err(Error::contract(format!(
                "prefix {} + question + option needs {need} positions, model holds {budget}",
                cfg.prefix_len
            )));
        }
    }
    let mut prefix = vec![cfg.init_token; cfg.prefix_len];
    let mut best = correct_option_nll(params, &prefix, forget_eval)?;
    let mut trace = vec![best];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.iterations {
        let grad = prefix_gradient(params, &prefix, forget_eval)?;
        let mut candidates = shortlist(params, &grad, &prefix, cfg.top_k);
        candidates.shuffle(&mut rng);
        let losses = candidates
            .par_iter()
            .map(|&(pos, tok)| {
                let mut p = prefix.clone();
                p[pos] = tok;
                correct_option_nll(params, &p, forget_eval)
            })
            .collect::<Result<Vec<f64>>>()?;
        let winner = losses
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_finite())
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)));
        match winner {
            Some((i, &loss)) if loss < best => {
                let (pos, tok) = candidates[i];
                prefix[pos] = tok;
                best = loss;
                trace.push(best);
            }
            // The search is deterministic given the prefix, so a stalled
            // iteration would repeat forever.
            _ => break,
        }
    }
    let init = vec![cfg.init_token; cfg.prefix_len];
    Ok(AttackResult {
        ue_before: unlearning_effectiveness(params, forget_eval)?,
        ue_init: unlearning_effectiveness(params, &with_prefix(forget_eval, &init)?)?,
        ue_after: unlearning_effectiveness(params, &with_prefix(forget_eval, &prefix)?)?,
        prefix,
        trace,
    })
}

#[cfg(test)]
pub(super) mod tests_support {
    use super::*;

    pub(crate) use super::prefix_gradient;

    /// Objective with `s·dir` added to the first prefix embedding row.
    pub fn objective_with_row_shift(
        params: &LMParams<f64>,
        prefix: &[TokenId],
        items: &[McqItem],
        dir: &[f64],
        s: f64,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let bound = bind(&mut g, params, false);
        let rows = embed_tokens(&mut g, &params.config, &bound, prefix)?;
        let mut value = g.value(rows).clone();
        for (x, d) in value.data_mut().iter_mut().zip(dir) {
            *x += s * d;
        }
        let leaf = g.constant(value);
        let loss = objective_node(&mut g, params, &bound, leaf, items)?;
        Ok(g.scalar_value(loss))
    }
}
