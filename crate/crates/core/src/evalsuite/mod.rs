//! Benchmark metrics: UE, UT, VerbMem, KnowMem and PrivLeak.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coreset::{mink_prob_scores, MINK_PERCENT};
use crate::databench::{McqItem, SyntheticBenchmark};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, KvDecoder, LMParams, TokenId};
use crate::numcore::Scalar;

/// Length-normalized log-likelihood of each option given the question.
pub fn option_scores<T: Scalar>(params: &LMParams<T>, item: &McqItem) -> Result<[f64; 4]> {
    if item.question.is_empty() {
        return Err(Error::contract("MCQ question is empty"));
    }
    let mut prefix = KvDecoder::new(params);
    let mut logits = Vec::new();
    for &t in &item.question {
        logits = prefix.step(t)?;
    }
    let mut out = [0.0; 4];
    for (score, option) in out.iter_mut().zip(&item.options) {
        if option.is_empty() {
            return Err(Error::contract("MCQ option is empty"));
        }
        let mut dec = prefix.clone();
        let mut cur = logits.clone();
        let mut total = 0.0;
        for (i, &t) in option.iter().enumerate() {
            total += log_softmax_at(&cur, t)?;
            if i + 1 < option.len() {
                cur = dec.step(t)?;
            }
        }
        *score = total / option.len() as f64;
    }
    Ok(out)
}

fn log_softmax_at<T: Scalar>(logits: &[T], t: TokenId) -> Result<f64> {
    let xs: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    let target = *xs.get(t as usize).ok_or_else(|| Error::contract(format!("option token {t} out of range")))?;
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok((target - lse).min(0.0))
}

/// Chosen option per item; ties go to the lowest option index.
pub fn mcq_predictions<T: Scalar>(params: &LMParams<T>, items: &[McqItem]) -> Result<Vec<usize>> {
    items
        .par_iter()
        .map(|item| {
            let s = option_scores(params, item)?;
            let mut best = 0;
            for i in 1..4 {
                if s[i] > s[best] {
                    best = i;
                }
            }
            Ok(best)
        })
        .collect()
}

pub fn mcq_accuracy<T: Scalar>(params: &LMParams<T>, items: &[McqItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("no MCQ items"));
    }
    let preds = mcq_predictions(params, items)?;
    let correct = preds.iter().zip(items).filter(|(p, it)| **p == it.answer).count();
    Ok(100.0 * correct as f64 / items.len() as f64)
}

/// `100 - accuracy` on the forget-domain questions.
pub fn unlearning_effectiveness<T: Scalar>(params: &LMParams<T>, forget_eval: &[McqItem]) -> Result<f64> {
    Ok(100.0 - mcq_accuracy(params, forget_eval)?)
}

pub fn utility<T: Scalar>(params: &LMParams<T>, utility_eval: &[McqItem]) -> Result<f64> {
    mcq_accuracy(params, utility_eval)
}

pub fn knowmem<T: Scalar>(params: &LMParams<T>, qa_items: &[McqItem]) -> Result<f64> {
    mcq_accuracy(params, qa_items)
}

/// Length of the longest common subsequence.
pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean LCS recall (0–100) of greedy continuations against each record's tail.
pub fn verbmem<T: Scalar, S: AsRef<[TokenId]> + Sync>(
    params: &LMParams<T>,
    records: &[S],
    prompt_len: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("no records for VerbMem"));
    }
    let recalls = records
        .par_iter()
        .map(|r| {
            let r = r.as_ref();
            if prompt_len == 0 || prompt_len >= r.len() {
                return Err(Error::contract(format!("prompt_len {prompt_len} must be in 1..{}", r.len())));
            }
            let truth = &r[prompt_len..];
            let cont = greedy_decode(params, &r[..prompt_len], truth.len())?;
            Ok(lcs_len(&cont, truth) as f64 / truth.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Probability that a random member outscores a random non-member, ties
/// counting one half, via mid-rank statistics.
pub fn auc(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::contract("AUC needs both classes"));
    }
    if members.iter().chain(nonmembers).any(|x| x.is_nan()) {
        return Err(Error::Numeric { node: 0, detail: "NaN membership score".into() });
    }
    let mut all: Vec<(f64, bool)> =
        members.iter().map(|&s| (s, true)).chain(nonmembers.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (m, n) = (members.len() as f64, nonmembers.len() as f64);
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (m * n))
}

/// AUC of Min-K% membership scores separating `members` from `nonmembers`.
pub fn membership_auc<T: Scalar, S: AsRef<[TokenId]> + Sync>(
    params: &LMParams<T>,
    members: &[S],
    nonmembers: &[S],
) -> Result<f64> {
    if members.len() != nonmembers.len() {
        return Err(Error::contract(format!(
            "membership sets must be balanced ({} vs {})",
            members.len(),
            nonmembers.len()
        )));
    }
    let a = mink_prob_scores(params, members, MINK_PERCENT)?;
    let b = mink_prob_scores(params, nonmembers, MINK_PERCENT)?;
    auc(&a, &b)
}

/// `100·(AUC_u - AUC_retrain)/AUC_retrain`; `None` when the retrain AUC is 0.
pub fn privleak_from_auc(auc_unlearned: f64, auc_retrain: f64) -> Option<f64> {
    (auc_retrain != 0.0).then(|| 100.0 * (auc_unlearned - auc_retrain) / auc_retrain)
}

pub fn privleak<T: Scalar, S: AsRef<[TokenId]> + Sync>(
    unlearned: &LMParams<T>,
    retrained: &LMParams<T>,
    forget: &[S],
    holdout: &[S],
) -> Result<Option<f64>> {
    let au = membership_auc(unlearned, forget, holdout)?;
    let ar = membership_auc(retrained, forget, holdout)?;
    Ok(privleak_from_auc(au, ar))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ue: f64,
    pub ut: f64,
    pub verbmem: f64,
    pub knowmem: f64,
    /// Absent when no retrain baseline was given or its AUC was zero.
    pub privleak: Option<f64>,
    pub auc: f64,
}

/// Evaluation knobs; `prompt_len` defaults to half the record length.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default)]
    pub prompt_len: Option<usize>,
}

/// Every metric for `params`; `retrain_auc` comes from [`membership_auc`] on
/// the retrained model.
pub fn evaluate<T: Scalar>(
    params: &LMParams<T>,
    bench: &SyntheticBenchmark,
    retrain_auc: Option<f64>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let prompt_len = opts.prompt_len.unwrap_or(bench.config.record_len / 2);
    let auc_u = membership_auc(params, &bench.forget_records, &bench.holdout_records)?;
    Ok(EvalReport {
        ue: unlearning_effectiveness(params, &bench.forget_eval)?,
        ut: utility(params, &bench.utility_eval)?,
        verbmem: verbmem(params, &bench.forget_records, prompt_len)?,
        knowmem: knowmem(params, &bench.knowmem_eval)?,
        privleak: retrain_auc.and_then(|r| privleak_from_auc(auc_u, r)),
        auc: auc_u,
    })
}

#[cfg(test)]
mod tests;
