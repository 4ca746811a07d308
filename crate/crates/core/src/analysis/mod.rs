//! Explanation studies: mode connectivity, keyword overlap and keyword-only
//! unlearning, a prefix attack and relearning curves.

mod attack;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::databench::{keyword_filter, SyntheticBenchmark};
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, unlearning_effectiveness, utility, EvalOptions, EvalReport};
use crate::model::{LMParams, TokenId};
use crate::numcore::{Scalar, Tensor};
use crate::unlearn::{finetune, unlearn, TrainConfig, UnlearnConfig};

pub use attack::{correct_option_nll, prefix_attack, AttackConfig, AttackResult};

/// Default epoch budget for keyword-only forget sets.
pub const KEYWORD_EPOCHS: usize = 300;

/// `α·a + (1-α)·b` per element; the endpoints return exact copies.
pub fn interpolate<T: Scalar>(a: &LMParams<T>, b: &LMParams<T>, alpha: f64) -> Result<LMParams<T>> {
    a.check_compatible(b)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(b.clone());
    }
    if alpha == 1.0 {
        return Ok(a.clone());
    }
    let tensors = a
        .tensors()
        .iter()
        .zip(b.tensors())
        .map(|((name, ta), (_, tb))| {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| {
                    let (x, y) = (x.to_f64().unwrap_or(f64::NAN), y.to_f64().unwrap_or(f64::NAN));
                    T::from_f64c(alpha * x + (1.0 - alpha) * y)
                })
                .collect();
            Ok((name.clone(), Tensor::new(ta.shape().to_vec(), data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    LMParams::from_tensors(a.config, tensors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSweep {
    pub alphas: Vec<f64>,
    pub ue: Vec<f64>,
    pub ut: Vec<f64>,
}

impl InterpolationSweep {
    /// Largest `|UE(α) - mean(UE(0), UE(1))|` along the path.
    pub fn max_ue_deviation(&self) -> f64 {
        let (first, last) = (self.ue[0], self.ue[self.ue.len() - 1]);
        let mid = (first + last) / 2.0;
        self.ue.iter().map(|u| (u - mid).abs()).fold(0.0, f64::max)
    }
}

/// `n` evenly spaced points from 0 to 1 inclusive.
pub fn alpha_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::contract("alpha grid needs at least the two endpoints"));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

/// UE and UT along the straight line from the full-set model (`α = 0`) to
/// the coreset model (`α = 1`).
pub fn lmc_sweep<T: Scalar>(
    theta_cu: &LMParams<T>,
    theta_fu: &LMParams<T>,
    grid: &[f64],
    bench: &SyntheticBenchmark,
) -> Result<InterpolationSweep> {
    if grid.first() != Some(&0.0) || grid.last() != Some(&1.0) {
        return Err(Error::contract("alpha grid must start at 0 and end at 1"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::contract("alpha grid must be strictly ascending"));
    }
    let mut ue = Vec::with_capacity(grid.len());
    let mut ut = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let p = interpolate(theta_cu, theta_fu, alpha)?;
        ue.push(unlearning_effectiveness(&p, &bench.forget_eval)?);
        ut.push(utility(&p, &bench.utility_eval)?);
    }
    Ok(InterpolationSweep { alphas: grid.to_vec(), ue, ut })
}

/// `|K_c ∩ K_f| / |K_f|`.
pub fn keyword_overlap(k_c: &BTreeSet<TokenId>, k_f: &BTreeSet<TokenId>) -> Result<f64> {
    if k_f.is_empty() {
        return Err(Error::contract("forget keyword set is empty"));
    }
    Ok(k_c.intersection(k_f).count() as f64 / k_f.len() as f64)
}

/// Keyword overlap of the tokens appearing in `records`.
pub fn coreset_keyword_overlap<S: AsRef<[TokenId]>>(records: &[S], k_f: &BTreeSet<TokenId>) -> Result<f64> {
    let seen: BTreeSet<TokenId> = records.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
    keyword_overlap(&seen, k_f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordOutcome {
    pub report: EvalReport,
    /// Keyword-only sequences actually unlearned.
    pub sequences: usize,
    pub epochs: usize,
}

/// Unlearns on the keyword-only view of `records` and evaluates.
///
/// Filtered sequences shorter than two tokens are dropped. `cfg.fixed_epochs`
/// defaults to [`KEYWORD_EPOCHS`].
pub fn keyword_unlearn_experiment<S: AsRef<[TokenId]>>(
    theta0: &LMParams<f32>,
    records: &[S],
    keywords: &BTreeSet<TokenId>,
    bench: &SyntheticBenchmark,
    cfg: &UnlearnConfig,
) -> Result<KeywordOutcome> {
    if keywords.is_empty() {
        return Err(Error::config("keyword set is empty"));
    }
    let forget: Vec<Vec<TokenId>> =
        records.iter().map(|r| keyword_filter(r.as_ref(), keywords)).filter(|s| s.len() >= 2).collect();
    if forget.is_empty() {
        return Err(Error::config("every record is empty after keyword filtering"));
    }
    let mut cfg = cfg.clone();
    cfg.fixed_epochs.get_or_insert(KEYWORD_EPOCHS);
    let retain: Vec<Vec<TokenId>> = bench.retain_records.iter().map(|r| r.tokens.clone()).collect();
    let out = unlearn(theta0, &forget, &retain, &cfg)?;
    Ok(KeywordOutcome {
        report: evaluate(&out.params, bench, None, &EvalOptions::default())?,
        sequences: forget.len(),
        epochs: out.epochs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelearnCurve {
    pub counts: Vec<usize>,
    /// Seed-averaged UE per count.
    pub ue: Vec<f64>,
    /// `per_seed[s][i]` is the UE for `seeds[s]` at `counts[i]`.
    pub per_seed: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
}

impl RelearnCurve {
    /// Rank correlation between count and mean UE.
    pub fn spearman(&self) -> Option<f64> {
        let counts: Vec<f64> = self.counts.iter().map(|&c| c as f64).collect();
        spearman(&counts, &self.ue)
    }
}

/// Fine-tunes fresh copies of `theta_u` on `count` finetune records per seed
/// and measures UE. Each seed draws its own subset and batch order.
pub fn relearn_curve(
    theta_u: &LMParams<f32>,
    finetune_set: &[Vec<TokenId>],
    counts: &[usize],
    seeds: &[u64],
    ft: &TrainConfig,
    bench: &SyntheticBenchmark,
) -> Result<RelearnCurve> {
    if counts.is_empty() || counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("relearn counts must be unique and ascending"));
    }
    if seeds.is_empty() {
        return Err(Error::contract("relearn needs at least one seed"));
    }
    let max = *counts.last().expect("nonempty");
    if max > finetune_set.len() {
        return Err(Error::contract(format!("count {max} exceeds finetune set of {}", finetune_set.len())));
    }
    let per_seed = seeds
        .iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let order = rand::seq::index::sample(&mut rng, finetune_set.len(), max).into_vec();
            let pool: Vec<Vec<TokenId>> = order.iter().map(|&i| finetune_set[i].clone()).collect();
            let cfg = TrainConfig { seed, ..ft.clone() };
            counts
                .par_iter()
                .map(|&n| {
                    let p = finetune(theta_u, &pool, n, &cfg)?;
                    unlearning_effectiveness(&p, &bench.forget_eval)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let ue = (0..counts.len()).map(|i| per_seed.iter().map(|s| s[i]).sum::<f64>() / seeds.len() as f64).collect();
    Ok(RelearnCurve { counts: counts.to_vec(), ue, per_seed, seeds: seeds.to_vec() })
}

/// Mid-ranks (1-based) with ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman's rho (Pearson on mid-ranks); `None` when either side is constant
/// or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}
