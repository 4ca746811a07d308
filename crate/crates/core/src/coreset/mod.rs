//! Forget-set coreset selection.

pub mod kmeans;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mean_pooled_rep, sequence_logprobs, LMParams, TokenId};
use crate::numcore::{grad_l2_norm, Scalar};
use crate::unlearn::{unlearn_with_hook, Objective, UnlearnConfig};

/// Number of snapshots along the GraNd unlearning trajectory.
pub const GRAND_EPOCHS: usize = 10;
pub const MODERATE_K: usize = 4;
pub const MINK_PERCENT: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorKind {
    Random,
    Grand,
    Moderate,
    Mink,
}

impl SelectorKind {
    pub const ALL: [SelectorKind; 4] = [Self::Random, Self::Grand, Self::Moderate, Self::Mink];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Grand => "grand",
            Self::Moderate => "moderate",
            Self::Mink => "mink",
        }
    }
}

impl std::str::FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown selector `{s}` (random|grand|moderate|mink)")))
    }
}

/// A chosen subset of the forget set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: SelectorKind,
    pub ratio: f64,
    pub seed: u64,
    /// Sorted, unique indices into the forget set.
    pub indices: Vec<usize>,
    pub scores: Option<Vec<f64>>,
}

impl Selection {
    pub fn validate(&self, n: usize) -> Result<()> {
        let k = subset_size(n, self.ratio)?;
        if self.indices.len() != k {
            return Err(Error::Data(format!("selection has {} indices, expected {k}", self.indices.len())));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) || self.indices.last().is_some_and(|&i| i >= n) {
            return Err(Error::Data("selection indices must be sorted, unique and < N".into()));
        }
        Ok(())
    }

    pub fn pick<'a, S>(&self, records: &'a [S]) -> Vec<&'a S> {
        self.indices.iter().map(|&i| &records[i]).collect()
    }
}

/// `max(1, floor(p·N))`, with the product nudged so 0.3·10 counts as 3.
pub fn subset_size(n: usize, p: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::contract("forget set is empty"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::contract(format!("ratio {p} outside (0, 1]")));
    }
    Ok((((p * n as f64) + 1e-9).floor() as usize).clamp(1, n))
}

pub fn random_select(n: usize, p: f64, seed: u64) -> Result<Selection> {
    let k = subset_size(n, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, k).into_vec();
    indices.sort_unstable();
    Ok(Selection { method: SelectorKind::Random, ratio: p, seed, indices, scores: None })
}

/// Indices of the `max(1, floor(p·N))` highest scores; ties go to the lower index.
pub fn top_p_select(scores: &[f64], p: f64) -> Result<Vec<usize>> {
    let k = subset_size(scores.len(), p)?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric { node: i, detail: "NaN selection score".into() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Per-snapshot, per-record scores; `scores[t][i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTrace {
    /// Mean over snapshots for each record.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.scores.first().map_or(0, Vec::len);
        let t = self.scores.len() as f64;
        (0..n).map(|i| self.scores.iter().map(|row| row[i]).sum::<f64>() / t).collect()
    }
}

/// Scores every record at every snapshot with `score(snapshot, record)`.
pub fn trajectory_scores<P: Sync>(
    snapshots: &[P],
    n: usize,
    score: impl Fn(&P, usize) -> Result<f64> + Sync,
) -> Result<ScoreTrace> {
    if snapshots.is_empty() {
        return Err(Error::contract("no snapshots to score"));
    }
    let scores = snapshots
        .iter()
        .map(|snap| (0..n).into_par_iter().map(|i| score(snap, i)).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    for (t, row) in scores.iter().enumerate() {
        if let Some(i) = row.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric { node: i, detail: format!("non-finite score at snapshot {t}") });
        }
    }
    Ok(ScoreTrace { scores })
}

/// Expected gradient norm of the unlearning objective per forget record.
///
/// Runs `snapshots` epochs of full-forget-set unlearning from `theta0` and
/// scores each record at every epoch end, pairing record `i` with retain
/// record `i mod |D_r|`.
pub fn grand_scores<T: Scalar, S: AsRef<[TokenId]> + Sync>(
    theta0: &LMParams<T>,
    forget: &[S],
    retain: &[S],
    cfg: &UnlearnConfig,
    snapshots: usize,
) -> Result<(ScoreTrace, Vec<f64>)> {
    if forget.is_empty() {
        return Err(Error::contract("forget set is empty"));
    }
    let run_cfg = UnlearnConfig { ratio: 1.0, fixed_epochs: Some(snapshots), max_steps: None, ..cfg.clone() };
    let mut snaps = Vec::with_capacity(snapshots);
    unlearn_with_hook(theta0, forget, retain, &run_cfg, |_, p| {
        snaps.push(p.clone());
        Ok(())
    })?;
    let objective = Objective::new(theta0, forget, retain, &run_cfg)?;
    let trace = trajectory_scores(&snaps, forget.len(), |p, i| {
        let ridx: Vec<usize> = if retain.is_empty() { vec![] } else { vec![i % retain.len()] };
        let (g, _) = objective.gradient(p, forget, retain, &[i], &ridx)?;
        Ok(grad_l2_norm(&g))
    })?;
    let chi = trace.mean();
    Ok((trace, chi))
}

pub fn grand_select<T: Scalar, S: AsRef<[TokenId]> + Sync>(
    theta0: &LMParams<T>,
    forget: &[S],
    retain: &[S],
    cfg: &UnlearnConfig,
    p: f64,
) -> Result<Selection> {
    let (_, chi) = grand_scores(theta0, forget, retain, cfg, GRAND_EPOCHS)?;
    Ok(Selection {
        method: SelectorKind::Grand,
        ratio: p,
        seed: cfg.order_seed,
        indices: top_p_select(&chi, p)?,
        scores: Some(chi),
    })
}

/// Runs selector `kind` at ratio `p`. GraNd takes its trajectory seed from
/// `cfg.order_seed`; Random and Moderate use `seed`.
pub fn select<T: Scalar, S: AsRef<[TokenId]> + Sync>(
    kind: SelectorKind,
    theta0: &LMParams<T>,
    forget: &[S],
    retain: &[S],
    cfg: &UnlearnConfig,
    p: f64,
    seed: u64,
) -> Result<Selection> {
    match kind {
        SelectorKind::Random => random_select(forget.len(), p, seed),
        SelectorKind::Grand => grand_select(theta0, forget, retain, cfg, p),
        SelectorKind::Moderate => moderate_select(theta0, forget, p, seed),
        SelectorKind::Mink => mink_select(theta0, forget, p),
    }
}

/// Mean of the lowest `max(1, floor(K/100·count))` token log-probs.
pub fn mink_score(logprobs: &[f64], k_percent: f64) -> Result<f64> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::contract(format!("K% {k_percent} outside (0, 100]")));
    }
    if logprobs.is_empty() {
        return Err(Error::contract("no scored tokens"));
    }
    let m = ((k_percent / 100.0 * logprobs.len() as f64 + 1e-9).floor() as usize).max(1);
    let mut sorted = logprobs.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[..m].iter().sum::<f64>() / m as f64)
}

pub fn mink_prob_scores<T: Scalar, S: AsRef<[TokenId]> + Sync>(
    theta0: &LMParams<T>,
    forget: &[S],
    k_percent: f64,
) -> Result<Vec<f64>> {
    forget.par_iter().map(|s| mink_score(&sequence_logprobs(theta0, s.as_ref())?, k_percent)).collect()
}

pub fn mink_select<T: Scalar, S: AsRef<[TokenId]> + Sync>(
    theta0: &LMParams<T>,
    forget: &[S],
    p: f64,
) -> Result<Selection> {
    let scores = mink_prob_scores(theta0, forget, MINK_PERCENT)?;
    Ok(Selection {
        method: SelectorKind::Mink,
        ratio: p,
        seed: 0,
        indices: top_p_select(&scores, p)?,
        scores: Some(scores),
    })
}

/// Mean-pooled penultimate-layer representation of every record.
pub fn penultimate_reps<T: Scalar, S: AsRef<[TokenId]> + Sync>(
    reference: &LMParams<T>,
    forget: &[S],
) -> Result<Vec<Vec<f64>>> {
    let layer = reference.config.penultimate_layer();
    forget.par_iter().map(|s| mean_pooled_rep(reference, s.as_ref(), layer)).collect()
}

pub fn moderate_select<T: Scalar, S: AsRef<[TokenId]> + Sync>(
    reference: &LMParams<T>,
    forget: &[S],
    p: f64,
    seed: u64,
) -> Result<Selection> {
    moderate_from_reps(&penultimate_reps(reference, forget)?, p, seed)
}

/// Moderate selection over precomputed representations.
///
/// Records nearest their cluster's median distance-to-centroid are kept; the
/// budget is split across clusters in proportion to size.
pub fn moderate_from_reps(reps: &[Vec<f64>], p: f64, seed: u64) -> Result<Selection> {
    let n = reps.len();
    if n < MODERATE_K {
        return Err(Error::contract(format!("moderate selection needs N >= {MODERATE_K}, got {n}")));
    }
    let budget = subset_size(n, p)?;
    let clustering = kmeans::kmeans(reps, MODERATE_K, seed)?;
    let k = clustering.centroids.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in clustering.assignment.iter().enumerate() {
        members[a].push(i);
    }
    let quotas = largest_remainder(&members.iter().map(Vec::len).collect::<Vec<_>>(), budget);
    let mut indices = Vec::with_capacity(budget);
    let mut distances = vec![0.0; n];
    for (c, group) in members.iter().enumerate() {
        let cen = &clustering.centroids[c];
        let d: Vec<f64> = group
            .iter()
            .map(|&i| reps[i].iter().zip(cen).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .collect();
        for (&i, &di) in group.iter().zip(&d) {
            distances[i] = di;
        }
        let med = median(&d);
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.sort_by(|&a, &b| (d[a] - med).abs().total_cmp(&(d[b] - med).abs()).then(group[a].cmp(&group[b])));
        indices.extend(order[..quotas[c]].iter().map(|&j| group[j]));
    }
    indices.sort_unstable();
    Ok(Selection { method: SelectorKind::Moderate, ratio: p, seed, indices, scores: Some(distances) })
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Splits `budget` across groups in proportion to `sizes`; leftover units go
/// to the largest fractional parts, lower group index first on ties.
pub fn largest_remainder(sizes: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| s * budget / total).collect();
    let mut rest: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, &s)| ((s * budget) % total, i)).collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = budget - quotas.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(left) {
        quotas[i] += 1;
    }
    quotas
}
