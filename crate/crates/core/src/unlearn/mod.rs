//! Regularized unlearning (forget loss + λ·retain loss) with NPO and RMU,
//! plus the plain cross-entropy loops used for pretraining, retraining and
//! fine-tuning.

mod losses;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{bind, Bound, LMConfig, LMParams, TokenId};
use crate::numcore::{adam_step, grad_l2_norm, AdamState, GradMap, Graph, Scalar, Tensor, Var};

pub use losses::{layer_activations, npo_forget_loss, npo_retain_loss, rmu_loss, sequence_loglik, RmuLoss};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Method {
    Npo { beta: f64 },
    Rmu { c: f64, layer: usize },
}

impl Method {
    pub fn npo() -> Self {
        Method::Npo { beta: 0.1 }
    }

    pub fn rmu(config: &LMConfig) -> Self {
        Method::Rmu { c: 20.0, layer: config.default_rmu_layer() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Npo { .. } => "npo",
            Method::Rmu { .. } => "rmu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub lambda: f64,
    pub lr: f64,
    pub base_epochs: f64,
    pub batch_size: usize,
    pub ratio: f64,
    pub control_seed: u64,
    pub order_seed: u64,
    /// Overrides the ratio-scaled epoch count.
    #[serde(default)]
    pub fixed_epochs: Option<usize>,
    /// Hard cap on optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl UnlearnConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda: 1.0,
            lr: 1e-3,
            base_epochs: 1.0,
            batch_size: 4,
            ratio: 1.0,
            control_seed: 0,
            order_seed: 0,
            fixed_epochs: None,
            max_steps: None,
        }
    }

    pub fn validate(&self, model: &LMConfig) -> Result<()> {
        match self.method {
            Method::Npo { beta } if !(beta > 0.0) => return Err(Error::config("beta must be > 0")),
            Method::Rmu { c, .. } if !(c > 0.0) => return Err(Error::config("c must be > 0")),
            Method::Rmu { layer, .. } if layer >= model.n_layers => {
                return Err(Error::config(format!("layer {layer} >= n_layers {}", model.n_layers)))
            }
            _ => {}
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda must be >= 0"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be > 0"));
        }
        if !(self.base_epochs >= 0.0) {
            return Err(Error::config("base_epochs must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.fixed_epochs.unwrap_or_else(|| epochs_for_ratio(self.base_epochs, self.ratio))
    }
}

/// Random unit direction for representation misdirection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    pub u: Vec<f64>,
    /// Uniform draws before normalization.
    pub raw: Vec<f64>,
    pub seed: u64,
}

pub fn sample_control_vector(d_model: usize, seed: u64) -> Result<ControlVector> {
    if d_model == 0 {
        return Err(Error::contract("d_model must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..d_model).map(|_| rng.gen::<f64>()).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric { node: 0, detail: "control vector draws are all zero".into() });
    }
    Ok(ControlVector { u: raw.iter().map(|x| x / norm).collect(), raw, seed })
}

/// `round(base / p)` epochs, keeping the total step count roughly constant.
pub fn epochs_for_ratio(base_epochs: f64, p: f64) -> usize {
    assert!(p > 0.0 && p <= 1.0, "ratio {p} outside (0, 1]");
    (base_epochs / p).round().max(0.0) as usize
}

/// Per-step losses of an optimization run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub forget: Vec<f64>,
    pub retain: Vec<f64>,
    pub total: Vec<f64>,
}

/// Loss values for one evaluated objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub forget: f64,
    pub retain: f64,
    pub total: f64,
}

/// The forget + λ·retain objective with reference quantities precomputed.
#[derive(Debug, Clone)]
pub struct Objective<T = f32> {
    method: Method,
    lambda: f64,
    ref_forget_ll: Vec<f64>,
    ref_retain_h: Vec<Tensor<T>>,
    target: Option<Tensor<T>>,
    control: Option<ControlVector>,
}

impl<T: Scalar> Objective<T> {
    pub fn new<S: AsRef<[TokenId]>>(
        reference: &LMParams<T>,
        forget: &[S],
        retain: &[S],
        cfg: &UnlearnConfig,
    ) -> Result<Self> {
        cfg.validate(&reference.config)?;
        let mut obj = Self {
            method: cfg.method,
            lambda: cfg.lambda,
            ref_forget_ll: Vec::new(),
            ref_retain_h: Vec::new(),
            target: None,
            control: None,
        };
        match cfg.method {
            Method::Npo { .. } => {
                obj.ref_forget_ll =
                    forget.iter().map(|s| sequence_loglik(reference, s.as_ref())).collect::<Result<_>>()?;
            }
            Method::Rmu { c, layer } => {
                let u = sample_control_vector(reference.config.d_model, cfg.control_seed)?;
                obj.target = Some(losses::control_target(&u, c));
                obj.control = Some(u);
                if cfg.lambda > 0.0 {
                    obj.ref_retain_h = retain
                        .iter()
                        .map(|s| layer_activations(reference, s.as_ref(), layer))
                        .collect::<Result<_>>()?;
                }
            }
        }
        Ok(obj)
    }

    pub fn control(&self) -> Option<&ControlVector> {
        self.control.as_ref()
    }

    fn uses_retain(&self) -> bool {
        self.lambda > 0.0
    }

    /// Builds `(total, forget, retain)` for the given forget/retain indices.
    #[allow(clippy::too_many_arguments)]
    fn build<S: AsRef<[TokenId]>>(
        &self,
        g: &mut Graph<T>,
        params: &LMParams<T>,
        bound: &Bound,
        forget: &[S],
        retain: &[S],
        fidx: &[usize],
        ridx: &[usize],
    ) -> Result<(Var, Var, Option<Var>)> {
        let mut f_terms = Vec::with_capacity(fidx.len());
        for &i in fidx {
            let tokens = forget[i].as_ref();
            f_terms.push(match self.method {
                Method::Npo { beta } => losses::npo_term(g, params, bound, tokens, self.ref_forget_ll[i], beta)?,
                Method::Rmu { layer, .. } => {
                    let target = self.target.as_ref().expect("rmu target");
                    losses::rmu_forget_term(g, params, bound, tokens, layer, target)?
                }
            });
        }
        let f_sum = sum_vars(g, &f_terms)?;
        let f_mean = g.scale(f_sum, 1.0 / fidx.len() as f64);
        if !self.uses_retain() || ridx.is_empty() {
            return Ok((f_mean, f_mean, None));
        }
        let r_mean = match self.method {
            Method::Npo { .. } => {
                let mut terms = Vec::with_capacity(ridx.len());
                let mut count = 0;
                for &j in ridx {
                    let (t, n) = losses::nll_sum_term(g, params, bound, retain[j].as_ref())?;
                    terms.push(t);
                    count += n;
                }
                let s = sum_vars(g, &terms)?;
                g.scale(s, 1.0 / count as f64)
            }
            Method::Rmu { layer, .. } => {
                let mut terms = Vec::with_capacity(ridx.len());
                for &j in ridx {
                    terms.push(losses::rmu_retain_term(
                        g,
                        params,
                        bound,
                        retain[j].as_ref(),
                        layer,
                        &self.ref_retain_h[j],
                    )?);
                }
                let s = sum_vars(g, &terms)?;
                g.scale(s, 1.0 / ridx.len() as f64)
            }
        };
        let weighted = g.scale(r_mean, self.lambda);
        let total = g.add(f_mean, weighted)?;
        Ok((total, f_mean, Some(r_mean)))
    }

    /// Objective value and gradient at `params`.
    pub fn gradient<S: AsRef<[TokenId]>>(
        &self,
        params: &LMParams<T>,
        forget: &[S],
        retain: &[S],
        fidx: &[usize],
        ridx: &[usize],
    ) -> Result<(GradMap<T>, LossParts)> {
        if fidx.is_empty() {
            return Err(Error::contract("empty forget batch"));
        }
        let mut g = Graph::new();
        let bound = bind(&mut g, params, true);
        let (total, f, r) = self.build(&mut g, params, &bound, forget, retain, fidx, ridx)?;
        let parts = LossParts {
            forget: to_f64(g.scalar_value(f)),
            retain: r.map(|r| to_f64(g.scalar_value(r))).unwrap_or(0.0),
            total: to_f64(g.scalar_value(total)),
        };
        let mut grads = g.backward(total)?;
        Ok((params.grad_map(&bound, &mut grads), parts))
    }
}

fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn sum_vars<T: Scalar>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter().copied();
    let mut acc = it.next().ok_or_else(|| Error::contract("no terms to sum"))?;
    for v in it {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

fn clip_grads<T: Scalar>(grads: &mut GradMap<T>, max_norm: f64) {
    let norm = grad_l2_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64c(max_norm / norm);
        for (_, t) in grads.entries.iter_mut() {
            for x in t.data_mut() {
                *x = *x * s;
            }
        }
    }
}

/// Cyclic shuffled index stream; reshuffles each time it wraps.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut c = Self { order: (0..n).collect(), pos: n, rng };
        c.wrap();
        c
    }

    fn wrap(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.wrap();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Output of [`unlearn`].
#[derive(Debug, Clone)]
pub struct UnlearnOutput<T = f32> {
    pub params: LMParams<T>,
    pub trace: LossTrace,
    pub epochs: usize,
    pub steps: usize,
    pub control: Option<ControlVector>,
}

pub fn unlearn<T: Scalar, S: AsRef<[TokenId]>>(
    theta0: &LMParams<T>,
    forget: &[S],
    retain: &[S],
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutput<T>> {
    unlearn_with_hook(theta0, forget, retain, cfg, |_, _| Ok(()))
}

/// Like [`unlearn`], calling `on_epoch(epoch, params)` after every epoch.
pub fn unlearn_with_hook<T: Scalar, S: AsRef<[TokenId]>>(
    theta0: &LMParams<T>,
    forget: &[S],
    retain: &[S],
    cfg: &UnlearnConfig,
    mut on_epoch: impl FnMut(usize, &LMParams<T>) -> Result<()>,
) -> Result<UnlearnOutput<T>> {
    if forget.is_empty() {
        return Err(Error::contract("forget subset is empty"));
    }
    if cfg.lambda > 0.0 && retain.is_empty() {
        return Err(Error::contract("lambda > 0 requires a nonempty retain set"));
    }
    let objective = Objective::new(theta0, forget, retain, cfg)?;
    let epochs = cfg.epochs();
    let mut params = theta0.clone();
    let mut adam = AdamState::new(&params);
    let mut trace = LossTrace::default();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.order_seed);
    let mut retain_rng = ChaCha8Rng::seed_from_u64(cfg.order_seed);
    retain_rng.set_stream(1);
    let mut retain_cycle = Cycler::new(retain.len(), retain_rng);
    let mut order: Vec<usize> = (0..forget.len()).collect();
    let mut steps = 0;
    'outer: for epoch in 0..epochs {
        order.shuffle(&mut order_rng);
        for fidx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break 'outer;
            }
            let ridx = if objective.uses_retain() { retain_cycle.take(cfg.batch_size) } else { Vec::new() };
            let (grads, parts) = objective
                .gradient(&params, forget, retain, fidx, &ridx)
                .map_err(|e| diverged(steps, e, &trace.total))?;
            trace.forget.push(parts.forget);
            trace.retain.push(parts.retain);
            trace.total.push(parts.total);
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    step: steps,
                    detail: format!("loss {}", parts.total),
                    trace: trace.total,
                });
            }
            adam_step(&mut params, &grads, &mut adam, cfg.lr)?;
            steps += 1;
        }
        on_epoch(epoch, &params)?;
    }
    if !params.is_finite() {
        return Err(Error::Diverged { step: steps, detail: "non-finite parameters".into(), trace: trace.total });
    }
    Ok(UnlearnOutput { params, trace, epochs, steps, control: objective.control })
}

fn diverged(step: usize, e: Error, trace: &[f64]) -> Error {
    match e {
        Error::Numeric { node, detail } => {
            Error::Diverged { step, detail: format!("node {node}: {detail}"), trace: trace.to_vec() }
        }
        other => other,
    }
}

/// Cross-entropy training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Learning rate decays linearly to `lr * final_lr_frac` by the last step.
    pub final_lr_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 3e-3, batch_size: 8, seed: 0, clip_norm: Some(1.0), final_lr_frac: 0.05 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(Error::config("final_lr_frac must lie in [0, 1]"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        let t = step as f64 / (total - 1) as f64;
        self.lr * (1.0 - t * (1.0 - self.final_lr_frac))
    }
}

/// Trained parameters and the mean training loss of each epoch.
#[derive(Debug, Clone)]
pub struct TrainOutput<T = f32> {
    pub params: LMParams<T>,
    pub epoch_loss: Vec<f64>,
}

/// Next-token cross-entropy training from a fresh `cfg.seed` initialization.
pub fn train_lm<T: Scalar, S: AsRef<[TokenId]>>(
    cfg: LMConfig,
    corpus: &[S],
    train: &TrainConfig,
) -> Result<TrainOutput<T>> {
    let params = LMParams::init(cfg)?;
    continue_training(params, corpus, train)
}

/// Cross-entropy fine-tuning on the first `n_samples` records of `dataset`.
pub fn finetune<T: Scalar, S: AsRef<[TokenId]>>(
    theta: &LMParams<T>,
    dataset: &[S],
    n_samples: usize,
    train: &TrainConfig,
) -> Result<LMParams<T>> {
    if n_samples > dataset.len() {
        return Err(Error::contract(format!("n_samples {n_samples} exceeds dataset size {}", dataset.len())));
    }
    if n_samples == 0 {
        return Ok(theta.clone());
    }
    Ok(continue_training(theta.clone(), &dataset[..n_samples], train)?.params)
}

fn continue_training<T: Scalar, S: AsRef<[TokenId]>>(
    mut params: LMParams<T>,
    corpus: &[S],
    train: &TrainConfig,
) -> Result<TrainOutput<T>> {
    if corpus.is_empty() {
        return Err(Error::contract("training corpus is empty"));
    }
    train.validate()?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_loss = Vec::with_capacity(train.epochs);
    let mut step_trace = Vec::new();
    let total_steps = train.epochs * corpus.len().div_ceil(train.batch_size);
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(train.batch_size) {
            let (mut grads, loss) =
                ce_gradient(&params, corpus, idx).map_err(|e| diverged(step_trace.len(), e, &step_trace))?;
            step_trace.push(loss);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: step_trace.len() - 1,
                    detail: format!("loss {loss}"),
                    trace: step_trace,
                });
            }
            if let Some(max) = train.clip_norm {
                clip_grads(&mut grads, max);
            }
            let lr = train.lr_at(step_trace.len() - 1, total_steps);
            adam_step(&mut params, &grads, &mut adam, lr)?;
            sum += loss;
            batches += 1;
        }
        epoch_loss.push(sum / batches as f64);
    }
    Ok(TrainOutput { params, epoch_loss })
}

/// Token-level mean cross entropy of a batch and its gradient.
fn ce_gradient<T: Scalar, S: AsRef<[TokenId]>>(
    params: &LMParams<T>,
    corpus: &[S],
    idx: &[usize],
) -> Result<(GradMap<T>, f64)> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, true);
    let mut terms = Vec::with_capacity(idx.len());
    let mut count = 0;
    for &i in idx {
        let (t, n) = losses::nll_sum_term(&mut g, params, &bound, corpus[i].as_ref())?;
        terms.push(t);
        count += n;
    }
    let s = sum_vars(&mut g, &terms)?;
    let loss = g.scale(s, 1.0 / count as f64);
    let value = to_f64(g.scalar_value(loss));
    let mut grads = g.backward(loss)?;
    Ok((params.grad_map(&bound, &mut grads), value))
}

#[cfg(test)]
mod tests;
