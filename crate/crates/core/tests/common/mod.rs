//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulab_core::model::{bind, token_logprobs_var, LMConfig, LMParams, TokenId};
use ulab_core::numcore::{Graph, Tensor};

/// A tiny transformer with a random architecture, perturbed away from its
/// initialization, plus a few random sequences over its vocabulary.
pub fn random_lm(seed: u64) -> (LMParams<f64>, Vec<Vec<TokenId>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_heads = [1, 2][rng.gen_range(0..2)];
    let cfg = LMConfig {
        vocab_size: rng.gen_range(5..12),
        d_model: n_heads * rng.gen_range(4 / n_heads..=6 / n_heads),
        n_layers: 2,
        n_heads,
        max_seq_len: 8,
        seed,
    };
    let mut params = LMParams::<f64>::init(cfg).unwrap();
    for i in 0..params.tensors().len() {
        for x in params.tensor_mut(i).data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let seqs = (0..2)
        .map(|_| {
            let len = rng.gen_range(3..=cfg.max_seq_len);
            (0..len).map(|_| rng.gen_range(0..cfg.vocab_size) as TokenId).collect()
        })
        .collect();
    (params, seqs)
}

/// Summed negative log-likelihood of `seqs` and its gradient per tensor.
pub fn nll_and_grad(params: &LMParams<f64>, seqs: &[Vec<TokenId>]) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, true);
    let mut terms = Vec::new();
    for s in seqs {
        let lp = token_logprobs_var(&mut g, &params.config, &bound, s).unwrap();
        terms.push(g.sum(lp));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t).unwrap();
    }
    let loss = g.scale(total, -1.0);
    let mut grads = g.backward(loss).unwrap();
    let value = g.scalar_value(loss);
    let per_tensor = bound.vars().iter().map(|&v| grads.take(v).unwrap()).collect();
    (value, per_tensor)
}

/// Five-point central differences of `f` with respect to every parameter.
pub fn central_differences(params: &LMParams<f64>, h: f64, f: impl Fn(&LMParams<f64>) -> f64) -> Vec<Vec<f64>> {
    let mut work = params.clone();
    (0..params.tensors().len())
        .map(|i| {
            (0..params.tensor(i).data().len())
                .map(|j| {
                    let x = params.tensor(i).data()[j];
                    let mut at = |d: f64| {
                        work.tensor_mut(i).data_mut()[j] = x + d;
                        f(&work)
                    };
                    let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
                    work.tensor_mut(i).data_mut()[j] = x;
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
                })
                .collect()
        })
        .collect()
}

/// `‖a - b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Denominator floor for tensors whose gradient is essentially zero.
pub const GRAD_FLOOR: f64 = 1e-2;

/// Worst per-tensor relative error between autodiff and finite differences
/// for the NLL of [`random_lm`]`(seed)`.
pub fn lm_gradient_error(seed: u64) -> f64 {
    let (params, seqs) = random_lm(seed);
    let (_, ad) = nll_and_grad(&params, &seqs);
    let fd = central_differences(&params, 1e-4, |p| nll_and_grad(p, &seqs).0);
    ad.iter().zip(&fd).map(|(a, f)| rel_err(a.data(), f, GRAD_FLOOR)).fold(0.0, f64::max)
}
