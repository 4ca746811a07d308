use super::{slot, LMConfig, LMParams, TokenId};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Tensor, Var};

/// Graph handles for every parameter tensor, in storage order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Places `params` on `g`, as trainable leaves or as constants.
pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &LMParams<T>, trainable: bool) -> Bound {
    Bound { vars: params.tensors().iter().map(|(_, t)| g.leaf(t.clone(), trainable)).collect() }
}

/// Per-layer residual-stream outputs, each `[len, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T = f32> {
    pub layers: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[len, vocab]`; absent when the pass stopped at an intermediate layer.
    pub logits: Option<Var>,
    pub hidden: Vec<Var>,
}

fn check_tokens(cfg: &LMConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::contract(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::contract(format!("token id {bad} out of range for vocab {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Token-embedding rows for `tokens`, `[len, d_model]`.
pub fn embed_tokens<T: Scalar>(g: &mut Graph<T>, cfg: &LMConfig, bound: &Bound, tokens: &[TokenId]) -> Result<Var> {
    check_tokens(cfg, tokens)?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    g.gather(bound.var(slot::TOK), &ids)
}

/// Runs the transformer on precomputed token-embedding rows.
///
/// With `stop_after = Some(l)` the pass ends after block `l` and no logits are
/// produced.
pub fn forward_from_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &LMConfig,
    bound: &Bound,
    tok_rows: Var,
    stop_after: Option<usize>,
) -> Result<ForwardOut> {
    let (len, d) = g.value(tok_rows).dims2();
    if d != cfg.d_model {
        return Err(Error::contract(format!("embedding width {d} != d_model {}", cfg.d_model)));
    }
    if len == 0 || len > cfg.max_seq_len {
        return Err(Error::contract(format!("sequence length {len} outside 1..={}", cfg.max_seq_len)));
    }
    if let Some(l) = stop_after {
        if l >= cfg.n_layers {
            return Err(Error::contract(format!("layer {l} >= n_layers {}", cfg.n_layers)));
        }
    }
    let pos = g.slice_rows(bound.var(slot::POS), 0, len)?;
    let mut x = g.add(tok_rows, pos)?;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let last = stop_after.unwrap_or(cfg.n_layers - 1);
    let mut hidden = Vec::with_capacity(last + 1);

    for layer in 0..=last {
        let p = |k| bound.var(slot::layer(layer, k));
        let h = g.layer_norm(x, p(slot::LN1_G), p(slot::LN1_B))?;
        let q = g.matmul(h, p(slot::WQ))?;
        let k = g.matmul(h, p(slot::WK))?;
        let v = g.matmul(h, p(slot::WV))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, inv_sqrt);
            let attn = g.causal_softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn_out = g.matmul(merged, p(slot::WO))?;
        x = g.add(x, attn_out)?;

        let h2 = g.layer_norm(x, p(slot::LN2_G), p(slot::LN2_B))?;
        let up = g.matmul(h2, p(slot::W1))?;
        let up = g.add_row(up, p(slot::B1))?;
        let act = g.gelu(up);
        let down = g.matmul(act, p(slot::W2))?;
        let down = g.add_row(down, p(slot::B2))?;
        x = g.add(x, down)?;
        hidden.push(x);
    }

    let logits = if stop_after.is_none() {
        let n = cfg.n_layers;
        let hf = g.layer_norm(x, bound.var(slot::final_g(n)), bound.var(slot::final_b(n)))?;
        Some(g.matmul_t(hf, bound.var(slot::head(n)))?)
    } else {
        None
    };
    Ok(ForwardOut { logits, hidden })
}

/// Log-probabilities `log p(z_i | z_<i)` for `i = 1..len`, as a `[len-1]` node.
pub fn token_logprobs_var<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &LMConfig,
    bound: &Bound,
    tokens: &[TokenId],
) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(Error::contract("sequence log-probs need at least 2 tokens"));
    }
    let rows = embed_tokens(g, cfg, bound, tokens)?;
    let out = forward_from_embeddings(g, cfg, bound, rows, None)?;
    let logits = out.logits.expect("full pass has logits");
    let n = tokens.len() - 1;
    let head = g.slice_rows(logits, 0, n)?;
    let logp = g.log_softmax(head);
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    g.pick(logp, &targets)
}

/// Logits `[len, vocab]` and every layer's activations for `tokens`.
pub fn forward_logits<T: Scalar>(params: &LMParams<T>, tokens: &[TokenId]) -> Result<(Tensor<T>, HiddenStates<T>)> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let rows = embed_tokens(&mut g, &params.config, &bound, tokens)?;
    let out = forward_from_embeddings(&mut g, &params.config, &bound, rows, None)?;
    let logits = g.value(out.logits.expect("full pass")).clone();
    let layers = out.hidden.iter().map(|&h| g.value(h).clone()).collect();
    Ok((logits, HiddenStates { layers }))
}

/// Per-token `log p(z_i | z_1..z_{i-1})` for `i = 2..=len`; the first token is
/// unconditioned and excluded.
pub fn sequence_logprobs<T: Scalar>(params: &LMParams<T>, tokens: &[TokenId]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let v = token_logprobs_var(&mut g, &params.config, &bound, tokens)?;
    Ok(g.value(v).data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN).min(0.0)).collect())
}

/// Greedy continuation of `prompt` by `n` tokens; ties go to the lowest id.
pub fn greedy_decode<T: Scalar>(params: &LMParams<T>, prompt: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::contract("greedy_decode: empty prompt"));
    }
    if prompt.len() + n > params.config.max_seq_len {
        return Err(Error::contract(format!(
            "greedy_decode: prompt {} + {n} new tokens exceeds max_seq_len {}",
            prompt.len(),
            params.config.max_seq_len
        )));
    }
    check_tokens(&params.config, prompt)?;
    let mut dec = super::decode::KvDecoder::new(params);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t)?;
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let next = argmax_lowest(&logits) as TokenId;
        out.push(next);
        if i + 1 < n {
            logits = dec.step(next)?;
        }
    }
    Ok(out)
}

pub(crate) fn argmax_lowest<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean over positions of layer `layer`'s activations.
pub fn mean_pooled_rep<T: Scalar>(params: &LMParams<T>, tokens: &[TokenId], layer: usize) -> Result<Vec<f64>> {
    if layer >= params.config.n_layers {
        return Err(Error::contract(format!("layer {layer} >= n_layers {}", params.config.n_layers)));
    }
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let rows = embed_tokens(&mut g, &params.config, &bound, tokens)?;
    let out = forward_from_embeddings(&mut g, &params.config, &bound, rows, Some(layer))?;
    let pooled = g.mean_rows(out.hidden[layer])?;
    Ok(g.value(pooled).data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
}
