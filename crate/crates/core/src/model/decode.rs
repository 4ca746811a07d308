//! Incremental inference with a key/value cache.

use super::{slot, LMParams, TokenId};
use crate::error::{Error, Result};
use crate::numcore::{gelu_fwd, gemm, MatRef, Scalar, LN_EPS};

#[derive(Clone)]
pub(crate) struct KvDecoder<'a, T: Scalar> {
    params: &'a LMParams<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T]) -> Vec<T> {
    let n = T::from_usize(x.len()).expect("width");
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::from_f64c(LN_EPS)).sqrt();
    x.iter().zip(g.iter().zip(b)).map(|(&v, (&gi, &bi))| (v - mean) * rstd * gi + bi).collect()
}

fn vec_mat<T: Scalar>(x: &[T], w: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    gemm(MatRef::new(x, 1, x.len()), MatRef::new(w, x.len(), cols), &mut out, false);
    out
}

impl<'a, T: Scalar> KvDecoder<'a, T> {
    pub fn new(params: &'a LMParams<T>) -> Self {
        let n = params.config.n_layers;
        Self { params, keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<T>> {
        let cfg = &self.params.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::contract(format!("token id {token} out of range for vocab {}", cfg.vocab_size)));
        }
        if self.len >= cfg.max_seq_len {
            return Err(Error::contract("decoder exceeded max_seq_len"));
        }
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let p = |i: usize| self.params.tensor(i).data();
        let tok = &p(slot::TOK)[token as usize * d..(token as usize + 1) * d];
        let pos = &p(slot::POS)[self.len * d..(self.len + 1) * d];
        let mut x: Vec<T> = tok.iter().zip(pos).map(|(&a, &b)| a + b).collect();
        let inv_sqrt = T::from_f64c(1.0 / (dh as f64).sqrt());
        let t = self.len + 1;
        for l in 0..cfg.n_layers {
            let w = |k| p(slot::layer(l, k));
            let h = layer_norm(&x, w(slot::LN1_G), w(slot::LN1_B));
            let q = vec_mat(&h, w(slot::WQ), d);
            self.keys[l].extend(vec_mat(&h, w(slot::WK), d));
            self.values[l].extend(vec_mat(&h, w(slot::WV), d));
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut merged = vec![T::zero(); d];
            for head in 0..cfg.n_heads {
                let off = head * dh;
                let qh = &q[off..off + dh];
                let scores: Vec<T> = (0..t)
                    .map(|j| {
                        let kj = &keys[j * d + off..j * d + off + dh];
                        qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * inv_sqrt
                    })
                    .collect();
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
                let z = exps.iter().copied().sum::<T>();
                for (j, &e) in exps.iter().enumerate() {
                    let a = e / z;
                    let vj = &values[j * d + off..j * d + off + dh];
                    for (m, &v) in merged[off..off + dh].iter_mut().zip(vj) {
                        *m = *m + a * v;
                    }
                }
            }
            let attn = vec_mat(&merged, w(slot::WO), d);
            x.iter_mut().zip(&attn).for_each(|(a, &b)| *a = *a + b);
            let h2 = layer_norm(&x, w(slot::LN2_G), w(slot::LN2_B));
            let mut up = vec_mat(&h2, w(slot::W1), cfg.mlp_dim());
            for (u, &b) in up.iter_mut().zip(w(slot::B1)) {
                *u = gelu_fwd(*u + b);
            }
            let down = vec_mat(&up, w(slot::W2), d);
            for ((a, &dn), &b) in x.iter_mut().zip(&down).zip(w(slot::B2)) {
                *a = *a + dn + b;
            }
        }
        let n = cfg.n_layers;
        let hf = layer_norm(&x, p(slot::final_g(n)), p(slot::final_b(n)));
        let mut logits = vec![T::zero(); cfg.vocab_size];
        gemm(MatRef::new(&hf, 1, d), MatRef::new(p(slot::head(n)), cfg.vocab_size, d).t(), &mut logits, false);
        self.len = t;
        Ok(logits)
    }
}
