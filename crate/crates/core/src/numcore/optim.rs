use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Gradients keyed by parameter name, aligned with a [`ParamSet`]'s order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<T = f32> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> GradMap<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &GradMap<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::contract("grad maps have different lengths"));
        }
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::contract(format!("grad map mismatch at {na} / {nb}")));
            }
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + y;
            }
        }
        Ok(())
    }
}

/// L2 norm over the concatenation of every gradient entry, accumulated in f64.
pub fn grad_l2_norm<T: Scalar>(grads: &GradMap<T>) -> f64 {
    grads.entries.iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt()
}

/// Anything that exposes an ordered list of named, mutable tensors.
pub trait ParamSet<T: Scalar> {
    fn named(&self) -> Vec<(&str, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &impl ParamSet<T>) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config<T: Scalar>(params: &impl ParamSet<T>, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update, applied in place.
pub fn adam_step<T: Scalar>(
    params: &mut impl ParamSet<T>,
    grads: &GradMap<T>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    {
        let named = params.named();
        if named.len() != grads.entries.len() || named.len() != state.m.len() {
            return Err(Error::contract(format!(
                "adam_step: {} params, {} grads, {} moment slots",
                named.len(),
                grads.entries.len(),
                state.m.len()
            )));
        }
        for ((name, p), (gname, g)) in named.iter().zip(&grads.entries) {
            if *name != gname || p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "adam_step: param {name}{:?} vs grad {gname}{:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, p) in params.tensors_mut().into_iter().enumerate() {
        let g = grads.entries[i].1.data();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].to_f64().unwrap_or(f64::NAN);
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let update = lr * mhat / (vhat.sqrt() + eps);
            if update != 0.0 {
                *w = T::from_f64c(w.to_f64().unwrap_or(f64::NAN) - update);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct One(Tensor<f64>);

    impl ParamSet<f64> for One {
        fn named(&self) -> Vec<(&str, &Tensor<f64>)> {
            vec![("w", &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
            vec![&mut self.0]
        }
    }

    fn grad(v: f64) -> GradMap<f64> {
        GradMap::new(vec![("w".into(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = One(Tensor::scalar(1.25));
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grad(0.0), &mut st, 0.1).unwrap();
        assert_eq!(p.0.item(), 1.25);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // g = 0.5, lr = 0.1: m = 0.05, v = 2.5e-4, m̂ = 0.5, v̂ = 0.25
        // update = 0.1 * 0.5 / (0.5 + 1e-8)
        let mut p = One(Tensor::scalar(1.0));
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grad(0.5), &mut st, 0.1).unwrap();
        let expect = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.0.item() - expect).abs() < 1e-15);
        assert!((st.m[0][0] - 0.05).abs() < 1e-15);
        assert!((st.v[0][0] - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn identical_calls_are_deterministic() {
        let p0 = One(Tensor::scalar(0.3));
        let st0 = AdamState::new(&p0);
        let run = || {
            let mut p = p0.clone();
            let mut st = st0.clone();
            adam_step(&mut p, &grad(-1.3), &mut st, 0.01).unwrap();
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = One(Tensor::scalar(0.3));
        let mut st = AdamState::new(&p);
        let bad = GradMap::new(vec![("w".into(), Tensor::from_vec(vec![1.0, 2.0]))]);
        assert!(matches!(adam_step(&mut p, &bad, &mut st, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn norm_of_three_four_is_five() {
        let g = GradMap::new(vec![
            ("a".into(), Tensor::from_vec(vec![3.0f64])),
            ("b".into(), Tensor::from_vec(vec![4.0f64])),
        ]);
        assert_eq!(grad_l2_norm(&g), 5.0);
        let z = GradMap::new(vec![("a".into(), Tensor::<f64>::zeros(&[3]))]);
        assert_eq!(grad_l2_norm(&z), 0.0);
    }
}
