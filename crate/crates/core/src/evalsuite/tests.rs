use super::*;
use crate::model::LMConfig;
use crate::numcore::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(v: usize) -> LMConfig {
    LMConfig { vocab_size: v, d_model: 8, n_layers: 2, n_heads: 2, max_seq_len: 40, seed: 1 }
}

fn set(p: &mut LMParams<f32>, name: &str, data: Vec<f32>) {
    let idx = p.tensors().iter().position(|(n, _)| n == name).unwrap();
    let shape = p.tensor(idx).shape().to_vec();
    *p.tensor_mut(idx) = Tensor::new(shape, data).unwrap();
}

/// Model whose next-token logits are fixed: `favored` gets `margin`, the rest 0.
fn constant_model(v: usize, favored: Option<usize>, margin: f32) -> LMParams<f32> {
    let mut p = LMParams::<f32>::init(cfg(v)).unwrap();
    set(&mut p, "ln_f.g", vec![0.0; 8]);
    let mut b = vec![0.0; 8];
    b[0] = 1.0;
    set(&mut p, "ln_f.b", b);
    let mut head = vec![0.0; v * 8];
    if let Some(t) = favored {
        head[t * 8] = margin;
    }
    set(&mut p, "head", head);
    p
}

fn random_items(n: usize, v: u32, seed: u64) -> Vec<McqItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q = vec![rng.gen_range(0..v), rng.gen_range(0..v)];
            let opts = std::array::from_fn(|_| vec![rng.gen_range(0..v)]);
            McqItem::new(q, opts, rng.gen_range(0..4)).unwrap()
        })
        .collect()
}

#[test]
fn uniform_model_scores_a_quarter() {
    let p = constant_model(20, None, 0.0);
    let items = random_items(1000, 20, 3);
    let acc = mcq_accuracy(&p, &items).unwrap();
    let answered_first = items.iter().filter(|it| it.answer == 0).count() as f64 / 10.0;
    assert_eq!(acc, answered_first);
    assert!((acc - 25.0).abs() <= 3.0, "{acc}");
    let ue = unlearning_effectiveness(&p, &items).unwrap();
    assert_eq!(ue + acc, 100.0);
    assert!((ue - 75.0).abs() <= 3.0);
}

#[test]
fn forced_correct_option_and_ue_arithmetic() {
    let p = constant_model(10, Some(7), 60.0);
    let item = McqItem::new(vec![1, 2], [vec![3], vec![7], vec![4], vec![5]], 1).unwrap();
    assert_eq!(mcq_accuracy(&p, std::slice::from_ref(&item)).unwrap(), 100.0);
    assert_eq!(unlearning_effectiveness(&p, std::slice::from_ref(&item)).unwrap(), 0.0);
    // 707 of 2000 items name the favored token as the answer.
    let items: Vec<McqItem> = (0..2000)
        .map(|i| {
            let answer = if i < 707 { 2 } else { 0 };
            let mut opts = [vec![1], vec![2], vec![3], vec![4]];
            if i < 707 {
                opts[2] = vec![7];
            } else {
                opts[3] = vec![7];
            }
            McqItem::new(vec![5], opts, answer).unwrap()
        })
        .collect();
    assert!((mcq_accuracy(&p, &items).unwrap() - 35.35).abs() < 1e-9);
    assert!((unlearning_effectiveness(&p, &items).unwrap() - 64.65).abs() < 1e-9);
}

#[test]
fn length_normalization_and_multi_token_options() {
    let p = constant_model(10, Some(7), 3.0);
    // [7] has a higher per-token likelihood than [7, 2] even though the
    // summed score of a longer option is lower.
    let item = McqItem::new(vec![1], [vec![7, 2], vec![7], vec![2], vec![7, 7, 7]], 1).unwrap();
    let s = option_scores(&p, &item).unwrap();
    assert!((s[1] - s[3]).abs() < 1e-6);
    assert_eq!(mcq_predictions(&p, &[item]).unwrap(), vec![1]);
}

#[test]
fn lcs_examples() {
    assert_eq!(lcs_len(&['a', 'b', 'x', 'd'], &['a', 'b', 'c', 'd']), 3);
    assert_eq!(lcs_len::<u32>(&[], &[1, 2]), 0);
    assert_eq!(lcs_len(&[1, 2, 3], &[1, 2, 3]), 3);
}

#[test]
fn verbmem_examples() {
    let p = constant_model(6, Some(1), 40.0);
    let ones = vec![vec![2u32, 3, 1, 1, 1, 1, 1, 1]];
    for prompt_len in 1..8 {
        let expect = if prompt_len < 2 { 6.0 / 7.0 } else { 1.0 };
        let got = verbmem(&p, &ones, prompt_len).unwrap();
        assert!((got - 100.0 * expect).abs() < 1e-9, "{prompt_len}: {got}");
    }
    let zeros = vec![vec![1u32, 1, 0, 0, 0, 0]];
    assert_eq!(verbmem(&p, &zeros, 2).unwrap(), 0.0);
    assert!(verbmem(&p, &zeros, 6).is_err());
    assert!(verbmem(&p, &zeros, 0).is_err());
}

#[test]
fn auc_examples() {
    assert!((auc(&[1.0, 1.0, 1.0, 0.0, 0.0], &[0.5]).unwrap() - 0.6).abs() < 1e-12);
    assert_eq!(auc(&[0.3; 4], &[0.3; 4]).unwrap(), 0.5);
    assert_eq!(auc(&[2.0], &[1.0]).unwrap(), 1.0);
    assert_eq!(auc(&[1.0], &[2.0]).unwrap(), 0.0);
    assert!((privleak_from_auc(0.6, 0.5).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(privleak_from_auc(0.5, 0.0), None);
}

#[test]
fn privleak_of_identical_models_is_zero() {
    let p = LMParams::<f32>::init(cfg(9)).unwrap();
    let f = vec![vec![1u32, 2, 3, 4], vec![4, 3, 2, 1]];
    let h = vec![vec![5u32, 6, 7, 8], vec![8, 8, 1, 0]];
    assert_eq!(privleak(&p, &p, &f, &h).unwrap(), Some(0.0));
    let flat = constant_model(9, None, 0.0);
    assert_eq!(membership_auc(&flat, &f, &h).unwrap(), 0.5);
    assert!(membership_auc(&p, &f, &h[..1]).is_err());
}

fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    // Longest subsequence of `a` (by mask) that is also a subsequence of `b`.
    let is_sub = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_sub(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

proptest! {
    #[test]
    fn lcs_matches_brute_force(a in proptest::collection::vec(0u8..4, 0..10), b in proptest::collection::vec(0u8..4, 0..10)) {
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
    }

    #[test]
    fn rank_auc_matches_pairwise(m in proptest::collection::vec(0u8..20, 1..100), n in proptest::collection::vec(0u8..20, 1..100)) {
        let m: Vec<f64> = m.into_iter().map(f64::from).collect();
        let n: Vec<f64> = n.into_iter().map(f64::from).collect();
        let mut wins = 0.0;
        for a in &m {
            for b in &n {
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        let want = wins / (m.len() * n.len()) as f64;
        prop_assert!((auc(&m, &n).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ue_complements_accuracy_exactly(correct in 0usize..=500, extra in 1usize..500) {
        let total = correct + extra;
        let acc = 100.0 * correct as f64 / total as f64;
        prop_assert_eq!((100.0 - acc) + acc, 100.0);
    }
}
