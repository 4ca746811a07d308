use crate::databench::SyntheticBenchmark;
use crate::error::Result;
use crate::evalsuite::membership_auc;
use crate::model::LMParams;
use crate::unlearn::{train_lm, TrainOutput};

use super::config::LabConfig;

/// Reference model θ0 trained on the full pretraining corpus.
pub fn pretrain(lab: &LabConfig, bench: &SyntheticBenchmark) -> Result<TrainOutput<f32>> {
    let cfg = lab.model.lm_config(bench.vocab_size());
    train_lm(cfg, &bench.pretrain_corpus(), &lab.pretrain)
}

/// Baseline that never saw the forget facts, same recipe as [`pretrain`].
pub fn retrain(lab: &LabConfig, bench: &SyntheticBenchmark) -> Result<TrainOutput<f32>> {
    let cfg = lab.model.lm_config(bench.vocab_size());
    train_lm(cfg, &bench.retrain_corpus(), &lab.pretrain)
}

/// Membership AUC of `params` on forget vs holdout records.
pub fn forget_auc(params: &LMParams<f32>, bench: &SyntheticBenchmark) -> Result<f64> {
    membership_auc(params, &bench.forget_records, &bench.holdout_records)
}
