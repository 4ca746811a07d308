//! Coreset-ratio sweep: select, unlearn, evaluate for every grid cell.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{MethodKind, SweepSpec, UnlearnSettings};
use super::manifest::ScheduleEntry;
use crate::coreset::{select, SelectorKind};
use crate::databench::SyntheticBenchmark;
use crate::error::Result;
use crate::evalsuite::{evaluate, EvalOptions, EvalReport};
use crate::model::{LMParams, TokenId};
use crate::unlearn::unlearn;

/// One (method, selector, ratio, trial) result. Failed cells carry the error
/// kind and message instead of metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: MethodKind,
    pub selector: SelectorKind,
    pub ratio: f64,
    pub trial: usize,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    method: MethodKind,
    selector: SelectorKind,
    ratio: f64,
    trial: usize,
}

/// Epochs each (method, ratio) pair runs for.
pub fn epoch_schedule(spec: &SweepSpec, settings: &UnlearnSettings, params: &LMParams<f32>) -> Vec<ScheduleEntry> {
    let mut out = Vec::new();
    for &method in &spec.methods {
        for &ratio in &spec.ratios {
            let cfg = settings.config(method, &params.config, ratio, 0);
            out.push(ScheduleEntry { method: method.name().to_string(), ratio, epochs: cfg.epochs() });
        }
    }
    out
}

fn run_cell(
    cell: Cell,
    settings: &UnlearnSettings,
    bench: &SyntheticBenchmark,
    theta0: &LMParams<f32>,
    forget: &[Vec<TokenId>],
    retain: &[Vec<TokenId>],
    retrain_auc: Option<f64>,
    eval: &EvalOptions,
) -> Result<EvalReport> {
    let seed = cell.trial as u64;
    let cfg = settings.config(cell.method, &theta0.config, cell.ratio, seed);
    let selection = select(cell.selector, theta0, forget, retain, &cfg, cell.ratio, seed)?;
    let subset: Vec<Vec<TokenId>> = selection.indices.iter().map(|&i| forget[i].clone()).collect();
    let out = unlearn(theta0, &subset, retain, &cfg)?;
    evaluate(&out.params, bench, retrain_auc, eval)
}

/// Runs every cell of `spec`. Cells are independent and run in parallel;
/// rows come back in grid order (method, selector, ratio, trial).
pub fn run_sweep(
    spec: &SweepSpec,
    settings: &UnlearnSettings,
    bench: &SyntheticBenchmark,
    theta0: &LMParams<f32>,
    retrain_auc: Option<f64>,
    eval: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let forget: Vec<Vec<TokenId>> = bench.forget_records.iter().map(|r| r.tokens.clone()).collect();
    let retain: Vec<Vec<TokenId>> = bench.retain_records.iter().map(|r| r.tokens.clone()).collect();
    let mut cells = Vec::new();
    for &method in &spec.methods {
        for &selector in &spec.selectors {
            for &ratio in &spec.ratios {
                for trial in 0..spec.trials {
                    cells.push(Cell { method, selector, ratio, trial });
                }
            }
        }
    }
    Ok(cells
        .par_iter()
        .map(|&cell| {
            let res = run_cell(cell, settings, bench, theta0, &forget, &retain, retrain_auc, eval);
            if let Err(e) = &res {
                log::warn!(
                    "sweep cell {}/{}/{}/{} failed: {e}",
                    cell.method.name(),
                    cell.selector.name(),
                    cell.ratio,
                    cell.trial
                );
            }
            SweepRow {
                method: cell.method,
                selector: cell.selector,
                ratio: cell.ratio,
                trial: cell.trial,
                error: res.as_ref().err().map(|e| format!("{}: {e}", e.tag())),
                report: res.ok(),
            }
        })
        .collect())
}

pub const SWEEP_HEADER: [&str; 10] =
    ["method", "selector", "ratio", "trial", "ue", "ut", "verbmem", "knowmem", "privleak", "error"];

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

/// Long-format CSV, one row per trial, numbers with six decimals.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        let metrics: [String; 5] = match &r.report {
            Some(rep) => [
                fixed(rep.ue),
                fixed(rep.ut),
                fixed(rep.verbmem),
                fixed(rep.knowmem),
                rep.privleak.map(fixed).unwrap_or_default(),
            ],
            None => Default::default(),
        };
        let mut rec =
            vec![r.method.name().to_string(), r.selector.name().to_string(), fixed(r.ratio), r.trial.to_string()];
        rec.extend(metrics);
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| crate::Error::Data(format!("csv flush: {e}")))
}

/// Mean and sample standard deviation of one metric over successful trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn stat(xs: &[f64]) -> Option<Stat> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Some(Stat { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: MethodKind,
    pub selector: SelectorKind,
    pub ratio: f64,
    pub trials: usize,
    pub failed: usize,
    pub ue: Option<Stat>,
    pub ut: Option<Stat>,
    pub verbmem: Option<Stat>,
    pub knowmem: Option<Stat>,
}

/// Per-cell mean ± std, in first-appearance order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        let key = order
            .iter()
            .position(|&(m, s, p): &(MethodKind, SelectorKind, f64)| m == r.method && s == r.selector && p == r.ratio)
            .unwrap_or_else(|| {
                order.push((r.method, r.selector, r.ratio));
                order.len() - 1
            });
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let (method, selector, ratio) = order[key];
            let ok: Vec<&EvalReport> = rs.iter().filter_map(|r| r.report.as_ref()).collect();
            let col = |f: fn(&EvalReport) -> f64| stat(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                method,
                selector,
                ratio,
                trials: rs.len(),
                failed: rs.len() - ok.len(),
                ue: col(|r| r.ue),
                ut: col(|r| r.ut),
                verbmem: col(|r| r.verbmem),
                knowmem: col(|r| r.knowmem),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "selector",
        "ratio",
        "trials",
        "failed",
        "ue_mean",
        "ue_std",
        "ut_mean",
        "ut_std",
        "verbmem_mean",
        "verbmem_std",
        "knowmem_mean",
        "knowmem_std",
    ])?;
    for r in rows {
        let mut rec = vec![
            r.method.name().to_string(),
            r.selector.name().to_string(),
            fixed(r.ratio),
            r.trials.to_string(),
            r.failed.to_string(),
        ];
        for s in [r.ue, r.ut, r.verbmem, r.knowmem] {
            match s {
                Some(s) => rec.extend([fixed(s.mean), fixed(s.std)]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| crate::Error::Data(format!("csv flush: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databench::{generate_benchmark, GenConfig};
    use crate::model::LMConfig;

    fn tiny() -> (SyntheticBenchmark, LMParams<f32>) {
        let bench = generate_benchmark(&GenConfig {
            n_forget_facts: 8,
            n_retain_facts: 8,
            paraphrases_per_fact: 2,
            record_len: 24,
            n_records: 6,
            n_subjects: 8,
            n_relations: 2,
            n_objects: 6,
            n_filler: 6,
            n_templates: 2,
            n_finetune_facts: 4,
            n_finetune_records: 0,
            ..GenConfig::default()
        })
        .unwrap();
        let cfg =
            LMConfig { vocab_size: bench.vocab_size(), d_model: 8, n_layers: 2, n_heads: 2, max_seq_len: 32, seed: 1 };
        (bench, LMParams::init(cfg).unwrap())
    }

    fn quick_settings() -> UnlearnSettings {
        let mut s = UnlearnSettings::default();
        s.npo.base_epochs = 0.5;
        s.rmu.base_epochs = 0.5;
        s
    }

    #[test]
    fn single_cell_gives_one_row() {
        let (bench, p) = tiny();
        let spec = SweepSpec {
            ratios: vec![1.0],
            selectors: vec![SelectorKind::Random],
            methods: vec![MethodKind::Npo],
            trials: 1,
        };
        let rows = run_sweep(&spec, &quick_settings(), &bench, &p, None, &EvalOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].error.is_none());
        let text = String::from_utf8(sweep_csv(&rows).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("method,selector,ratio,trial,ue,ut,verbmem,knowmem,privleak,error\n"));
    }

    #[test]
    fn grid_has_every_combination_and_is_reproducible() {
        let (bench, p) = tiny();
        let spec = SweepSpec {
            ratios: vec![0.2, 0.5, 1.0],
            selectors: vec![SelectorKind::Random, SelectorKind::Mink],
            methods: vec![MethodKind::Npo, MethodKind::Rmu],
            trials: 5,
        };
        let s = quick_settings();
        let rows = run_sweep(&spec, &s, &bench, &p, Some(0.5), &EvalOptions::default()).unwrap();
        assert_eq!(rows.len(), 60);
        assert_eq!((rows[0].method, rows[59].method), (MethodKind::Npo, MethodKind::Rmu));
        assert_eq!(rows[7].trial, 2);
        let again = run_sweep(&spec, &s, &bench, &p, Some(0.5), &EvalOptions::default()).unwrap();
        assert_eq!(sweep_csv(&rows).unwrap(), sweep_csv(&again).unwrap());
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 12);
        assert!(summary.iter().all(|r| r.trials == 5));
    }

    #[test]
    fn failed_cells_are_tagged_and_sweep_continues() {
        let (bench, p) = tiny();
        let mut s = quick_settings();
        s.rmu.layer = Some(7);
        let spec = SweepSpec {
            ratios: vec![1.0],
            selectors: vec![SelectorKind::Random],
            methods: vec![MethodKind::Npo, MethodKind::Rmu],
            trials: 2,
        };
        let rows = run_sweep(&spec, &s, &bench, &p, None, &EvalOptions::default()).unwrap();
        assert!(rows[..2].iter().all(|r| r.error.is_none()));
        assert!(rows[2..].iter().all(|r| r.report.is_none() && r.error.as_deref().unwrap().starts_with("config:")));
        let summary = summarize(&rows);
        assert_eq!((summary[1].failed, summary[1].ue), (2, None));
        let text = String::from_utf8(summary_csv(&summary).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn stats_match_hand_values() {
        let s = stat(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(stat(&[7.0]).unwrap().std, 0.0);
        assert!(stat(&[]).is_none());
    }

    #[test]
    fn schedule_scales_epochs() {
        let (_, p) = tiny();
        let e = epoch_schedule(&SweepSpec::default(), &UnlearnSettings::default(), &p);
        let get = |m: &str, r: f64| e.iter().find(|x| x.method == m && x.ratio == r).unwrap().epochs;
        let base = UnlearnSettings::default().rmu.base_epochs;
        assert_eq!(get("rmu", 1.0), base as usize);
        assert_eq!(get("rmu", 0.05), (base / 0.05).round() as usize);
    }
}
