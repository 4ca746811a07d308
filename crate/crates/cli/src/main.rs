//! `ulab` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ulab_core::analysis::{alpha_grid, lmc_sweep, prefix_attack, relearn_curve};
use ulab_core::coreset::{select, Selection, SelectorKind};
use ulab_core::databench::{generate_benchmark, SyntheticBenchmark};
use ulab_core::evalsuite::{evaluate, EvalReport};
use ulab_core::model::{LMParams, TokenId};
use ulab_core::runner::{
    emit_report, epoch_schedule, forget_auc, load_checkpoint, output_root, pretrain, retrain, run_sweep,
    save_checkpoint, summarize, summary_csv, sweep_csv, write_atomic, LabConfig, MethodKind, ReportFormat, ReportRow,
    RunManifest,
};
use ulab_core::unlearn::unlearn;

const BENCH_FILE: &str = "bench.json";

#[derive(Parser, Debug)]
#[command(name = "ulab", version, about = "Coreset unlearning laboratory")]
struct Cli {
    /// Output root; defaults to $ULAB_OUT, then ./runs.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set unlearn.npo.beta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic benchmark.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the reference model, or with --retrain the baseline that
    /// never saw the forget facts.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        retrain: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select a coreset of the forget set.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: SelectorKind,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        bench: PathBuf,
        /// Reference model; required by every selector except random.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Unlearning method whose trajectory GraNd scores.
        #[arg(long, default_value = "npo")]
        unlearn_method: MethodKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unlearn a coreset of the forget set.
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: Hyper,
        #[arg(long)]
        method: MethodKind,
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
        #[arg(long = "select", default_value = "random")]
        selector: SelectorKind,
        /// Use a saved selection instead of selecting.
        #[arg(long, conflicts_with = "selector")]
        selection: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        ckpt_in: PathBuf,
        #[arg(long)]
        ckpt_out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        retrain_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coreset-ratio sweep, or a replay of one from its manifest.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "manifest")]
        bench: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        retrain_ckpt: Option<PathBuf>,
        /// Replay the sweep recorded in this manifest.
        #[arg(long, conflicts_with_all = ["bench", "ckpt", "retrain_ckpt", "config", "overrides"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// UE and UT along the line between two checkpoints.
    Connectivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        /// `start:end:step`.
        #[arg(long, default_value = "0:1:0.1")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prefix attack against the forget MCQ.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// UE after fine-tuning on growing numbers of unrelated records.
    Relearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect eval reports into one CSV or JSON table.
    Report {
        /// `report.json` files written by `eval`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Per-method hyperparameters, applied to whichever method runs.
#[derive(Args, Debug, Clone, Default)]
struct Hyper {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    base_epochs: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    layer: Option<usize>,
}

impl Hyper {
    fn overrides(&self, method: MethodKind) -> anyhow::Result<Vec<String>> {
        let m = method.name();
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("unlearn.{m}.{k}={v}"));
            }
        };
        push("lr", self.lr.map(|v| format!("{v:e}")));
        push("lambda", self.lambda.map(|v| format!("{v:?}")));
        push("base_epochs", self.base_epochs.map(|v| format!("{v:?}")));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        match method {
            MethodKind::Npo => {
                if self.c.is_some() || self.layer.is_some() {
                    bail!("--c and --layer apply to rmu only");
                }
                push("beta", self.beta.map(|v| format!("{v:?}")));
            }
            MethodKind::Rmu => {
                if self.beta.is_some() {
                    bail!("--beta applies to npo only");
                }
                push("c", self.c.map(|v| format!("{v:?}")));
                push("layer", self.layer.map(|v| v.to_string()));
            }
        }
        Ok(out)
    }
}

fn load_config(common: &Common, extra: &[String]) -> ulab_core::Result<LabConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    LabConfig::load(common.config.as_deref(), &overrides)
}

fn bench_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(BENCH_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_bench(p: &Path) -> ulab_core::Result<(PathBuf, SyntheticBenchmark)> {
    let path = bench_path(p);
    let b = SyntheticBenchmark::load_json(&path)?;
    Ok((path, b))
}

fn check_vocab(params: &LMParams<f32>, bench: &SyntheticBenchmark) -> ulab_core::Result<()> {
    if params.config.vocab_size != bench.vocab_size() {
        return Err(ulab_core::Error::Data(format!(
            "checkpoint vocabulary {} does not match benchmark vocabulary {}",
            params.config.vocab_size,
            bench.vocab_size()
        )));
    }
    Ok(())
}

fn parse_grid(spec: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad grid `{spec}`"))?;
    let [start, end, step] = parts[..] else {
        bail!("grid must be start:end:step, got `{spec}`");
    };
    if start != 0.0 || end != 1.0 || !(step > 0.0 && step <= 1.0) {
        bail!("grid must run from 0 to 1 with a step in (0, 1]");
    }
    let n = (1.0 / step).round();
    if ((n * step) - 1.0).abs() > 1e-9 {
        bail!("grid step {step} does not divide [0, 1]");
    }
    Ok(alpha_grid(n as usize + 1)?)
}

/// Fresh manifest for `command`, written to `dir` before anything else.
fn manifest(
    command: &str,
    lab: &LabConfig,
    seeds: Vec<u64>,
    inputs: &[(&str, &Path)],
) -> ulab_core::Result<RunManifest> {
    let mut m = RunManifest::new(command, lab.to_toml()?, seeds);
    for (name, path) in inputs {
        m.add_input(name, path)?;
    }
    Ok(m)
}

fn file_out(root: &Path, out: Option<PathBuf>, cmd: &str, name: &str) -> PathBuf {
    out.unwrap_or_else(|| root.join(cmd).join(name))
}

fn dir_of(file: &Path) -> PathBuf {
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> ulab_core::Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

#[derive(serde::Serialize)]
struct ReportFile<'a> {
    config: &'a str,
    checkpoint: &'a Path,
    report: &'a EvalReport,
}

#[derive(serde::Deserialize)]
struct ReportFileIn {
    report: EvalReport,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = output_root(cli.root.as_deref());
    match cli.cmd {
        Cmd::GenData { common, out } => {
            let lab = load_config(&common, &[])?;
            let dir = out.unwrap_or_else(|| root.join("data"));
            manifest("gen-data", &lab, vec![lab.data.seed], &[])?.write(&dir)?;
            let bench = generate_benchmark(&lab.data)?;
            bench.save_json(&dir.join(BENCH_FILE))?;
            log::info!("wrote {} ({} tokens vocabulary)", dir.join(BENCH_FILE).display(), bench.vocab_size());
        }
        Cmd::Train { common, bench, retrain: base, out } => {
            let lab = load_config(&common, &[])?;
            let (bpath, b) = load_bench(&bench)?;
            let name = if base { "retrain.ulck" } else { "model.ulck" };
            let path = file_out(&root, out, "train", name);
            manifest("train", &lab, vec![lab.model.seed, lab.pretrain.seed], &[("bench", &bpath)])?
                .write(&dir_of(&path))?;
            let trained = if base { retrain(&lab, &b)? } else { pretrain(&lab, &b)? };
            save_checkpoint(&trained.params, &path)?;
            if let Some(l) = trained.epoch_loss.last() {
                log::info!("final epoch loss {l:.4}");
            }
            log::info!("wrote {}", path.display());
        }
        Cmd::Select { common, method, ratio, seed, bench, ckpt, unlearn_method, out } => {
            let lab = load_config(&common, &[])?;
            let (bpath, b) = load_bench(&bench)?;
            let path = file_out(&root, out, "select", "selection.json");
            let mut inputs = vec![("bench", bpath.as_path())];
            if let Some(c) = &ckpt {
                inputs.push(("ckpt", c));
            }
            manifest("select", &lab, vec![seed], &inputs)?.write(&dir_of(&path))?;
            let sel = match (&ckpt, method) {
                (None, SelectorKind::Random) => ulab_core::coreset::random_select(b.forget_records.len(), ratio, seed)?,
                (None, _) => bail!("selector `{}` needs --ckpt", method.name()),
                (Some(c), _) => {
                    let theta0 = load_checkpoint(c)?;
                    check_vocab(&theta0, &b)?;
                    let cfg = lab.unlearn.config(unlearn_method, &theta0.config, ratio, seed);
                    let forget: Vec<&[TokenId]> = b.forget_records.iter().map(|r| r.tokens.as_slice()).collect();
                    let retain: Vec<&[TokenId]> = b.retain_records.iter().map(|r| r.tokens.as_slice()).collect();
                    select(method, &theta0, &forget, &retain, &cfg, ratio, seed)?
                }
            };
            write_json(&path, &sel)?;
            log::info!("selected {} of {} records", sel.indices.len(), b.forget_records.len());
        }
        Cmd::Unlearn { common, hyper, method, ratio, selector, selection, seed, bench, ckpt_in, ckpt_out } => {
            let lab = load_config(&common, &hyper.overrides(method)?)?;
            let (bpath, b) = load_bench(&bench)?;
            let path = file_out(&root, ckpt_out, "unlearn", "unlearned.ulck");
            let mut inputs = vec![("bench", bpath.as_path()), ("ckpt", ckpt_in.as_path())];
            if let Some(s) = &selection {
                inputs.push(("selection", s));
            }
            let theta0 = load_checkpoint(&ckpt_in)?;
            check_vocab(&theta0, &b)?;
            let cfg = lab.unlearn.config(method, &theta0.config, ratio, seed);
            let mut m = manifest("unlearn", &lab, vec![seed], &inputs)?;
            m.schedule.push(ulab_core::runner::ScheduleEntry {
                method: method.name().into(),
                ratio,
                epochs: cfg.epochs(),
            });
            m.write(&dir_of(&path))?;
            let forget: Vec<&[TokenId]> = b.forget_records.iter().map(|r| r.tokens.as_slice()).collect();
            let retain: Vec<&[TokenId]> = b.retain_records.iter().map(|r| r.tokens.as_slice()).collect();
            let sel: Selection = match &selection {
                Some(s) => {
                    let text = std::fs::read_to_string(s).map_err(|e| ulab_core::Error::io(s, e))?;
                    let sel: Selection = serde_json::from_str(&text).map_err(ulab_core::Error::from)?;
                    if sel.ratio != ratio {
                        bail!("selection ratio {} differs from --ratio {ratio}", sel.ratio);
                    }
                    sel.validate(forget.len())?;
                    sel
                }
                None => select(selector, &theta0, &forget, &retain, &cfg, ratio, seed)?,
            };
            let subset: Vec<&[TokenId]> = sel.indices.iter().map(|&i| forget[i]).collect();
            let out = unlearn(&theta0, &subset, &retain, &cfg)?;
            save_checkpoint(&out.params, &path)?;
            write_json(&dir_of(&path).join("trace.json"), &out.trace)?;
            log::info!(
                "{} records, {} epochs, {} steps; wrote {}",
                subset.len(),
                out.epochs,
                out.steps,
                path.display()
            );
        }
        Cmd::Eval { common, ckpt, bench, retrain_ckpt, out } => {
            let lab = load_config(&common, &[])?;
            let (bpath, b) = load_bench(&bench)?;
            let path = file_out(&root, out, "eval", "report.json");
            let mut inputs = vec![("bench", bpath.as_path()), ("ckpt", ckpt.as_path())];
            if let Some(r) = &retrain_ckpt {
                inputs.push(("retrain_ckpt", r));
            }
            let m = manifest("eval", &lab, vec![], &inputs)?;
            m.write(&dir_of(&path))?;
            let params = load_checkpoint(&ckpt)?;
            check_vocab(&params, &b)?;
            let retrain_auc = match &retrain_ckpt {
                Some(r) => Some(forget_auc(&load_checkpoint(r)?, &b)?),
                None => None,
            };
            let report = evaluate(&params, &b, retrain_auc, &lab.eval)?;
            write_json(&path, &ReportFile { config: &m.config, checkpoint: &ckpt, report: &report })?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Cmd::Sweep { common, bench, ckpt, retrain_ckpt, manifest: replay, out } => {
            let dir = out.unwrap_or_else(|| root.join("sweep"));
            let (lab, bench, ckpt, retrain_ckpt) = match &replay {
                Some(mpath) => {
                    let old = RunManifest::read(mpath)?;
                    if old.command != "sweep" {
                        bail!("{} records a `{}` run, not a sweep", mpath.display(), old.command);
                    }
                    old.verify_inputs()?;
                    let lab = LabConfig::from_toml_str(&old.config, &[])?;
                    let get = |k: &str| old.input_paths.get(k).cloned();
                    let bench = get("bench").context("manifest lacks the bench input")?;
                    let ckpt = get("ckpt").context("manifest lacks the ckpt input")?;
                    (lab, bench, ckpt, get("retrain_ckpt"))
                }
                None => (
                    load_config(&common, &[])?,
                    bench.expect("required by clap"),
                    ckpt.expect("required by clap"),
                    retrain_ckpt,
                ),
            };
            let (bpath, b) = load_bench(&bench)?;
            let theta0 = load_checkpoint(&ckpt)?;
            check_vocab(&theta0, &b)?;
            let mut inputs = vec![("bench", bpath.as_path()), ("ckpt", ckpt.as_path())];
            if let Some(r) = &retrain_ckpt {
                inputs.push(("retrain_ckpt", r));
            }
            let seeds = (0..lab.sweep.trials as u64).collect();
            let mut m = manifest("sweep", &lab, seeds, &inputs)?;
            m.schedule = epoch_schedule(&lab.sweep, &lab.unlearn, &theta0);
            m.write(&dir)?;
            let retrain_auc = match &retrain_ckpt {
                Some(r) => Some(forget_auc(&load_checkpoint(r)?, &b)?),
                None => None,
            };
            let rows = run_sweep(&lab.sweep, &lab.unlearn, &b, &theta0, retrain_auc, &lab.eval)?;
            write_atomic(&dir.join("sweep.csv"), &sweep_csv(&rows)?)?;
            write_atomic(&dir.join("summary.csv"), &summary_csv(&summarize(&rows))?)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            log::info!("{} cells, {failed} failed; wrote {}", rows.len(), dir.display());
        }
        Cmd::Connectivity { common, ckpt_a, ckpt_b, bench, grid, out } => {
            let lab = load_config(&common, &[])?;
            let grid = parse_grid(&grid)?;
            let (bpath, b) = load_bench(&bench)?;
            let dir = out.unwrap_or_else(|| root.join("connectivity"));
            manifest("connectivity", &lab, vec![], &[("bench", &bpath), ("ckpt_a", &ckpt_a), ("ckpt_b", &ckpt_b)])?
                .write(&dir)?;
            let (a, bb) = (load_checkpoint(&ckpt_a)?, load_checkpoint(&ckpt_b)?);
            check_vocab(&a, &b)?;
            let sweep = lmc_sweep(&a, &bb, &grid, &b)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["alpha", "ue", "ut"])?;
            for i in 0..sweep.alphas.len() {
                w.write_record([sweep.alphas[i], sweep.ue[i], sweep.ut[i]].map(|x| format!("{x:.6}")))?;
            }
            write_atomic(&dir.join("connectivity.csv"), &w.into_inner()?)?;
            let summary = serde_json::json!({
                "points": sweep.alphas.len(),
                "max_ue_deviation": sweep.max_ue_deviation(),
                "sweep": sweep,
            });
            write_json(&dir.join("summary.json"), &summary)?;
        }
        Cmd::Attack { common, ckpt, bench, m: prefix, iters, topk, out } => {
            let mut extra = Vec::new();
            for (k, v) in [("prefix_len", prefix), ("iterations", iters), ("top_k", topk)] {
                if let Some(v) = v {
                    extra.push(format!("attack.{k}={v}"));
                }
            }
            let lab = load_config(&common, &extra)?;
            let (bpath, b) = load_bench(&bench)?;
            let dir = out.unwrap_or_else(|| root.join("attack"));
            manifest("attack", &lab, vec![lab.attack.seed], &[("bench", &bpath), ("ckpt", &ckpt)])?.write(&dir)?;
            let params = load_checkpoint(&ckpt)?;
            check_vocab(&params, &b)?;
            let res = prefix_attack(&params, &b.forget_eval, &lab.attack.config(b.layout.first_filler()))?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["iteration", "objective"])?;
            for (i, v) in res.trace.iter().enumerate() {
                w.write_record([i.to_string(), format!("{v:.6}")])?;
            }
            write_atomic(&dir.join("attack.csv"), &w.into_inner()?)?;
            write_json(&dir.join("summary.json"), &res)?;
            println!("ue before {:.2} after {:.2}", res.ue_before, res.ue_after);
        }
        Cmd::Relearn { common, ckpt, bench, counts, seeds, out } => {
            let lab = load_config(&common, &[])?;
            let counts = counts.unwrap_or_else(|| lab.relearn.counts.clone());
            let seeds = seeds.unwrap_or_else(|| lab.relearn.seeds.clone());
            let (bpath, b) = load_bench(&bench)?;
            let dir = out.unwrap_or_else(|| root.join("relearn"));
            manifest("relearn", &lab, seeds.clone(), &[("bench", &bpath), ("ckpt", &ckpt)])?.write(&dir)?;
            let params = load_checkpoint(&ckpt)?;
            check_vocab(&params, &b)?;
            let ft: Vec<Vec<TokenId>> = b.finetune_records.iter().map(|r| r.tokens.clone()).collect();
            let curve = relearn_curve(&params, &ft, &counts, &seeds, &lab.relearn.train, &b)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["count".to_string(), "ue_mean".to_string()];
            header.extend(curve.seeds.iter().map(|s| format!("ue_seed{s}")));
            w.write_record(&header)?;
            for (i, c) in curve.counts.iter().enumerate() {
                let mut row = vec![c.to_string(), format!("{:.6}", curve.ue[i])];
                row.extend(curve.per_seed.iter().map(|s| format!("{:.6}", s[i])));
                w.write_record(&row)?;
            }
            write_atomic(&dir.join("relearn.csv"), &w.into_inner()?)?;
            let summary = serde_json::json!({ "spearman": curve.spearman(), "curve": curve });
            write_json(&dir.join("summary.json"), &summary)?;
        }
        Cmd::Report { inputs, format, out } => {
            let ext = match format {
                ReportFormat::Csv => "csv",
                ReportFormat::Json => "json",
            };
            let path = out.unwrap_or_else(|| root.join("report").join(format!("report.{ext}")));
            let mut rows = Vec::with_capacity(inputs.len());
            for p in &inputs {
                let text = std::fs::read_to_string(p).map_err(|e| ulab_core::Error::io(p, e))?;
                let r: ReportFileIn = serde_json::from_str(&text).map_err(ulab_core::Error::from)?;
                let label = p.parent().and_then(|d| d.file_name()).unwrap_or(p.as_os_str()).to_string_lossy();
                rows.push(ReportRow::new(label, &r.report));
            }
            emit_report(&rows, format, &path)?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain().find_map(|e| e.downcast_ref::<ulab_core::Error>()).map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parses_eleven_points() {
        let g = parse_grid("0:1:0.1").unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert!(parse_grid("0:1:0.3").is_err());
        assert!(parse_grid("0.2:1:0.1").is_err());
        assert!(parse_grid("0:1").is_err());
    }

    #[test]
    fn hyper_flags_become_overrides() {
        let h = Hyper { lr: Some(0.01), beta: Some(0.5), ..Hyper::default() };
        let o = h.overrides(MethodKind::Npo).unwrap();
        assert_eq!(o, ["unlearn.npo.lr=1e-2", "unlearn.npo.beta=0.5"]);
        assert!(h.overrides(MethodKind::Rmu).is_err());
        let lab = LabConfig::from_toml_str("", &o).unwrap();
        assert_eq!(lab.unlearn.npo.beta, 0.5);
        assert_eq!(lab.unlearn.npo.lr, 0.01);
    }

    #[test]
    fn core_errors_keep_their_exit_codes() {
        let e = anyhow::Error::from(ulab_core::Error::Data("x".into())).context("loading");
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }
}
