//! Command-line surface. Every command prints a human table followed by one
//! JSON object per line for machines.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ftn_core::budget::{baseline_count, ftn_budget, Baseline};
use ftn_core::layers::AttnVariant;
use ftn_core::{BackboneSpec, LayerSpec};
use serde::Serialize;

use crate::checkpoint::CheckpointLock;
use crate::config::HarnessConfig;
use crate::error::{exit, HarnessError, Result};
use crate::store::{AdaptMode, ModelState};
use crate::train::{self, AdaptRequest};

#[derive(Debug, Parser)]
#[command(name = "ftn", version, about = "Factorized tensor network adapters: budgets, training and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Built-in spec name (resnet18, resnet34, resnet50, vit_b32, toy4) or a JSON file
    #[arg(long)]
    pub spec: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file (checkpoint for training commands, JSON report otherwise)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON run configuration; defaults are used when absent
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train all backbone weights on the source domain
    TrainBackbone {
        #[command(flatten)]
        common: Common,
    },
    /// Add one task to a checkpoint, keeping the backbone frozen
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// source, hue, rotation or noise
        #[arg(long)]
        domain: String,
        /// feature-extractor, bn-only, ftn or finetune
        #[arg(long, default_value = "ftn")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        rank: usize,
    },
    /// Test-split accuracy and loss of registered tasks
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to every task
        #[arg(long)]
        task: Option<String>,
        /// Defaults to the domain the task was trained on
        #[arg(long)]
        domain: Option<String>,
    },
    /// Exact per-task parameter counts
    Budget {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        rank: u64,
        #[arg(long, default_value_t = 1)]
        tasks: u64,
        /// Attention delta placement: o or qv
        #[arg(long, default_value = "o")]
        variant: String,
        /// K for the K-adaptation comparison (attention specs)
        #[arg(long)]
        k: Option<u64>,
    },
    /// CP / TT / SVD factorization of fine-tuned weight deltas
    Factorize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A task trained with --mode finetune
        #[arg(long)]
        task: String,
        /// Checkpoint holding the frozen weights to diff against; defaults
        /// to --checkpoint's own backbone
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ranks: Vec<usize>,
    },
    /// Accuracy as deltas below a norm threshold are removed
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Number of equally spaced thresholds from 0 past the largest norm
        #[arg(long, default_value_t = 9)]
        thresholds: usize,
        /// Explicit thresholds; overrides --thresholds
        #[arg(long, value_delimiter = ',')]
        threshold_list: Option<Vec<f64>>,
        /// Write one pruned checkpoint per threshold into this directory
        #[arg(long)]
        prune_dir: Option<PathBuf>,
        #[arg(long)]
        domain: Option<String>,
    },
    /// Adapt at several ranks and seeds and report mean accuracy
    SweepRank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "rotation")]
        domain: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ranks: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Also run the bn-only, feature-extractor and full fine-tuning baselines
        #[arg(long)]
        baselines: bool,
    },
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::VALIDATION } else { exit::OK };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli.command, &mut lock) {
        Ok(()) => exit::OK,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn config(common: &Common) -> Result<HarnessConfig> {
    match &common.config {
        Some(p) => HarnessConfig::load(p),
        None => Ok(HarnessConfig::default()),
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| HarnessError::Validation("--out is required".into()))
}

fn check_spec(common: &Common, state: &ModelState) -> Result<()> {
    if let Some(s) = &common.spec {
        let spec = crate::load_spec(s)?;
        if spec != *state.spec() {
            return Err(HarnessError::Validation(format!(
                "--spec `{}` differs from the checkpoint's `{}`",
                spec.name,
                state.spec().name
            )));
        }
    }
    Ok(())
}

fn write_report<T: Serialize>(common: &Common, value: &T) -> Result<()> {
    if let Some(path) = &common.out {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(path, text).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Left-aligned text table.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(|s| s.as_str()).collect()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
        out.push('\n');
    }
    out
}

fn json_line<T: Serialize>(w: &mut dyn Write, kind: &str, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    if let serde_json::Value::Object(m) = &mut v {
        m.insert("record".into(), serde_json::Value::String(kind.into()));
    }
    writeln!(w, "{}", serde_json::to_string(&v)?).map_err(|e| HarnessError::Io("stdout".into(), e))
}

fn emit(w: &mut dyn Write, text: &str) -> Result<()> {
    write!(w, "{text}").map_err(|e| HarnessError::Io("stdout".into(), e))
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn parse_variant(s: &str) -> Result<AttnVariant> {
    match s {
        "o" | "output" => Ok(AttnVariant::Output),
        "qv" | "query-value" => Ok(AttnVariant::QueryValue),
        other => Err(HarnessError::Validation(format!("unknown attention variant `{other}` (o, qv)"))),
    }
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    task: &'a str,
    domain: &'a str,
    mode: AdaptMode,
    rank: usize,
    accuracy: f64,
    loss: f64,
    samples: usize,
}

pub fn run(cmd: Command, w: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::TrainBackbone { common } => {
            let cfg = config(&common)?;
            let spec = crate::load_spec(common.spec.as_deref().unwrap_or("toy4"))?;
            let out = require_out(&common)?;
            let _lock = CheckpointLock::acquire(out)?;
            let classes = spec.classes.first().copied().unwrap_or(8);
            let (tr, te) = train::domain_data(&spec, "source", classes, &cfg, common.seed)?;
            let run = train::train_backbone(&spec, &tr, &cfg, common.seed)?;
            let m = train::evaluate(&run.state, "source", &te)?;
            run.state.save(out)?;
            let rows: Vec<Vec<String>> = run
                .log
                .epoch_loss
                .iter()
                .enumerate()
                .map(|(e, l)| vec![(e + 1).to_string(), format!("{l:.4}")])
                .collect();
            emit(w, &table(&["epoch", "train loss"], &rows))?;
            emit(w, &format!("source test accuracy {}% over {} samples\n", pct(m.accuracy), m.samples))?;
            json_line(w, "train", &run.log)?;
            json_line(w, "eval", &EvalRecord { task: "source", domain: "source", mode: AdaptMode::Source, rank: 0, accuracy: m.accuracy, loss: m.loss, samples: m.samples })?;
        }
        Command::Adapt { common, checkpoint, task, domain, mode, rank } => {
            let cfg = config(&common)?;
            let out = require_out(&common)?;
            let _lock = CheckpointLock::acquire(out)?;
            let mut state = ModelState::load(&checkpoint)?;
            check_spec(&common, &state)?;
            let mode = AdaptMode::parse(&mode)?;
            let classes = state.spec().classes.get(state.tasks.len()).copied().unwrap_or(8);
            let (tr, te) = train::domain_data(state.spec(), &domain, classes, &cfg, common.seed)?;
            let req = AdaptRequest { id: &task, domain: &domain, mode, rank, seed: common.seed, data_seed: common.seed };
            let log = train::adapt_task(&mut state, &req, &tr, &cfg)?;
            let m = train::evaluate(&state, &task, &te)?;
            state.save(out)?;
            let rows = vec![vec![
                task.clone(),
                domain.clone(),
                mode.as_str().into(),
                state.task(&task)?.record.rank.to_string(),
                log.trainable_params.to_string(),
                pct(m.accuracy),
            ]];
            emit(w, &table(&["task", "domain", "mode", "rank", "trainable", "test acc %"], &rows))?;
            json_line(w, "train", &log)?;
            json_line(w, "eval", &EvalRecord { task: &task, domain: &domain, mode, rank, accuracy: m.accuracy, loss: m.loss, samples: m.samples })?;
        }
        Command::Eval { common, checkpoint, task, domain } => {
            let cfg = config(&common)?;
            let state = ModelState::load(&checkpoint)?;
            check_spec(&common, &state)?;
            state.check_integrity()?;
            let ids: Vec<String> = match task {
                Some(t) => vec![t],
                None => state.task_ids().iter().map(|s| s.to_string()).collect(),
            };
            let mut rows = Vec::new();
            let mut records = Vec::new();
            for id in &ids {
                let t = state.task(id)?;
                let dom = domain.clone().unwrap_or_else(|| t.record.domain.clone());
                let (_, te) = train::domain_data(state.spec(), &dom, t.record.classes, &cfg, t.record.data_seed)?;
                let m = train::evaluate(&state, id, &te)?;
                rows.push(vec![id.clone(), dom.clone(), t.record.mode.as_str().into(), t.record.rank.to_string(), pct(m.accuracy), format!("{:.4}", m.loss)]);
                records.push((id.clone(), dom, t.record.mode, t.record.rank, m));
            }
            emit(w, &table(&["task", "domain", "mode", "rank", "test acc %", "loss"], &rows))?;
            let mut json = Vec::new();
            for (id, dom, mode, rank, m) in &records {
                let r = EvalRecord { task: id, domain: dom, mode: *mode, rank: *rank, accuracy: m.accuracy, loss: m.loss, samples: m.samples };
                json_line(w, "eval", &r)?;
                json.push(serde_json::to_value(&r)?);
            }
            write_report(&common, &json)?;
        }
        Command::Budget { common, rank, tasks, variant, k } => {
            let spec = crate::load_spec(common.spec.as_deref().unwrap_or("resnet34"))?;
            let variant = parse_variant(&variant)?;
            let report = ftn_budget(&spec, tasks, rank, variant)?;
            let mut rows = vec![
                vec!["frozen backbone".into(), report.frozen_backbone.to_string()],
                vec!["adapters per task".into(), report.adapter_per_task.to_string()],
                vec!["batch norm per task".into(), report.bn_per_task.to_string()],
                vec!["heads (all tasks)".into(), report.heads_total.to_string()],
                vec!["total".into(), report.total.to_string()],
                vec!["feature extractor total".into(), report.feature_extractor_total.to_string()],
                vec!["multiplier".into(), format!("{:.4}", report.multiplier)],
            ];
            let baselines = attention_baselines(&spec, rank, k)?;
            for (name, count) in &baselines {
                rows.push(vec![format!("{name} per task"), count.to_string()]);
            }
            emit(w, &format!("{} tasks={} R={}\n", spec.name, tasks, rank))?;
            emit(w, &table(&["component", "parameters"], &rows))?;
            json_line(w, "budget", &report)?;
            for (name, count) in &baselines {
                json_line(w, "baseline", &serde_json::json!({"spec": spec.name, "method": name, "rank": rank, "per_task": count}))?;
            }
            write_report(&common, &report)?;
        }
        Command::Factorize { common, checkpoint, task, base, ranks } => {
            let cfg = config(&common)?;
            let state = ModelState::load(&checkpoint)?;
            check_spec(&common, &state)?;
            if ranks.contains(&0) || ranks.is_empty() {
                return Err(HarnessError::Validation("ranks must be positive".into()));
            }
            let deltas = match &base {
                Some(p) => train::finetune_deltas_against(&state, &task, &ModelState::load(p)?.backbone)?,
                None => train::finetune_deltas(&state, &task)?,
            };
            let report = train::factorize_deltas_report(&deltas, &ranks, &cfg)?;
            let rows: Vec<Vec<String>> = report
                .aggregates
                .iter()
                .map(|a| vec![a.method.as_str().into(), a.rank.to_string(), format!("{:.6}", a.mean_rel_error), format!("{:.6}", a.std_rel_error), a.params.to_string()])
                .collect();
            emit(w, &table(&["method", "rank", "mean rel err", "std", "params"], &rows))?;
            for r in &report.rows {
                json_line(w, "factorization", r)?;
            }
            for a in &report.aggregates {
                json_line(w, "aggregate", a)?;
            }
            write_report(&common, &report)?;
        }
        Command::Prune { common, checkpoint, task, thresholds, threshold_list, prune_dir, domain } => {
            let cfg = config(&common)?;
            let state = ModelState::load(&checkpoint)?;
            check_spec(&common, &state)?;
            let t = state.task(&task)?;
            let dom = domain.unwrap_or_else(|| t.record.domain.clone());
            let (_, te) = train::domain_data(state.spec(), &dom, t.record.classes, &cfg, t.record.data_seed)?;
            let ths = match threshold_list {
                Some(list) => list,
                None => train::prune_thresholds(&state, &task, thresholds)?,
            };
            let points = train::prune_at(&state, &task, &te, &ths)?;
            if let Some(dir) = &prune_dir {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
                for (i, p) in points.iter().enumerate() {
                    let (pruned, _) = train::pruned_state(&state, &task, p.threshold)?;
                    pruned.save(&dir.join(format!("{task}-t{i}.ftnc")))?;
                }
            }
            let rows: Vec<Vec<String>> =
                points.iter().map(|p| vec![format!("{:.6}", p.threshold), p.removed.to_string(), pct(p.accuracy)]).collect();
            emit(w, &table(&["threshold", "removed", "test acc %"], &rows))?;
            for p in &points {
                json_line(w, "prune", p)?;
            }
            write_report(&common, &points)?;
        }
        Command::SweepRank { common, checkpoint, domain, ranks, seeds, baselines } => {
            let cfg = config(&common)?;
            let state = ModelState::load(&checkpoint)?;
            check_spec(&common, &state)?;
            if ranks.contains(&0) || seeds == 0 {
                return Err(HarnessError::Validation("ranks and seed count must be positive".into()));
            }
            let classes = state.spec().classes.get(1).copied().unwrap_or(8);
            let (tr, te) = train::domain_data(state.spec(), &domain, classes, &cfg, common.seed)?;
            let mut settings = Vec::new();
            if baselines {
                settings.push((AdaptMode::FeatureExtractor, 0));
                settings.push((AdaptMode::BnOnly, 0));
            }
            settings.extend(ranks.iter().map(|&r| (AdaptMode::Ftn, r)));
            if baselines {
                settings.push((AdaptMode::Finetune, 0));
            }
            let seed_list: Vec<u64> = (0..seeds).map(|s| common.seed + s).collect();
            let (rows, means) = train::adaptation_sweep(&state, &domain, common.seed, &settings, &seed_list, &tr, &te, &cfg)?;
            let table_rows: Vec<Vec<String>> = means
                .iter()
                .map(|m| {
                    let params = rows.iter().find(|r| r.mode == m.mode && r.rank == m.rank).map_or(0, |r| r.trainable_params);
                    vec![m.mode.as_str().into(), m.rank.to_string(), params.to_string(), pct(m.mean_accuracy), m.runs.to_string()]
                })
                .collect();
            emit(w, &table(&["mode", "rank", "trainable", "mean acc %", "seeds"], &table_rows))?;
            for r in &rows {
                json_line(w, "run", r)?;
            }
            for m in &means {
                json_line(w, "mean", m)?;
            }
            write_report(&common, &serde_json::json!({"runs": rows, "means": means}))?;
        }
    }
    Ok(())
}

/// Comparison counts for attention-only specs.
fn attention_baselines(spec: &BackboneSpec, rank: u64, k: Option<u64>) -> Result<Vec<(String, u64)>> {
    let attn: Vec<_> = spec
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::Attention(a) => Some(a),
            _ => None,
        })
        .collect();
    let Some(first) = attn.first() else { return Ok(Vec::new()) };
    let (layers, d) = (attn.len() as u64, first.d_model as u64);
    let mut out = Vec::new();
    for variant in [AttnVariant::Output, AttnVariant::QueryValue] {
        let name = match variant {
            AttnVariant::Output => "ftn-o",
            AttnVariant::QueryValue => "ftn-qv",
        };
        out.push((name.to_string(), ftn_budget(spec, 1, rank, variant)?.adapter_per_task));
    }
    out.push(("finetune".into(), baseline_count(Baseline::FineTune, layers, rank, d)?));
    out.push(("lora".into(), baseline_count(Baseline::Lora, layers, rank, d)?));
    if let Some(k) = k {
        out.push(("kadaptation".into(), baseline_count(Baseline::KAdaptation { k }, layers, rank, d)?));
    }
    Ok(out)
}
