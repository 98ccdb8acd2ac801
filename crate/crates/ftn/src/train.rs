//! Backbone pretraining, per-task adaptation, evaluation and sweeps.

use ftn_core::factorize::{
    extract_deltas, factorize_deltas, layer_norms, prune_by_norm, threshold_sweep, DeltaSet, FactorizationReport,
    Method,
};
use ftn_core::layers::{forward_task, infer, mix_seed, AdapterOptions, AttnVariant, ParamKey, Trainable};
use ftn_core::{Backbone, BackboneLayer, BackboneSpec, BnMode, Graph, TaskAdapterSet, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{HarnessConfig, TrainConfig};
use crate::data::{Dataset, DomainConfig, Split};
use crate::error::{HarnessError, Result};
use crate::optim::Optimizer;
use crate::store::{AdaptMode, ModelState, TaskRecord, TaskState};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    /// Scalars updated by the optimizer.
    pub trainable_params: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

/// Source of the backbone weights during a training run.
pub enum BackboneRef<'a> {
    Frozen(&'a Backbone<f32>),
    Trainable(&'a mut Backbone<f32>),
}

impl BackboneRef<'_> {
    fn get(&self) -> &Backbone<f32> {
        match self {
            BackboneRef::Frozen(b) => b,
            BackboneRef::Trainable(b) => b,
        }
    }
}

fn check_data(spec: &BackboneSpec, data: &Dataset) -> Result<()> {
    if data.sample_shape() != spec.input.as_slice() {
        return Err(HarnessError::Validation(format!(
            "dataset samples {:?} do not match `{}` input {:?}",
            data.sample_shape(),
            spec.name,
            spec.input
        )));
    }
    if data.is_empty() {
        return Err(HarnessError::Validation("dataset is empty".into()));
    }
    Ok(())
}

/// Number of scalars `trainable` exposes for this backbone and task.
pub fn trainable_count(backbone: &Backbone<f32>, task: &TaskAdapterSet<f32>, trainable: Trainable) -> Result<usize> {
    let mut shape = vec![1];
    shape.extend_from_slice(&backbone.spec.input);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&shape));
    let out = forward_task(&mut g, x, backbone, task, BnMode::Eval, trainable)?;
    Ok(out.params.iter().map(|(_, v)| g.value(*v).len()).sum())
}

/// Minibatch training with a cosine (or constant) schedule. Train-mode batch
/// norm also folds batch moments into the task's running statistics.
pub fn train_loop(
    mut backbone: BackboneRef<'_>,
    task: &mut TaskAdapterSet<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    trainable: Trainable,
    bn_mode: BnMode,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate("train")?;
    check_data(&backbone.get().spec, data)?;
    if trainable.backbone && matches!(backbone, BackboneRef::Frozen(_)) {
        return Err(HarnessError::Validation("backbone weights are frozen in this run".into()));
    }
    let trainable_params = trainable_count(backbone.get(), task, trainable)?;
    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut opt = Optimizer::new(cfg);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let out = forward_task(&mut g, xv, backbone.get(), task, bn_mode, trainable)?;
            let loss = g.softmax_cross_entropy(out.logits, &labels)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(HarnessError::Numerical(format!("loss is {lv} at epoch {epoch}, step {step}")));
            }
            sum += lv * chunk.len() as f64;
            let lr_scale = cfg.schedule.factor(step, total);
            if !out.params.is_empty() {
                let grads = g.backward(loss)?;
                for (key, var) in &out.params {
                    let Some(grad) = grads.get(*var) else { continue };
                    let param = match (key, &mut backbone) {
                        (ParamKey::BackboneWeight(l), BackboneRef::Trainable(b)) => b.conv_weight_mut(*l),
                        (ParamKey::BackboneWeight(_), BackboneRef::Frozen(_)) => None,
                        (k, _) => task.param_mut(*k),
                    };
                    let param = param.ok_or_else(|| {
                        HarnessError::Validation(format!("no storage for trainable parameter {key:?}"))
                    })?;
                    opt.step(*key, param, grad, lr_scale);
                }
            }
            task.update_running_stats(&out.batch_stats);
            step += 1;
        }
        epoch_loss.push(sum / n as f64);
    }
    Ok(TrainLog { epoch_loss, steps: step, trainable_params })
}

/// Eval-mode accuracy and mean cross-entropy.
pub fn evaluate_set(backbone: &Backbone<f32>, task: &TaskAdapterSet<f32>, data: &Dataset) -> Result<Metrics> {
    check_data(&backbone.spec, data)?;
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let logits = infer(backbone, task, &x)?;
        let k = logits.shape()[1];
        for (row, &y) in logits.data().chunks(k).zip(&labels) {
            if y >= k {
                return Err(HarnessError::Validation(format!("label {y} out of range for {k} classes")));
            }
            let (arg, max) = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            if !max.is_finite() {
                return Err(HarnessError::Numerical("non-finite logits".into()));
            }
            correct += (arg == y) as usize;
            let lse = max as f64 + row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
            loss += lse - row[y] as f64;
        }
    }
    let n = data.len();
    Ok(Metrics { accuracy: correct as f64 / n as f64, loss: loss / n as f64, samples: n })
}

pub fn evaluate(state: &ModelState, id: &str, data: &Dataset) -> Result<Metrics> {
    let task = state.task(id)?;
    evaluate_set(&state.task_backbone(task), &task.set, data)
}

/// Seeded probe batch drawn from the source family.
pub fn probe_batch(spec: &BackboneSpec, n: usize, probe_seed: u64) -> Result<Tensor<f32>> {
    let size = spec.input.get(1).copied().unwrap_or(16);
    let cfg = DomainConfig::builtin("source", 8, 1, n, size, probe_seed)?;
    Ok(cfg.generate(Split::Test)?.x)
}

/// Domain datasets sized by the config and shaped for the spec.
pub fn domain_data(spec: &BackboneSpec, name: &str, classes: usize, cfg: &HarnessConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let &[c, h, w] = spec.input.as_slice() else {
        return Err(HarnessError::Validation(format!("`{}` does not take images", spec.name)));
    };
    if c != 3 || h != w {
        return Err(HarnessError::Validation(format!("synthetic domains are square RGB, spec wants {:?}", spec.input)));
    }
    let train = if name == "source" { cfg.data.source_train } else { cfg.data.target_train };
    let d = DomainConfig::builtin(name, classes, train, cfg.data.test, h, seed)?;
    Ok((d.generate(Split::Train)?, d.generate(Split::Test)?))
}

pub struct BackboneRun {
    pub state: ModelState,
    pub log: TrainLog,
}

/// Trains every weight on the source domain and registers its head as task
/// `source`.
pub fn train_backbone(spec: &BackboneSpec, source: &Dataset, cfg: &HarnessConfig, seed: u64) -> Result<BackboneRun> {
    cfg.validate()?;
    spec.validate_executable()?;
    check_data(spec, source)?;
    let mut backbone = Backbone::<f32>::init(spec, mix_seed(seed, 1))?;
    let mut task = TaskAdapterSet::new("source", &backbone, source.classes, AdapterOptions::conv(0, mix_seed(seed, 2)))?;
    let trainable = Trainable { adapters: false, bn: true, head: true, backbone: true };
    let log = train_loop(
        BackboneRef::Trainable(&mut backbone),
        &mut task,
        source,
        &cfg.backbone,
        trainable,
        BnMode::Train,
        mix_seed(seed, 3),
    )?;
    for (layer, bn) in backbone.layers.iter_mut().zip(&task.bn) {
        if let (BackboneLayer::Conv { bn: Some(dst), .. }, Some(src)) = (layer, bn) {
            *dst = src.clone();
        }
    }
    let probe_seed = mix_seed(seed, 4);
    let probe = probe_batch(spec, cfg.probe, probe_seed)?;
    let mut state = ModelState::new(backbone, cfg.digest(), seed, probe_seed, probe);
    let record = TaskRecord {
        id: "source".into(),
        mode: AdaptMode::Source,
        rank: 0,
        classes: source.classes,
        domain: "source".into(),
        attn_variant: AttnVariant::Output,
        alpha: None,
        seed,
        data_seed: seed,
    };
    state.register(TaskState { record, set: task, weights: None })?;
    Ok(BackboneRun { state, log })
}

#[derive(Debug, Clone)]
pub struct AdaptRequest<'a> {
    pub id: &'a str,
    pub domain: &'a str,
    pub mode: AdaptMode,
    pub rank: usize,
    pub seed: u64,
    /// Seed the domain data was generated with.
    pub data_seed: u64,
}

/// Trains one new task against the frozen backbone and registers it. Fails
/// with a contract violation if the backbone digest or any earlier task's
/// probe logits change.
pub fn adapt_task(state: &mut ModelState, req: &AdaptRequest<'_>, train: &Dataset, cfg: &HarnessConfig) -> Result<TrainLog> {
    cfg.validate()?;
    state.check_integrity()?;
    if state.tasks.iter().any(|t| t.record.id == req.id) {
        return Err(HarnessError::Validation(format!("task `{}` is already registered", req.id)));
    }
    let rank = match req.mode {
        AdaptMode::Ftn if req.rank == 0 => {
            return Err(HarnessError::Validation("ftn needs rank >= 1; use bn-only for rank 0".into()))
        }
        AdaptMode::Ftn => req.rank,
        AdaptMode::Source => return Err(HarnessError::Validation("`source` is produced by train-backbone".into())),
        _ => 0,
    };
    let opts = AdapterOptions::conv(rank, mix_seed(req.seed, 11));
    let mut set = TaskAdapterSet::new(req.id, &state.backbone, train.classes, opts)?;
    let run_seed = mix_seed(req.seed, 12);
    let (log, weights) = match req.mode {
        AdaptMode::Finetune => {
            let mut own = state.backbone.clone();
            let trainable = Trainable { adapters: false, bn: true, head: true, backbone: true };
            let log = train_loop(
                BackboneRef::Trainable(&mut own),
                &mut set,
                train,
                &cfg.finetune,
                trainable,
                BnMode::Train,
                run_seed,
            )?;
            let ws = (0..own.layers.len()).filter_map(|l| own.conv_weight(l).map(|w| (l, w.clone()))).collect();
            (log, Some(ws))
        }
        mode => {
            let (trainable, bn_mode) = match mode {
                AdaptMode::FeatureExtractor => (Trainable { head: true, ..Trainable::NONE }, BnMode::Eval),
                AdaptMode::BnOnly => (Trainable { bn: true, head: true, ..Trainable::NONE }, BnMode::Train),
                _ => (Trainable::TASK, BnMode::Train),
            };
            let log = train_loop(BackboneRef::Frozen(&state.backbone), &mut set, train, &cfg.adapt, trainable, bn_mode, run_seed)?;
            (log, None)
        }
    };
    let record = TaskRecord {
        id: req.id.into(),
        mode: req.mode,
        rank,
        classes: train.classes,
        domain: req.domain.into(),
        attn_variant: opts.attn_variant,
        alpha: opts.alpha,
        seed: req.seed,
        data_seed: req.data_seed,
    };
    let state_before = state.backbone_digest.clone();
    state.register(TaskState { record, set, weights })?;
    debug_assert_eq!(state_before, state.backbone_digest);
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: AdaptMode,
    pub rank: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepMean {
    pub mode: AdaptMode,
    pub rank: usize,
    pub mean_accuracy: f64,
    pub runs: usize,
}

/// Adapts a copy of `state` once per (setting, seed) and evaluates each.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_sweep(
    state: &ModelState,
    domain: &str,
    data_seed: u64,
    settings: &[(AdaptMode, usize)],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    cfg: &HarnessConfig,
) -> Result<(Vec<SweepRow>, Vec<SweepMean>)> {
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for &(mode, rank) in settings {
        let mut sum = 0.0;
        for &seed in seeds {
            let mut s = state.clone();
            let id = format!("{}-r{rank}-s{seed}", mode.as_str());
            let log = adapt_task(&mut s, &AdaptRequest { id: &id, domain, mode, rank, seed, data_seed }, train, cfg)?;
            let m = evaluate(&s, &id, test)?;
            sum += m.accuracy;
            rows.push(SweepRow { mode, rank, seed, accuracy: m.accuracy, trainable_params: log.trainable_params });
        }
        means.push(SweepMean { mode, rank, mean_accuracy: sum / seeds.len() as f64, runs: seeds.len() });
    }
    Ok((rows, means))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrunePoint {
    pub threshold: f64,
    pub removed: usize,
    pub accuracy: f64,
}

/// `count` equally spaced thresholds from 0 to just past the task's largest
/// delta norm, so the last one removes every delta.
pub fn prune_thresholds(state: &ModelState, id: &str, count: usize) -> Result<Vec<f64>> {
    let task = state.task(id)?;
    if task.set.adapters.is_empty() {
        return Err(HarnessError::Validation(format!("task `{id}` has no deltas to prune")));
    }
    if count < 2 {
        return Err(HarnessError::Validation("a threshold sweep needs at least 2 points".into()));
    }
    let max = layer_norms(&task.set).iter().map(|(_, n)| *n).fold(0.0, f64::max);
    Ok(threshold_sweep(0.0, max * (1.0 + 1e-9), count))
}

/// Evaluates the task with every delta whose norm is below each threshold
/// removed.
pub fn prune_at(state: &ModelState, id: &str, test: &Dataset, thresholds: &[f64]) -> Result<Vec<PrunePoint>> {
    let task = state.task(id)?;
    if task.set.adapters.is_empty() {
        return Err(HarnessError::Validation(format!("task `{id}` has no deltas to prune")));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(HarnessError::Validation(format!("threshold {t} must be finite and >= 0")));
    }
    let backbone = state.task_backbone(task);
    let mut out = Vec::with_capacity(thresholds.len());
    for &th in thresholds {
        let (pruned, removed) = prune_by_norm(&task.set, th);
        let m = evaluate_set(&backbone, &pruned, test)?;
        out.push(PrunePoint { threshold: th, removed: removed.len(), accuracy: m.accuracy });
    }
    Ok(out)
}

/// [`prune_at`] over [`prune_thresholds`].
pub fn prune_sweep(state: &ModelState, id: &str, test: &Dataset, count: usize) -> Result<Vec<PrunePoint>> {
    prune_at(state, id, test, &prune_thresholds(state, id, count)?)
}

/// A copy of `state` in which task `id` keeps only deltas with norm at least
/// `threshold`; the task is re-registered with fresh probe logits.
pub fn pruned_state(state: &ModelState, id: &str, threshold: f64) -> Result<(ModelState, usize)> {
    let task = state.task(id)?;
    let (set, removed) = prune_by_norm(&task.set, threshold);
    let mut out = state.without_task(id)?;
    out.register(TaskState { record: task.record.clone(), set, weights: task.weights.clone() })?;
    Ok((out, removed.len()))
}

/// Fine-tuned minus `base` weights of every adaptable conv of a fine-tuned
/// task, named `layer{l}`.
pub fn finetune_deltas_against(state: &ModelState, id: &str, base: &Backbone<f32>) -> Result<DeltaSet> {
    let task = state.task(id)?;
    let ws = task
        .weights
        .as_ref()
        .ok_or_else(|| HarnessError::Validation(format!("task `{id}` was not fully fine-tuned")))?;
    let spec = state.spec();
    if base.spec != *spec {
        return Err(HarnessError::Validation(format!(
            "base backbone `{}` does not match `{}`",
            base.spec.name, spec.name
        )));
    }
    let mut tuned = Vec::new();
    let mut frozen = Vec::new();
    for (l, w) in ws {
        if !spec.is_adaptable(*l) {
            continue;
        }
        let b = base.conv_weight(*l).expect("conv layer");
        tuned.push((format!("layer{l}"), w.cast::<f64>()));
        frozen.push((format!("layer{l}"), b.cast::<f64>()));
    }
    Ok(extract_deltas(&tuned, &frozen)?)
}

/// Deltas against the checkpoint's own frozen backbone.
pub fn finetune_deltas(state: &ModelState, id: &str) -> Result<DeltaSet> {
    finetune_deltas_against(state, id, &state.backbone)
}

pub fn factorize_deltas_report(deltas: &DeltaSet, ranks: &[usize], cfg: &HarnessConfig) -> Result<FactorizationReport> {
    Ok(factorize_deltas(deltas, ranks, &Method::ALL, &cfg.cp)?)
}

pub fn factorize_task(state: &ModelState, id: &str, ranks: &[usize], cfg: &HarnessConfig) -> Result<FactorizationReport> {
    factorize_deltas_report(&finetune_deltas(state, id)?, ranks, cfg)
}
