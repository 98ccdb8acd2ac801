//! A frozen backbone plus its registered tasks, and their checkpoint form.
//!
//! Tensor names:
//!
//! ```text
//! backbone/layer/{l}/weight                      conv weight [C_out, C_in, k, k]
//! backbone/layer/{l}/bn/{gamma,beta,running_mean,running_var}
//! backbone/layer/{l}/attn/{wq,wk,wv,wo}
//! task/{t}/layer/{l}/mode{1,2,3}/r{r}            conv factor vectors, r from 1
//! task/{t}/layer/{l}/scale
//! task/{t}/layer/{l}/{query,value,output}/mode{m}/r{r}, .../scale
//! task/{t}/layer/{l}/bn/{gamma,beta,running_mean,running_var}
//! task/{t}/layer/{l}/weight                      fine-tuned conv weights
//! task/{t}/head/{weight,bias}
//! probe/input
//! probe/task/{t}/logits
//! ```

use std::borrow::Cow;
use std::path::Path;

use ftn_core::adapters::TargetKind;
use ftn_core::layers::{infer, AdapterOptions, AttnVariant};
use ftn_core::{Backbone, BackboneLayer, BackboneSpec, BatchNormParams, CpAdapter, TaskAdapterSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::config::hex;
use crate::error::{HarnessError, Result};

pub const FORMAT: &str = "ftn-model";

/// How a task's state was trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// The head trained together with the backbone.
    Source,
    /// Head only, backbone batch-norm statistics.
    FeatureExtractor,
    /// Batch norm and head (rank 0).
    BnOnly,
    /// Rank-`R` deltas, batch norm and head.
    Ftn,
    /// A private copy of every conv weight, batch norm and head.
    Finetune,
}

impl AdaptMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "feature-extractor" => AdaptMode::FeatureExtractor,
            "bn-only" => AdaptMode::BnOnly,
            "ftn" => AdaptMode::Ftn,
            "finetune" => AdaptMode::Finetune,
            other => {
                return Err(HarnessError::Validation(format!(
                    "unknown mode `{other}` (feature-extractor, bn-only, ftn, finetune)"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::Source => "source",
            AdaptMode::FeatureExtractor => "feature-extractor",
            AdaptMode::BnOnly => "bn-only",
            AdaptMode::Ftn => "ftn",
            AdaptMode::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub mode: AdaptMode,
    pub rank: usize,
    pub classes: usize,
    pub domain: String,
    pub attn_variant: AttnVariant,
    pub alpha: Option<f64>,
    /// Initialization and shuffling seed.
    pub seed: u64,
    pub data_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: BackboneSpec,
    pub tasks: Vec<TaskRecord>,
    pub backbone_digest: String,
    pub config_digest: String,
    pub seed: u64,
    pub probe_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskState {
    pub record: TaskRecord,
    pub set: TaskAdapterSet<f32>,
    /// Fine-tuned conv weights by layer.
    pub weights: Option<Vec<(usize, Tensor<f32>)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub backbone: Backbone<f32>,
    /// Digest recorded when the backbone was trained.
    pub backbone_digest: String,
    pub config_digest: String,
    pub seed: u64,
    pub probe_seed: u64,
    pub probe: Tensor<f32>,
    pub tasks: Vec<TaskState>,
    /// Probe logits captured right after each task was trained.
    pub probe_logits: Vec<(String, Tensor<f32>)>,
}

fn bn_tensors(prefix: &str, bn: &BatchNormParams<f32>, out: &mut Vec<(String, Tensor<f32>)>) {
    for (name, t) in [
        ("gamma", &bn.gamma),
        ("beta", &bn.beta),
        ("running_mean", &bn.running_mean),
        ("running_var", &bn.running_var),
    ] {
        out.push((format!("{prefix}/bn/{name}"), t.clone()));
    }
}

/// The backbone as named tensors, in layer order.
pub fn backbone_tensors(b: &Backbone<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for (l, layer) in b.layers.iter().enumerate() {
        let p = format!("backbone/layer/{l}");
        match layer {
            BackboneLayer::Conv { weight, bn } => {
                out.push((format!("{p}/weight"), weight.clone()));
                if let Some(bn) = bn {
                    bn_tensors(&p, bn, &mut out);
                }
            }
            BackboneLayer::Attention(w) => {
                for (n, t) in [("wq", &w.wq), ("wk", &w.wk), ("wv", &w.wv), ("wo", &w.wo)] {
                    out.push((format!("{p}/attn/{n}"), t.clone()));
                }
            }
        }
    }
    out
}

/// SHA-256 over names, shapes and little-endian values of the backbone.
pub fn backbone_digest(b: &Backbone<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in backbone_tensors(b) {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn adapter_prefix(t: &str, layer: usize, kind: TargetKind) -> String {
    match kind {
        TargetKind::ConvWeight => format!("task/{t}/layer/{layer}"),
        k => format!("task/{t}/layer/{layer}/{}", k.as_str()),
    }
}

/// A task's trainable state as named tensors.
pub fn task_tensors(task: &TaskState) -> Vec<(String, Tensor<f32>)> {
    let t = &task.record.id;
    let mut out = Vec::new();
    for (target, a) in &task.set.adapters {
        let p = adapter_prefix(t, target.layer, target.kind);
        for m in 0..3 {
            for r in 0..a.rank() {
                let v = a.factor(m, r).to_vec();
                out.push((format!("{p}/mode{}/r{}", m + 1, r + 1), Tensor::from_vec(&[v.len()], v).expect("1-D")));
            }
        }
        out.push((format!("{p}/scale"), Tensor::scalar(a.scale())));
    }
    for (l, bn) in task.set.bn.iter().enumerate() {
        if let Some(bn) = bn {
            bn_tensors(&format!("task/{t}/layer/{l}"), bn, &mut out);
        }
    }
    if let Some(ws) = &task.weights {
        for (l, w) in ws {
            out.push((format!("task/{t}/layer/{l}/weight"), w.clone()));
        }
    }
    out.push((format!("task/{t}/head/weight"), task.set.head.weight.clone()));
    out.push((format!("task/{t}/head/bias"), task.set.head.bias.clone()));
    out
}

fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains('/') || id.chars().any(char::is_whitespace) {
        return Err(HarnessError::Validation(format!("task id `{id}` must be non-empty without `/` or spaces")));
    }
    Ok(())
}

impl ModelState {
    pub fn new(backbone: Backbone<f32>, config_digest: String, seed: u64, probe_seed: u64, probe: Tensor<f32>) -> Self {
        ModelState {
            backbone_digest: backbone_digest(&backbone),
            backbone,
            config_digest,
            seed,
            probe_seed,
            probe,
            tasks: Vec::new(),
            probe_logits: Vec::new(),
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.backbone.spec
    }

    pub fn task(&self, id: &str) -> Result<&TaskState> {
        self.tasks
            .iter()
            .find(|t| t.record.id == id)
            .ok_or_else(|| HarnessError::Validation(format!("unknown task `{id}`")))
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.record.id.as_str()).collect()
    }

    /// The backbone a task runs on: shared, or with its fine-tuned weights.
    pub fn task_backbone<'a>(&'a self, task: &TaskState) -> Cow<'a, Backbone<f32>> {
        match &task.weights {
            None => Cow::Borrowed(&self.backbone),
            Some(ws) => {
                let mut b = self.backbone.clone();
                for (l, w) in ws {
                    if let Some(dst) = b.conv_weight_mut(*l) {
                        *dst = w.clone();
                    }
                }
                Cow::Owned(b)
            }
        }
    }

    pub fn logits(&self, id: &str, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let task = self.task(id)?;
        Ok(infer(&self.task_backbone(task), &task.set, x)?)
    }

    /// Backbone digest unchanged and every task reproduces its probe logits
    /// bit for bit.
    pub fn check_integrity(&self) -> Result<()> {
        let now = backbone_digest(&self.backbone);
        if now != self.backbone_digest {
            return Err(HarnessError::Contract(format!(
                "backbone digest changed: recorded {}, found {now}",
                self.backbone_digest
            )));
        }
        for (id, want) in &self.probe_logits {
            let got = self.logits(id, &self.probe)?;
            if !got.bit_eq(want) {
                return Err(HarnessError::Contract(format!("probe logits of task `{id}` changed")));
            }
        }
        Ok(())
    }

    /// Adds a task after checking nothing registered so far has moved.
    pub fn register(&mut self, task: TaskState) -> Result<()> {
        validate_id(&task.record.id)?;
        if self.tasks.iter().any(|t| t.record.id == task.record.id) {
            return Err(HarnessError::Validation(format!("task `{}` is already registered", task.record.id)));
        }
        task.set.check_compatible(&self.task_backbone(&task))?;
        self.check_integrity()?;
        let id = task.record.id.clone();
        self.tasks.push(task);
        let logits = self.logits(&id, &self.probe)?;
        if !logits.all_finite() {
            self.tasks.pop();
            return Err(HarnessError::Numerical(format!("task `{id}` produces non-finite probe logits")));
        }
        self.probe_logits.push((id, logits));
        Ok(())
    }

    /// A copy without task `id`, for deriving new checkpoints from this one.
    pub fn without_task(&self, id: &str) -> Result<ModelState> {
        self.task(id)?;
        let mut out = self.clone();
        out.tasks.retain(|t| t.record.id != id);
        out.probe_logits.retain(|(t, _)| t != id);
        Ok(out)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.into(),
            spec: self.backbone.spec.clone(),
            tasks: self.tasks.iter().map(|t| t.record.clone()).collect(),
            backbone_digest: self.backbone_digest.clone(),
            config_digest: self.config_digest.clone(),
            seed: self.seed,
            probe_seed: self.probe_seed,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(serde_json::to_string_pretty(&self.manifest())?);
        for (n, t) in backbone_tensors(&self.backbone) {
            c.push_f32(n, t);
        }
        for task in &self.tasks {
            for (n, t) in task_tensors(task) {
                c.push_f32(n, t);
            }
        }
        c.push_f32("probe/input", self.probe.clone());
        for (id, l) in &self.probe_logits {
            c.push_f32(format!("probe/task/{id}/logits"), l.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&c.manifest)?;
        if manifest.format != FORMAT {
            return Err(HarnessError::Validation(format!("checkpoint holds `{}`, not a model", manifest.format)));
        }
        let spec = manifest.spec.clone();
        spec.validate_executable()?;
        let mut backbone = Backbone::<f32>::init(&spec, 0)?;
        for (l, layer) in backbone.layers.iter_mut().enumerate() {
            let p = format!("backbone/layer/{l}");
            match layer {
                BackboneLayer::Conv { weight, bn } => {
                    *weight = load_like(c, &format!("{p}/weight"), weight)?;
                    if let Some(bn) = bn {
                        load_bn(c, &p, bn)?;
                    }
                }
                BackboneLayer::Attention(w) => {
                    for (n, t) in [("wq", &mut w.wq), ("wk", &mut w.wk), ("wv", &mut w.wv), ("wo", &mut w.wo)] {
                        *t = load_like(c, &format!("{p}/attn/{n}"), t)?;
                    }
                }
            }
        }
        backbone.validate()?;
        let found = backbone_digest(&backbone);
        if found != manifest.backbone_digest {
            return Err(HarnessError::Contract(format!(
                "backbone tensors do not match the recorded digest {}",
                manifest.backbone_digest
            )));
        }
        let mut tasks = Vec::with_capacity(manifest.tasks.len());
        let mut probe_logits = Vec::with_capacity(manifest.tasks.len());
        for rec in &manifest.tasks {
            validate_id(&rec.id)?;
            let t = &rec.id;
            let opts = AdapterOptions { rank: rec.rank, attn_variant: rec.attn_variant, alpha: rec.alpha, seed: 0 };
            let mut set = TaskAdapterSet::<f32>::new(t, &backbone, rec.classes, opts)?;
            for (target, a) in set.adapters.iter_mut() {
                let p = adapter_prefix(t, target.layer, target.kind);
                let dims = a.dims();
                let mut modes: [Vec<Vec<f32>>; 3] = Default::default();
                for m in 0..3 {
                    for r in 0..a.rank() {
                        let v = load_shape(c, &format!("{p}/mode{}/r{}", m + 1, r + 1), &[dims[m]])?;
                        modes[m].push(v.into_data());
                    }
                }
                let scale = load_shape(c, &format!("{p}/scale"), &[1])?.data()[0];
                *a = CpAdapter::from_vectors(modes, scale)?;
            }
            for (l, bn) in set.bn.iter_mut().enumerate() {
                if let Some(bn) = bn {
                    load_bn(c, &format!("task/{t}/layer/{l}"), bn)?;
                }
            }
            set.head.weight = load_like(c, &format!("task/{t}/head/weight"), &set.head.weight)?;
            set.head.bias = load_like(c, &format!("task/{t}/head/bias"), &set.head.bias)?;
            let weights = match rec.mode {
                AdaptMode::Finetune => {
                    let mut ws = Vec::new();
                    for (l, layer) in backbone.layers.iter().enumerate() {
                        if let BackboneLayer::Conv { weight, .. } = layer {
                            ws.push((l, load_like(c, &format!("task/{t}/layer/{l}/weight"), weight)?));
                        }
                    }
                    Some(ws)
                }
                _ => None,
            };
            tasks.push(TaskState { record: rec.clone(), set, weights });
            probe_logits.push((t.clone(), c.f32(&format!("probe/task/{t}/logits"))?.clone()));
        }
        let state = ModelState {
            backbone,
            backbone_digest: manifest.backbone_digest,
            config_digest: manifest.config_digest,
            seed: manifest.seed,
            probe_seed: manifest.probe_seed,
            probe: c.f32("probe/input")?.clone(),
            tasks,
            probe_logits,
        };
        let expected = state.to_container()?.tensors.len();
        if expected != c.tensors.len() {
            return Err(HarnessError::Validation(format!(
                "checkpoint has {} tensors, the manifest accounts for {expected}",
                c.tensors.len()
            )));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn load_shape(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = c.f32(name)?;
    if t.shape() != shape {
        return Err(HarnessError::Validation(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t.clone())
}

fn load_like(c: &Container, name: &str, like: &Tensor<f32>) -> Result<Tensor<f32>> {
    load_shape(c, name, like.shape())
}

fn load_bn(c: &Container, prefix: &str, bn: &mut BatchNormParams<f32>) -> Result<()> {
    for (n, t) in [
        ("gamma", &mut bn.gamma),
        ("beta", &mut bn.beta),
        ("running_mean", &mut bn.running_mean),
        ("running_var", &mut bn.running_var),
    ] {
        *t = load_like(c, &format!("{prefix}/bn/{n}"), t)?;
    }
    Ok(bn.validate()?)
}
