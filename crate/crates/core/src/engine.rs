//! Session orchestration: supervised pretraining of the encoder, per-task
//! prompt and neck training against the prototype store, two-stage
//! inference, and full class-incremental runs with accuracy bookkeeping.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    BackboneConfig, BackboneGrads, BackboneWeights, ForwardTrace, PromptSet, TokenSequence,
};
use crate::error::{CppError, Result};
use crate::linalg::{cosine_sim, l2_normalize, Matrix, Vector};
use crate::metrics::{energy, memory_per_class, AccuracyMatrix};
use crate::neck_loss::{
    augment_prototype, cpl_backward, variant_loss, CplVariant, LinearHead, LossBatch, MlpNeck,
    NeckGrads, NeckTrace,
};
use crate::optim::{AdamW, CosineSchedule};
use crate::rng::SplitRng;
use crate::store::{ClassRecord, PrototypeStore};
use crate::streams::{jitter_augment, MaterializedStream, Sample, TaskData};

/// Environment variable capping evaluation worker threads. Unset or
/// unparseable values fall back to 1 (sequential).
pub const THREADS_ENV: &str = "CPP_THREADS";

/// Per-task training hyperparameters. `neck_hidden == 0` means "pick
/// 4 x embed_dim when the encoder is known".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub prompt_len: usize,
    pub max_centroids: usize,
    pub retrieval_depth: usize,
    pub neck_hidden: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr_init: 1e-3,
            lr_final: 1e-6,
            weight_decay: 0.01,
            tau: 0.6,
            prompt_len: 1,
            max_centroids: 5,
            retrieval_depth: 3,
            neck_hidden: 0,
            jitter: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CppError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CppError::Config("batch size must be at least 1".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0) {
            return Err(CppError::Config(format!(
                "learning rates must be positive, got {} -> {}",
                self.lr_init, self.lr_final
            )));
        }
        if self.lr_final > self.lr_init {
            return Err(CppError::Config(format!(
                "final learning rate {} exceeds initial {}",
                self.lr_final, self.lr_init
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CppError::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CppError::Config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.prompt_len == 0 {
            return Err(CppError::Config("prompt length must be at least 1".into()));
        }
        if self.max_centroids == 0 {
            return Err(CppError::Config("centroid cap must be at least 1".into()));
        }
        if self.retrieval_depth == 0 {
            return Err(CppError::Config("retrieval depth must be at least 1".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(CppError::Config(format!(
                "jitter strength must be nonnegative, got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

/// What a run trains per task: a contrastive or cross-entropy objective on
/// prompts and a neck, or the training-free path that stores raw-embedding
/// centroids under an empty prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunVariant {
    Loss(CplVariant),
    Baseline,
}

impl RunVariant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cpp" => Ok(RunVariant::Loss(CplVariant::Cpl)),
            "baseline" => Ok(RunVariant::Baseline),
            other => Ok(RunVariant::Loss(CplVariant::parse(other)?)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RunVariant::Baseline => "baseline",
            RunVariant::Loss(CplVariant::Cpl) => "cpp",
            RunVariant::Loss(v) => v.name(),
        }
    }
}

/// Scope of the nearest-mean comparison when the true task id is supplied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcmScope {
    AllClasses,
    TaskOnly,
}

/// One classification: predicted class, the retrieved candidate tasks in
/// rank order, and the encoder passes spent (one coarse + one per candidate).
#[derive(Clone, Debug, PartialEq)]
pub struct InferOutcome {
    pub class_id: u32,
    pub candidates: Vec<u32>,
    pub forward_passes: usize,
}

/// Similarity diagnostics for one stored class against the fine queries of
/// a single inference.
#[derive(Clone, Debug)]
pub struct ClassEnergy {
    pub class_id: u32,
    pub task_id: u32,
    pub max_sim: f64,
    pub energy: f64,
}

/// Accumulated evaluation counts; means are derived lazily so partial
/// results merge exactly.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TaskEval {
    pub samples: usize,
    pub correct: usize,
    pub forward_passes: usize,
    pub min_energy_sum: f64,
    pub true_task_hits: usize,
    pub candidates_min: usize,
    pub candidates_max: usize,
}

impl TaskEval {
    pub fn accuracy_pct(&self) -> f64 {
        100.0 * self.correct as f64 / self.samples as f64
    }

    pub fn mean_forward_passes(&self) -> f64 {
        self.forward_passes as f64 / self.samples as f64
    }

    pub fn mean_min_energy(&self) -> f64 {
        self.min_energy_sum / self.samples as f64
    }

    pub fn hit_rate(&self) -> f64 {
        self.true_task_hits as f64 / self.samples as f64
    }

    pub fn merge(&mut self, other: &TaskEval) {
        if self.samples == 0 {
            self.candidates_min = other.candidates_min;
            self.candidates_max = other.candidates_max;
        } else if other.samples > 0 {
            self.candidates_min = self.candidates_min.min(other.candidates_min);
            self.candidates_max = self.candidates_max.max(other.candidates_max);
        }
        self.samples += other.samples;
        self.correct += other.correct;
        self.forward_passes += other.forward_passes;
        self.min_energy_sum += other.min_energy_sum;
        self.true_task_hits += other.true_task_hits;
    }
}

struct SampleEval {
    correct: bool,
    forward_passes: usize,
    candidates: usize,
    hit: bool,
    min_energy: f64,
}

/// Training summary for one committed task.
#[derive(Clone, Debug, Serialize)]
pub struct TaskTrainReport {
    pub task_id: u32,
    pub variant: String,
    pub steps: usize,
    pub skipped_batches: usize,
    /// Mean loss per epoch over the batches that produced an update; None
    /// for an epoch whose batches were all skipped. Empty for the
    /// training-free path.
    pub epoch_losses: Vec<Option<f64>>,
}

/// One stream session: the task trained plus the evaluation over every
/// task seen so far.
#[derive(Clone, Debug, Serialize)]
pub struct SessionRecord {
    pub task_id: u32,
    pub train: TaskTrainReport,
    /// Accuracy (percent) per seen task, stream order.
    pub row: Vec<f64>,
    pub eval: TaskEval,
}

/// Full class-incremental run output.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: String,
    pub matrix: AccuracyMatrix,
    pub sessions: Vec<SessionRecord>,
    pub avg_forward_passes: f64,
    pub extra_params_per_class: f64,
    pub mean_final_energy: f64,
}

/// Encoder pretraining hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 40,
            batch_size: 32,
            lr_init: 1e-3,
            lr_final: 1e-6,
            weight_decay: 0.01,
            seed: 7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CppError::Config(
                "pretraining epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return Err(CppError::Config(format!(
                "bad pretraining learning rates {} -> {}",
                self.lr_init, self.lr_final
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CppError::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Supervised pretraining with a temporary linear head; the head is
/// discarded and the returned weights are frozen. The classes seen here are
/// recorded on the weights so later streams can be screened for overlap.
pub fn pretrain_backbone(
    config: BackboneConfig,
    stream: &MaterializedStream,
    pc: &PretrainConfig,
) -> Result<(BackboneWeights, PretrainReport)> {
    pc.validate()?;
    if stream.token_dim != config.embed_dim || stream.seq_tokens != config.seq_len {
        return Err(CppError::Shape(format!(
            "stream emits {}x{} tokens, encoder expects {}x{}",
            stream.seq_tokens, stream.token_dim, config.seq_len, config.embed_dim
        )));
    }
    let mut backbone = BackboneWeights::init(config, pc.seed)?;
    let d = backbone.config.embed_dim;
    let root = SplitRng::from_seed_u64(pc.seed);
    let train: Vec<&Sample> = stream.tasks.iter().flat_map(|t| t.train.iter()).collect();
    let test: Vec<&Sample> = stream.tasks.iter().flat_map(|t| t.test.iter()).collect();
    if train.is_empty() {
        return Err(CppError::EmptyInput("pretraining stream has no samples".into()));
    }
    let class_ids = stream.all_class_ids();
    let mut head = LinearHead::init(class_ids.clone(), d, &mut root.split("head-init", 0))?;

    let mut lens: Vec<usize> = backbone.tensors_mut()?.iter().map(|t| t.len()).collect();
    lens.extend(head.tensors_mut().iter().map(|t| t.len()));
    let mut opt = AdamW::new(&lens, pc.weight_decay)?;
    let ranges = batch_ranges(train.len(), pc.batch_size);
    let schedule = CosineSchedule::new(pc.lr_init, pc.lr_final, pc.epochs * ranges.len())?;

    let mut step = 0usize;
    let mut final_loss = f64::NAN;
    for epoch in 0..pc.epochs {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        root.split("epoch-shuffle", epoch as u64).shuffle(&mut idx);
        for range in &ranges {
            let batch: Vec<usize> = idx[range.clone()].to_vec();
            let mut zs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            let mut traces = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (emb, tr) = backbone.encode(&train[i].tokens, None, true)?;
                zs.push(emb);
                labels.push(train[i].label);
                traces.push(tr.expect("trace requested"));
            }
            let (loss, dzs, head_grads) = head.loss_and_grads(&zs, &labels)?;
            if !loss.is_finite() {
                return Err(CppError::Numeric(format!(
                    "pretraining loss {loss} at step {step}"
                )));
            }
            let mut acc: Option<BackboneGrads> = None;
            for i in 0..zs.len() {
                let (_, g) = backbone.backward_full(&traces[i], &dzs[i])?;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => a.add_assign(&g),
                }
            }
            let acc = acc.expect("nonempty batch");
            let lr = schedule.lr(step);
            let mut params = backbone.tensors_mut()?;
            params.extend(head.tensors_mut());
            let mut grads = acc.tensors();
            grads.extend(head_grads.tensors());
            opt.step(&mut params, &grads, lr)?;
            step += 1;
            final_loss = loss;
        }
    }

    let train_accuracy = head_accuracy(&backbone, &head, &train)?;
    let test_accuracy = head_accuracy(&backbone, &head, &test)?;
    backbone.set_pretrain_class_ids(class_ids);
    backbone.freeze();
    Ok((
        backbone,
        PretrainReport {
            epochs: pc.epochs,
            steps: step,
            final_loss,
            train_accuracy,
            test_accuracy,
        },
    ))
}

fn head_accuracy(backbone: &BackboneWeights, head: &LinearHead, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(CppError::EmptyInput("no samples to score".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        let (emb, _) = backbone.encode(&s.tokens, None, false)?;
        let k = head.w.cols();
        let mut best = f64::NEG_INFINITY;
        let mut best_j = 0usize;
        for j in 0..k {
            let mut logit = head.b[j];
            for i in 0..emb.dim() {
                logit += emb[i] * head.w.get(i, j);
            }
            if logit > best {
                best = logit;
                best_j = j;
            }
        }
        if head.class_ids[best_j] == s.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// Contiguous batch index ranges over n shuffled positions. A trailing
/// singleton is merged into the previous batch so contrastive batches keep
/// at least one potential pair.
fn batch_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push(start..end);
        start = end;
    }
    if out.len() >= 2 && out.last().expect("nonempty").len() == 1 {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = last.end;
    }
    out
}

fn write_event(log: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    let line = serde_json::to_string(value)
        .map_err(|e| CppError::Format(format!("run log serialization: {e}")))?;
    log.write_all(line.as_bytes())?;
    log.write_all(b"\n")?;
    Ok(())
}

fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// The continual learner: a frozen encoder, the prototype store accumulated
/// so far, and the training hyperparameters.
#[derive(Debug)]
pub struct Engine {
    backbone: BackboneWeights,
    store: PrototypeStore,
    config: TrainConfig,
}

impl Engine {
    pub fn new(backbone: BackboneWeights, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !backbone.is_frozen() {
            return Err(CppError::Frozen(
                "the engine requires a frozen, pretrained encoder".into(),
            ));
        }
        let store = PrototypeStore::new(backbone.config.embed_dim, config.max_centroids)?;
        Ok(Engine {
            backbone,
            store,
            config,
        })
    }

    /// Resume from a saved store. The store's centroid cap wins over the
    /// configured one so committed and future records agree.
    pub fn from_parts(
        backbone: BackboneWeights,
        store: PrototypeStore,
        mut config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if !backbone.is_frozen() {
            return Err(CppError::Frozen(
                "the engine requires a frozen, pretrained encoder".into(),
            ));
        }
        if store.embed_dim() != backbone.config.embed_dim {
            return Err(CppError::Shape(format!(
                "store embeddings are {}-dimensional, encoder emits {}",
                store.embed_dim(),
                backbone.config.embed_dim
            )));
        }
        config.max_centroids = store.max_centroids();
        Ok(Engine {
            backbone,
            store,
            config,
        })
    }

    pub fn backbone(&self) -> &BackboneWeights {
        &self.backbone
    }

    pub fn store(&self) -> &PrototypeStore {
        &self.store
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.config.seed = seed;
    }

    pub fn neck_hidden(&self) -> usize {
        if self.config.neck_hidden == 0 {
            4 * self.backbone.config.embed_dim
        } else {
            self.config.neck_hidden
        }
    }

    /// Refuse streams that share classes with the pretraining corpus.
    pub fn check_leakage(&self, stream: &MaterializedStream) -> Result<()> {
        let pre = self.backbone.pretrain_class_ids();
        if pre.is_empty() {
            return Ok(());
        }
        let overlap: Vec<u32> = stream
            .all_class_ids()
            .into_iter()
            .filter(|c| pre.binary_search(c).is_ok())
            .collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(CppError::Leakage(format!(
                "classes {overlap:?} were already used for pretraining"
            )))
        }
    }

    /// Train one task and commit its prompt and class records. The
    /// training-free path stores raw-embedding centroids under an empty
    /// prompt and never optimizes anything.
    pub fn train_task(
        &mut self,
        task: &TaskData,
        variant: RunVariant,
        log: &mut dyn Write,
    ) -> Result<TaskTrainReport> {
        if task.train.is_empty() {
            return Err(CppError::EmptyInput(format!(
                "task {} has no training samples",
                task.task_id
            )));
        }
        for class in task.class_ids() {
            if self.store.record(class).is_some() {
                return Err(CppError::DuplicateClass(class));
            }
        }

        // Coarse prototypes come from the prompt-free encoder, computed
        // before any training happens.
        let mut key_embeddings: BTreeMap<u32, Vec<Vector>> = BTreeMap::new();
        for s in &task.train {
            let (emb, _) = self.backbone.encode(&s.tokens, None, false)?;
            key_embeddings
                .entry(s.label)
                .or_default()
                .push(l2_normalize(&emb)?);
        }

        let report = match variant {
            RunVariant::Baseline => self.commit_baseline(task, key_embeddings)?,
            RunVariant::Loss(v) => self.train_and_commit(task, v, key_embeddings, log)?,
        };
        Ok(report)
    }

    fn commit_baseline(
        &mut self,
        task: &TaskData,
        key_embeddings: BTreeMap<u32, Vec<Vector>>,
    ) -> Result<TaskTrainReport> {
        let task_rng = SplitRng::from_seed_u64(self.config.seed).split("task", task.task_id as u64);
        let mut record_rng = task_rng.split("records", 0);
        let mut records = Vec::with_capacity(key_embeddings.len());
        for (class, keys) in &key_embeddings {
            let mut rec = ClassRecord::build(
                *class,
                task.task_id,
                keys,
                keys,
                self.config.max_centroids,
                &mut record_rng,
            )?;
            rec.value_centroids = rec.key_centroids.clone();
            records.push(rec);
        }
        let prompt = PromptSet::empty(
            task.task_id,
            self.backbone.config.num_layers,
            self.backbone.config.embed_dim,
        );
        self.store.commit_task(task.task_id, prompt, records)?;
        Ok(TaskTrainReport {
            task_id: task.task_id,
            variant: RunVariant::Baseline.name().into(),
            steps: 0,
            skipped_batches: 0,
            epoch_losses: Vec::new(),
        })
    }

    fn train_and_commit(
        &mut self,
        task: &TaskData,
        variant: CplVariant,
        key_embeddings: BTreeMap<u32, Vec<Vector>>,
        log: &mut dyn Write,
    ) -> Result<TaskTrainReport> {
        let ce = variant == CplVariant::Ce;
        if !ce && task.train.len() < 2 {
            return Err(CppError::Config(format!(
                "contrastive training needs at least 2 samples, task {} has {}",
                task.task_id,
                task.train.len()
            )));
        }
        let d = self.backbone.config.embed_dim;
        let task_rng = SplitRng::from_seed_u64(self.config.seed).split("task", task.task_id as u64);
        let mut prompt = PromptSet::init(
            task.task_id,
            &self.backbone.config,
            self.config.prompt_len,
            &mut task_rng.split("prompt-init", 0),
        )?;
        let mut neck = MlpNeck::standard(d, self.neck_hidden(), &mut task_rng.split("neck-init", 0))?;
        let mut head = if ce {
            Some(LinearHead::init(
                task.class_ids(),
                d,
                &mut task_rng.split("head-init", 0),
            )?)
        } else {
            None
        };

        let mut lens: Vec<usize> = prompt.tokens.iter().map(|m| m.rows() * m.cols()).collect();
        lens.extend(neck.tensors_mut().iter().map(|t| t.len()));
        if let Some(h) = head.as_mut() {
            lens.extend(h.tensors_mut().iter().map(|t| t.len()));
        }
        let mut opt = AdamW::new(&lens, self.config.weight_decay)?;
        let ranges = batch_ranges(task.train.len(), self.config.batch_size);
        let schedule =
            CosineSchedule::new(self.config.lr_init, self.config.lr_final, self.config.epochs * ranges.len())?;

        let mut step = 0usize;
        let mut skipped_batches = 0usize;
        let mut epoch_losses = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut idx: Vec<usize> = (0..task.train.len()).collect();
            task_rng.split("epoch-shuffle", epoch as u64).shuffle(&mut idx);
            let mut epoch_loss = 0.0;
            let mut epoch_updates = 0usize;
            for range in &ranges {
                let batch: Vec<usize> = idx[range.clone()].to_vec();
                let lr = schedule.lr(step);
                let mut jitter_rng = task_rng.split("jitter", step as u64);

                let mut zs = Vec::with_capacity(batch.len());
                let mut labels = Vec::with_capacity(batch.len());
                let mut neck_traces: Vec<NeckTrace> = Vec::with_capacity(batch.len());
                let mut bb_traces: Vec<ForwardTrace> = Vec::with_capacity(batch.len());
                for &i in &batch {
                    let s = &task.train[i];
                    let tokens = jitter_augment(&s.tokens, self.config.jitter, &mut jitter_rng);
                    let (emb, tr) = self.backbone.encode(&tokens, Some(&prompt), true)?;
                    let (z, ntr) = neck.forward(&emb)?;
                    zs.push(z);
                    labels.push(s.label);
                    bb_traces.push(tr.expect("trace requested"));
                    neck_traces.push(ntr);
                }

                let stepped = if let Some(h) = head.as_mut() {
                    let (loss, dzs, head_grads) = h.loss_and_grads(&zs, &labels)?;
                    if !loss.is_finite() {
                        return Err(CppError::Numeric(format!(
                            "task {} loss {loss} at step {step}",
                            task.task_id
                        )));
                    }
                    let mut neck_grads = NeckGrads::zeros_like(&neck);
                    let mut prompt_grads =
                        vec![Matrix::zeros(prompt.prompt_len(), d); prompt.tokens.len()];
                    for i in 0..zs.len() {
                        let (ng, d_emb) = neck.backward(&neck_traces[i], &dzs[i])?;
                        neck_grads.add_assign(&ng);
                        let pg = self.backbone.backward_to_prompts(&bb_traces[i], &d_emb)?;
                        for (acc, g) in prompt_grads.iter_mut().zip(pg.iter()) {
                            for (x, y) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                                *x += y;
                            }
                        }
                    }
                    let mut params: Vec<&mut [f64]> =
                        prompt.tokens.iter_mut().map(|m| m.as_mut_slice()).collect();
                    params.extend(neck.tensors_mut());
                    params.extend(h.tensors_mut());
                    let mut grads: Vec<&[f64]> =
                        prompt_grads.iter().map(|m| m.as_slice()).collect();
                    grads.extend(neck_grads.tensors());
                    grads.extend(head_grads.tensors());
                    opt.step(&mut params, &grads, lr)?;
                    Some(loss)
                } else {
                    let mut anchor_rng = task_rng.split("anchor-aug", step as u64);
                    let mut anchors = Vec::new();
                    let mut anchor_classes = Vec::new();
                    for rec in self.store.records() {
                        for vc in &rec.value_centroids {
                            anchors.push(augment_prototype(vc, rec.aug_scale, &mut anchor_rng)?);
                            anchor_classes.push(rec.class_id);
                        }
                    }
                    let batch_data = LossBatch::new(zs, labels, anchors, anchor_classes, self.config.tau)?;
                    match variant_loss(&batch_data, variant, None) {
                        Err(CppError::EmptyInput(_)) => None,
                        Err(e) => return Err(e),
                        Ok(loss) => {
                            if !loss.is_finite() {
                                return Err(CppError::Numeric(format!(
                                    "task {} loss {loss} at step {step}",
                                    task.task_id
                                )));
                            }
                            let (neck_grads, prompt_grads) = cpl_backward(
                                &batch_data,
                                variant,
                                &neck,
                                &neck_traces,
                                &self.backbone,
                                &bb_traces,
                            )?;
                            let mut params: Vec<&mut [f64]> =
                                prompt.tokens.iter_mut().map(|m| m.as_mut_slice()).collect();
                            params.extend(neck.tensors_mut());
                            let mut grads: Vec<&[f64]> =
                                prompt_grads.iter().map(|m| m.as_slice()).collect();
                            grads.extend(neck_grads.tensors());
                            opt.step(&mut params, &grads, lr)?;
                            Some(loss)
                        }
                    }
                };
                match stepped {
                    Some(loss) => {
                        epoch_loss += loss;
                        epoch_updates += 1;
                    }
                    None => skipped_batches += 1,
                }
                step += 1;
            }
            let mean = if epoch_updates > 0 {
                Some(epoch_loss / epoch_updates as f64)
            } else {
                None
            };
            epoch_losses.push(mean);
            write_event(
                log,
                &serde_json::json!({
                    "event": "epoch",
                    "task": task.task_id,
                    "epoch": epoch,
                    "mean_loss": mean,
                }),
            )?;
        }

        // Fine prototypes come from the trained prompt on clean samples;
        // the neck and any head stay out of the store.
        let mut value_embeddings: BTreeMap<u32, Vec<Vector>> = BTreeMap::new();
        for s in &task.train {
            let (emb, _) = self.backbone.encode(&s.tokens, Some(&prompt), false)?;
            value_embeddings
                .entry(s.label)
                .or_default()
                .push(l2_normalize(&emb)?);
        }
        let mut record_rng = task_rng.split("records", 0);
        let mut records = Vec::with_capacity(key_embeddings.len());
        for (class, keys) in &key_embeddings {
            let values = value_embeddings.get(class).expect("same label set");
            records.push(ClassRecord::build(
                *class,
                task.task_id,
                keys,
                values,
                self.config.max_centroids,
                &mut record_rng,
            )?);
        }
        self.store.commit_task(task.task_id, prompt, records)?;
        Ok(TaskTrainReport {
            task_id: task.task_id,
            variant: RunVariant::Loss(variant).name().into(),
            steps: step,
            skipped_batches,
            epoch_losses,
        })
    }

    /// Two-stage inference: coarse retrieval over key centroids picks
    /// candidate tasks, then each candidate's prompt produces a fine query
    /// and the best value-centroid match wins.
    pub fn infer(&self, x: &TokenSequence) -> Result<InferOutcome> {
        self.infer_detailed(x).map(|(outcome, _)| outcome)
    }

    /// `infer` plus per-class similarity diagnostics computed from the same
    /// fine queries (no extra encoder passes).
    pub fn infer_detailed(&self, x: &TokenSequence) -> Result<(InferOutcome, Vec<ClassEnergy>)> {
        let (raw, _) = self.backbone.encode(x, None, false)?;
        let q = l2_normalize(&raw)?;
        let candidates = self.store.query(&q, self.config.retrieval_depth)?;
        let mut fine = BTreeMap::new();
        for t in &candidates {
            let p = self
                .store
                .prompt(*t)
                .ok_or_else(|| CppError::Key(format!("no prompt stored for task {t}")))?;
            let (emb, _) = self.backbone.encode(x, Some(p), false)?;
            fine.insert(*t, l2_normalize(&emb)?);
        }
        let class_id = self.store.predict(&fine)?;
        let mut energies = Vec::with_capacity(self.store.num_classes());
        for rec in self.store.records() {
            let mut sims = Vec::with_capacity(fine.len() * rec.value_centroids.len());
            for qf in fine.values() {
                for vc in &rec.value_centroids {
                    sims.push(cosine_sim(qf, vc)?);
                }
            }
            let max_sim = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e = energy(&Vector::from_vec(sims), self.config.tau)?;
            energies.push(ClassEnergy {
                class_id: rec.class_id,
                task_id: rec.task_id,
                max_sim,
                energy: e,
            });
        }
        let outcome = InferOutcome {
            class_id,
            candidates,
            forward_passes: 1 + fine.len(),
        };
        Ok((outcome, energies))
    }

    /// Inference with the retrieval stage bypassed: the caller names the
    /// task, its prompt produces the only fine query. The scope flag picks
    /// whether all stored classes compete or only that task's.
    pub fn infer_with_oracle_task(
        &self,
        x: &TokenSequence,
        task_id: u32,
        scope: NcmScope,
    ) -> Result<InferOutcome> {
        let p = self
            .store
            .prompt(task_id)
            .ok_or_else(|| CppError::Key(format!("no prompt stored for task {task_id}")))?;
        let (emb, _) = self.backbone.encode(x, Some(p), false)?;
        let q = l2_normalize(&emb)?;
        let class_id = match scope {
            NcmScope::AllClasses => {
                let mut fine = BTreeMap::new();
                fine.insert(task_id, q);
                self.store.predict(&fine)?
            }
            NcmScope::TaskOnly => {
                let mut best = f64::NEG_INFINITY;
                let mut best_class = None;
                for class in self.store.task_classes(task_id) {
                    let rec = self.store.record(class).expect("listed class");
                    for vc in &rec.value_centroids {
                        let s = cosine_sim(&q, vc)?;
                        if s > best {
                            best = s;
                            best_class = Some(class);
                        }
                    }
                }
                best_class
                    .ok_or_else(|| CppError::Key(format!("task {task_id} has no classes")))?
            }
        };
        Ok(InferOutcome {
            class_id,
            candidates: vec![task_id],
            forward_passes: 1,
        })
    }

    /// Accuracy and cost accounting over a sample set. Worker count comes
    /// from CPP_THREADS; results are identical for any count because
    /// per-sample work is independent and reduced in input order.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<TaskEval> {
        self.evaluate_with_threads(samples, eval_threads())
    }

    pub fn evaluate_with_threads(&self, samples: &[Sample], threads: usize) -> Result<TaskEval> {
        if samples.is_empty() {
            return Err(CppError::EmptyInput("no samples to evaluate".into()));
        }
        let threads = threads.max(1).min(samples.len());
        let per: Vec<SampleEval> = if threads == 1 {
            samples
                .iter()
                .map(|s| self.eval_sample(s))
                .collect::<Result<_>>()?
        } else {
            let chunk = samples.len().div_ceil(threads);
            std::thread::scope(|scope| {
                let handles: Vec<_> = samples
                    .chunks(chunk)
                    .map(|c| {
                        scope.spawn(move || {
                            c.iter().map(|s| self.eval_sample(s)).collect::<Result<Vec<_>>>()
                        })
                    })
                    .collect();
                let mut all = Vec::with_capacity(samples.len());
                for h in handles {
                    all.extend(h.join().expect("evaluation worker panicked")?);
                }
                Ok::<_, CppError>(all)
            })?
        };
        let mut out = TaskEval::default();
        for (i, e) in per.iter().enumerate() {
            if i == 0 {
                out.candidates_min = e.candidates;
                out.candidates_max = e.candidates;
            } else {
                out.candidates_min = out.candidates_min.min(e.candidates);
                out.candidates_max = out.candidates_max.max(e.candidates);
            }
            out.samples += 1;
            out.correct += e.correct as usize;
            out.forward_passes += e.forward_passes;
            out.min_energy_sum += e.min_energy;
            out.true_task_hits += e.hit as usize;
        }
        Ok(out)
    }

    fn eval_sample(&self, s: &Sample) -> Result<SampleEval> {
        let (outcome, energies) = self.infer_detailed(&s.tokens)?;
        let true_task = self.store.record(s.label).map(|r| r.task_id);
        let hit = true_task.is_some_and(|t| outcome.candidates.contains(&t));
        let min_energy = energies
            .iter()
            .map(|e| e.energy)
            .fold(f64::INFINITY, f64::min);
        Ok(SampleEval {
            correct: outcome.class_id == s.label,
            forward_passes: outcome.forward_passes,
            candidates: outcome.candidates.len(),
            hit,
            min_energy,
        })
    }

    /// Sequential class-incremental run: train every task in stream order,
    /// evaluating all seen test sets after each commit. Events go to `log`
    /// as JSON lines; pass `std::io::sink()` to discard them.
    pub fn run_stream(
        &mut self,
        stream: &MaterializedStream,
        variant: RunVariant,
        log: &mut dyn Write,
    ) -> Result<RunOutcome> {
        self.check_leakage(stream)?;
        if stream.tasks.is_empty() {
            return Err(CppError::EmptyInput("stream has no tasks".into()));
        }
        write_event(
            log,
            &serde_json::json!({
                "event": "start",
                "variant": variant.name(),
                "tasks": stream.tasks.len(),
                "classes": stream.all_class_ids().len(),
                "seed": self.config.seed,
            }),
        )?;
        let mut matrix = AccuracyMatrix::new();
        let mut sessions: Vec<SessionRecord> = Vec::with_capacity(stream.tasks.len());
        for (i, task) in stream.tasks.iter().enumerate() {
            let train = self.train_task(task, variant, log)?;
            let mut row = Vec::with_capacity(i + 1);
            let mut agg = TaskEval::default();
            for seen in &stream.tasks[..=i] {
                let ev = self.evaluate(&seen.test)?;
                row.push(ev.accuracy_pct());
                agg.merge(&ev);
            }
            matrix.push_row(row.clone())?;
            write_event(
                log,
                &serde_json::json!({
                    "event": "session",
                    "task": task.task_id,
                    "row": row,
                    "mean_forward_passes": agg.mean_forward_passes(),
                    "mean_min_energy": agg.mean_min_energy(),
                    "candidate_hit_rate": agg.hit_rate(),
                    "candidates_min": agg.candidates_min,
                    "candidates_max": agg.candidates_max,
                }),
            )?;
            sessions.push(SessionRecord {
                task_id: task.task_id,
                train,
                row,
                eval: agg,
            });
        }
        let last = sessions.last().expect("at least one session");
        let num_tasks = stream.tasks.len();
        let classes_per_task = (stream.all_class_ids().len() / num_tasks).max(1);
        let prompt_len = match variant {
            RunVariant::Baseline => 0,
            RunVariant::Loss(_) => self.config.prompt_len,
        };
        let extra_params_per_class = memory_per_class(
            self.backbone.config.embed_dim,
            self.config.max_centroids,
            self.backbone.config.num_layers,
            prompt_len,
            classes_per_task,
        );
        Ok(RunOutcome {
            variant: variant.name().into(),
            matrix,
            avg_forward_passes: last.eval.mean_forward_passes(),
            extra_params_per_class,
            mean_final_energy: last.eval.mean_min_energy(),
            sessions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{ClassSpec, GeneratorKind, TaskStream};

    fn gaussian_class(class_id: u32, noise: f64, train: usize, test: usize) -> ClassSpec {
        ClassSpec {
            class_id,
            kind: GeneratorKind::GaussianToken {
                noise,
                anchor: class_id,
                anchor_weight: 0.0,
            },
            train_count: train,
            test_count: test,
        }
    }

    fn tiny_stream(seed: u64, tasks: usize, noise: f64) -> MaterializedStream {
        let spec = TaskStream {
            seed,
            token_dim: 16,
            seq_tokens: 4,
            tasks: (0..tasks as u32)
                .map(|t| {
                    vec![
                        gaussian_class(10 + 2 * t, noise, 12, 6),
                        gaussian_class(11 + 2 * t, noise, 12, 6),
                    ]
                })
                .collect(),
        };
        crate::streams::generate(&spec).expect("stream")
    }

    fn tiny_backbone_config() -> BackboneConfig {
        BackboneConfig {
            num_layers: 2,
            embed_dim: 16,
            num_heads: 2,
            seq_len: 4,
            mlp_hidden: 32,
        }
    }

    fn frozen_backbone(seed: u64) -> BackboneWeights {
        let mut bb = BackboneWeights::init(tiny_backbone_config(), seed).expect("init");
        bb.freeze();
        bb
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 6,
            batch_size: 8,
            lr_init: 5e-3,
            lr_final: 1e-5,
            jitter: 0.05,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pretraining_reaches_holdout_target_and_freezes() {
        let stream = tiny_stream(3, 2, 0.08);
        let pc = PretrainConfig {
            epochs: 25,
            batch_size: 16,
            lr_init: 2e-3,
            lr_final: 1e-5,
            weight_decay: 0.01,
            seed: 5,
        };
        let (bb, report) = pretrain_backbone(tiny_backbone_config(), &stream, &pc).expect("pretrain");
        assert!(bb.is_frozen());
        assert!(
            report.test_accuracy >= 90.0,
            "held-out accuracy {} below target",
            report.test_accuracy
        );
        assert!(report.final_loss.is_finite());
        assert_eq!(bb.pretrain_class_ids(), stream.all_class_ids().as_slice());

        let (bb2, _) = pretrain_backbone(tiny_backbone_config(), &stream, &pc).expect("pretrain");
        assert_eq!(bb.checksum(), bb2.checksum());
    }

    #[test]
    fn leakage_against_pretraining_classes_is_refused() {
        let stream = tiny_stream(3, 2, 0.1);
        let mut bb = BackboneWeights::init(tiny_backbone_config(), 1).expect("init");
        bb.set_pretrain_class_ids(vec![11, 99]);
        bb.freeze();
        let mut engine = Engine::new(bb, quick_config(0)).expect("engine");
        let err = engine
            .run_stream(&stream, RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .unwrap_err();
        assert!(matches!(err, CppError::Leakage(_)), "got {err:?}");
    }

    #[test]
    fn engine_requires_frozen_backbone() {
        let bb = BackboneWeights::init(tiny_backbone_config(), 1).expect("init");
        let err = Engine::new(bb, quick_config(0)).unwrap_err();
        assert!(matches!(err, CppError::Frozen(_)));
    }

    #[test]
    fn training_commits_prompts_and_records_and_leaves_backbone_untouched() {
        let stream = tiny_stream(7, 2, 0.1);
        let mut engine = Engine::new(frozen_backbone(2), quick_config(4)).expect("engine");
        let before = engine.backbone().checksum();
        for task in &stream.tasks {
            engine
                .train_task(task, RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
                .expect("train");
        }
        assert_eq!(engine.backbone().checksum(), before);
        assert_eq!(engine.store().num_tasks(), 2);
        assert_eq!(engine.store().num_classes(), 4);
        for task in &stream.tasks {
            let p = engine.store().prompt(task.task_id).expect("prompt");
            assert_eq!(p.prompt_len(), engine.config().prompt_len);
        }
        let repeat = engine
            .train_task(&stream.tasks[0], RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .unwrap_err();
        assert!(matches!(repeat, CppError::DuplicateClass(_)));
    }

    #[test]
    fn separable_task_reaches_perfect_within_task_accuracy() {
        let stream = tiny_stream(11, 1, 0.02);
        let mut engine = Engine::new(frozen_backbone(3), quick_config(9)).expect("engine");
        engine
            .train_task(&stream.tasks[0], RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .expect("train");
        let task_id = stream.tasks[0].task_id;
        let mut correct = 0;
        for s in &stream.tasks[0].test {
            let out = engine
                .infer_with_oracle_task(&s.tokens, task_id, NcmScope::TaskOnly)
                .expect("oracle inference");
            assert_eq!(out.forward_passes, 1);
            correct += (out.class_id == s.label) as usize;
        }
        assert_eq!(correct, stream.tasks[0].test.len());
    }

    #[test]
    fn same_seed_reproduces_the_accuracy_matrix_bit_exactly() {
        let stream = tiny_stream(13, 3, 0.1);
        let mut log = Vec::new();
        let mut a = Engine::new(frozen_backbone(5), quick_config(21)).expect("engine");
        let out_a = a
            .run_stream(&stream, RunVariant::Loss(CplVariant::Cpl), &mut log)
            .expect("run");
        let mut b = Engine::new(frozen_backbone(5), quick_config(21)).expect("engine");
        let out_b = b
            .run_stream(&stream, RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .expect("run");
        assert_eq!(out_a.matrix.rows(), out_b.matrix.rows());
        assert_eq!(
            a.store().checksum().expect("checksum"),
            b.store().checksum().expect("checksum")
        );

        let text = String::from_utf8(log).expect("utf8 log");
        let lines: Vec<&str> = text.lines().collect();
        // one start, one epoch event per task per epoch, one session per task
        assert_eq!(lines.len(), 1 + 3 * a.config().epochs + 3);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).expect("json line");
            assert!(v.get("event").is_some());
        }
    }

    #[test]
    fn reseeding_one_task_leaves_committed_records_identical() {
        let stream = tiny_stream(17, 3, 0.1);
        let make_prefix = |seed: u64| {
            let mut e = Engine::new(frozen_backbone(6), quick_config(seed)).expect("engine");
            for task in &stream.tasks[..2] {
                e.train_task(task, RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
                    .expect("train");
            }
            e
        };
        let mut run_a = make_prefix(31);
        let mut run_b = make_prefix(31);
        run_a.set_seed(31);
        run_b.set_seed(32);
        run_a
            .train_task(&stream.tasks[2], RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .expect("train");
        run_b
            .train_task(&stream.tasks[2], RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .expect("train");
        for task in &stream.tasks[..2] {
            for class in task.class_ids() {
                assert_eq!(
                    run_a.store().record(class),
                    run_b.store().record(class),
                    "earlier class {class} drifted"
                );
            }
            assert_eq!(
                run_a.store().prompt(task.task_id),
                run_b.store().prompt(task.task_id)
            );
        }
        let last = &stream.tasks[2];
        let drifted = last
            .class_ids()
            .iter()
            .any(|c| run_a.store().record(*c) != run_b.store().record(*c));
        assert!(drifted, "different seeds should retrain the last task differently");
    }

    #[test]
    fn inference_cost_is_one_coarse_pass_plus_candidates() {
        let stream = tiny_stream(19, 3, 0.1);
        let mut engine = Engine::new(frozen_backbone(8), quick_config(2)).expect("engine");
        engine
            .run_stream(&stream, RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .expect("run");
        let r = engine.config().retrieval_depth;
        let t = engine.store().num_tasks();
        for task in &stream.tasks {
            for s in &task.test {
                let out = engine.infer(&s.tokens).expect("infer");
                assert_eq!(out.forward_passes, 1 + out.candidates.len());
                assert!(!out.candidates.is_empty());
                assert!(out.candidates.len() <= r.min(t));
            }
        }
    }

    #[test]
    fn singleton_candidate_set_matches_oracle_task_inference() {
        let stream = tiny_stream(23, 2, 0.05);
        let mut engine = Engine::new(frozen_backbone(9), quick_config(3)).expect("engine");
        engine
            .run_stream(&stream, RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .expect("run");
        let mut checked = 0;
        for task in &stream.tasks {
            for s in &task.test {
                let out = engine.infer(&s.tokens).expect("infer");
                if out.candidates.len() == 1 {
                    let oracle = engine
                        .infer_with_oracle_task(&s.tokens, out.candidates[0], NcmScope::AllClasses)
                        .expect("oracle");
                    assert_eq!(out.class_id, oracle.class_id);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no singleton candidate sets seen");
    }

    #[test]
    fn cross_entropy_variant_trains_and_commits() {
        let stream = tiny_stream(29, 1, 0.05);
        let mut engine = Engine::new(frozen_backbone(10), quick_config(6)).expect("engine");
        let report = engine
            .train_task(&stream.tasks[0], RunVariant::Loss(CplVariant::Ce), &mut std::io::sink())
            .expect("train");
        assert_eq!(report.variant, "ce");
        assert!(report.steps > 0);
        assert!(report.epoch_losses.iter().all(|l| l.is_some()));
        assert_eq!(engine.store().num_classes(), 2);
        let ev = engine.evaluate(&stream.tasks[0].test).expect("eval");
        assert!(ev.accuracy_pct() > 50.0);
    }

    #[test]
    fn baseline_skips_training_and_stores_identical_centroid_sets() {
        let stream = tiny_stream(31, 2, 0.1);
        let mut engine = Engine::new(frozen_backbone(11), quick_config(7)).expect("engine");
        let out = engine
            .run_stream(&stream, RunVariant::Baseline, &mut std::io::sink())
            .expect("run");
        assert_eq!(out.variant, "baseline");
        for session in &out.sessions {
            assert_eq!(session.train.steps, 0);
            assert!(session.train.epoch_losses.is_empty());
        }
        for rec in engine.store().records() {
            assert_eq!(rec.key_centroids, rec.value_centroids);
        }
        for task in &stream.tasks {
            let p = engine.store().prompt(task.task_id).expect("prompt");
            assert_eq!(p.prompt_len(), 0);
        }
        // training-free prompt: the fine query equals the coarse embedding
        let s = &stream.tasks[0].test[0];
        let (raw, _) = engine.backbone().encode(&s.tokens, None, false).expect("encode");
        let p = engine.store().prompt(stream.tasks[0].task_id).expect("prompt");
        let (fine, _) = engine.backbone().encode(&s.tokens, Some(p), false).expect("encode");
        assert_eq!(raw, fine);
    }

    #[test]
    fn evaluation_is_identical_across_worker_counts() {
        let stream = tiny_stream(37, 2, 0.1);
        let mut engine = Engine::new(frozen_backbone(12), quick_config(8)).expect("engine");
        engine
            .run_stream(&stream, RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .expect("run");
        let all: Vec<Sample> = stream
            .tasks
            .iter()
            .flat_map(|t| t.test.iter().cloned())
            .collect();
        let seq = engine.evaluate_with_threads(&all, 1).expect("eval");
        let par = engine.evaluate_with_threads(&all, 4).expect("eval");
        assert_eq!(seq.samples, par.samples);
        assert_eq!(seq.correct, par.correct);
        assert_eq!(seq.forward_passes, par.forward_passes);
        assert_eq!(seq.min_energy_sum, par.min_energy_sum);
        assert_eq!(seq.true_task_hits, par.true_task_hits);
        assert_eq!(seq.candidates_min, par.candidates_min);
        assert_eq!(seq.candidates_max, par.candidates_max);
    }

    #[test]
    fn energy_diagnostics_agree_with_the_prediction() {
        let stream = tiny_stream(41, 2, 0.1);
        let mut engine = Engine::new(frozen_backbone(13), quick_config(14)).expect("engine");
        engine
            .run_stream(&stream, RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .expect("run");
        for task in &stream.tasks {
            for s in &task.test {
                let (out, energies) = engine.infer_detailed(&s.tokens).expect("infer");
                assert_eq!(energies.len(), engine.store().num_classes());
                let best = energies
                    .iter()
                    .max_by(|a, b| a.max_sim.partial_cmp(&b.max_sim).expect("finite"))
                    .expect("nonempty");
                assert_eq!(best.class_id, out.class_id);
            }
        }
    }

    #[test]
    fn batch_ranges_merge_trailing_singleton() {
        assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
        assert_eq!(batch_ranges(4, 4), vec![0..4]);
        assert_eq!(batch_ranges(1, 4), vec![0..1]);
        assert_eq!(batch_ranges(0, 4), Vec::<Range<usize>>::new());
        assert_eq!(batch_ranges(5, 2), vec![0..2, 2..5]);
    }

    #[test]
    fn run_outcome_reports_memory_and_forward_costs() {
        let stream = tiny_stream(43, 2, 0.1);
        let mut engine = Engine::new(frozen_backbone(14), quick_config(15)).expect("engine");
        let out = engine
            .run_stream(&stream, RunVariant::Loss(CplVariant::Cpl), &mut std::io::sink())
            .expect("run");
        assert_eq!(out.matrix.num_tasks(), 2);
        let expected = memory_per_class(16, engine.config().max_centroids, 2, 1, 2);
        assert_eq!(out.extra_params_per_class, expected);
        assert!(out.avg_forward_passes >= 2.0);
        assert!(out.mean_final_energy.is_finite());
    }
}
