//! Prototype memory: per-class key/value centroids plus per-task prompts.
//!
//! Key centroids come from the frozen encoder and drive coarse task
//! retrieval; value centroids come from the prompted encoder and act as
//! classifier anchors. The store is append-only: committing a task never
//! touches earlier records.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::PromptSet;
use crate::binio;
use crate::cluster::spectral_partition;
use crate::error::{CppError, Result};
use crate::linalg::{cosine_sim, l2_normalize, Matrix, Vector};
use crate::rng::SplitRng;

pub const STORE_MAGIC: &[u8; 4] = b"CPPS";
pub const STORE_VERSION: u32 = 1;
const NORM_TOL: f64 = 1e-6;

/// Normalized mean of unit embeddings.
pub fn class_mean(embeddings: &[Vector]) -> Result<Vector> {
    if embeddings.is_empty() {
        return Err(CppError::EmptyInput("class mean of no embeddings".into()));
    }
    let d = embeddings[0].dim();
    let mut acc = vec![0.0; d];
    for e in embeddings {
        if e.dim() != d {
            return Err(CppError::Shape(format!(
                "embedding dim {} in a batch of dim {d}",
                e.dim()
            )));
        }
        for (a, v) in acc.iter_mut().zip(e.as_slice()) {
            *a += v;
        }
    }
    let n = embeddings.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    l2_normalize(&Vector::from_vec(acc))
}

/// Cluster a class's unit embeddings into min(c, n) centroids by normalized
/// spectral clustering; each centroid is the normalized mean of its group.
/// Centroids are ordered by their group's first sample index.
pub fn multi_centroid(embeddings: &[Vector], c: usize, rng: &mut SplitRng) -> Result<Vec<Vector>> {
    if embeddings.is_empty() {
        return Err(CppError::EmptyInput("multi-centroid of no embeddings".into()));
    }
    if c == 0 {
        return Err(CppError::Config("centroid budget must be at least 1".into()));
    }
    let c_eff = c.min(embeddings.len());
    if c_eff == 1 {
        return Ok(vec![class_mean(embeddings)?]);
    }
    let assign = spectral_partition(embeddings, c_eff, rng)?;
    let mut groups: Vec<Vec<Vector>> = vec![Vec::new(); c_eff];
    for (i, &g) in assign.iter().enumerate() {
        groups[g].push(embeddings[i].clone());
    }
    groups.iter().map(|g| class_mean(g)).collect()
}

/// One class's slice of the prototype memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub class_id: u32,
    pub task_id: u32,
    pub key_centroids: Vec<Vector>,
    pub value_centroids: Vec<Vector>,
    /// Mean per-coordinate variance of the class's value embeddings; scales
    /// the Gaussian perturbation when this class serves as a stored anchor.
    pub aug_scale: f64,
    pub sample_count: usize,
}

impl ClassRecord {
    /// Build a record from matched key/value embedding sets (same samples
    /// through the bare and the prompted encoder).
    pub fn build(
        class_id: u32,
        task_id: u32,
        key_embeddings: &[Vector],
        value_embeddings: &[Vector],
        c: usize,
        rng: &mut SplitRng,
    ) -> Result<Self> {
        if key_embeddings.len() != value_embeddings.len() {
            return Err(CppError::Shape(format!(
                "{} key embeddings vs {} value embeddings for class {class_id}",
                key_embeddings.len(),
                value_embeddings.len()
            )));
        }
        let mut key_rng = rng.split("key-centroids", class_id as u64);
        let mut value_rng = rng.split("value-centroids", class_id as u64);
        let key_centroids = multi_centroid(key_embeddings, c, &mut key_rng)?;
        let value_centroids = multi_centroid(value_embeddings, c, &mut value_rng)?;
        let aug_scale = mean_coordinate_variance(value_embeddings)?;
        Ok(ClassRecord {
            class_id,
            task_id,
            key_centroids,
            value_centroids,
            aug_scale,
            sample_count: value_embeddings.len(),
        })
    }

    pub fn centroid_count(&self) -> usize {
        self.key_centroids.len()
    }
}

/// Mean over coordinates of the per-coordinate population variance.
pub fn mean_coordinate_variance(embeddings: &[Vector]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(CppError::EmptyInput("variance of no embeddings".into()));
    }
    let d = embeddings[0].dim();
    let n = embeddings.len() as f64;
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e.as_slice()) {
            *m += v / n;
        }
    }
    let mut var_sum = 0.0;
    for e in embeddings {
        for (m, v) in mean.iter().zip(e.as_slice()) {
            var_sum += (v - m) * (v - m) / n;
        }
    }
    Ok(var_sum / d as f64)
}

/// Append-only prototype memory shared by retrieval and classification.
#[derive(Clone, Debug)]
pub struct PrototypeStore {
    embed_dim: usize,
    max_centroids: usize,
    records: BTreeMap<u32, ClassRecord>,
    prompts: BTreeMap<u32, PromptSet>,
    task_order: Vec<u32>,
}

impl PrototypeStore {
    pub fn new(embed_dim: usize, max_centroids: usize) -> Result<Self> {
        if embed_dim == 0 {
            return Err(CppError::Config("embed dim must be positive".into()));
        }
        if max_centroids == 0 {
            return Err(CppError::Config("centroid budget must be at least 1".into()));
        }
        Ok(PrototypeStore {
            embed_dim,
            max_centroids,
            records: BTreeMap::new(),
            prompts: BTreeMap::new(),
            task_order: Vec::new(),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn max_centroids(&self) -> usize {
        self.max_centroids
    }

    pub fn num_classes(&self) -> usize {
        self.records.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_order.len()
    }

    /// Committed task ids in commit order.
    pub fn task_order(&self) -> &[u32] {
        &self.task_order
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.records.keys().copied().collect()
    }

    pub fn record(&self, class_id: u32) -> Option<&ClassRecord> {
        self.records.get(&class_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &ClassRecord> {
        self.records.values()
    }

    pub fn prompt(&self, task_id: u32) -> Option<&PromptSet> {
        self.prompts.get(&task_id)
    }

    /// Class ids belonging to one task, ascending.
    pub fn task_classes(&self, task_id: u32) -> Vec<u32> {
        self.records
            .values()
            .filter(|r| r.task_id == task_id)
            .map(|r| r.class_id)
            .collect()
    }

    pub fn total_key_centroids(&self) -> usize {
        self.records.values().map(|r| r.key_centroids.len()).sum()
    }

    fn validate_record(&self, record: &ClassRecord, task_id: u32) -> Result<()> {
        if record.task_id != task_id {
            return Err(CppError::Config(format!(
                "record for class {} carries task {} inside commit of task {task_id}",
                record.class_id, record.task_id
            )));
        }
        if record.sample_count == 0 {
            return Err(CppError::Config(format!(
                "class {} has no samples",
                record.class_id
            )));
        }
        let want = self.max_centroids.min(record.sample_count);
        if record.key_centroids.len() != want || record.value_centroids.len() != want {
            return Err(CppError::Config(format!(
                "class {} has {} key / {} value centroids, expected {want}",
                record.class_id,
                record.key_centroids.len(),
                record.value_centroids.len()
            )));
        }
        if !(record.aug_scale.is_finite() && record.aug_scale >= 0.0) {
            return Err(CppError::Config(format!(
                "class {} has invalid augmentation scale {}",
                record.class_id, record.aug_scale
            )));
        }
        for v in record.key_centroids.iter().chain(record.value_centroids.iter()) {
            if v.dim() != self.embed_dim {
                return Err(CppError::Shape(format!(
                    "centroid dim {} in a store of dim {}",
                    v.dim(),
                    self.embed_dim
                )));
            }
            if (v.norm() - 1.0).abs() > NORM_TOL {
                return Err(CppError::Config(format!(
                    "class {} centroid is not unit norm",
                    record.class_id
                )));
            }
        }
        Ok(())
    }

    /// Commit one task: its prompt plus one record per new class. Fails
    /// without mutating the store if the task or any class already exists.
    pub fn commit_task(
        &mut self,
        task_id: u32,
        prompt: PromptSet,
        records: Vec<ClassRecord>,
    ) -> Result<()> {
        if self.task_order.contains(&task_id) {
            return Err(CppError::DuplicateTask(task_id));
        }
        if prompt.task_id != task_id {
            return Err(CppError::Config(format!(
                "prompt carries task {} inside commit of task {task_id}",
                prompt.task_id
            )));
        }
        if records.is_empty() {
            return Err(CppError::EmptyInput(format!("task {task_id} commits no classes")));
        }
        let mut seen = Vec::new();
        for record in &records {
            self.validate_record(record, task_id)?;
            if self.records.contains_key(&record.class_id) || seen.contains(&record.class_id) {
                return Err(CppError::DuplicateClass(record.class_id));
            }
            seen.push(record.class_id);
        }
        for record in records {
            self.records.insert(record.class_id, record);
        }
        self.prompts.insert(task_id, prompt);
        self.task_order.push(task_id);
        Ok(())
    }

    /// Coarse retrieval: rank every key centroid by cosine similarity to the
    /// bare-encoder query, take the top r, and return their task ids with
    /// duplicates removed in best-rank order. Ties break by higher
    /// similarity, then lower class id, then lower centroid index.
    pub fn query(&self, q: &Vector, r: usize) -> Result<Vec<u32>> {
        if self.records.is_empty() {
            return Err(CppError::EmptyStore);
        }
        if r == 0 {
            return Err(CppError::Config("retrieval depth must be at least 1".into()));
        }
        let mut ranked: Vec<(f64, u32, usize, u32)> = Vec::new();
        for record in self.records.values() {
            for (ci, kc) in record.key_centroids.iter().enumerate() {
                ranked.push((cosine_sim(q, kc)?, record.class_id, ci, record.task_id));
            }
        }
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite similarities")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut tasks = Vec::new();
        for (_, _, _, task) in ranked.into_iter().take(r) {
            if !tasks.contains(&task) {
                tasks.push(task);
            }
        }
        Ok(tasks)
    }

    /// Classification over prompted queries, one per candidate task: the
    /// predicted class maximizes cosine similarity between any fine query
    /// and any value centroid of any stored class. Ties go to the lowest
    /// class id.
    pub fn predict(&self, fine_queries: &BTreeMap<u32, Vector>) -> Result<u32> {
        if self.records.is_empty() {
            return Err(CppError::EmptyStore);
        }
        if fine_queries.is_empty() {
            return Err(CppError::EmptyInput("no fine queries".into()));
        }
        for task in fine_queries.keys() {
            if !self.prompts.contains_key(task) {
                return Err(CppError::Key(format!("fine query for unknown task {task}")));
            }
        }
        let mut best_sim = f64::NEG_INFINITY;
        let mut best_class = 0;
        for record in self.records.values() {
            for vc in &record.value_centroids {
                for q in fine_queries.values() {
                    let s = cosine_sim(q, vc)?;
                    if s > best_sim {
                        best_sim = s;
                        best_class = record.class_id;
                    }
                }
            }
        }
        Ok(best_class)
    }

    /// Count of stored f64 values: per record the augmentation scale plus
    /// both centroid sets, plus every prompt parameter.
    pub fn payload_f64_count(&self) -> usize {
        let record_part: usize = self
            .records
            .values()
            .map(|r| 1 + 2 * r.centroid_count() * self.embed_dim)
            .sum();
        let prompt_part: usize = self.prompts.values().map(|p| p.param_count()).sum();
        record_part + prompt_part
    }

    pub fn save_to_writer<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, STORE_MAGIC, STORE_VERSION)?;
        binio::write_u32(w, self.embed_dim as u32)?;
        binio::write_u32(w, self.max_centroids as u32)?;
        binio::write_u32(w, self.records.len() as u32)?;
        binio::write_u32(w, self.prompts.len() as u32)?;
        binio::write_u32(w, self.task_order.len() as u32)?;
        for t in &self.task_order {
            binio::write_u32(w, *t)?;
        }
        for record in self.records.values() {
            binio::write_u32(w, record.class_id)?;
            binio::write_u32(w, record.task_id)?;
            binio::write_u64(w, record.sample_count as u64)?;
            binio::write_f64(w, record.aug_scale)?;
            binio::write_u32(w, record.centroid_count() as u32)?;
            for v in &record.key_centroids {
                binio::write_f64_slice(w, v.as_slice())?;
            }
            for v in &record.value_centroids {
                binio::write_f64_slice(w, v.as_slice())?;
            }
        }
        for prompt in self.prompts.values() {
            binio::write_u32(w, prompt.task_id)?;
            binio::write_u32(w, prompt.tokens.len() as u32)?;
            binio::write_u32(w, prompt.prompt_len() as u32)?;
            binio::write_u32(w, self.embed_dim as u32)?;
            for layer in &prompt.tokens {
                binio::write_f64_slice(w, layer.as_slice())?;
            }
        }
        Ok(())
    }

    pub fn load_from_reader<R: Read>(r: &mut R) -> Result<Self> {
        let version = binio::read_magic(r, STORE_MAGIC)?;
        if version != STORE_VERSION {
            return Err(CppError::Format(format!(
                "store version {version}, expected {STORE_VERSION}"
            )));
        }
        let embed_dim = binio::read_u32(r)? as usize;
        let max_centroids = binio::read_u32(r)? as usize;
        let num_records = binio::read_u32(r)? as usize;
        let num_prompts = binio::read_u32(r)? as usize;
        let num_tasks = binio::read_u32(r)? as usize;
        if num_prompts != num_tasks {
            return Err(CppError::Format(format!(
                "{num_prompts} prompts for {num_tasks} tasks"
            )));
        }
        let mut store = PrototypeStore::new(embed_dim, max_centroids)
            .map_err(|e| CppError::Format(format!("store header: {e}")))?;
        let mut task_order = Vec::with_capacity(num_tasks);
        for _ in 0..num_tasks {
            task_order.push(binio::read_u32(r)?);
        }
        let mut records: Vec<ClassRecord> = Vec::with_capacity(num_records);
        for _ in 0..num_records {
            let class_id = binio::read_u32(r)?;
            let task_id = binio::read_u32(r)?;
            let sample_count = binio::read_u64(r)? as usize;
            let aug_scale = binio::read_f64(r)?;
            let count = binio::read_u32(r)? as usize;
            let read_centroids = |r: &mut R| -> Result<Vec<Vector>> {
                (0..count)
                    .map(|_| Ok(Vector::from_vec(binio::read_f64_vec(r, embed_dim)?)))
                    .collect()
            };
            let key_centroids = read_centroids(r)?;
            let value_centroids = read_centroids(r)?;
            records.push(ClassRecord {
                class_id,
                task_id,
                key_centroids,
                value_centroids,
                aug_scale,
                sample_count,
            });
        }
        let mut prompts: Vec<PromptSet> = Vec::with_capacity(num_prompts);
        for _ in 0..num_prompts {
            let task_id = binio::read_u32(r)?;
            let num_layers = binio::read_u32(r)? as usize;
            let prompt_len = binio::read_u32(r)? as usize;
            let dim = binio::read_u32(r)? as usize;
            if dim != embed_dim {
                return Err(CppError::Format(format!(
                    "prompt dim {dim} in a store of dim {embed_dim}"
                )));
            }
            let mut tokens = Vec::with_capacity(num_layers);
            for _ in 0..num_layers {
                let data = binio::read_f64_vec(r, prompt_len * dim)?;
                tokens.push(
                    Matrix::from_vec(prompt_len, dim, data)
                        .map_err(|e| CppError::Format(format!("prompt layer: {e}")))?,
                );
            }
            prompts.push(PromptSet { task_id, tokens });
        }
        binio::expect_eof(r)?;
        // Rebuild through the commit path so a structurally valid file with
        // inconsistent contents is still rejected.
        for &task_id in &task_order {
            let prompt = prompts
                .iter()
                .find(|p| p.task_id == task_id)
                .cloned()
                .ok_or_else(|| CppError::Format(format!("no prompt for task {task_id}")))?;
            let task_records: Vec<ClassRecord> = records
                .iter()
                .filter(|rec| rec.task_id == task_id)
                .cloned()
                .collect();
            store
                .commit_task(task_id, prompt, task_records)
                .map_err(|e| CppError::Format(format!("task {task_id}: {e}")))?;
        }
        if store.records.len() != num_records {
            return Err(CppError::Format(format!(
                "{} records committed, header promised {num_records}",
                store.records.len()
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.save_to_writer(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut cursor = std::io::Cursor::new(bytes);
        Self::load_from_reader(&mut cursor)
    }

    pub fn checksum(&self) -> Result<[u8; 32]> {
        let mut buf = Vec::new();
        self.save_to_writer(&mut buf)?;
        let digest = Sha256::digest(&buf);
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        Ok(out)
    }

    /// Human-oriented summary for the inspect subcommand.
    pub fn inspect(&self) -> serde_json::Value {
        let classes: Vec<serde_json::Value> = self
            .records
            .values()
            .map(|r| {
                serde_json::json!({
                    "class_id": r.class_id,
                    "task_id": r.task_id,
                    "centroids": r.centroid_count(),
                    "samples": r.sample_count,
                    "aug_scale": r.aug_scale,
                })
            })
            .collect();
        let prompts: Vec<serde_json::Value> = self
            .prompts
            .values()
            .map(|p| {
                serde_json::json!({
                    "task_id": p.task_id,
                    "layers": p.tokens.len(),
                    "prompt_len": p.prompt_len(),
                    "params": p.param_count(),
                })
            })
            .collect();
        serde_json::json!({
            "embed_dim": self.embed_dim,
            "max_centroids_per_class": self.max_centroids,
            "tasks": self.task_order,
            "num_classes": self.records.len(),
            "total_key_centroids": self.total_key_centroids(),
            "stored_f64_values": self.payload_f64_count(),
            "classes": classes,
            "prompts": prompts,
        })
    }
}
