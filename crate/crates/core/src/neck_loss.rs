//! Training-time head: the disposable MLP neck, the contrastive prototypical
//! loss and its ablation variants, and anchor-prototype augmentation.
//!
//! The loss for sample i with positive set P(i) is
//!
//!   L_i = -(1/|P(i)|) sum_{p in P(i)} log( exp(s_ip/tau) / D_i )
//!
//! where D_i sums exp(s/tau) over a denominator set that depends on the
//! variant: different-class batch members always; stored value-prototype
//! anchors unless the variant drops them; same-class members only in the
//! uniformity-penalized variants. The denominator never depends on which
//! positive p is in the numerator, which is what makes the positive-pair
//! gradient the constant -1/(tau |P(i)|).
//!
//! Samples with no positive partner in the batch are skipped: they carry no
//! loss term and the outer mean runs over the remaining samples.

use crate::backbone::{BackboneWeights, ForwardTrace};
use crate::error::{CppError, Result};
use crate::linalg::{l2_normalize, log_sum_exp, Matrix, Vector};
use crate::rng::SplitRng;

/// Unit-norm slack accepted when validating inputs that are required to be
/// normalized upstream.
const NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CplVariant {
    /// Positives excluded from the denominator; anchors included.
    Cpl,
    /// Same-class similarities added to the denominator (uniformity terms).
    CplWithUniform,
    /// Anchors dropped from the denominator.
    CplNoProto,
    /// Standard supervised contrastive loss: all other batch samples in the
    /// denominator, no anchors.
    SupCon,
    /// Cross-entropy with a trainable linear head; handled outside the
    /// contrastive path.
    Ce,
}

impl CplVariant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cpl" => Ok(CplVariant::Cpl),
            "cpl-with-uniform" => Ok(CplVariant::CplWithUniform),
            "cpl-no-proto" => Ok(CplVariant::CplNoProto),
            "supcon" => Ok(CplVariant::SupCon),
            "ce" => Ok(CplVariant::Ce),
            other => Err(CppError::Config(format!("unknown loss variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CplVariant::Cpl => "cpl",
            CplVariant::CplWithUniform => "cpl-with-uniform",
            CplVariant::CplNoProto => "cpl-no-proto",
            CplVariant::SupCon => "supcon",
            CplVariant::Ce => "ce",
        }
    }

    fn positives_in_denominator(&self) -> bool {
        matches!(self, CplVariant::CplWithUniform | CplVariant::SupCon)
    }

    fn anchors_in_denominator(&self) -> bool {
        matches!(self, CplVariant::Cpl | CplVariant::CplWithUniform)
    }
}

/// One training batch seen by the loss: normalized post-neck embeddings,
/// their labels, and the augmented previous-class anchors.
#[derive(Clone, Debug)]
pub struct LossBatch {
    pub z: Vec<Vector>,
    pub labels: Vec<u32>,
    pub anchors: Vec<Vector>,
    pub anchor_classes: Vec<u32>,
    pub tau: f64,
}

impl LossBatch {
    pub fn new(
        z: Vec<Vector>,
        labels: Vec<u32>,
        anchors: Vec<Vector>,
        anchor_classes: Vec<u32>,
        tau: f64,
    ) -> Result<Self> {
        if z.len() < 2 {
            return Err(CppError::Config(format!(
                "loss batch needs at least 2 samples, got {}",
                z.len()
            )));
        }
        if z.len() != labels.len() {
            return Err(CppError::Shape(format!(
                "{} embeddings vs {} labels",
                z.len(),
                labels.len()
            )));
        }
        if anchors.len() != anchor_classes.len() {
            return Err(CppError::Shape(format!(
                "{} anchors vs {} anchor classes",
                anchors.len(),
                anchor_classes.len()
            )));
        }
        if !(tau > 0.0) {
            return Err(CppError::Config(format!("temperature must be positive, got {tau}")));
        }
        let d = z[0].dim();
        for v in z.iter().chain(anchors.iter()) {
            if v.dim() != d {
                return Err(CppError::Shape("embedding dims differ within batch".into()));
            }
            if (v.norm() - 1.0).abs() > NORM_TOL {
                return Err(CppError::Config(
                    "loss batch requires unit-norm embeddings and anchors".into(),
                ));
            }
        }
        for ac in &anchor_classes {
            if labels.contains(ac) {
                return Err(CppError::Config(format!(
                    "anchor class {ac} also appears in the batch labels"
                )));
            }
        }
        Ok(LossBatch {
            z,
            labels,
            anchors,
            anchor_classes,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    fn positives(&self, i: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| j != i && self.labels[j] == self.labels[i])
            .collect()
    }
}

/// Directed pairwise similarities: batch[i][j] = z_i . z_j (diagonal unused),
/// anchor[i][a] = z_i . anchor_a. Embeddings are unit norm, so dot products
/// are cosines.
pub struct SimTable {
    pub batch: Matrix,
    pub anchor: Matrix,
}

pub fn build_sim_table(batch: &LossBatch) -> SimTable {
    let n = batch.len();
    let a = batch.anchors.len();
    let mut bm = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                bm.set(i, j, batch.z[i].dot(&batch.z[j]));
            }
        }
    }
    let mut am = Matrix::zeros(n, a);
    for i in 0..n {
        for (k, anc) in batch.anchors.iter().enumerate() {
            am.set(i, k, batch.z[i].dot(anc));
        }
    }
    SimTable { batch: bm, anchor: am }
}

/// Per-sample loss gradients w.r.t. the directed similarities. Entries on
/// skipped samples' rows are zero. These are gradients of L_i itself; the
/// batch-mean scaling by 1/n_eff is applied by the chain rule helpers.
pub struct SimGradients {
    pub batch: Matrix,
    pub anchor: Matrix,
    pub skipped: Vec<bool>,
    pub n_eff: usize,
}

fn denominator_indices(
    batch: &LossBatch,
    variant: CplVariant,
    i: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut batch_idx = Vec::new();
    for j in 0..batch.len() {
        if j == i {
            continue;
        }
        let same = batch.labels[j] == batch.labels[i];
        if !same || variant.positives_in_denominator() {
            batch_idx.push(j);
        }
    }
    let anchor_idx = if variant.anchors_in_denominator() {
        (0..batch.anchors.len()).collect()
    } else {
        Vec::new()
    };
    (batch_idx, anchor_idx)
}

/// Loss of one of the contrastive variants, computed from an explicit
/// similarity table. Exposed separately so gradients can be checked by
/// finite differences in similarity space.
pub fn variant_loss_from_sims(
    sims: &SimTable,
    labels: &[u32],
    anchors_len: usize,
    tau: f64,
    variant: CplVariant,
) -> Result<f64> {
    if variant == CplVariant::Ce {
        return Err(CppError::Config(
            "cross-entropy variant has no similarity-space loss".into(),
        ));
    }
    let n = labels.len();
    let mut total = 0.0;
    let mut n_eff = 0usize;
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom_terms = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let same = labels[j] == labels[i];
            if !same || variant.positives_in_denominator() {
                denom_terms.push(sims.batch.get(i, j) / tau);
            }
        }
        if variant.anchors_in_denominator() {
            for a in 0..anchors_len {
                denom_terms.push(sims.anchor.get(i, a) / tau);
            }
        }
        if denom_terms.is_empty() {
            return Err(CppError::AnchorlessSample(i));
        }
        let lse = log_sum_exp(&denom_terms)?;
        let mean_pos: f64 =
            positives.iter().map(|&p| sims.batch.get(i, p)).sum::<f64>() / positives.len() as f64;
        total += lse - mean_pos / tau;
        n_eff += 1;
    }
    if n_eff == 0 {
        return Err(CppError::EmptyInput(
            "every sample in the batch lacks a positive partner".into(),
        ));
    }
    Ok(total / n_eff as f64)
}

/// The contrastive prototypical loss over a batch.
pub fn cpl_loss(batch: &LossBatch) -> Result<f64> {
    variant_loss(batch, CplVariant::Cpl, None)
}

/// Loss under the named variant. The cross-entropy variant requires a head.
pub fn variant_loss(batch: &LossBatch, variant: CplVariant, head: Option<&LinearHead>) -> Result<f64> {
    if variant == CplVariant::Ce {
        let head = head.ok_or_else(|| {
            CppError::Config("cross-entropy variant requires a linear head".into())
        })?;
        let (loss, _, _) = head.loss_and_grads(&batch.z, &batch.labels)?;
        return Ok(loss);
    }
    let sims = build_sim_table(batch);
    variant_loss_from_sims(&sims, &batch.labels, batch.anchors.len(), batch.tau, variant)
}

/// Gradients of each per-sample loss w.r.t. its directed similarities.
/// Positive pairs (when excluded from the denominator) receive the constant
/// -1/(tau |P(i)|); denominator members receive their softmax weight / tau.
pub fn variant_grad_similarities(batch: &LossBatch, variant: CplVariant) -> Result<SimGradients> {
    if variant == CplVariant::Ce {
        return Err(CppError::Config(
            "cross-entropy variant has no similarity gradients".into(),
        ));
    }
    let n = batch.len();
    let na = batch.anchors.len();
    let sims = build_sim_table(batch);
    let tau = batch.tau;
    let mut gb = Matrix::zeros(n, n);
    let mut ga = Matrix::zeros(n, na);
    let mut skipped = vec![false; n];
    let mut n_eff = 0usize;
    for i in 0..n {
        let positives = batch.positives(i);
        if positives.is_empty() {
            skipped[i] = true;
            continue;
        }
        n_eff += 1;
        let (batch_idx, anchor_idx) = denominator_indices(batch, variant, i);
        if batch_idx.is_empty() && anchor_idx.is_empty() {
            return Err(CppError::AnchorlessSample(i));
        }
        // Softmax weights over the denominator set, max-shifted.
        let mut terms: Vec<f64> = batch_idx
            .iter()
            .map(|&j| sims.batch.get(i, j) / tau)
            .chain(anchor_idx.iter().map(|&a| sims.anchor.get(i, a) / tau))
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for t in terms.iter_mut() {
            *t = (*t - max).exp();
            denom += *t;
        }
        for (pos, &j) in batch_idx.iter().enumerate() {
            gb.set(i, j, terms[pos] / denom / tau);
        }
        for (pos, &a) in anchor_idx.iter().enumerate() {
            let v = terms[batch_idx.len() + pos] / denom / tau;
            ga.set(i, a, v);
        }
        let pull = -1.0 / (tau * positives.len() as f64);
        for &p in &positives {
            let cur = gb.get(i, p);
            gb.set(i, p, cur + pull);
        }
    }
    if n_eff == 0 {
        return Err(CppError::EmptyInput(
            "every sample in the batch lacks a positive partner".into(),
        ));
    }
    Ok(SimGradients {
        batch: gb,
        anchor: ga,
        skipped,
        n_eff,
    })
}

/// Gradients of the standard loss w.r.t. similarities.
pub fn cpl_grad_similarities(batch: &LossBatch) -> Result<SimGradients> {
    variant_grad_similarities(batch, CplVariant::Cpl)
}

/// Chain the similarity gradients back to each z_i. A given z_i appears in
/// its own row's similarities and in every other sample's row, and anchors
/// are constants, so
///   dL/dz_i = (1/n_eff) * sum_j (g[i][j] + g[j][i]) z_j
///           + (1/n_eff) * sum_a g_anchor[i][a] anchor_a.
pub fn sim_grads_to_z_grads(batch: &LossBatch, grads: &SimGradients) -> Vec<Vector> {
    let n = batch.len();
    let d = batch.z[0].dim();
    let scale = 1.0 / grads.n_eff as f64;
    let mut out = vec![Vector::zeros(d); n];
    for i in 0..n {
        let gz = &mut out[i];
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = grads.batch.get(i, j) + grads.batch.get(j, i);
            if g != 0.0 {
                for c in 0..d {
                    gz[c] += scale * g * batch.z[j][c];
                }
            }
        }
        for (a, anchor) in batch.anchors.iter().enumerate() {
            let g = grads.anchor.get(i, a);
            if g != 0.0 {
                for c in 0..d {
                    gz[c] += scale * g * anchor[c];
                }
            }
        }
    }
    out
}

/// Additive Gaussian perturbation of a prototype before re-normalization:
/// mu + m * e with e standard normal per coordinate.
pub fn perturb_prototype(mu: &Vector, m: f64, rng: &mut SplitRng) -> Result<Vector> {
    if !(m.is_finite() && m >= 0.0) {
        return Err(CppError::Config(format!(
            "perturbation scale must be finite and nonnegative, got {m}"
        )));
    }
    let mut out = mu.clone();
    for v in out.as_mut_slice() {
        *v += m * rng.normal();
    }
    Ok(out)
}

/// Anchor augmentation: perturb then project back to the unit sphere.
pub fn augment_prototype(mu: &Vector, m: f64, rng: &mut SplitRng) -> Result<Vector> {
    l2_normalize(&perturb_prototype(mu, m, rng)?)
}

/// Disposable projection head: a small MLP with rectifier activations
/// between layers and a normalized output. Re-initialized per task and
/// absent at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNeck {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

/// Cached activations from one neck forward pass.
pub struct NeckTrace {
    layer_inputs: Vec<Vector>,
    pre_acts: Vec<Vector>,
    z: Vector,
    raw_norm: f64,
}

pub struct NeckGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl NeckGrads {
    pub fn zeros_like(neck: &MlpNeck) -> Self {
        NeckGrads {
            weights: neck
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: neck.biases.iter().map(|b| Vector::zeros(b.dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NeckGrads) {
        for (a, b) in self.weights.iter_mut().zip(other.weights.iter()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(other.biases.iter()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }
}

impl MlpNeck {
    /// Layer dims run input -> hidden... -> output; `dims` has layer_count+1
    /// entries. Weights get a seeded Xavier init, biases start at zero.
    pub fn init(dims: &[usize], rng: &mut SplitRng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(CppError::Config("neck needs at least one layer".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(CppError::Config("neck layer dims must be positive".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let mut m = Matrix::zeros(fan_in, fan_out);
            for v in m.as_mut_slice() {
                *v = rng.normal() * std;
            }
            weights.push(m);
            biases.push(Vector::zeros(fan_out));
        }
        Ok(MlpNeck { weights, biases })
    }

    /// Standard shape: 3 layers, D -> hidden -> hidden -> D.
    pub fn standard(embed_dim: usize, hidden: usize, rng: &mut SplitRng) -> Result<Self> {
        Self::init(&[embed_dim, hidden, hidden, embed_dim], rng)
    }

    /// Single identity layer; forward reduces to plain normalization.
    pub fn identity(dim: usize) -> Self {
        let mut w = Matrix::zeros(dim, dim);
        for i in 0..dim {
            w.set(i, i, 1.0);
        }
        MlpNeck {
            weights: vec![w],
            biases: vec![Vector::zeros(dim)],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("nonempty").cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.rows() * w.cols())
            .sum::<usize>()
            + self.biases.iter().map(|b| b.dim()).sum::<usize>()
    }

    /// Projected and normalized embedding, with the trace needed to run the
    /// chain rule back to the input.
    pub fn forward(&self, v: &Vector) -> Result<(Vector, NeckTrace)> {
        if v.dim() != self.input_dim() {
            return Err(CppError::Shape(format!(
                "neck input dim {} vs {}",
                v.dim(),
                self.input_dim()
            )));
        }
        let layers = self.weights.len();
        let mut layer_inputs = Vec::with_capacity(layers);
        let mut pre_acts = Vec::with_capacity(layers);
        let mut a = v.clone();
        for l in 0..layers {
            layer_inputs.push(a.clone());
            let w = &self.weights[l];
            let b = &self.biases[l];
            let mut pre = Vector::zeros(w.cols());
            for i in 0..w.rows() {
                let av = a[i];
                if av == 0.0 {
                    continue;
                }
                let row = w.row(i);
                for j in 0..w.cols() {
                    pre[j] += av * row[j];
                }
            }
            for j in 0..w.cols() {
                pre[j] += b[j];
            }
            pre_acts.push(pre.clone());
            a = if l + 1 < layers {
                let mut act = pre;
                for x in act.as_mut_slice() {
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
                act
            } else {
                pre
            };
        }
        let raw_norm = a.norm();
        if raw_norm == 0.0 {
            return Err(CppError::DegenerateVector("neck output is zero".into()));
        }
        let z = a.scale(1.0 / raw_norm);
        Ok((
            z.clone(),
            NeckTrace {
                layer_inputs,
                pre_acts,
                z,
                raw_norm,
            },
        ))
    }

    /// Backward from a gradient on the normalized output. Returns gradients
    /// for the neck parameters and for the input vector.
    pub fn backward(&self, trace: &NeckTrace, d_z: &Vector) -> Result<(NeckGrads, Vector)> {
        if trace.layer_inputs.len() != self.weights.len() {
            return Err(CppError::Trace("neck trace layer count mismatch".into()));
        }
        if d_z.dim() != self.output_dim() {
            return Err(CppError::Trace("neck grad dim mismatch".into()));
        }
        // Through the normalization: z = r/|r|.
        let gz_dot = d_z.dot(&trace.z);
        let mut d = Vector::zeros(d_z.dim());
        for c in 0..d_z.dim() {
            d[c] = (d_z[c] - gz_dot * trace.z[c]) / trace.raw_norm;
        }
        let mut grads = NeckGrads::zeros_like(self);
        for l in (0..self.weights.len()).rev() {
            let input = &trace.layer_inputs[l];
            let w = &self.weights[l];
            for i in 0..w.rows() {
                let av = input[i];
                if av != 0.0 {
                    let grow = grads.weights[l].row_mut(i);
                    for j in 0..w.cols() {
                        grow[j] += av * d[j];
                    }
                }
            }
            for j in 0..w.cols() {
                grads.biases[l][j] += d[j];
            }
            let mut d_in = Vector::zeros(w.rows());
            for i in 0..w.rows() {
                let row = w.row(i);
                let mut acc = 0.0;
                for j in 0..w.cols() {
                    acc += row[j] * d[j];
                }
                d_in[i] = acc;
            }
            if l > 0 {
                // Rectifier backward on the previous layer's pre-activation.
                let pre = &trace.pre_acts[l - 1];
                for i in 0..d_in.dim() {
                    if pre[i] <= 0.0 {
                        d_in[i] = 0.0;
                    }
                }
            }
            d = d_in;
        }
        Ok((grads, d))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }
}

/// Trainable classifier head for the cross-entropy ablation. Like the neck
/// it lives only inside one task's training loop.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub class_ids: Vec<u32>,
    pub w: Matrix,
    pub b: Vector,
}

pub struct HeadGrads {
    pub w: Matrix,
    pub b: Vector,
}

impl HeadGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice(), self.b.as_slice()]
    }
}

impl LinearHead {
    pub fn init(class_ids: Vec<u32>, dim: usize, rng: &mut SplitRng) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(CppError::Config("linear head needs at least one class".into()));
        }
        let k = class_ids.len();
        let std = (2.0 / (dim + k) as f64).sqrt();
        let mut w = Matrix::zeros(dim, k);
        for v in w.as_mut_slice() {
            *v = rng.normal() * std;
        }
        Ok(LinearHead {
            class_ids,
            w,
            b: Vector::zeros(k),
        })
    }

    /// Mean cross-entropy over the batch plus gradients w.r.t. the inputs
    /// and the head parameters.
    pub fn loss_and_grads(
        &self,
        z: &[Vector],
        labels: &[u32],
    ) -> Result<(f64, Vec<Vector>, HeadGrads)> {
        if z.len() != labels.len() {
            return Err(CppError::Shape("embedding/label count mismatch".into()));
        }
        if z.is_empty() {
            return Err(CppError::EmptyInput("empty cross-entropy batch".into()));
        }
        let d = self.w.rows();
        let k = self.w.cols();
        let n = z.len() as f64;
        let mut loss = 0.0;
        let mut d_z = Vec::with_capacity(z.len());
        let mut gw = Matrix::zeros(d, k);
        let mut gb = Vector::zeros(k);
        for (zi, label) in z.iter().zip(labels.iter()) {
            if zi.dim() != d {
                return Err(CppError::Shape("embedding dim vs head dim".into()));
            }
            let target = self
                .class_ids
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| CppError::Key(format!("label {label} not covered by head")))?;
            let mut logits = vec![0.0; k];
            for i in 0..d {
                let v = zi[i];
                if v == 0.0 {
                    continue;
                }
                let row = self.w.row(i);
                for (j, l) in logits.iter_mut().enumerate() {
                    *l += v * row[j];
                }
            }
            for (j, l) in logits.iter_mut().enumerate() {
                *l += self.b[j];
            }
            let lse = log_sum_exp(&logits)?;
            loss += (lse - logits[target]) / n;
            // Softmax minus one-hot, scaled by the batch mean.
            let mut dl = vec![0.0; k];
            for j in 0..k {
                dl[j] = (logits[j] - lse).exp() / n;
            }
            dl[target] -= 1.0 / n;
            let mut dz = Vector::zeros(d);
            for i in 0..d {
                let row = self.w.row(i);
                let mut acc = 0.0;
                for j in 0..k {
                    acc += row[j] * dl[j];
                }
                dz[i] = acc;
                let grow = gw.row_mut(i);
                let v = zi[i];
                for j in 0..k {
                    grow[j] += v * dl[j];
                }
            }
            for j in 0..k {
                gb[j] += dl[j];
            }
            d_z.push(dz);
        }
        Ok((loss, d_z, HeadGrads { w: gw, b: gb }))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice(), self.b.as_mut_slice()]
    }
}

/// End-to-end backward for the standard loss: similarity gradients chained
/// through the neck and the encoder. Returns neck-parameter gradients and
/// per-layer prompt gradients, both summed over the batch.
///
/// The i-th entries of `neck_traces` and `backbone_traces` must come from
/// the forward passes that produced batch.z[i].
pub fn cpl_backward(
    batch: &LossBatch,
    variant: CplVariant,
    neck: &MlpNeck,
    neck_traces: &[NeckTrace],
    backbone: &BackboneWeights,
    backbone_traces: &[ForwardTrace],
) -> Result<(NeckGrads, Vec<Matrix>)> {
    if neck_traces.len() != batch.len() || backbone_traces.len() != batch.len() {
        return Err(CppError::Trace(format!(
            "batch of {} with {} neck traces and {} encoder traces",
            batch.len(),
            neck_traces.len(),
            backbone_traces.len()
        )));
    }
    let sim_grads = variant_grad_similarities(batch, variant)?;
    let z_grads = sim_grads_to_z_grads(batch, &sim_grads);
    let mut neck_grads = NeckGrads::zeros_like(neck);
    let lp = backbone_traces[0].prompt_len();
    let d = backbone.config.embed_dim;
    let mut prompt_grads = vec![Matrix::zeros(lp, d); backbone.config.num_layers];
    for i in 0..batch.len() {
        if sim_grads.skipped[i] {
            continue;
        }
        let (ng, d_embed) = neck.backward(&neck_traces[i], &z_grads[i])?;
        neck_grads.add_assign(&ng);
        let pg = backbone.backward_to_prompts(&backbone_traces[i], &d_embed)?;
        for (acc, g) in prompt_grads.iter_mut().zip(pg.iter()) {
            for (x, y) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *x += y;
            }
        }
    }
    Ok((neck_grads, prompt_grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Vector {
        l2_normalize(&Vector::from_vec(v)).unwrap()
    }

    fn random_unit(dim: usize, rng: &mut SplitRng) -> Vector {
        loop {
            let v = Vector::from_vec((0..dim).map(|_| rng.normal()).collect());
            if v.norm() > 1e-6 {
                return l2_normalize(&v).unwrap();
            }
        }
    }

    fn seeded_batch(
        n: usize,
        num_classes: u32,
        num_anchors: usize,
        dim: usize,
        tau: f64,
        seed: u64,
    ) -> LossBatch {
        let mut rng = SplitRng::from_seed_u64(seed);
        let z: Vec<Vector> = (0..n).map(|_| random_unit(dim, &mut rng)).collect();
        let labels: Vec<u32> = (0..n).map(|i| (i as u32) % num_classes).collect();
        let anchors: Vec<Vector> = (0..num_anchors).map(|_| random_unit(dim, &mut rng)).collect();
        let anchor_classes: Vec<u32> = (0..num_anchors as u32).map(|a| 1000 + a).collect();
        LossBatch::new(z, labels, anchors, anchor_classes, tau).unwrap()
    }

    #[test]
    fn orthogonal_positive_only_batch_loss_zero() {
        // Labels (a, a, b), all pairwise similarities zero, tau = 1: each
        // 'a' sample sees numerator exp(0) over denominator exp(0); the 'b'
        // sample has no positive and is skipped.
        let z = vec![
            unit(vec![1.0, 0.0, 0.0]),
            unit(vec![0.0, 1.0, 0.0]),
            unit(vec![0.0, 0.0, 1.0]),
        ];
        let batch = LossBatch::new(z, vec![5, 5, 9], vec![], vec![], 1.0).unwrap();
        let loss = cpl_loss(&batch).unwrap();
        assert!(loss.abs() < 1e-12, "expected 0, got {loss}");
    }

    #[test]
    fn single_negative_closed_form() {
        // One positive pair at similarity 0.9, each sample seeing one anchor
        // at similarity 0.1: per-sample loss (s_n - s_p)/tau.
        let c = (0.95f64).sqrt();
        let s = (0.05f64).sqrt();
        let zi = Vector::from_vec(vec![c, s, 0.0]);
        let zp = Vector::from_vec(vec![c, -s, 0.0]);
        assert!((zi.dot(&zp) - 0.9).abs() < 1e-12);
        let x = 0.1 / c;
        let anchor = Vector::from_vec(vec![x, 0.0, (1.0 - x * x).sqrt()]);
        assert!((zi.dot(&anchor) - 0.1).abs() < 1e-12);
        assert!((zp.dot(&anchor) - 0.1).abs() < 1e-12);
        let batch = LossBatch::new(
            vec![zi, zp],
            vec![3, 3],
            vec![anchor],
            vec![7],
            0.6,
        )
        .unwrap();
        let loss = cpl_loss(&batch).unwrap();
        let expected = (0.1 - 0.9) / 0.6;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn seeded_batch_matches_explicit_loop_reference() {
        let batch = seeded_batch(8, 3, 2, 6, 0.6, 77);
        let loss = cpl_loss(&batch).unwrap();
        // Straightforward reference: no log-sum-exp trick, direct formula.
        let n = batch.len();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            let positives: Vec<usize> = (0..n)
                .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            let mut den = 0.0;
            for j in 0..n {
                if j != i && batch.labels[j] != batch.labels[i] {
                    den += (batch.z[i].dot(&batch.z[j]) / batch.tau).exp();
                }
            }
            for a in &batch.anchors {
                den += (batch.z[i].dot(a) / batch.tau).exp();
            }
            let mut li = 0.0;
            for &p in &positives {
                let num = (batch.z[i].dot(&batch.z[p]) / batch.tau).exp();
                li -= (num / den).ln();
            }
            total += li / positives.len() as f64;
            count += 1;
        }
        let reference = total / count as f64;
        assert!((loss - reference).abs() < 1e-10, "{loss} vs {reference}");
    }

    #[test]
    fn anchorless_sample_is_an_error() {
        // Two same-class samples, no other class, no anchors: the
        // denominator set is empty.
        let z = vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let batch = LossBatch::new(z, vec![1, 1], vec![], vec![], 0.6).unwrap();
        assert!(matches!(
            cpl_loss(&batch),
            Err(CppError::AnchorlessSample(_))
        ));
    }

    #[test]
    fn anchor_class_overlap_rejected() {
        let z = vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        assert!(matches!(
            LossBatch::new(z, vec![1, 2], vec![unit(vec![1.0, 1.0])], vec![1], 0.6),
            Err(CppError::Config(_))
        ));
    }

    #[test]
    fn positive_grads_are_the_closed_form_constant() {
        let batch = seeded_batch(12, 3, 2, 6, 0.6, 91);
        let grads = cpl_grad_similarities(&batch).unwrap();
        for i in 0..batch.len() {
            let positives = batch.positives(i);
            if positives.is_empty() {
                continue;
            }
            let expected = -1.0 / (0.6 * positives.len() as f64);
            for &p in &positives {
                let g = grads.batch.get(i, p);
                assert!(
                    (g - expected).abs() < 1e-12,
                    "positive grad {g} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn positive_grad_constant_for_two_positives() {
        // tau = 0.6 and |P(i)| = 2 gives exactly -1/1.2.
        let batch = seeded_batch(9, 3, 1, 5, 0.6, 13);
        let grads = cpl_grad_similarities(&batch).unwrap();
        for i in 0..batch.len() {
            let positives = batch.positives(i);
            assert_eq!(positives.len(), 2);
            for &p in &positives {
                assert!((grads.batch.get(i, p) + 1.0 / 1.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_negative_grad_is_inverse_tau() {
        let c = (0.95f64).sqrt();
        let s = (0.05f64).sqrt();
        let zi = Vector::from_vec(vec![c, s, 0.0]);
        let zp = Vector::from_vec(vec![c, -s, 0.0]);
        let x = 0.1 / c;
        let anchor = Vector::from_vec(vec![x, 0.0, (1.0 - x * x).sqrt()]);
        let batch = LossBatch::new(vec![zi, zp], vec![3, 3], vec![anchor], vec![7], 0.6).unwrap();
        let grads = cpl_grad_similarities(&batch).unwrap();
        for i in 0..2 {
            assert!((grads.anchor.get(i, 0) - 1.0 / 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_grads_sum_to_inverse_tau_per_sample() {
        for seed in 0..20u64 {
            let batch = seeded_batch(10, 4, 3, 6, 0.6, 1000 + seed);
            let grads = cpl_grad_similarities(&batch).unwrap();
            for i in 0..batch.len() {
                if grads.skipped[i] {
                    continue;
                }
                let mut neg_sum = 0.0;
                for j in 0..batch.len() {
                    if j != i && batch.labels[j] != batch.labels[i] {
                        let g = grads.batch.get(i, j);
                        assert!(g >= 0.0);
                        neg_sum += g;
                    }
                }
                for a in 0..batch.anchors.len() {
                    let g = grads.anchor.get(i, a);
                    assert!(g >= 0.0);
                    neg_sum += g;
                }
                assert!(
                    (neg_sum - 1.0 / 0.6).abs() < 1e-10,
                    "negative grads sum {neg_sum}"
                );
            }
        }
    }

    #[test]
    fn sim_grads_match_finite_differences() {
        let batch = seeded_batch(8, 3, 2, 6, 0.6, 55);
        let grads = cpl_grad_similarities(&batch).unwrap();
        let sims = build_sim_table(&batch);
        let h = 1e-6;
        let loss_at = |sims: &SimTable| {
            variant_loss_from_sims(sims, &batch.labels, batch.anchors.len(), batch.tau, CplVariant::Cpl)
                .unwrap()
        };
        let n = batch.len();
        for i in 0..n {
            if grads.skipped[i] {
                continue;
            }
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut plus = SimTable {
                    batch: sims.batch.clone(),
                    anchor: sims.anchor.clone(),
                };
                plus.batch.set(i, j, sims.batch.get(i, j) + h);
                let mut minus = SimTable {
                    batch: sims.batch.clone(),
                    anchor: sims.anchor.clone(),
                };
                minus.batch.set(i, j, sims.batch.get(i, j) - h);
                // The table is directed, so this probes d(batch mean)/ds_ij
                // = g_ij / n_eff.
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let analytic = grads.batch.get(i, j) / grads.n_eff as f64;
                let scale = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((analytic - fd) / scale).abs() < 1e-6,
                    "pair ({i},{j}): {analytic} vs {fd}"
                );
            }
            for a in 0..batch.anchors.len() {
                let mut plus = SimTable {
                    batch: sims.batch.clone(),
                    anchor: sims.anchor.clone(),
                };
                plus.anchor.set(i, a, sims.anchor.get(i, a) + h);
                let mut minus = SimTable {
                    batch: sims.batch.clone(),
                    anchor: sims.anchor.clone(),
                };
                minus.anchor.set(i, a, sims.anchor.get(i, a) - h);
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let analytic = grads.anchor.get(i, a) / grads.n_eff as f64;
                let scale = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((analytic - fd) / scale).abs() < 1e-6,
                    "anchor pair ({i},{a}): {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn with_uniform_never_below_standard_loss() {
        for seed in 0..25u64 {
            let batch = seeded_batch(8, 3, 2, 6, 0.6, 300 + seed);
            let base = cpl_loss(&batch).unwrap();
            let uniform = variant_loss(&batch, CplVariant::CplWithUniform, None).unwrap();
            assert!(
                uniform >= base - 1e-12,
                "seed {seed}: uniform {uniform} < base {base}"
            );
        }
    }

    #[test]
    fn no_proto_equals_cpl_when_anchorless() {
        let mut rng = SplitRng::from_seed_u64(8);
        let z: Vec<Vector> = (0..6).map(|_| random_unit(5, &mut rng)).collect();
        let labels = vec![0, 0, 1, 1, 2, 2];
        let batch = LossBatch::new(z, labels, vec![], vec![], 0.6).unwrap();
        let a = cpl_loss(&batch).unwrap();
        let b = variant_loss(&batch, CplVariant::CplNoProto, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_proto_ignores_anchors() {
        let with = seeded_batch(8, 3, 2, 6, 0.6, 44);
        let without = LossBatch::new(
            with.z.clone(),
            with.labels.clone(),
            vec![],
            vec![],
            with.tau,
        )
        .unwrap();
        let a = variant_loss(&with, CplVariant::CplNoProto, None).unwrap();
        let b = variant_loss(&without, CplVariant::CplNoProto, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn anchor_monotonicity() {
        let mut rng = SplitRng::from_seed_u64(21);
        for seed in 0..20u64 {
            let base = seeded_batch(8, 3, 1, 6, 0.6, 400 + seed);
            let more_anchor = random_unit(6, &mut rng);
            let mut anchors = base.anchors.clone();
            let mut classes = base.anchor_classes.clone();
            anchors.push(more_anchor);
            classes.push(2000);
            let bigger = LossBatch::new(
                base.z.clone(),
                base.labels.clone(),
                anchors,
                classes,
                base.tau,
            )
            .unwrap();
            let a = cpl_loss(&base).unwrap();
            let b = cpl_loss(&bigger).unwrap();
            assert!(b >= a - 1e-12, "adding an anchor reduced the loss");
        }
    }

    #[test]
    fn supcon_matches_explicit_reference() {
        let batch = seeded_batch(8, 3, 2, 0x6e, 0.6, 99);
        let loss = variant_loss(&batch, CplVariant::SupCon, None).unwrap();
        // Reference: denominator over all non-self batch members, anchors
        // ignored, direct exponentials.
        let n = batch.len();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            let positives: Vec<usize> = (0..n)
                .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    den += (batch.z[i].dot(&batch.z[j]) / batch.tau).exp();
                }
            }
            let mut li = 0.0;
            for &p in &positives {
                li -= ((batch.z[i].dot(&batch.z[p]) / batch.tau).exp() / den).ln();
            }
            total += li / positives.len() as f64;
            count += 1;
        }
        let reference = total / count as f64;
        assert!((loss - reference).abs() < 1e-10, "{loss} vs {reference}");
    }

    #[test]
    fn uniform_variant_grads_match_finite_differences() {
        for variant in [CplVariant::CplWithUniform, CplVariant::SupCon, CplVariant::CplNoProto] {
            let batch = seeded_batch(6, 2, 2, 5, 0.6, 123);
            let grads = variant_grad_similarities(&batch, variant).unwrap();
            let sims = build_sim_table(&batch);
            let h = 1e-6;
            for i in 0..batch.len() {
                if grads.skipped[i] {
                    continue;
                }
                for j in 0..batch.len() {
                    if i == j {
                        continue;
                    }
                    let mut plus = SimTable {
                        batch: sims.batch.clone(),
                        anchor: sims.anchor.clone(),
                    };
                    plus.batch.set(i, j, sims.batch.get(i, j) + h);
                    let mut minus = SimTable {
                        batch: sims.batch.clone(),
                        anchor: sims.anchor.clone(),
                    };
                    minus.batch.set(i, j, sims.batch.get(i, j) - h);
                    let lp = variant_loss_from_sims(&plus, &batch.labels, batch.anchors.len(), batch.tau, variant).unwrap();
                    let lm = variant_loss_from_sims(&minus, &batch.labels, batch.anchors.len(), batch.tau, variant).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let analytic = grads.batch.get(i, j) / grads.n_eff as f64;
                    let scale = analytic.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        ((analytic - fd) / scale).abs() < 1e-6,
                        "{:?} pair ({i},{j}): {analytic} vs {fd}",
                        variant
                    );
                }
            }
        }
    }

    #[test]
    fn augment_zero_scale_is_plain_normalization() {
        let mu = Vector::from_vec(vec![3.0, 4.0, 0.0]);
        let mut rng = SplitRng::from_seed_u64(5);
        let out = augment_prototype(&mu, 0.0, &mut rng).unwrap();
        assert_eq!(out, l2_normalize(&mu).unwrap());
    }

    #[test]
    fn augment_negative_scale_rejected() {
        let mu = Vector::from_vec(vec![1.0, 0.0]);
        let mut rng = SplitRng::from_seed_u64(5);
        assert!(augment_prototype(&mu, -0.1, &mut rng).is_err());
    }

    #[test]
    fn perturbation_moments_match_target() {
        // Pre-normalization draws have mean mu and per-coordinate variance
        // m^2; checked empirically over 10,000 draws.
        let mu = unit(vec![0.3, -0.8, 0.5, 0.1]);
        let m = 0.25;
        let draws = 10_000;
        let mut rng = SplitRng::from_seed_u64(4242);
        let mut sums = vec![0.0; 4];
        let mut sq_sums = vec![0.0; 4];
        for _ in 0..draws {
            let p = perturb_prototype(&mu, m, &mut rng).unwrap();
            for c in 0..4 {
                sums[c] += p[c];
                sq_sums[c] += p[c] * p[c];
            }
        }
        let n = draws as f64;
        for c in 0..4 {
            let mean = sums[c] / n;
            let var = sq_sums[c] / n - mean * mean;
            let mean_tol = 3.0 * m / n.sqrt();
            assert!(
                (mean - mu[c]).abs() < mean_tol,
                "coord {c}: mean {mean} vs {}",
                mu[c]
            );
            assert!(
                (var - m * m).abs() < 0.05 * m * m,
                "coord {c}: var {var} vs {}",
                m * m
            );
        }
    }

    #[test]
    fn identity_neck_is_plain_normalization() {
        let neck = MlpNeck::identity(4);
        let v = Vector::from_vec(vec![3.0, 0.0, 4.0, 0.0]);
        let (z, _) = neck.forward(&v).unwrap();
        assert_eq!(z, l2_normalize(&v).unwrap());
    }

    #[test]
    fn neck_forward_deterministic() {
        let mut rng = SplitRng::from_seed_u64(31);
        let neck = MlpNeck::standard(6, 12, &mut rng).unwrap();
        let v = random_unit(6, &mut rng);
        let (z1, _) = neck.forward(&v).unwrap();
        let (z2, _) = neck.forward(&v).unwrap();
        assert_eq!(z1, z2);
        assert!((z1.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn neck_gradients_match_finite_differences() {
        let mut rng = SplitRng::from_seed_u64(37);
        let neck = MlpNeck::standard(8, 16, &mut rng).unwrap();
        let input = random_unit(8, &mut rng);
        let g = Vector::from_vec((0..8).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let (_, trace) = neck.forward(&input).unwrap();
        let (grads, d_input) = neck.backward(&trace, &g).unwrap();

        let objective = |neck: &MlpNeck, input: &Vector| -> f64 {
            let (z, _) = neck.forward(input).unwrap();
            z.dot(&g)
        };
        let h = 1e-5;
        // Input gradient, every coordinate.
        for c in 0..8 {
            let mut plus = input.clone();
            plus[c] += h;
            let mut minus = input.clone();
            minus[c] -= h;
            let fd = (objective(&neck, &plus) - objective(&neck, &minus)) / (2.0 * h);
            let scale = d_input[c].abs().max(fd.abs()).max(1e-6);
            assert!(
                ((d_input[c] - fd) / scale).abs() < 1e-4,
                "input coord {c}: {} vs {fd}",
                d_input[c]
            );
        }
        // Parameter gradients, sampled coordinates in every tensor.
        for l in 0..neck.weights.len() {
            let (rows, cols) = (neck.weights[l].rows(), neck.weights[l].cols());
            for &(r, c) in &[(0usize, 0usize), (rows - 1, cols - 1), (rows / 2, cols / 2)] {
                let mut plus = neck.clone();
                let v = plus.weights[l].get(r, c);
                plus.weights[l].set(r, c, v + h);
                let mut minus = neck.clone();
                minus.weights[l].set(r, c, v - h);
                let fd = (objective(&plus, &input) - objective(&minus, &input)) / (2.0 * h);
                let an = grads.weights[l].get(r, c);
                let scale = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / scale).abs() < 1e-4,
                    "weight[{l}][{r},{c}]: {an} vs {fd}"
                );
            }
            for bi in [0usize, neck.biases[l].dim() - 1] {
                let mut plus = neck.clone();
                plus.biases[l][bi] += h;
                let mut minus = neck.clone();
                minus.biases[l][bi] -= h;
                let fd = (objective(&plus, &input) - objective(&minus, &input)) / (2.0 * h);
                let an = grads.biases[l][bi];
                let scale = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / scale).abs() < 1e-4,
                    "bias[{l}][{bi}]: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn ce_without_head_is_config_error() {
        let batch = seeded_batch(4, 2, 0, 5, 0.6, 7);
        assert!(matches!(
            variant_loss(&batch, CplVariant::Ce, None),
            Err(CppError::Config(_))
        ));
    }

    #[test]
    fn ce_loss_and_grads_match_finite_differences() {
        let mut rng = SplitRng::from_seed_u64(61);
        let head = LinearHead::init(vec![10, 11, 12], 6, &mut rng).unwrap();
        let z: Vec<Vector> = (0..5).map(|_| random_unit(6, &mut rng)).collect();
        let labels = vec![10, 11, 12, 10, 11];
        let (loss, d_z, grads) = head.loss_and_grads(&z, &labels).unwrap();
        assert!(loss.is_finite() && loss > 0.0);

        let h = 1e-5;
        for (zi, dzi) in z.iter().zip(d_z.iter()).take(2) {
            for c in 0..6 {
                let mut plus = z.clone();
                let idx = z.iter().position(|v| std::ptr::eq(v, zi)).unwrap();
                plus[idx][c] += h;
                let mut minus = z.clone();
                minus[idx][c] -= h;
                let (lp, _, _) = head.loss_and_grads(&plus, &labels).unwrap();
                let (lm, _, _) = head.loss_and_grads(&minus, &labels).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let scale = dzi[c].abs().max(fd.abs()).max(1e-6);
                assert!(((dzi[c] - fd) / scale).abs() < 1e-4);
            }
        }
        for &(r, c) in &[(0usize, 0usize), (5, 2), (3, 1)] {
            let mut plus = head.clone();
            let v = plus.w.get(r, c);
            plus.w.set(r, c, v + h);
            let mut minus = head.clone();
            minus.w.set(r, c, v - h);
            let (lp, _, _) = plus.loss_and_grads(&z, &labels).unwrap();
            let (lm, _, _) = minus.loss_and_grads(&z, &labels).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.w.get(r, c);
            let scale = an.abs().max(fd.abs()).max(1e-6);
            assert!(((an - fd) / scale).abs() < 1e-4);
        }
    }

    #[test]
    fn ce_unknown_label_is_key_error() {
        let mut rng = SplitRng::from_seed_u64(62);
        let head = LinearHead::init(vec![1, 2], 4, &mut rng).unwrap();
        let z = vec![random_unit(4, &mut rng)];
        assert!(matches!(
            head.loss_and_grads(&z, &[99]),
            Err(CppError::Key(_))
        ));
    }

    #[test]
    fn zero_sim_grads_give_zero_parameter_grads() {
        let batch = seeded_batch(4, 2, 1, 5, 0.6, 17);
        let zero = SimGradients {
            batch: Matrix::zeros(4, 4),
            anchor: Matrix::zeros(4, 1),
            skipped: vec![false; 4],
            n_eff: 4,
        };
        let z_grads = sim_grads_to_z_grads(&batch, &zero);
        for g in z_grads {
            assert!(g.as_slice().iter().all(|v| *v == 0.0));
        }
    }
}
