//! Differentiable training objectives.
//!
//! All losses build on the autodiff graph, so gradients come from the same
//! tape the backbones use. Distillation targets (teacher logits, detached
//! student-side targets) enter as plain tensors: they contribute to the
//! value but never receive gradient.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Kernel bandwidth policy for the distribution-matching loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median of the pooled pairwise distances of the current batch,
    /// treated as a constant (no gradient through the bandwidth).
    MedianHeuristic,
}

/// Which relation loss couples teacher and student embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelKind {
    Mmd,
    Triplet,
}

/// Temperatures, margins, bandwidths, and the ablation toggles.
#[derive(Clone, Debug)]
pub struct LossConfig {
    pub tau_infonce: f64,
    pub tau_kd: f64,
    pub margin: f64,
    pub mmd_bandwidth: Bandwidth,
    pub enable_kd: bool,
    pub enable_clip_align: bool,
    /// Relation loss toggle. Follows `enable_clip_align` in the standard
    /// ablation rows; when set without alignment the relation loss falls
    /// back to raw embeddings.
    pub enable_rel: bool,
    pub enable_cka: bool,
    pub rel_kind: RelKind,
    pub w_task: f64,
    pub w_kd: f64,
    pub w_rel: f64,
    pub w_cka: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_infonce: 0.07,
            tau_kd: 4.0,
            margin: 1.0,
            mmd_bandwidth: Bandwidth::MedianHeuristic,
            enable_kd: true,
            enable_clip_align: true,
            enable_rel: true,
            enable_cka: true,
            rel_kind: RelKind::Mmd,
            w_task: 1.0,
            w_kd: 1.0,
            w_rel: 1.0,
            w_cka: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_infonce", self.tau_infonce),
            ("tau_kd", self.tau_kd),
            ("margin", self.margin),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Bandwidth::Fixed(s) = self.mmd_bandwidth {
            if !(s > 0.0) {
                return Err(Error::Config(format!(
                    "mmd bandwidth must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

fn check_finite_2d(name: &str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "{name} must be a row batch, got {:?}",
            t.shape()
        )));
    }
    if !t.is_finite() {
        return Err(Error::Numerical(format!("non-finite values in {name}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Contrastive alignment
// ---------------------------------------------------------------------------

/// Symmetric cross-modal contrastive loss over a batch of paired
/// embeddings. Rows are L2-normalized, the similarity matrix is the scaled
/// dot product, diagonal entries are the positives, and the two softmax
/// directions are averaged.
pub fn info_nce(g: &mut Graph, ecg_emb: Var, ppg_emb: Var, tau: f64) -> Result<Var> {
    let ev = g.value(ecg_emb).clone();
    let pv = g.value(ppg_emb).clone();
    check_finite_2d("ecg embeddings", &ev)?;
    check_finite_2d("ppg embeddings", &pv)?;
    if ev.shape() != pv.shape() {
        return Err(Error::Shape(format!(
            "paired embedding shapes differ: {:?} vs {:?}",
            ev.shape(),
            pv.shape()
        )));
    }
    let b = ev.dim(0);
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let en = g.row_l2_normalize(ecg_emb, 1e-12);
    let pn = g.row_l2_normalize(ppg_emb, 1e-12);
    let sim = g.matmul_nt(en, pn);
    let sim = g.scale(sim, 1.0 / tau);
    let diag: Vec<usize> = (0..b).collect();
    let lsm_rows = g.log_softmax_rows(sim);
    let loss_rows = g.nll_rows(lsm_rows, &diag);
    let sim_t = g.transpose2(sim);
    let lsm_cols = g.log_softmax_rows(sim_t);
    let loss_cols = g.nll_rows(lsm_cols, &diag);
    let sum = g.add(loss_rows, loss_cols);
    Ok(g.scale(sum, 0.5))
}

// ---------------------------------------------------------------------------
// Distribution matching
// ---------------------------------------------------------------------------

/// Gaussian kernel value `exp(-|x-y|^2 / (2 sigma^2))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "kernel inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {sigma}"
        )));
    }
    let sq: f64 = x.iter().zip(y.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((-sq / (2.0 * sigma * sigma)).exp())
}

/// Median of the pooled pairwise distances of two row batches, clamped away
/// from zero. Lower median for even counts, so the result is always an
/// observed distance.
pub fn median_pairwise_distance(t: &Tensor, s: &Tensor) -> f64 {
    let d = t.dim(1);
    let mut rows: Vec<&[f64]> = Vec::with_capacity(t.dim(0) + s.dim(0));
    for i in 0..t.dim(0) {
        rows.push(&t.data()[i * d..(i + 1) * d]);
    }
    for i in 0..s.dim(0) {
        rows.push(&s.data()[i * d..(i + 1) * d]);
    }
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let sq: f64 = rows[i]
                .iter()
                .zip(rows[j].iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            dists.push(sq.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    dists[(dists.len() - 1) / 2].max(1e-12)
}

/// Resolve a bandwidth policy against the current batch values.
pub fn resolve_bandwidth(t: &Tensor, s: &Tensor, bw: Bandwidth) -> Result<f64> {
    match bw {
        Bandwidth::Fixed(sigma) => {
            if !(sigma > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bandwidth must be positive, got {sigma}"
                )));
            }
            Ok(sigma)
        }
        Bandwidth::MedianHeuristic => Ok(median_pairwise_distance(t, s)),
    }
}

/// Squared maximum mean discrepancy between two embedding batches, the
/// biased V-statistic with a Gaussian kernel:
/// `mean k(t,t) + mean k(s,s) - 2 mean k(t,s)`.
pub fn mmd_loss(g: &mut Graph, teacher_emb: Var, student_emb: Var, bw: Bandwidth) -> Result<Var> {
    let tv = g.value(teacher_emb).clone();
    let sv = g.value(student_emb).clone();
    check_finite_2d("teacher embeddings", &tv)?;
    check_finite_2d("student embeddings", &sv)?;
    if tv.dim(1) != sv.dim(1) {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            tv.dim(1),
            sv.dim(1)
        )));
    }
    if tv.dim(0) == 0 || sv.dim(0) == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let sigma = resolve_bandwidth(&tv, &sv, bw)?;
    let c = -1.0 / (2.0 * sigma * sigma);
    let d_tt = g.pairwise_sqdist(teacher_emb, teacher_emb);
    let d_ss = g.pairwise_sqdist(student_emb, student_emb);
    let d_ts = g.pairwise_sqdist(teacher_emb, student_emb);
    let k_tt = {
        let s = g.scale(d_tt, c);
        g.exp(s)
    };
    let k_ss = {
        let s = g.scale(d_ss, c);
        g.exp(s)
    };
    let k_ts = {
        let s = g.scale(d_ts, c);
        g.exp(s)
    };
    let m_tt = g.mean_all(k_tt);
    let m_ss = g.mean_all(k_ss);
    let m_ts = g.mean_all(k_ts);
    let sum = g.add(m_tt, m_ss);
    let cross = g.scale(m_ts, 2.0);
    Ok(g.sub(sum, cross))
}

// ---------------------------------------------------------------------------
// Margin ranking
// ---------------------------------------------------------------------------

/// Hinge on the anchor-positive vs anchor-negative Euclidean distances:
/// `max(d(a,p) - d(a,n) + m, 0)`.
pub fn triplet_loss(g: &mut Graph, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let av = g.value(anchor).clone();
    for (name, v) in [("anchor", &av), ("positive", g.value(positive)), ("negative", g.value(negative))] {
        if v.shape() != av.shape() {
            return Err(Error::Shape(format!(
                "triplet {name} shape {:?} differs from anchor {:?}",
                v.shape(),
                av.shape()
            )));
        }
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin must be positive, got {margin}"
        )));
    }
    let d = av.numel();
    let a2 = g.reshape(anchor, vec![1, d]);
    let p2 = g.reshape(positive, vec![1, d]);
    let n2 = g.reshape(negative, vec![1, d]);
    let d_ap = g.rows_euclid(a2, p2);
    let d_an = g.rows_euclid(a2, n2);
    let diff = g.sub(d_ap, d_an);
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    Ok(g.sum_all(hinge))
}

/// In-batch triplet term with batch-hard mining: for every anchor, the
/// farthest same-label row is the positive and the closest other-label row
/// the negative. Mining happens on detached values; gradient flows through
/// the selected rows only. Anchors without both a positive and a negative
/// are skipped; an all-skipped batch contributes zero.
pub fn batch_hard_triplet(g: &mut Graph, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let ev = g.value(emb).clone();
    check_finite_2d("embeddings", &ev)?;
    let b = ev.dim(0);
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "label count {} does not match batch size {}",
            labels.len(),
            b
        )));
    }
    let d = ev.dim(1);
    let dist = |i: usize, j: usize| -> f64 {
        ev.data()[i * d..(i + 1) * d]
            .iter()
            .zip(&ev.data()[j * d..(j + 1) * d])
            .map(|(&a, &c)| (a - c) * (a - c))
            .sum::<f64>()
            .sqrt()
    };
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..b {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            let dij = dist(i, j);
            if labels[j] == labels[i] {
                if hardest_pos.map_or(true, |(_, best)| dij > best) {
                    hardest_pos = Some((j, dij));
                }
            } else if hardest_neg.map_or(true, |(_, best)| dij < best) {
                hardest_neg = Some((j, dij));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (hardest_pos, hardest_neg) {
            anchors.push(i);
            positives.push(p);
            negatives.push(n);
        }
    }
    if anchors.is_empty() {
        return Ok(g.constant_scalar(0.0));
    }
    let a = g.gather_rows(emb, &anchors);
    let p = g.gather_rows(emb, &positives);
    let n = g.gather_rows(emb, &negatives);
    let d_ap = g.rows_euclid(a, p);
    let d_an = g.rows_euclid(a, n);
    let diff = g.sub(d_ap, d_an);
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    Ok(g.mean_all(hinge))
}

// ---------------------------------------------------------------------------
// Temperature-scaled distribution distillation
// ---------------------------------------------------------------------------

/// Batch-mean KL divergence between temperature-softened distributions,
/// scaled by `tau^2`. The target side is a plain tensor and acts as a
/// constant; gradient reaches only the prediction logits.
pub fn kl_with_temperature(
    g: &mut Graph,
    target_logits: &Tensor,
    pred_logits: Var,
    tau: f64,
) -> Result<Var> {
    check_finite_2d("target logits", target_logits)?;
    let pv = g.value(pred_logits).clone();
    check_finite_2d("prediction logits", &pv)?;
    if target_logits.shape() != pv.shape() {
        return Err(Error::Shape(format!(
            "logit shapes differ: {:?} vs {:?}",
            target_logits.shape(),
            pv.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (b, c) = (target_logits.dim(0), target_logits.dim(1));
    // Soft targets and their entropy term, computed outside the graph.
    let mut probs = vec![0.0; b * c];
    let mut sum_p_logp = 0.0;
    for i in 0..b {
        let row = &target_logits.data()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
        let mut z = 0.0;
        for k in 0..c {
            let e = (row[k] / tau - mx).exp();
            probs[i * c + k] = e;
            z += e;
        }
        for k in 0..c {
            probs[i * c + k] /= z;
            let p = probs[i * c + k];
            if p > 0.0 {
                sum_p_logp += p * p.ln();
            }
        }
    }
    let p_const = g.constant(Tensor::new(vec![b, c], probs)?);
    let scaled = g.scale(pred_logits, 1.0 / tau);
    let lsm = g.log_softmax_rows(scaled);
    let cross = g.dot(p_const, lsm);
    let factor = tau * tau / b as f64;
    let entropy_term = g.constant_scalar(factor * sum_p_logp);
    let cross_term = g.scale(cross, factor);
    Ok(g.sub(entropy_term, cross_term))
}

/// Soft-target distillation from frozen teacher logits to student logits.
pub fn kd_loss(g: &mut Graph, teacher_logits: &Tensor, student_logits: Var, tau: f64) -> Result<Var> {
    kl_with_temperature(g, teacher_logits, student_logits, tau)
}

/// Cross-classifier assessment: the teacher head judges student features
/// against its own outputs, and the student head is judged on teacher
/// features. Both targets (`p_t`, `p_s`) are constants; gradient flows
/// through `q_t` (teacher head on student features) and `q_s`.
pub fn cka_loss(
    g: &mut Graph,
    p_t: &Tensor,
    q_t: Var,
    p_s: &Tensor,
    q_s: Var,
    tau: f64,
) -> Result<Var> {
    let teaching = kl_with_temperature(g, p_t, q_t, tau)?;
    let learning = kl_with_temperature(g, p_s, q_s, tau)?;
    let sum = g.add(teaching, learning);
    Ok(g.scale(sum, 0.5))
}

// ---------------------------------------------------------------------------
// Task loss and the composite objective
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskMode {
    /// Closed-set classification: plain cross-entropy.
    SampleWise,
    /// Open-set embedding training: cross-entropy plus an in-batch
    /// triplet term.
    SubjectWise,
}

pub fn task_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    mode: TaskMode,
    embeddings: Option<Var>,
    margin: f64,
) -> Result<Var> {
    let lv = g.value(logits).clone();
    check_finite_2d("logits", &lv)?;
    let (b, c) = (lv.dim(0), lv.dim(1));
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "label count {} does not match batch size {}",
            labels.len(),
            b
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let lsm = g.log_softmax_rows(logits);
    let ce = g.nll_rows(lsm, labels);
    match mode {
        TaskMode::SampleWise => Ok(ce),
        TaskMode::SubjectWise => {
            let emb = embeddings.ok_or_else(|| {
                Error::InvalidArgument("subject-wise task loss needs embeddings".into())
            })?;
            let tri = batch_hard_triplet(g, emb, labels, margin)?;
            Ok(g.add(ce, tri))
        }
    }
}

/// Composite objective: weighted sum of the enabled components. Disabled
/// components contribute zero no matter what value is passed for them.
pub fn total_loss(
    g: &mut Graph,
    task: Var,
    kd: Var,
    rel: Var,
    cka: Var,
    cfg: &LossConfig,
) -> Var {
    let mut acc = g.scale(task, cfg.w_task);
    if cfg.enable_kd {
        let t = g.scale(kd, cfg.w_kd);
        acc = g.add(acc, t);
    }
    if cfg.enable_rel {
        let t = g.scale(rel, cfg.w_rel);
        acc = g.add(acc, t);
    }
    if cfg.enable_cka {
        let t = g.scale(cka, cfg.w_cka);
        acc = g.add(acc, t);
    }
    acc
}
