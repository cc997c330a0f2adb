//! The three classification heads, their fusion, the per-head cross-entropy
//! objectives and the gradient of the summed objective with respect to the
//! image feature.
//!
//! Every head is a temperature softmax over cosine similarities between the
//! image and one vector per class:
//!
//! * hand: the handcrafted prompt feature;
//! * comp: the compositional mean of the class descriptors;
//! * inst: the image-conditioned attention mix of the class descriptors.
//!
//! At inference the comp and inst heads are averaged into a description head,
//! added to the hand head, and the argmax (lowest index on ties) is the
//! prediction.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{AdkError, Result};
use crate::knowledge::{instance_knowledge_for, AttentionMap, DescriptorBank, KnowledgeBank};
use crate::math::{
    argmax, check_dim, cosine_with_norm, dot, norm, softmax, FeatureVector, ProbabilityVector,
    Temperature, DEGENERATE_NORM,
};
use crate::par::{self, Execution};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub p_hand: ProbabilityVector,
    pub p_comp: ProbabilityVector,
    pub p_inst: ProbabilityVector,
    pub p_desc: ProbabilityVector,
    pub fused_score: Vec<f64>,
    pub predicted: usize,
}

impl PredictionRecord {
    /// Combines per-head distributions with the inference fusion rule.
    pub fn fuse(p_hand: ProbabilityVector, p_comp: ProbabilityVector, p_inst: ProbabilityVector) -> Self {
        let p_desc: Vec<f64> = p_comp
            .as_slice()
            .iter()
            .zip(p_inst.as_slice())
            .map(|(c, i)| (c + i) / 2.0)
            .collect();
        let fused_score: Vec<f64> = p_hand
            .as_slice()
            .iter()
            .zip(&p_desc)
            .map(|(h, d)| h + d)
            .collect();
        let predicted = argmax(&fused_score);
        PredictionRecord {
            p_hand,
            p_comp,
            p_inst,
            p_desc: ProbabilityVector::from_raw(p_desc),
            fused_score,
            predicted,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fused_score.len()
    }

    /// Prediction from a single head (or the fused score).
    pub fn predicted_by(&self, head: Head) -> usize {
        match head {
            Head::Hand => self.p_hand.argmax(),
            Head::Comp => self.p_comp.argmax(),
            Head::Inst => self.p_inst.argmax(),
            Head::Desc => self.p_desc.argmax(),
            Head::Fused => self.predicted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Hand,
    Comp,
    Inst,
    /// Average of comp and inst.
    Desc,
    /// hand + desc, the inference rule.
    Fused,
}

impl Head {
    pub const ALL: [Head; 5] = [Head::Hand, Head::Comp, Head::Inst, Head::Desc, Head::Fused];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_hand: f64,
    pub l_comp: f64,
    pub l_inst: f64,
    pub total: f64,
    /// Set when some head assigned the label a probability below
    /// [`PROB_FLOOR`] and the floor was used instead.
    pub clamped: bool,
}

/// Softmax over classes of `cos(v, class_vectors[n]) / tau`.
pub fn head_probabilities(
    v: &FeatureVector,
    class_vectors: &[FeatureVector],
    tau: Temperature,
) -> Result<ProbabilityVector> {
    head_probs(v, class_vectors.iter(), tau)
}

fn head_probs<'a>(
    v: &FeatureVector,
    class_vectors: impl Iterator<Item = &'a FeatureVector>,
    tau: Temperature,
) -> Result<ProbabilityVector> {
    let v_norm = norm(v.as_slice());
    let sims = class_vectors
        .map(|t| cosine_with_norm(v.as_slice(), v_norm, t.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    if sims.is_empty() {
        return Err(AdkError::EmptyInput("no candidate classes"));
    }
    softmax(&sims, tau)
}

pub fn classify(v: &FeatureVector, kb: &KnowledgeBank, bank: &DescriptorBank) -> Result<PredictionRecord> {
    classify_with_attention(v, kb, bank).map(|(r, _)| r)
}

/// [`classify`], also returning the attention weights behind the inst head.
pub fn classify_with_attention(
    v: &FeatureVector,
    kb: &KnowledgeBank,
    bank: &DescriptorBank,
) -> Result<(PredictionRecord, AttentionMap)> {
    kb.check_compatible(bank)?;
    let all: Vec<usize> = (0..kb.num_classes()).collect();
    classify_indices(v, kb, bank, &all)
}

/// Classification with the candidate set restricted to `subset`; outputs are
/// indexed by position in `subset`.
pub fn classify_subset(
    v: &FeatureVector,
    kb: &KnowledgeBank,
    bank: &DescriptorBank,
    subset: &[usize],
) -> Result<PredictionRecord> {
    kb.check_compatible(bank)?;
    check_subset(subset, kb.num_classes())?;
    classify_indices(v, kb, bank, subset).map(|(r, _)| r)
}

pub(crate) fn check_subset(subset: &[usize], n: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(AdkError::Schema("empty class subset".into()));
    }
    let mut seen = HashSet::with_capacity(subset.len());
    for &c in subset {
        if c >= n {
            return Err(AdkError::Index { index: c, len: n });
        }
        if !seen.insert(c) {
            return Err(AdkError::Schema(format!("class {c} listed twice in subset")));
        }
    }
    Ok(())
}

pub(crate) fn classify_indices(
    v: &FeatureVector,
    kb: &KnowledgeBank,
    bank: &DescriptorBank,
    classes: &[usize],
) -> Result<(PredictionRecord, AttentionMap)> {
    check_dim(kb.dim(), v.dim())?;
    let tau = bank.tau();
    let p_hand = head_probs(v, classes.iter().map(|&c| &kb.hand[c]), tau)?;
    let p_comp = head_probs(v, classes.iter().map(|&c| &kb.comp[c]), tau)?;
    let (inst, attention) = instance_knowledge_for(v, bank, classes)?;
    let p_inst = head_probs(v, inst.iter(), tau)?;
    Ok((PredictionRecord::fuse(p_hand, p_comp, p_inst), attention))
}

/// Classifies every image, preserving input order.
pub fn classify_batch(
    images: &[FeatureVector],
    kb: &KnowledgeBank,
    bank: &DescriptorBank,
    exec: Execution,
) -> Result<Vec<(PredictionRecord, AttentionMap)>> {
    kb.check_compatible(bank)?;
    let all: Vec<usize> = (0..kb.num_classes()).collect();
    par::try_map(exec, images, |v| classify_indices(v, kb, bank, &all))
}

/// Negative log-likelihood of `label` under each head, and their sum.
pub fn loss(record: &PredictionRecord, label: usize) -> Result<LossBreakdown> {
    let n = record.num_classes();
    if label >= n {
        return Err(AdkError::Index { index: label, len: n });
    }
    let mut clamped = false;
    let mut nll = |p: &ProbabilityVector| {
        let q = p.get(label);
        if q < PROB_FLOOR {
            clamped = true;
        }
        -q.max(PROB_FLOOR).ln()
    };
    let l_hand = nll(&record.p_hand);
    let l_comp = nll(&record.p_comp);
    let l_inst = nll(&record.p_inst);
    Ok(LossBreakdown {
        l_hand,
        l_comp,
        l_inst,
        total: l_hand + l_comp + l_inst,
        clamped,
    })
}

/// `cos(v, t)` and its gradient in `v`, given `u = v/|v|` and `|v|`.
fn cos_and_grad(u: &[f64], v_norm: f64, t: &[f64]) -> Result<(f64, Vec<f64>)> {
    let t_norm = norm(t);
    if t_norm <= DEGENERATE_NORM {
        return Err(AdkError::DegenerateVector(format!(
            "class vector with norm {t_norm:e}"
        )));
    }
    let cos = (dot(u, t) / t_norm).clamp(-1.0, 1.0);
    let g = u
        .iter()
        .zip(t)
        .map(|(ui, ti)| (ti / t_norm - cos * ui) / v_norm)
        .collect();
    Ok((cos, g))
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, xi) in acc.iter_mut().zip(x) {
        *y += a * xi;
    }
}

/// Analytic gradient of `l_hand + l_comp + l_inst` with respect to the raw
/// (unnormalized) image feature. The inst term includes the dependence of
/// the attention weights on the image.
pub fn grad_image(
    v: &FeatureVector,
    kb: &KnowledgeBank,
    bank: &DescriptorBank,
    label: usize,
) -> Result<FeatureVector> {
    kb.check_compatible(bank)?;
    check_dim(kb.dim(), v.dim())?;
    let n = kb.num_classes();
    if label >= n {
        return Err(AdkError::Index { index: label, len: n });
    }
    let d = v.dim();
    let tau = bank.tau().get();
    let v_norm = v.norm();
    if v_norm <= DEGENERATE_NORM {
        return Err(AdkError::DegenerateVector("image feature has zero norm".into()));
    }
    let u: Vec<f64> = v.as_slice().iter().map(|x| x / v_norm).collect();
    let mut grad = vec![0.0; d];

    // hand and comp: fixed class vectors
    for vectors in [&kb.hand, &kb.comp] {
        let mut cos = Vec::with_capacity(n);
        let mut dcos = Vec::with_capacity(n);
        for t in vectors.iter() {
            let (c, g) = cos_and_grad(&u, v_norm, t.as_slice())?;
            cos.push(c);
            dcos.push(g);
        }
        let p = softmax(&cos, bank.tau())?;
        for (k, g) in dcos.iter().enumerate() {
            let delta = if k == label { 1.0 } else { 0.0 };
            axpy(&mut grad, (p.get(k) - delta) / tau, g);
        }
    }

    // inst: class vectors are themselves functions of v
    let mut cos = Vec::with_capacity(n);
    let mut dlogit = Vec::with_capacity(n);
    for c in 0..n {
        let rows = bank.class_descriptors(c);
        let mut sims = Vec::with_capacity(rows.len());
        let mut dsims = Vec::with_capacity(rows.len());
        for r in rows {
            let (s, g) = cos_and_grad(&u, v_norm, r.as_slice())?;
            sims.push(s);
            dsims.push(g);
        }
        let w = softmax(&sims, bank.tau())?;
        let mut t = vec![0.0; d];
        for (m, r) in rows.iter().enumerate() {
            axpy(&mut t, w.get(m), r.as_slice());
        }
        let t_norm = norm(&t);
        let (cn, direct) = cos_and_grad(&u, v_norm, &t)?;
        // gradient of cos(v, t) with respect to t
        let g_t: Vec<f64> = u
            .iter()
            .zip(&t)
            .map(|(ui, ti)| (ui - cn * ti / t_norm) / t_norm)
            .collect();
        let a: Vec<f64> = rows.iter().map(|r| dot(r.as_slice(), &g_t)).collect();
        let a_bar: f64 = a.iter().zip(w.as_slice()).map(|(x, wm)| x * wm).sum();
        let mut dz = direct;
        for (m, ds) in dsims.iter().enumerate() {
            axpy(&mut dz, w.get(m) * (a[m] - a_bar) / tau, ds);
        }
        cos.push(cn);
        dlogit.push(dz);
    }
    let p = softmax(&cos, bank.tau())?;
    for (k, g) in dlogit.iter().enumerate() {
        let delta = if k == label { 1.0 } else { 0.0 };
        axpy(&mut grad, (p.get(k) - delta) / tau, g);
    }
    FeatureVector::new(grad)
}
