//! Concept-based attention MIL.
//!
//! Each instance embedding is encoded by a frozen SAE into a concept vector
//! `h_p`, masked, and scored by gated attention:
//!
//! ```text
//! e_p   = w_a . (tanh(V h_p) * sigmoid(U h_p))
//! a     = softmax(e)
//! z     = sum_p a_p h_p
//! k_ci  = W_cls[c][i] * z_i
//! y_c   = sum_i k_ci + b_c
//! ```
//!
//! The logit of every class is the sum of its per-concept contributions
//! `k_ci` plus the class bias, so explanations are exact by construction.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bagio::{BagDataset, EmbeddingBag, Split};
use crate::binfmt::{dim_u32, read_file, read_json, write_file, write_json, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::metrics::{auc_multiclass, EvalResult};
use crate::numerics::{
    adam_step, axpy, log_softmax, sigmoid, softmax, stream_rng, AdamConfig, AdamState, Matrix,
};
use crate::sae::SaeParams;

pub const PMM1_MAGIC: &str = "PMM1";
pub const PMM1_VERSION: u32 = 1;

/// Concept indices whose activations are forced to zero before attention.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InterventionMask {
    masked: BTreeSet<usize>,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    masked_concepts: Vec<usize>,
}

impl InterventionMask {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Rejects indices `>= d_hid`. Duplicates collapse.
    pub fn new(indices: impl IntoIterator<Item = usize>, d_hid: usize) -> Result<Self> {
        let masked: BTreeSet<usize> = indices.into_iter().collect();
        if let Some(&index) = masked.iter().find(|&&i| i >= d_hid) {
            return Err(Error::ConceptOutOfRange { index, d_hid });
        }
        Ok(InterventionMask { masked })
    }

    pub fn contains(&self, i: usize) -> bool {
        self.masked.contains(&i)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn check(&self, d_hid: usize) -> Result<()> {
        match self.masked.iter().next_back() {
            Some(&index) if index >= d_hid => Err(Error::ConceptOutOfRange { index, d_hid }),
            _ => Ok(()),
        }
    }

    /// Zeroes masked entries in place. Indices past the end are ignored.
    pub fn apply_in_place(&self, h: &mut [f64]) {
        for &i in self.masked.range(..h.len()) {
            h[i] = 0.0;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            path.as_ref(),
            &MaskFile {
                masked_concepts: self.masked.iter().copied().collect(),
            },
        )
    }

    /// Loads `mask.json` and checks every index against `d_hid`.
    pub fn load(path: impl AsRef<Path>, d_hid: usize) -> Result<Self> {
        let f: MaskFile = read_json(path.as_ref())?;
        InterventionMask::new(f.masked_concepts, d_hid)
    }
}

/// Returns `h` with the masked entries set to zero.
pub fn apply_mask(h: &[f64], mask: &InterventionMask) -> Result<Vec<f64>> {
    mask.check(h.len())?;
    let mut out = h.to_vec();
    mask.apply_in_place(&mut out);
    Ok(out)
}

/// A bag's masked concept vectors with per-row lists of nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBag {
    h: Matrix,
    nonzero: Vec<Vec<usize>>,
}

impl ConceptBag {
    pub fn new(h: Matrix) -> Self {
        let nonzero = h
            .iter_rows()
            .map(|row| (0..row.len()).filter(|&i| row[i] != 0.0).collect())
            .collect();
        ConceptBag { h, nonzero }
    }

    /// `apply_mask(sae_encode(x_p))` for every instance of `bag`.
    pub fn encode(bag: &EmbeddingBag, sae: &SaeParams, mask: &InterventionMask) -> Result<Self> {
        mask.check(sae.d_hid())?;
        let mut h = sae.encode_matrix(&bag.instances)?;
        for r in 0..h.rows() {
            mask.apply_in_place(h.row_mut(r));
        }
        Ok(ConceptBag::new(h))
    }

    pub fn h(&self) -> &Matrix {
        &self.h
    }

    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows() == 0
    }

    pub fn d_hid(&self) -> usize {
        self.h.cols()
    }

    /// Same instances in another order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        ConceptBag {
            h: self.h.select_rows(order),
            nonzero: order.iter().map(|&i| self.nonzero[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoMilParams {
    /// Tanh branch, stored transposed (`d_hid x D`): row `i` is the
    /// projection of concept `i`.
    pub v: Matrix,
    /// Sigmoid gate, same layout as `v`.
    pub u: Matrix,
    pub w_a: Vec<f64>,
    /// `C x d_hid`.
    pub w_cls: Matrix,
    pub b_cls: Vec<f64>,
}

impl ProtoMilParams {
    pub fn new(v: Matrix, u: Matrix, w_a: Vec<f64>, w_cls: Matrix, b_cls: Vec<f64>) -> Result<Self> {
        let d = w_a.len();
        let d_hid = w_cls.cols();
        let c = b_cls.len();
        if d == 0 || c < 2 {
            return Err(Error::Shape(format!(
                "attention width {d} and class count {c} must be >= 1 and >= 2"
            )));
        }
        if v.rows() != d_hid || v.cols() != d || u.rows() != d_hid || u.cols() != d || w_cls.rows() != c
        {
            return Err(Error::Shape(format!(
                "V^T {}x{}, U^T {}x{}, w_a {d}, W_cls {}x{}, b_cls {c}",
                v.rows(),
                v.cols(),
                u.rows(),
                u.cols(),
                w_cls.rows(),
                w_cls.cols()
            )));
        }
        let p = ProtoMilParams { v, u, w_a, w_cls, b_cls };
        if !p.to_flat().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("ProtoMIL parameters".into()));
        }
        Ok(p)
    }

    /// Glorot-uniform weights, zero class bias.
    pub fn init(d_hid: usize, attention_dim: usize, class_count: usize, seed: u64) -> Result<Self> {
        if d_hid == 0 || attention_dim == 0 || class_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "d_hid={d_hid}, attention_dim={attention_dim}, class_count={class_count}"
            )));
        }
        let mut rng = stream_rng(seed, 0);
        let v = Matrix::glorot_uniform(d_hid, attention_dim, &mut rng);
        let u = Matrix::glorot_uniform(d_hid, attention_dim, &mut rng);
        let w_a = Matrix::glorot_uniform(1, attention_dim, &mut rng).into_data();
        let w_cls = Matrix::glorot_uniform(class_count, d_hid, &mut rng);
        Ok(ProtoMilParams {
            v,
            u,
            w_a,
            w_cls,
            b_cls: vec![0.0; class_count],
        })
    }

    pub fn d_hid(&self) -> usize {
        self.w_cls.cols()
    }

    pub fn attention_dim(&self) -> usize {
        self.w_a.len()
    }

    pub fn class_count(&self) -> usize {
        self.b_cls.len()
    }

    /// Flattened in storage order (V^T, U^T, w_a, W_cls, b_cls).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.v.data());
        out.extend_from_slice(self.u.data());
        out.extend_from_slice(&self.w_a);
        out.extend_from_slice(self.w_cls.data());
        out.extend_from_slice(&self.b_cls);
        out
    }

    pub fn from_flat(d_hid: usize, attention_dim: usize, class_count: usize, flat: &[f64]) -> Result<Self> {
        let (d, c) = (attention_dim, class_count);
        let sizes = [d * d_hid, d * d_hid, d, c * d_hid, c];
        if flat.len() != sizes.iter().sum::<usize>() {
            return Err(Error::Shape(format!(
                "{} values for ProtoMIL d_hid={d_hid}, D={d}, C={c}",
                flat.len()
            )));
        }
        let mut parts = Vec::with_capacity(5);
        let mut at = 0;
        for s in sizes {
            parts.push(flat[at..at + s].to_vec());
            at += s;
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().unwrap();
        ProtoMilParams::new(
            Matrix::from_vec(d_hid, d, next())?,
            Matrix::from_vec(d_hid, d, next())?,
            next(),
            Matrix::from_vec(c, d_hid, next())?,
            next(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = ByteWriter::new();
        w.bytes(PMM1_MAGIC.as_bytes());
        w.u32(PMM1_VERSION);
        w.u32(dim_u32(path, "d_hid", self.d_hid())?);
        w.u32(dim_u32(path, "D", self.attention_dim())?);
        w.u32(dim_u32(path, "C", self.class_count())?);
        // the file holds V and U as D x d_hid
        w.f64s(self.v.transpose().data());
        w.f64s(self.u.transpose().data());
        w.f64s(&self.w_a);
        w.f64s(self.w_cls.data());
        w.f64s(&self.b_cls);
        write_file(path, &w.into_inner())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(path, &bytes);
        r.header(PMM1_MAGIC, PMM1_VERSION)?;
        let d_hid = r.u32()? as usize;
        let d = r.u32()? as usize;
        let c = r.u32()? as usize;
        let total = (2 * d + c)
            .checked_mul(d_hid)
            .and_then(|x| x.checked_add(d + c))
            .ok_or_else(|| r.malformed("size overflow"))?;
        let mut flat = r.f64s(total)?;
        r.finish()?;
        let bad = |e: Error| r.malformed(e.to_string());
        for block in 0..2 {
            let at = block * d * d_hid;
            let m = Matrix::from_vec(d, d_hid, flat[at..at + d * d_hid].to_vec()).map_err(bad)?;
            flat[at..at + d * d_hid].copy_from_slice(m.transpose().data());
        }
        ProtoMilParams::from_flat(d_hid, d, c, &flat).map_err(bad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// One weight per instance, summing to 1.
    pub attention: Vec<f64>,
    /// `C x d_hid`: `contributions[c][i]` is concept `i`'s share of logit `c`.
    pub contributions: Vec<Vec<f64>>,
}

impl BagOutput {
    pub fn predicted(&self) -> usize {
        crate::numerics::argmax(&self.probs)
    }
}

struct ForwardCache {
    tanh: Vec<Vec<f64>>,
    gate: Vec<Vec<f64>>,
    attention: Vec<f64>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

fn check_dims(bag: &ConceptBag, params: &ProtoMilParams) -> Result<()> {
    if bag.is_empty() {
        return Err(Error::EmptyBag);
    }
    if bag.d_hid() != params.d_hid() {
        return Err(Error::Shape(format!(
            "concept vectors of width {} for a model with d_hid = {}",
            bag.d_hid(),
            params.d_hid()
        )));
    }
    Ok(())
}

fn run_forward(bag: &ConceptBag, params: &ProtoMilParams) -> Result<ForwardCache> {
    check_dims(bag, params)?;
    let d = params.attention_dim();
    let n = bag.len();
    let mut tanh = Vec::with_capacity(n);
    let mut gate = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for p in 0..n {
        let h = bag.h.row(p);
        let mut t = vec![0.0; d];
        let mut s = vec![0.0; d];
        for &i in &bag.nonzero[p] {
            axpy(h[i], params.v.row(i), &mut t);
            axpy(h[i], params.u.row(i), &mut s);
        }
        let mut e = 0.0;
        for k in 0..d {
            t[k] = t[k].tanh();
            s[k] = sigmoid(s[k]);
            e += params.w_a[k] * t[k] * s[k];
        }
        tanh.push(t);
        gate.push(s);
        scores.push(e);
    }
    let attention = softmax(&scores)?;
    let mut pooled = vec![0.0; bag.d_hid()];
    for p in 0..n {
        let (a, h) = (attention[p], bag.h.row(p));
        for &i in &bag.nonzero[p] {
            pooled[i] += a * h[i];
        }
    }
    let logits = (0..params.class_count())
        .map(|c| {
            let w = params.w_cls.row(c);
            let mut acc = 0.0;
            for (wi, zi) in w.iter().zip(&pooled) {
                acc += wi * zi;
            }
            acc + params.b_cls[c]
        })
        .collect();
    Ok(ForwardCache {
        tanh,
        gate,
        attention,
        pooled,
        logits,
    })
}

/// Softmax attention weights over the instances of `bag`.
pub fn attention_scores(bag: &ConceptBag, params: &ProtoMilParams) -> Result<Vec<f64>> {
    Ok(run_forward(bag, params)?.attention)
}

/// Full forward pass on precomputed concept vectors.
pub fn forward_concepts(bag: &ConceptBag, params: &ProtoMilParams) -> Result<BagOutput> {
    let cache = run_forward(bag, params)?;
    let contributions = (0..params.class_count())
        .map(|c| {
            params
                .w_cls
                .row(c)
                .iter()
                .zip(&cache.pooled)
                .map(|(w, z)| w * z)
                .collect()
        })
        .collect();
    let probs = softmax(&cache.logits)?;
    Ok(BagOutput {
        logits: cache.logits,
        probs,
        attention: cache.attention,
        contributions,
    })
}

/// Encodes `bag` through the frozen SAE, applies `mask`, and runs the model.
pub fn forward(
    bag: &EmbeddingBag,
    sae: &SaeParams,
    params: &ProtoMilParams,
    mask: &InterventionMask,
) -> Result<BagOutput> {
    if sae.d_hid() != params.d_hid() {
        return Err(Error::Shape(format!(
            "SAE d_hid {} but model d_hid {}",
            sae.d_hid(),
            params.d_hid()
        )));
    }
    forward_concepts(&ConceptBag::encode(bag, sae, mask)?, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoMilGrads {
    pub v: Matrix,
    pub u: Matrix,
    pub w_a: Vec<f64>,
    pub w_cls: Matrix,
    pub b_cls: Vec<f64>,
}

impl ProtoMilGrads {
    fn zeros_like(p: &ProtoMilParams) -> Self {
        ProtoMilGrads {
            v: Matrix::zeros(p.v.rows(), p.v.cols()),
            u: Matrix::zeros(p.u.rows(), p.u.cols()),
            w_a: vec![0.0; p.w_a.len()],
            w_cls: Matrix::zeros(p.w_cls.rows(), p.w_cls.cols()),
            b_cls: vec![0.0; p.b_cls.len()],
        }
    }

    fn clear(&mut self) {
        self.v.fill(0.0);
        self.u.fill(0.0);
        self.w_a.fill(0.0);
        self.w_cls.fill(0.0);
        self.b_cls.fill(0.0);
    }

    /// Same order as [`ProtoMilParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.v.data());
        out.extend_from_slice(self.u.data());
        out.extend_from_slice(&self.w_a);
        out.extend_from_slice(self.w_cls.data());
        out.extend_from_slice(&self.b_cls);
        out
    }
}

/// Cross-entropy `-log p[label]` of one bag.
pub fn bag_loss(bag: &ConceptBag, label: usize, params: &ProtoMilParams) -> Result<f64> {
    check_label(label, params)?;
    let cache = run_forward(bag, params)?;
    Ok(-log_softmax(&cache.logits)?[label])
}

fn check_label(label: usize, params: &ProtoMilParams) -> Result<()> {
    if label >= params.class_count() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            params.class_count()
        )));
    }
    Ok(())
}

fn accumulate_grads(
    bag: &ConceptBag,
    label: usize,
    params: &ProtoMilParams,
    grads: &mut ProtoMilGrads,
) -> Result<f64> {
    check_label(label, params)?;
    let cache = run_forward(bag, params)?;
    let log_probs = log_softmax(&cache.logits)?;
    let loss = -log_probs[label];
    let c_count = params.class_count();
    let d = params.attention_dim();
    let d_hid = params.d_hid();

    // d loss / d logit_c = p_c - [c == label]
    let dlogit: Vec<f64> = (0..c_count)
        .map(|c| log_probs[c].exp() - if c == label { 1.0 } else { 0.0 })
        .collect();
    let mut dpooled = vec![0.0; d_hid];
    for c in 0..c_count {
        let g = dlogit[c];
        grads.b_cls[c] += g;
        if g == 0.0 {
            continue;
        }
        let gw = grads.w_cls.row_mut(c);
        for (gi, zi) in gw.iter_mut().zip(&cache.pooled) {
            *gi += g * zi;
        }
        for (dz, wi) in dpooled.iter_mut().zip(params.w_cls.row(c)) {
            *dz += g * wi;
        }
    }

    let n = bag.len();
    let da: Vec<f64> = (0..n)
        .map(|p| {
            let h = bag.h.row(p);
            bag.nonzero[p].iter().map(|&i| dpooled[i] * h[i]).sum()
        })
        .collect();
    let mean_da: f64 = cache.attention.iter().zip(&da).map(|(a, g)| a * g).sum();
    let mut dv_row = vec![0.0; d];
    let mut du_row = vec![0.0; d];
    for p in 0..n {
        let de = cache.attention[p] * (da[p] - mean_da);
        if de == 0.0 {
            continue;
        }
        let (t, s) = (&cache.tanh[p], &cache.gate[p]);
        for k in 0..d {
            grads.w_a[k] += de * t[k] * s[k];
            let dt = de * params.w_a[k] * s[k];
            let ds = de * params.w_a[k] * t[k];
            dv_row[k] = dt * (1.0 - t[k] * t[k]);
            du_row[k] = ds * s[k] * (1.0 - s[k]);
        }
        let h = bag.h.row(p);
        for &i in &bag.nonzero[p] {
            axpy(h[i], &dv_row, grads.v.row_mut(i));
            axpy(h[i], &du_row, grads.u.row_mut(i));
        }
    }
    Ok(loss)
}

/// Loss and gradients of `-log p[label]` with respect to every model
/// parameter. The SAE is frozen and gets no gradient.
pub fn protomil_backward(
    bag: &ConceptBag,
    label: usize,
    params: &ProtoMilParams,
) -> Result<(f64, ProtoMilGrads)> {
    let mut grads = ProtoMilGrads::zeros_like(params);
    let loss = accumulate_grads(bag, label, params, &mut grads)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MilTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Hidden width `D` of the gated attention.
    pub attention_dim: usize,
    pub seed: u64,
}

impl Default for MilTrainConfig {
    fn default() -> Self {
        MilTrainConfig {
            lr: 1e-4,
            epochs: 200,
            attention_dim: 128,
            seed: 0,
        }
    }
}

impl MilTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr = {} must be > 0", self.lr)));
        }
        if self.epochs == 0 || self.attention_dim == 0 {
            return Err(Error::InvalidConfig(
                "epochs and attention_dim must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMil {
    /// Parameters after the selected epoch.
    pub params: ProtoMilParams,
    /// Parameters after the last epoch.
    pub last_params: ProtoMilParams,
    pub history: Vec<EpochRecord>,
    pub best: EpochRecord,
}

/// Labeled concept bags, the unit the training loop works on.
pub type LabeledBags = Vec<(ConceptBag, usize)>;

pub fn encode_split(
    ds: &BagDataset,
    split: Split,
    sae: &SaeParams,
    mask: &InterventionMask,
) -> Result<LabeledBags> {
    ds.split(split)
        .map(|b| Ok((ConceptBag::encode(b, sae, mask)?, b.label)))
        .collect()
}

/// Probabilities for each bag, in order.
pub fn predict_all(bags: &[(ConceptBag, usize)], params: &ProtoMilParams) -> Result<Vec<Vec<f64>>> {
    bags.iter()
        .map(|(b, _)| Ok(forward_concepts(b, params)?.probs))
        .collect()
}

pub fn evaluate_concepts(
    split: &str,
    bags: &[(ConceptBag, usize)],
    params: &ProtoMilParams,
) -> Result<EvalResult> {
    let probs = predict_all(bags, params)?;
    let labels: Vec<usize> = bags.iter().map(|(_, l)| *l).collect();
    EvalResult::from_probs(split, &probs, &labels, params.class_count())
}

/// Accuracy and AUC of the model on one split of `ds`.
pub fn evaluate(
    ds: &BagDataset,
    split: Split,
    sae: &SaeParams,
    params: &ProtoMilParams,
    mask: &InterventionMask,
) -> Result<EvalResult> {
    let bags = encode_split(ds, split, sae, mask)?;
    if bags.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    evaluate_concepts(split.as_str(), &bags, params)
}

/// One Adam step per bag, bags reshuffled each epoch. After every epoch the
/// validation AUC is measured; the parameters of the best epoch are returned
/// (ties keep the earlier epoch).
pub fn train_on_concepts(
    train: &[(ConceptBag, usize)],
    val: &[(ConceptBag, usize)],
    class_count: usize,
    cfg: &MilTrainConfig,
) -> Result<TrainedMil> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("train and val splits must be non-empty".into()));
    }
    let d_hid = train[0].0.d_hid();
    let mut params = ProtoMilParams::init(d_hid, cfg.attention_dim, class_count, cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut states = [
        AdamState::new(params.v.data().len()),
        AdamState::new(params.u.data().len()),
        AdamState::new(params.w_a.len()),
        AdamState::new(params.w_cls.data().len()),
        AdamState::new(params.b_cls.len()),
    ];
    let mut grads = ProtoMilGrads::zeros_like(&params);
    let mut rng = stream_rng(cfg.seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_labels: Vec<usize> = val.iter().map(|(_, l)| *l).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(EpochRecord, ProtoMilParams)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let (bag, label) = &train[i];
            grads.clear();
            loss_sum += accumulate_grads(bag, *label, &params, &mut grads)?;
            let [sv, su, sa, sw, sb] = &mut states;
            adam_step(params.v.data_mut(), grads.v.data(), sv, &adam)?;
            adam_step(params.u.data_mut(), grads.u.data(), su, &adam)?;
            adam_step(&mut params.w_a, &grads.w_a, sa, &adam)?;
            adam_step(params.w_cls.data_mut(), grads.w_cls.data(), sw, &adam)?;
            adam_step(&mut params.b_cls, &grads.b_cls, sb, &adam)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let val_auc = auc_multiclass(&predict_all(val, &params)?, &val_labels, class_count)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_auc,
        };
        history.push(record);
        if best.as_ref().is_none_or(|(b, _)| val_auc > b.val_auc) {
            best = Some((record, params.clone()));
        }
    }
    let (best, best_params) = best.expect("at least one epoch");
    Ok(TrainedMil {
        params: best_params,
        last_params: params,
        history,
        best,
    })
}

/// Encodes the train and val splits through the frozen SAE with `mask` and
/// trains from a fresh initialization.
pub fn train_protomil(
    ds: &BagDataset,
    sae: &SaeParams,
    cfg: &MilTrainConfig,
    mask: &InterventionMask,
) -> Result<TrainedMil> {
    if sae.d_in() != ds.d_in {
        return Err(Error::Shape(format!(
            "SAE d_in {} but dataset d_in {}",
            sae.d_in(),
            ds.d_in
        )));
    }
    let train = encode_split(ds, Split::Train, sae, mask)?;
    let val = encode_split(ds, Split::Val, sae, mask)?;
    train_on_concepts(&train, &val, ds.class_count, cfg)
}
