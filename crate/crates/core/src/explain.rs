//! Local (per-bag) and global (per-split) explanation reports.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bagio::{BagDataset, EmbeddingBag, Split};
use crate::binfmt::{read_json, write_json};
use crate::error::{Error, Result};
use crate::mil::{encode_split, forward, forward_concepts, ConceptBag, InterventionMask, ProtoMilParams};
use crate::probing::{ConceptCatalog, PatchRef};
use crate::sae::SaeParams;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub instance_index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptContribution {
    pub concept: usize,
    pub contribution: f64,
    pub name: Option<String>,
    pub prototypes: Vec<PatchRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalExplanation {
    pub schema: u32,
    pub bag_id: String,
    pub predicted_class: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Class bias of the predicted class.
    pub bias: f64,
    pub attention: Vec<AttentionEntry>,
    /// Every concept's contribution to the predicted class.
    pub contributions: Vec<f64>,
    /// Nonzero contributions to the predicted class, largest first.
    pub top_concepts: Vec<ConceptContribution>,
}

impl LocalExplanation {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// Indices of the nonzero entries of `values`, by descending value, ties by
/// index; at most `limit` of them.
fn ranked_nonzero(values: &[f64], limit: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| values[i] != 0.0).collect();
    idx.sort_by(|&a, &b| match values[b].total_cmp(&values[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx.truncate(limit);
    idx
}

fn check_top(top: usize) -> Result<()> {
    if top == 0 {
        return Err(Error::InvalidConfig("top must be at least 1".into()));
    }
    Ok(())
}

/// Report for a bag whose concept vectors are already encoded.
pub fn explain_concepts(
    bag_id: &str,
    bag: &ConceptBag,
    params: &ProtoMilParams,
    catalog: Option<&ConceptCatalog>,
    top_m: usize,
) -> Result<LocalExplanation> {
    check_top(top_m)?;
    let out = forward_concepts(bag, params)?;
    Ok(build_local(bag_id, out, params, catalog, top_m))
}

/// Runs `bag` through the frozen SAE and the model and reports attention,
/// contributions to the predicted class, and the `top_m` strongest concepts
/// with their catalog names and prototypes.
pub fn explain_local(
    bag: &EmbeddingBag,
    sae: &SaeParams,
    params: &ProtoMilParams,
    mask: &InterventionMask,
    catalog: Option<&ConceptCatalog>,
    top_m: usize,
) -> Result<LocalExplanation> {
    check_top(top_m)?;
    let out = forward(bag, sae, params, mask)?;
    Ok(build_local(&bag.bag_id, out, params, catalog, top_m))
}

fn build_local(
    bag_id: &str,
    out: crate::mil::BagOutput,
    params: &ProtoMilParams,
    catalog: Option<&ConceptCatalog>,
    top_m: usize,
) -> LocalExplanation {
    let predicted_class = out.predicted();
    let contributions = out.contributions[predicted_class].clone();
    let top_concepts = ranked_nonzero(&contributions, top_m)
        .into_iter()
        .map(|concept| {
            let entry = catalog.and_then(|c| c.get(concept));
            ConceptContribution {
                concept,
                contribution: contributions[concept],
                name: entry.and_then(|e| e.name.clone()),
                prototypes: entry.map(|e| e.prototypes.clone()).unwrap_or_default(),
            }
        })
        .collect();
    let attention = out
        .attention
        .iter()
        .enumerate()
        .map(|(instance_index, &weight)| AttentionEntry {
            instance_index,
            weight,
        })
        .collect();
    LocalExplanation {
        schema: SCHEMA_VERSION,
        bag_id: bag_id.to_string(),
        predicted_class,
        bias: params.b_cls[predicted_class],
        logits: out.logits,
        probs: out.probs,
        attention,
        contributions,
        top_concepts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanContribution {
    pub concept: usize,
    pub mean_contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    /// Mean of this class's contribution row over every bag of the split.
    pub mean_over_all: Vec<f64>,
    pub n_class_bags: usize,
    /// Same mean restricted to bags labelled with this class; absent when
    /// the split has none.
    pub mean_over_class_bags: Option<Vec<f64>>,
    /// Largest nonzero entries of `mean_over_all`.
    pub top_concepts: Vec<MeanContribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalExplanation {
    pub schema: u32,
    pub split: String,
    pub n_bags: usize,
    pub top_k: usize,
    pub classes: Vec<ClassSummary>,
}

impl GlobalExplanation {
    pub fn class(&self, c: usize) -> Option<&ClassSummary> {
        self.classes.iter().find(|s| s.class == c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

pub const DEFAULT_GLOBAL_TOP_K: usize = 10;

fn mean_rows(rows: &[&Vec<f64>], width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    for r in rows {
        for (a, x) in acc.iter_mut().zip(r.iter()) {
            *a += x;
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Mean contribution vectors per class over labelled concept bags.
pub fn explain_global_concepts(
    split: &str,
    bags: &[(ConceptBag, usize)],
    params: &ProtoMilParams,
    top_k: usize,
) -> Result<GlobalExplanation> {
    check_top(top_k)?;
    if bags.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let outputs = bags
        .iter()
        .map(|(b, _)| forward_concepts(b, params))
        .collect::<Result<Vec<_>>>()?;
    let d_hid = params.d_hid();
    let classes = (0..params.class_count())
        .map(|class| {
            let all: Vec<&Vec<f64>> = outputs.iter().map(|o| &o.contributions[class]).collect();
            let own: Vec<&Vec<f64>> = outputs
                .iter()
                .zip(bags)
                .filter(|(_, (_, label))| *label == class)
                .map(|(o, _)| &o.contributions[class])
                .collect();
            let mean_over_all = mean_rows(&all, d_hid);
            let top_concepts = ranked_nonzero(&mean_over_all, top_k)
                .into_iter()
                .map(|concept| MeanContribution {
                    concept,
                    mean_contribution: mean_over_all[concept],
                })
                .collect();
            ClassSummary {
                class,
                n_class_bags: own.len(),
                mean_over_class_bags: (!own.is_empty()).then(|| mean_rows(&own, d_hid)),
                mean_over_all,
                top_concepts,
            }
        })
        .collect();
    Ok(GlobalExplanation {
        schema: SCHEMA_VERSION,
        split: split.to_string(),
        n_bags: bags.len(),
        top_k,
        classes,
    })
}

/// Global explanation of one split of `ds`.
pub fn explain_global(
    ds: &BagDataset,
    split: Split,
    sae: &SaeParams,
    params: &ProtoMilParams,
    mask: &InterventionMask,
    top_k: usize,
) -> Result<GlobalExplanation> {
    let bags = encode_split(ds, split, sae, mask)?;
    explain_global_concepts(split.as_str(), &bags, params, top_k)
}
