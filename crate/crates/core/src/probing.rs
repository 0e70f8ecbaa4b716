//! Probing: a class-balanced instance sample used to find which concepts fire
//! and to pick each concept's most strongly activating instances (prototypes).
//!
//! Prototypes are references into bag files rather than images. The catalog
//! is plain JSON so a reviewer can name concepts and flag spurious ones by
//! editing it.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::bagio::{BagDataset, Split, SynthTruth};
use crate::binfmt::{read_json, write_json};
use crate::error::{Error, Result};
use crate::numerics::{stream_rng, Matrix};
use crate::sae::SaeParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeInstance {
    pub bag_id: String,
    pub instance_index: usize,
    /// Inherited from the bag.
    pub label: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeSet {
    pub instances: Vec<ProbeInstance>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn embeddings(&self) -> Result<Matrix> {
        let d = self.instances.first().map_or(0, |p| p.embedding.len());
        let rows: Vec<Vec<f64>> = self.instances.iter().map(|p| p.embedding.clone()).collect();
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, d));
        }
        Matrix::from_rows(&rows)
    }

    /// Concept vectors of every probe instance, `len x d_hid`.
    pub fn encode(&self, sae: &SaeParams) -> Result<Matrix> {
        if self.is_empty() {
            return Err(Error::Data("empty probe set".into()));
        }
        sae.encode_matrix(&self.embeddings()?)
    }
}

/// Samples up to `n_per_class` train-split instances per class, uniformly
/// without replacement over all instances of that class's bags.
pub fn build_probe_set(ds: &BagDataset, n_per_class: usize, seed: u64) -> Result<ProbeSet> {
    let mut rng = stream_rng(seed, 0);
    let train: Vec<_> = ds.split(Split::Train).collect();
    let mut instances = Vec::new();
    for class in 0..ds.class_count {
        let pool: Vec<(usize, usize)> = train
            .iter()
            .enumerate()
            .filter(|(_, b)| b.label == class)
            .flat_map(|(bi, b)| (0..b.len()).map(move |ii| (bi, ii)))
            .collect();
        if pool.is_empty() {
            return Err(Error::Data(format!(
                "class {class} is absent from the train split"
            )));
        }
        let mut picked = sample(&mut rng, pool.len(), n_per_class.min(pool.len())).into_vec();
        picked.sort_unstable();
        instances.extend(picked.into_iter().map(|i| {
            let (bi, ii) = pool[i];
            let bag = train[bi];
            ProbeInstance {
                bag_id: bag.bag_id.clone(),
                instance_index: ii,
                label: class,
                embedding: bag.instances.row(ii).to_vec(),
            }
        }));
    }
    Ok(ProbeSet { instances })
}

/// Concept indices with a positive activation somewhere in `activations`.
pub fn activated_from(activations: &Matrix) -> Vec<usize> {
    let mut seen = vec![false; activations.cols()];
    for row in activations.iter_rows() {
        for (s, &v) in seen.iter_mut().zip(row) {
            *s |= v > 0.0;
        }
    }
    (0..seen.len()).filter(|&i| seen[i]).collect()
}

pub fn activated_concepts(probe: &ProbeSet, sae: &SaeParams) -> Result<Vec<usize>> {
    Ok(activated_from(&probe.encode(sae)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRef {
    pub bag_id: String,
    pub instance_index: usize,
    pub activation: f64,
}

/// Descending activation, then bag id, then instance index.
pub fn prototype_order(a: &PatchRef, b: &PatchRef) -> Ordering {
    b.activation
        .total_cmp(&a.activation)
        .then_with(|| a.bag_id.cmp(&b.bag_id))
        .then_with(|| a.instance_index.cmp(&b.instance_index))
}

/// Top-`k` prototypes of one concept from precomputed probe activations.
pub fn top_k_from(
    probe: &ProbeSet,
    activations: &Matrix,
    concept: usize,
    k: usize,
) -> Vec<PatchRef> {
    let mut refs: Vec<PatchRef> = probe
        .instances
        .iter()
        .zip(activations.iter_rows())
        .filter(|(_, h)| h[concept] > 0.0)
        .map(|(p, h)| PatchRef {
            bag_id: p.bag_id.clone(),
            instance_index: p.instance_index,
            activation: h[concept],
        })
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if refs.len() > k {
        refs.select_nth_unstable_by(k - 1, prototype_order);
        refs.truncate(k);
    }
    refs.sort_by(prototype_order);
    refs
}

pub fn top_k_prototypes(
    probe: &ProbeSet,
    sae: &SaeParams,
    concept: usize,
    k: usize,
) -> Result<Vec<PatchRef>> {
    if concept >= sae.d_hid() {
        return Err(Error::ConceptOutOfRange {
            index: concept,
            d_hid: sae.d_hid(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    Ok(top_k_from(probe, &probe.encode(sae)?, concept, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: usize,
    pub name: Option<String>,
    pub flagged_spurious: bool,
    pub prototypes: Vec<PatchRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptCatalog {
    pub k: usize,
    pub concepts: Vec<CatalogEntry>,
}

impl ConceptCatalog {
    pub fn get(&self, id: usize) -> Option<&CatalogEntry> {
        self.concepts.iter().find(|c| c.id == id)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.concepts.iter().map(|c| c.id).collect()
    }

    /// Marks `ids` as spurious. Every id must be in the catalog; nothing is
    /// changed if one is not.
    pub fn flag(&mut self, ids: &[usize]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| self.get(id).is_none()) {
            return Err(Error::UnknownConcept {
                id,
                valid: self.ids(),
            });
        }
        for entry in &mut self.concepts {
            if ids.contains(&entry.id) {
                entry.flagged_spurious = true;
            }
        }
        Ok(())
    }

    pub fn flagged(&self) -> Vec<usize> {
        self.concepts
            .iter()
            .filter(|c| c.flagged_spurious)
            .map(|c| c.id)
            .collect()
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.get(id).and_then(|c| c.name.as_deref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// One entry per activated concept with its top-`k` prototypes. Names are
/// empty and nothing is flagged.
pub fn build_catalog(probe: &ProbeSet, sae: &SaeParams, k: usize) -> Result<ConceptCatalog> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let h = probe.encode(sae)?;
    let concepts = activated_from(&h)
        .into_iter()
        .map(|id| CatalogEntry {
            id,
            name: None,
            flagged_spurious: false,
            prototypes: top_k_from(probe, &h, id, k),
        })
        .collect();
    Ok(ConceptCatalog { k, concepts })
}

/// Concepts most of whose prototypes are spurious instances according to the
/// generator's ground truth. Stands in for a human reviewing the catalog.
pub fn spurious_by_truth(catalog: &ConceptCatalog, truth: &SynthTruth) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for entry in &catalog.concepts {
        let mut spurious = 0;
        for p in &entry.prototypes {
            let inst = truth.instance(&p.bag_id, p.instance_index).ok_or_else(|| {
                Error::Data(format!(
                    "prototype {}[{}] missing from ground truth",
                    p.bag_id, p.instance_index
                ))
            })?;
            spurious += inst.spurious as usize;
        }
        if 2 * spurious > entry.prototypes.len() {
            out.push(entry.id);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeVectors {
    pub concepts: Vec<ConceptVectors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVectors {
    pub id: usize,
    pub prototypes: Vec<PatchRef>,
    /// Raw embeddings, in prototype order.
    pub vectors: Vec<Vec<f32>>,
}

/// Looks up the raw embeddings behind every catalog prototype.
pub fn prototype_vectors(catalog: &ConceptCatalog, ds: &BagDataset) -> Result<PrototypeVectors> {
    let concepts = catalog
        .concepts
        .iter()
        .map(|entry| {
            let vectors = entry
                .prototypes
                .iter()
                .map(|p| {
                    let bag = ds.find(&p.bag_id).ok_or_else(|| {
                        Error::Data(format!("prototype bag {} not in dataset", p.bag_id))
                    })?;
                    if p.instance_index >= bag.len() {
                        return Err(Error::Data(format!(
                            "prototype {}[{}] out of range",
                            p.bag_id, p.instance_index
                        )));
                    }
                    Ok(bag
                        .instances
                        .row(p.instance_index)
                        .iter()
                        .map(|&v| v as f32)
                        .collect())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ConceptVectors {
                id: entry.id,
                prototypes: entry.prototypes.clone(),
                vectors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrototypeVectors { concepts })
}
