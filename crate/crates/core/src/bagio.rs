//! Bag datasets: the in-memory model, the PMB1 bag file, `manifest.json`, and
//! a synthetic generator with planted concepts and a planted spurious signal.
//!
//! PMB1 layout (little-endian):
//!
//! ```text
//! "PMB1" | version u32 = 1 | d_in u32 | N u32 | id_len u32 | id bytes (UTF-8)
//! N * d_in f32, row-major
//! ```
//!
//! Labels live in the manifest only, so the same payloads can be relabeled.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binfmt::{dim_u32, read_file, read_json, write_file, write_json, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::{dot, stream_rng, Matrix, Rng};

pub const PMB1_MAGIC: &str = "PMB1";
pub const PMB1_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// One slide analogue: `N x d_in` instance embeddings and a bag label.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBag {
    pub bag_id: String,
    pub label: usize,
    pub instances: Matrix,
}

impl EmbeddingBag {
    pub fn new(bag_id: impl Into<String>, label: usize, instances: Matrix) -> Result<Self> {
        let bag_id = bag_id.into();
        if instances.rows() == 0 {
            return Err(Error::Data(format!("bag {bag_id} has no instances")));
        }
        if !instances.is_finite() {
            return Err(Error::NonFinite(format!("embeddings of bag {bag_id}")));
        }
        Ok(EmbeddingBag {
            bag_id,
            label,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.rows() == 0
    }

    pub fn d_in(&self) -> usize {
        self.instances.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    pub d_in: usize,
    pub class_count: usize,
    pub bags: Vec<EmbeddingBag>,
    /// Split tag of `bags[i]`.
    pub splits: Vec<Split>,
}

impl BagDataset {
    pub fn new(
        d_in: usize,
        class_count: usize,
        bags: Vec<EmbeddingBag>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if bags.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if class_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "class_count must be at least 2, got {class_count}"
            )));
        }
        if splits.len() != bags.len() {
            return Err(Error::Shape(format!(
                "{} bags but {} split tags",
                bags.len(),
                splits.len()
            )));
        }
        for bag in &bags {
            if bag.d_in() != d_in {
                return Err(Error::InconsistentDim {
                    bag_id: bag.bag_id.clone(),
                    found: bag.d_in(),
                    expected: d_in,
                });
            }
            if bag.label >= class_count {
                return Err(Error::LabelOutOfRange {
                    bag_id: bag.bag_id.clone(),
                    label: bag.label,
                    class_count,
                });
            }
        }
        Ok(BagDataset {
            d_in,
            class_count,
            bags,
            splits,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &EmbeddingBag> + '_ {
        self.bags
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(b, _)| b)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.bags.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Errors unless `split` has at least one bag.
    pub fn require_split(&self, split: Split) -> Result<Vec<&EmbeddingBag>> {
        let bags: Vec<_> = self.split(split).collect();
        if bags.is_empty() {
            return Err(Error::Data(format!("split {split} is empty")));
        }
        Ok(bags)
    }

    pub fn find(&self, bag_id: &str) -> Option<&EmbeddingBag> {
        self.bags.iter().find(|b| b.bag_id == bag_id)
    }

    /// All instance embeddings of one split stacked into a single matrix.
    pub fn pooled_instances(&self, split: Split) -> Matrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for bag in self.split(split) {
            data.extend_from_slice(bag.instances.data());
            rows += bag.len();
        }
        Matrix::from_vec(rows, self.d_in, data).expect("consistent d_in")
    }
}

fn bag_bytes(path: &Path, bag: &EmbeddingBag) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(PMB1_MAGIC.as_bytes());
    w.u32(PMB1_VERSION);
    w.u32(dim_u32(path, "d_in", bag.d_in())?);
    w.u32(dim_u32(path, "N", bag.len())?);
    w.u32(dim_u32(path, "bag_id length", bag.bag_id.len())?);
    w.bytes(bag.bag_id.as_bytes());
    for &v in bag.instances.data() {
        w.f32(v as f32);
    }
    Ok(w.into_inner())
}

/// Writes one bag as PMB1. Embeddings are stored as `f32`.
pub fn write_bag(path: impl AsRef<Path>, bag: &EmbeddingBag) -> Result<()> {
    let path = path.as_ref();
    write_file(path, &bag_bytes(path, bag)?)
}

/// Reads a PMB1 file. The returned bag carries label 0; labels come from the manifest.
pub fn read_bag(path: impl AsRef<Path>) -> Result<EmbeddingBag> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(path, &bytes);
    r.header(PMB1_MAGIC, PMB1_VERSION)?;
    let d_in = r.u32()? as usize;
    let n = r.u32()? as usize;
    let id_len = r.u32()? as usize;
    let bag_id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| r.malformed("bag_id is not UTF-8"))?
        .to_owned();
    let payload = r.f32s(n.checked_mul(d_in).ok_or_else(|| r.malformed("size overflow"))?)?;
    r.finish()?;
    if n == 0 {
        return Err(r.malformed("bag has no instances"));
    }
    let data = payload.into_iter().map(f64::from).collect();
    let instances = Matrix::from_vec(n, d_in, data)?;
    if !instances.is_finite() {
        return Err(r.malformed("non-finite embedding value"));
    }
    Ok(EmbeddingBag {
        bag_id,
        label: 0,
        instances,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bag_id: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub d_in: usize,
    pub class_count: usize,
    pub bags: Vec<ManifestEntry>,
}

/// File name used for a bag inside a dataset directory.
pub fn bag_file_name(bag_id: &str) -> String {
    let safe: String = bag_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("bags/{safe}.pmb")
}

/// Writes every bag plus `manifest.json` under `dir` (created if missing).
pub fn write_dataset(dir: impl AsRef<Path>, ds: &BagDataset) -> Result<()> {
    let dir = dir.as_ref();
    let bag_dir = dir.join("bags");
    std::fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut entries = Vec::with_capacity(ds.bags.len());
    let mut seen = BTreeSet::new();
    for (bag, &split) in ds.bags.iter().zip(&ds.splits) {
        let file = bag_file_name(&bag.bag_id);
        if !seen.insert(file.clone()) {
            return Err(Error::Data(format!(
                "two bags map to the same file {file}"
            )));
        }
        write_bag(dir.join(&file), bag)?;
        entries.push(ManifestEntry {
            file,
            bag_id: bag.bag_id.clone(),
            label: bag.label,
            split,
        });
    }
    let manifest = Manifest {
        d_in: ds.d_in,
        class_count: ds.class_count,
        bags: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Loads `dir/manifest.json` and every bag it references.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<BagDataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.bags.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut bags = Vec::with_capacity(manifest.bags.len());
    let mut splits = Vec::with_capacity(manifest.bags.len());
    for entry in &manifest.bags {
        let path = dir.join(&entry.file);
        let mut bag = read_bag(&path)?;
        if bag.bag_id != entry.bag_id {
            return Err(Error::Malformed {
                path,
                reason: format!(
                    "bag_id {:?} does not match manifest entry {:?}",
                    bag.bag_id, entry.bag_id
                ),
            });
        }
        bag.label = entry.label;
        bags.push(bag);
        splits.push(entry.split);
    }
    BagDataset::new(manifest.d_in, manifest.class_count, bags, splits)
}

/// Generator settings. Field names double as the flat JSON config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub d_in: usize,
    /// Number of planted concept directions (K).
    pub n_concepts: usize,
    /// Concepts mixed into each ordinary instance (s).
    pub concepts_per_instance: usize,
    /// Per-coordinate standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub tumor_concepts: Vec<usize>,
    pub spurious_concept: usize,
    /// Probability that a positive bag carries a spurious instance, per split.
    pub rho_train: f64,
    /// Defaults to `rho_train` when absent.
    pub rho_val: Option<f64>,
    pub rho_test: f64,
    /// Per-instance probability that an instance of a positive bag carries a
    /// tumor concept. At least one such instance is always present.
    pub tumor_fraction: f64,
    /// Coefficient range of ordinary concepts.
    pub coef_range: [f64; 2],
    /// Coefficient range of the spurious direction in a spurious instance.
    pub spurious_coef_range: [f64; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d_in: 64,
            n_concepts: 12,
            concepts_per_instance: 2,
            noise_sigma: 0.002,
            n_train: 200,
            n_val: 50,
            n_test: 100,
            min_instances: 16,
            max_instances: 64,
            tumor_concepts: vec![0, 1],
            spurious_concept: 11,
            rho_train: 0.95,
            rho_val: None,
            rho_test: 0.0,
            tumor_fraction: 0.1,
            coef_range: [0.5, 1.5],
            spurious_coef_range: [2.0, 3.0],
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn background(&self) -> Vec<usize> {
        (0..self.n_concepts)
            .filter(|k| !self.tumor_concepts.contains(k) && *k != self.spurious_concept)
            .collect()
    }

    pub fn rho(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.rho_train,
            Split::Val => self.rho_val.unwrap_or(self.rho_train),
            Split::Test => self.rho_test,
        }
    }

    pub fn n_bags(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let s = self.concepts_per_instance;
        if self.n_concepts == 0 || self.n_concepts > self.d_in {
            return bad(format!(
                "n_concepts = {} must be in [1, d_in = {}]",
                self.n_concepts, self.d_in
            ));
        }
        if s == 0 || s > self.n_concepts {
            return bad(format!(
                "concepts_per_instance = {s} must be in [1, n_concepts = {}]",
                self.n_concepts
            ));
        }
        if self.tumor_concepts.is_empty() {
            return bad("tumor_concepts must not be empty".into());
        }
        let unique: BTreeSet<_> = self.tumor_concepts.iter().collect();
        if unique.len() != self.tumor_concepts.len() {
            return bad("tumor_concepts contains duplicates".into());
        }
        if let Some(&k) = self
            .tumor_concepts
            .iter()
            .find(|&&k| k >= self.n_concepts)
        {
            return bad(format!("tumor concept {k} >= n_concepts"));
        }
        if self.spurious_concept >= self.n_concepts {
            return bad(format!(
                "spurious_concept {} >= n_concepts",
                self.spurious_concept
            ));
        }
        if self.tumor_concepts.contains(&self.spurious_concept) {
            return bad("spurious_concept is also a tumor concept".into());
        }
        if self.background().len() < s {
            return bad(format!(
                "concepts_per_instance = {s} exceeds the {} background concepts",
                self.background().len()
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma = {} must be >= 0", self.noise_sigma));
        }
        for split in Split::ALL {
            let rho = self.rho(split);
            if !(0.0..=1.0).contains(&rho) {
                return bad(format!("rho for {split} = {rho} outside [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.tumor_fraction) {
            return bad(format!(
                "tumor_fraction = {} outside [0, 1]",
                self.tumor_fraction
            ));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad(format!(
                "instance range [{}, {}] is empty or starts at 0",
                self.min_instances, self.max_instances
            ));
        }
        for (name, [lo, hi]) in [
            ("coef_range", self.coef_range),
            ("spurious_coef_range", self.spurious_coef_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} = [{lo}, {hi}] must be positive and ordered"));
            }
        }
        if self.n_train + self.n_val + self.n_test == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }
}

/// Planted ground truth of one generated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTruth {
    pub concepts: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub spurious: bool,
}

impl InstanceTruth {
    /// The concept with the largest coefficient.
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for i in 1..self.concepts.len() {
            if self.coefficients[i] > self.coefficients[best] {
                best = i;
            }
        }
        self.concepts[best]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagTruth {
    pub bag_id: String,
    pub instances: Vec<InstanceTruth>,
}

/// Generator bookkeeping written alongside a synthetic dataset as `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// `K x d_in`, orthonormal rows.
    pub directions: Vec<Vec<f64>>,
    pub tumor_concepts: Vec<usize>,
    pub spurious_concept: usize,
    pub bags: Vec<BagTruth>,
}

impl SynthTruth {
    pub fn bag(&self, bag_id: &str) -> Option<&BagTruth> {
        self.bags.iter().find(|b| b.bag_id == bag_id)
    }

    pub fn instance(&self, bag_id: &str, index: usize) -> Option<&InstanceTruth> {
        self.bag(bag_id).and_then(|b| b.instances.get(index))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

const DIRECTION_STREAM: u64 = 0;

/// `K` orthonormal directions in `R^d` from Gaussian draws and Gram-Schmidt.
fn planted_directions(k: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while dirs.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        // two passes of modified Gram-Schmidt keep orthogonality near machine precision
        for _ in 0..2 {
            for u in &dirs {
                let proj = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= proj * ui);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        dirs.push(v);
    }
    dirs
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn embed(
    concepts: &[usize],
    coefficients: &[f64],
    dirs: &[Vec<f64>],
    sigma: f64,
    rng: &mut Rng,
    out: &mut Vec<f64>,
) {
    let d = dirs[0].len();
    let mut x = vec![0.0; d];
    for (&k, &c) in concepts.iter().zip(coefficients) {
        x.iter_mut().zip(&dirs[k]).for_each(|(xi, fi)| *xi += c * fi);
    }
    if sigma > 0.0 {
        for xi in x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *xi += sigma * z;
        }
    }
    // stored as f32 on disk; round now so the in-memory dataset equals its reload
    out.extend(x.into_iter().map(|v| v as f32 as f64));
}

fn gen_bag(
    cfg: &SynthConfig,
    dirs: &[Vec<f64>],
    background: &[usize],
    split: Split,
    label: usize,
    rng: &mut Rng,
) -> (Matrix, Vec<InstanceTruth>) {
    let s = cfg.concepts_per_instance;
    let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let positive = label == 1;
    let mut tumor_flags: Vec<bool> = (0..n)
        .map(|_| positive && rng.random_bool(cfg.tumor_fraction))
        .collect();
    if positive && !tumor_flags.iter().any(|&t| t) {
        let i = rng.random_range(0..n);
        tumor_flags[i] = true;
    }
    let mut truths = Vec::with_capacity(n + 1);
    for &tumor in &tumor_flags {
        let mut concepts = Vec::with_capacity(s);
        let n_background = if tumor {
            let t = cfg.tumor_concepts[rng.random_range(0..cfg.tumor_concepts.len())];
            concepts.push(t);
            s - 1
        } else {
            s
        };
        concepts.extend(
            sample(rng, background.len(), n_background)
                .into_iter()
                .map(|i| background[i]),
        );
        let coefficients = (0..concepts.len())
            .map(|_| uniform(rng, cfg.coef_range))
            .collect();
        truths.push(InstanceTruth {
            concepts,
            coefficients,
            spurious: false,
        });
    }
    if positive && rng.random_bool(cfg.rho(split)) {
        let at = rng.random_range(0..=truths.len());
        truths.insert(
            at,
            InstanceTruth {
                concepts: vec![cfg.spurious_concept],
                coefficients: vec![uniform(rng, cfg.spurious_coef_range)],
                spurious: true,
            },
        );
    }
    let mut data = Vec::with_capacity(truths.len() * cfg.d_in);
    for t in &truths {
        embed(&t.concepts, &t.coefficients, dirs, cfg.noise_sigma, rng, &mut data);
    }
    let rows = truths.len();
    (Matrix::from_vec(rows, cfg.d_in, data).unwrap(), truths)
}

/// Generates the binary benchmark. Pure function of `cfg` (seed included).
///
/// Label 1 bags contain at least one tumor-concept instance, label 0 bags
/// none. Each split draws from its own random stream, so resizing one split
/// leaves the others unchanged.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(BagDataset, SynthTruth)> {
    cfg.validate()?;
    let dirs = planted_directions(
        cfg.n_concepts,
        cfg.d_in,
        &mut stream_rng(cfg.seed, DIRECTION_STREAM),
    );
    let background = cfg.background();
    let mut bags = Vec::new();
    let mut splits = Vec::new();
    let mut truth_bags = Vec::new();
    for (stream, split) in Split::ALL.into_iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, stream as u64 + 1);
        for i in 0..cfg.n_bags(split) {
            let label = i % 2;
            let (instances, truths) = gen_bag(cfg, &dirs, &background, split, label, &mut rng);
            let bag_id = format!("{split}-{i:04}");
            truth_bags.push(BagTruth {
                bag_id: bag_id.clone(),
                instances: truths,
            });
            bags.push(EmbeddingBag {
                bag_id,
                label,
                instances,
            });
            splits.push(split);
        }
    }
    let ds = BagDataset::new(cfg.d_in, 2, bags, splits)?;
    let truth = SynthTruth {
        directions: dirs,
        tumor_concepts: cfg.tumor_concepts.clone(),
        spurious_concept: cfg.spurious_concept,
        bags: truth_bags,
    };
    Ok((ds, truth))
}

/// Path of a dataset's manifest, for existence checks.
pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST_FILE)
}
