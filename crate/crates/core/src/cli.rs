//! Command-line pipeline: `synth`, `train-sae`, `probe`, `flag`,
//! `train-mil`, `eval`, `explain`, `explain-global`.
//!
//! Every command works inside a run directory (`--out`, default `run`).
//! Upstream artifacts are found there unless `--data`, `--sae`, `--model` or
//! `--catalog` point elsewhere. Each written file is read back and compared
//! before the command reports success.

use std::fmt::Debug;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bagio::{gen_synthetic, load_dataset, write_dataset, BagDataset, Split, SynthConfig, SynthTruth, TRUTH_FILE};
use crate::binfmt::{read_json, write_json};
use crate::explain::{explain_global, explain_local, GlobalExplanation, LocalExplanation};
use crate::metrics::EvalResult;
use crate::mil::{evaluate, train_protomil, EpochRecord, InterventionMask, MilTrainConfig, ProtoMilParams};
use crate::probing::{build_catalog, build_probe_set, prototype_vectors, ConceptCatalog, PrototypeVectors};
use crate::sae::{sparsity_stats, train_sae, SaeLoss, SaeParams, SaeTrainConfig, SparsityStats};

pub const SAE_FILE: &str = "sae.pms";
pub const SAE_HISTORY_FILE: &str = "sae_history.json";
pub const CATALOG_FILE: &str = "catalog.json";
pub const PROTOTYPE_VECTORS_FILE: &str = "prototype_vectors.json";
pub const MASK_FILE: &str = "mask.json";
pub const MODEL_FILE: &str = "mil.pmm";
pub const MIL_HISTORY_FILE: &str = "mil_history.json";
pub const EVAL_FILE: &str = "eval_result.json";
pub const LOCAL_FILE: &str = "local_explanation.json";
pub const GLOBAL_FILE: &str = "global_explanation.json";
pub const DATA_DIR: &str = "data";

/// Everything a run can be configured with, as one flat JSON object.
/// Generator keys keep their names; `seed` drives every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub synth: SynthConfig,
    pub sae_d_hid: usize,
    pub sae_l1: f64,
    pub sae_lr: f64,
    pub sae_epochs: usize,
    pub sae_batch_size: usize,
    pub sae_renormalize_decoder: bool,
    pub mil_lr: f64,
    pub mil_epochs: usize,
    pub mil_attention_dim: usize,
    /// Instances drawn per class for the probing set.
    pub probe_n_per_class: usize,
    /// Prototypes kept per concept.
    pub probe_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sae = SaeTrainConfig::default();
        let mil = MilTrainConfig::default();
        RunConfig {
            synth: SynthConfig::default(),
            sae_d_hid: sae.d_hid,
            sae_l1: sae.l1,
            sae_lr: sae.lr,
            sae_epochs: sae.epochs,
            sae_batch_size: sae.batch_size,
            sae_renormalize_decoder: sae.renormalize_decoder,
            mil_lr: mil.lr,
            mil_epochs: mil.epochs,
            mil_attention_dim: mil.attention_dim,
            probe_n_per_class: 1000,
            probe_k: 10,
        }
    }
}

impl RunConfig {
    /// Reads a config file. Unknown keys are an error rather than silently
    /// ignored.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw: serde_json::Value = read_json(path)?;
        let cfg: RunConfig = serde_json::from_value(raw.clone())
            .with_context(|| format!("{}: invalid run config", path.display()))?;
        let known = serde_json::to_value(&cfg)?;
        if let (Some(given), Some(known)) = (raw.as_object(), known.as_object()) {
            let unknown: Vec<&String> = given.keys().filter(|k| !known.contains_key(*k)).collect();
            if !unknown.is_empty() {
                bail!("{}: unknown config keys {unknown:?}", path.display());
            }
        } else {
            bail!("{}: run config must be a JSON object", path.display());
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.synth.seed
    }

    pub fn sae(&self) -> SaeTrainConfig {
        SaeTrainConfig {
            d_hid: self.sae_d_hid,
            l1: self.sae_l1,
            lr: self.sae_lr,
            epochs: self.sae_epochs,
            batch_size: self.sae_batch_size,
            seed: self.seed(),
            renormalize_decoder: self.sae_renormalize_decoder,
        }
    }

    pub fn mil(&self) -> MilTrainConfig {
        MilTrainConfig {
            lr: self.mil_lr,
            epochs: self.mil_epochs,
            attention_dim: self.mil_attention_dim,
            seed: self.seed(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "protomil",
    version,
    about = "Concept discovery with a sparse autoencoder and attention MIL with exact per-concept logit contributions"
)]
pub struct Cli {
    /// JSON run config with flat keys; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for generation, training and sampling
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Intervention mask (mask.json) applied to concept vectors
    #[arg(long, global = true)]
    pub mask: Option<PathBuf>,
    /// Dataset directory [default: <out>/data]
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// SAE file [default: <out>/sae.pms]
    #[arg(long, global = true)]
    pub sae: Option<PathBuf>,
    /// ProtoMIL model file [default: <out>/mil.pmm]
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Concept catalog [default: <out>/catalog.json]
    #[arg(long, global = true)]
    pub catalog: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark, its manifest and truth.json
    Synth,
    /// Train the sparse autoencoder on the train split's instances
    TrainSae {
        #[arg(long)]
        l1: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build the probing set and the concept catalog
    Probe {
        /// Also write the raw embeddings of every prototype
        #[arg(long)]
        dump_vectors: bool,
    },
    /// Flag concepts as spurious and write the matching mask
    Flag {
        /// Comma-separated concept ids
        #[arg(long, value_delimiter = ',')]
        ids: Vec<usize>,
    },
    /// Train ProtoMIL on frozen concept vectors
    TrainMil {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Accuracy and AUC on one split
    Eval {
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Local explanation of one bag
    Explain {
        #[arg(long)]
        bag: String,
        /// Number of concepts to report
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Mean concept contributions per class over a split
    ExplainGlobal {
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = crate::explain::DEFAULT_GLOBAL_TOP_K)]
        top: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeHistory {
    pub history: Vec<SaeLoss>,
    /// Measured on the train split's instances.
    pub sparsity: SparsityStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilHistory {
    pub best: EpochRecord,
    pub history: Vec<EpochRecord>,
    pub masked_concepts: Vec<usize>,
}

struct Paths<'a> {
    cli: &'a Cli,
}

impl Paths<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    fn data(&self) -> PathBuf {
        self.cli.data.clone().unwrap_or_else(|| self.out(DATA_DIR))
    }

    fn sae(&self) -> PathBuf {
        self.cli.sae.clone().unwrap_or_else(|| self.out(SAE_FILE))
    }

    fn model(&self) -> PathBuf {
        self.cli.model.clone().unwrap_or_else(|| self.out(MODEL_FILE))
    }

    fn catalog(&self) -> PathBuf {
        self.cli.catalog.clone().unwrap_or_else(|| self.out(CATALOG_FILE))
    }
}

fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("missing {what}: {} does not exist", path.display());
    }
    Ok(())
}

fn check_reload<T: PartialEq + Debug>(path: &Path, written: &T, loaded: T) -> anyhow::Result<()> {
    if *written != loaded {
        bail!("{}: file does not read back as written", path.display());
    }
    Ok(())
}

fn save_json<T>(path: &Path, value: &T) -> anyhow::Result<()>
where
    T: Serialize + serde::de::DeserializeOwned + PartialEq + Debug,
{
    write_json(path, value)?;
    check_reload(path, value, read_json(path)?)
}

fn load_data(paths: &Paths) -> anyhow::Result<BagDataset> {
    let dir = paths.data();
    require(&crate::bagio::manifest_path(&dir), "dataset manifest")?;
    Ok(load_dataset(&dir)?)
}

fn load_sae(paths: &Paths) -> anyhow::Result<SaeParams> {
    let path = paths.sae();
    require(&path, "SAE")?;
    Ok(SaeParams::load(&path)?)
}

fn load_model(paths: &Paths) -> anyhow::Result<ProtoMilParams> {
    let path = paths.model();
    require(&path, "ProtoMIL model")?;
    Ok(ProtoMilParams::load(&path)?)
}

fn load_mask(cli: &Cli, d_hid: usize) -> anyhow::Result<InterventionMask> {
    match &cli.mask {
        None => Ok(InterventionMask::empty()),
        Some(path) => {
            require(path, "mask")?;
            Ok(InterventionMask::load(path, d_hid)?)
        }
    }
}

/// The run config after applying `--config` and `--seed`.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            require(path, "config")?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = resolve_config(cli)?;
    let paths = Paths { cli };
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Synth => {
            let (ds, truth) = gen_synthetic(&cfg.synth)?;
            let dir = paths.data();
            write_dataset(&dir, &ds)?;
            check_reload(&dir, &ds, load_dataset(&dir)?)?;
            let truth_path = dir.join(TRUTH_FILE);
            truth.write(&truth_path)?;
            check_reload(&truth_path, &truth, SynthTruth::read(&truth_path)?)?;
            println!("wrote {} bags to {}", ds.bags.len(), dir.display());
        }
        Command::TrainSae { l1, epochs } => {
            if let Some(l1) = l1 {
                cfg.sae_l1 = *l1;
            }
            if let Some(e) = epochs {
                cfg.sae_epochs = *e;
            }
            let ds = load_data(&paths)?;
            let xs = ds.pooled_instances(Split::Train);
            let trained = train_sae(&xs, &cfg.sae())?;
            let sparsity = sparsity_stats(&xs, &trained.params)?;
            let path = paths.out(SAE_FILE);
            trained.params.save(&path)?;
            check_reload(&path, &trained.params, SaeParams::load(&path)?)?;
            save_json(
                &paths.out(SAE_HISTORY_FILE),
                &SaeHistory {
                    history: trained.history,
                    sparsity,
                },
            )?;
            println!(
                "SAE d_hid={} mean L0 {:.2}, {} activated concepts",
                trained.params.d_hid(),
                sparsity.mean_l0,
                sparsity.activated
            );
        }
        Command::Probe { dump_vectors } => {
            let ds = load_data(&paths)?;
            let sae = load_sae(&paths)?;
            let probe = build_probe_set(&ds, cfg.probe_n_per_class, cfg.seed())?;
            let catalog = build_catalog(&probe, &sae, cfg.probe_k)?;
            save_json(&paths.catalog(), &catalog)?;
            if *dump_vectors {
                let vectors: PrototypeVectors = prototype_vectors(&catalog, &ds)?;
                save_json(&paths.out(PROTOTYPE_VECTORS_FILE), &vectors)?;
            }
            println!(
                "{} activated concepts over {} probing instances",
                catalog.concepts.len(),
                probe.len()
            );
        }
        Command::Flag { ids } => {
            let path = paths.catalog();
            require(&path, "catalog")?;
            let mut catalog = ConceptCatalog::load(&path)?;
            catalog.flag(ids)?;
            save_json(&path, &catalog)?;
            let flagged = catalog.flagged();
            let mask = InterventionMask::new(flagged.iter().copied(), usize::MAX)?;
            let mask_path = paths.out(MASK_FILE);
            mask.save(&mask_path)?;
            check_reload(&mask_path, &mask, InterventionMask::load(&mask_path, usize::MAX)?)?;
            println!("masked concepts: {flagged:?}");
        }
        Command::TrainMil { epochs, lr } => {
            if let Some(e) = epochs {
                cfg.mil_epochs = *e;
            }
            if let Some(lr) = lr {
                cfg.mil_lr = *lr;
            }
            let ds = load_data(&paths)?;
            let sae = load_sae(&paths)?;
            let mask = load_mask(cli, sae.d_hid())?;
            let trained = train_protomil(&ds, &sae, &cfg.mil(), &mask)?;
            let path = paths.model();
            trained.params.save(&path)?;
            check_reload(&path, &trained.params, ProtoMilParams::load(&path)?)?;
            save_json(
                &paths.out(MIL_HISTORY_FILE),
                &MilHistory {
                    best: trained.best,
                    history: trained.history,
                    masked_concepts: mask.indices().collect(),
                },
            )?;
            println!(
                "best epoch {} (val AUC {:.4})",
                trained.best.epoch, trained.best.val_auc
            );
        }
        Command::Eval { split } => {
            let ds = load_data(&paths)?;
            let sae = load_sae(&paths)?;
            let params = load_model(&paths)?;
            let mask = load_mask(cli, sae.d_hid())?;
            let result = evaluate(&ds, *split, &sae, &params, &mask)?;
            save_json(&paths.out(EVAL_FILE), &result)?;
            print_eval(&result);
        }
        Command::Explain { bag, top } => {
            let ds = load_data(&paths)?;
            let sae = load_sae(&paths)?;
            let params = load_model(&paths)?;
            let mask = load_mask(cli, sae.d_hid())?;
            let catalog_path = paths.catalog();
            let catalog = match catalog_path.exists() {
                true => Some(ConceptCatalog::load(&catalog_path)?),
                false => None,
            };
            let Some(b) = ds.find(bag) else {
                bail!("no bag {bag:?} in {}", paths.data().display());
            };
            let report = explain_local(b, &sae, &params, &mask, catalog.as_ref(), *top)?;
            let path = paths.out(LOCAL_FILE);
            report.save(&path)?;
            check_reload(&path, &report, LocalExplanation::load(&path)?)?;
            println!(
                "{bag}: class {} (p = {:.4}), {} concepts reported",
                report.predicted_class,
                report.probs[report.predicted_class],
                report.top_concepts.len()
            );
        }
        Command::ExplainGlobal { split, top } => {
            let ds = load_data(&paths)?;
            let sae = load_sae(&paths)?;
            let params = load_model(&paths)?;
            let mask = load_mask(cli, sae.d_hid())?;
            let report = explain_global(&ds, *split, &sae, &params, &mask, *top)?;
            let path = paths.out(GLOBAL_FILE);
            report.save(&path)?;
            check_reload(&path, &report, GlobalExplanation::load(&path)?)?;
            println!("{} bags of split {split}", report.n_bags);
        }
    }
    Ok(())
}

fn print_eval(r: &EvalResult) {
    println!(
        "{}: accuracy {:.4}, AUC {:.4} over {} bags",
        r.split, r.accuracy, r.auc, r.n
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_keys_are_flat_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"n_train": 20, "sae_epochs": 3, "seed": 9}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.synth.n_train, 20);
        assert_eq!(cfg.sae().epochs, 3);
        assert_eq!(cfg.sae().seed, 9);
        assert_eq!(cfg.mil().seed, 9);
        std::fs::write(&path, r#"{"n_trian": 20}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("n_trian"), "{err}");
    }

    #[test]
    fn default_config_serializes_every_key() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        let obj = v.as_object().unwrap();
        for key in ["rho_train", "noise_sigma", "sae_l1", "mil_lr", "probe_k", "seed"] {
            assert!(obj.contains_key(key), "{key}");
        }
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "protomil", "flag", "--ids", "3,7", "--out", "x",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Flag { ref ids } if ids == &[3, 7]));
        let cli = Cli::try_parse_from(["protomil", "eval", "--split", "val", "--seed", "4"]).unwrap();
        assert!(matches!(cli.command, Command::Eval { split: Split::Val }));
        assert_eq!(cli.seed, Some(4));
        assert!(Cli::try_parse_from(["protomil", "eval", "--split", "dev"]).is_err());
    }
}
