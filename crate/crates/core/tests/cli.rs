//! The protomil binary on a small run config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protomil::explain::{GlobalExplanation, LocalExplanation};
use protomil::metrics::EvalResult;
use protomil::mil::InterventionMask;
use protomil::probing::ConceptCatalog;

const SMALL: &str = r#"{
  "n_train": 16, "n_val": 6, "n_test": 6, "min_instances": 4, "max_instances": 12,
  "sae_d_hid": 80, "sae_epochs": 5, "mil_epochs": 3, "mil_attention_dim": 8,
  "probe_n_per_class": 40, "probe_k": 4
}"#;

struct Run {
    _dir: tempfile::TempDir,
    out: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Run {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        std::fs::write(&config, SMALL).unwrap();
        let out = dir.path().join("run");
        Run { _dir: dir, out, config }
    }

    fn exec(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_protomil"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.exec(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.exec(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepared() -> Run {
        let run = Run::new();
        for cmd in ["synth", "train-sae", "probe"] {
            run.ok(&[cmd]);
        }
        run
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn full_pipeline_with_intervention() {
    let run = Run::prepared();
    let catalog = ConceptCatalog::load(run.path("catalog.json")).unwrap();
    let ids = catalog.ids();
    assert!(!ids.is_empty());
    let chosen = format!("{},{}", ids[0], ids[ids.len() - 1]);
    run.ok(&["flag", "--ids", &chosen]);
    let mask = run.path("mask.json");
    let mask_arg = mask.to_str().unwrap();
    run.ok(&["train-mil", "--mask", mask_arg]);
    run.ok(&["eval", "--mask", mask_arg]);
    let eval = EvalResult::load(run.path("eval_result.json")).unwrap();
    assert_eq!((eval.split.as_str(), eval.n), ("test", 6));

    run.ok(&["explain-global", "--mask", mask_arg]);
    let global = GlobalExplanation::load(run.path("global_explanation.json")).unwrap();
    for class in &global.classes {
        assert_eq!(class.mean_over_all[ids[0]], 0.0);
        assert_eq!(class.mean_over_all[ids[ids.len() - 1]], 0.0);
    }

    run.ok(&["explain", "--bag", "test-0000", "--top", "5", "--mask", mask_arg]);
    let local = LocalExplanation::load(run.path("local_explanation.json")).unwrap();
    assert_eq!(local.bag_id, "test-0000");
    assert!(local.top_concepts.len() <= 5);
    assert!(local.top_concepts.iter().all(|c| c.concept != ids[0]));
    let sum: f64 = local.contributions.iter().sum::<f64>() + local.bias;
    assert!((sum - local.logits[local.predicted_class]).abs() < 1e-9);
}

#[test]
fn missing_artifact_is_named() {
    let run = Run::new();
    run.ok(&["synth"]);
    let err = run.fails(&["train-mil"]);
    assert!(err.contains("sae.pms"), "{err}");
    let err = run.fails(&["eval"]);
    assert!(err.contains("does not exist"), "{err}");
}

#[test]
fn out_of_range_mask_is_rejected() {
    let run = Run::prepared();
    let mask = run.out.join("bad_mask.json");
    std::fs::write(&mask, r#"{"masked_concepts":[3,80]}"#).unwrap();
    let err = run.fails(&["train-mil", "--mask", mask.to_str().unwrap()]);
    assert!(err.contains("80"), "{err}");
    assert!(!run.path("mil.pmm").exists());
}

#[test]
fn flag_is_idempotent_and_empty_flag_gives_empty_mask() {
    let run = Run::prepared();
    run.ok(&["flag"]);
    assert!(InterventionMask::load(run.path("mask.json"), 80).unwrap().is_empty());

    let id = ConceptCatalog::load(run.path("catalog.json")).unwrap().ids()[0].to_string();
    run.ok(&["flag", "--ids", &id]);
    let (catalog, mask) = (read(&run.path("catalog.json")), read(&run.path("mask.json")));
    run.ok(&["flag", "--ids", &id]);
    assert_eq!(read(&run.path("catalog.json")), catalog);
    assert_eq!(read(&run.path("mask.json")), mask);

    let err = run.fails(&["flag", "--ids", "100000"]);
    assert!(err.contains("100000"), "{err}");
}

#[test]
fn invalid_config_fails() {
    let run = Run::new();
    std::fs::write(&run.config, r#"{"sae_l1": -1.0}"#).unwrap();
    run.ok(&["synth"]);
    assert!(!run.fails(&["train-sae"]).is_empty());
    std::fs::write(&run.config, r#"{"no_such_key": 1}"#).unwrap();
    let err = run.fails(&["synth"]);
    assert!(err.contains("no_such_key"), "{err}");
    std::fs::write(&run.config, r#"{"rho_train": 2.0}"#).unwrap();
    run.fails(&["synth"]);
}

#[test]
fn synth_is_reproducible_per_seed() {
    let (a, b, c) = (Run::new(), Run::new(), Run::new());
    a.ok(&["synth", "--seed", "4"]);
    b.ok(&["synth", "--seed", "4"]);
    c.ok(&["synth", "--seed", "5"]);
    for f in ["data/manifest.json", "data/bags/train-0000.pmb", "data/truth.json"] {
        assert_eq!(read(&a.path(f)), read(&b.path(f)), "{f}");
    }
    assert_ne!(read(&a.path("data/bags/train-0000.pmb")), read(&c.path("data/bags/train-0000.pmb")));
}
