//! The intervention loop on a benchmark where an artifact co-occurs with
//! positive train and val bags but never appears in test bags:
//!
//! 1. train and evaluate ProtoMIL as is,
//! 2. review the concept catalog and flag artifact concepts,
//! 3. retrain from scratch with those concepts masked and evaluate again.
//!
//! cargo run --release --example spurious_intervention [-- --quick]

use protomil::bagio::{gen_synthetic, Split, SynthConfig};
use protomil::explain::explain_global;
use protomil::mil::{evaluate, train_protomil, InterventionMask, MilTrainConfig};
use protomil::probing::{build_catalog, build_probe_set, spurious_by_truth};
use protomil::sae::{train_sae, SaeTrainConfig};

pub fn run_example(quick: bool) -> anyhow::Result<()> {
    let mut synth = SynthConfig { rho_train: 0.95, rho_test: 0.0, ..Default::default() };
    let mut sae_cfg = SaeTrainConfig::default();
    let mut mil_cfg = MilTrainConfig::default();
    let mut n_per_class = 1000;
    if quick {
        synth.n_train = 20;
        synth.n_val = 6;
        synth.n_test = 6;
        sae_cfg.epochs = 5;
        sae_cfg.d_hid = 96;
        mil_cfg.epochs = 5;
        mil_cfg.attention_dim = 16;
        n_per_class = 100;
    }
    let (ds, truth) = gen_synthetic(&synth)?;
    let sae = train_sae(&ds.pooled_instances(Split::Train), &sae_cfg)?.params;

    let none = InterventionMask::empty();
    let plain = train_protomil(&ds, &sae, &mil_cfg, &none)?;
    let plain_test = evaluate(&ds, Split::Test, &sae, &plain.params, &none)?;

    let mut catalog = build_catalog(&build_probe_set(&ds, n_per_class, synth.seed)?, &sae, 10)?;
    let flagged = spurious_by_truth(&catalog, &truth)?;
    catalog.flag(&flagged)?;
    let mask = InterventionMask::new(catalog.flagged(), sae.d_hid())?;
    println!("flagged {} artifact concepts: {:?}", mask.len(), catalog.flagged());

    let masked = train_protomil(&ds, &sae, &mil_cfg, &mask)?;
    let masked_test = evaluate(&ds, Split::Test, &sae, &masked.params, &mask)?;

    println!("model     val AUC  test AUC  test acc");
    for (name, run, test) in [("plain", &plain, &plain_test), ("masked", &masked, &masked_test)] {
        println!(
            "{name:<8}  {:>7.3}  {:>8.3}  {:>8.3}",
            run.best.val_auc, test.auc, test.accuracy
        );
    }

    let global = explain_global(&ds, Split::Test, &sae, &masked.params, &mask, 10)?;
    let leaked = global
        .classes
        .iter()
        .flat_map(|c| mask.indices().map(move |i| c.mean_over_all[i]))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    println!("largest mean contribution of a masked concept after retraining: {leaked}");
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example(std::env::args().any(|a| a == "--quick"))
}
