//! Local and global explanations. Catalog concepts are named from the
//! generator's ground truth (standing in for a pathologist), then one
//! positive test bag is explained and mean contributions are summarized per
//! class.
//!
//! cargo run --release --example explanations [-- --quick]

use protomil::bagio::{gen_synthetic, Split, SynthConfig, SynthTruth};
use protomil::explain::{explain_global, explain_local};
use protomil::mil::{train_protomil, InterventionMask, MilTrainConfig};
use protomil::probing::{build_catalog, build_probe_set, ConceptCatalog};
use protomil::sae::{train_sae, SaeTrainConfig};

fn name_concepts(catalog: &mut ConceptCatalog, truth: &SynthTruth) {
    for entry in &mut catalog.concepts {
        let Some(p) = entry.prototypes.first() else { continue };
        let Some(inst) = truth.instance(&p.bag_id, p.instance_index) else { continue };
        let k = inst.dominant();
        entry.name = Some(if inst.spurious {
            "artifact".to_string()
        } else if truth.tumor_concepts.contains(&k) {
            format!("tumor-{k}")
        } else {
            format!("tissue-{k}")
        });
    }
}

pub fn run_example(quick: bool) -> anyhow::Result<()> {
    let mut synth = SynthConfig { rho_train: 0.0, ..Default::default() };
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
    let mut catalog = build_catalog(&build_probe_set(&ds, n_per_class, synth.seed)?, &sae, 10)?;
    name_concepts(&mut catalog, &truth);

    let none = InterventionMask::empty();
    let params = train_protomil(&ds, &sae, &mil_cfg, &none)?.params;

    let bag = ds
        .split(Split::Test)
        .find(|b| b.label == 1)
        .expect("test split has a positive bag");
    let local = explain_local(bag, &sae, &params, &none, Some(&catalog), 5)?;
    println!(
        "{}: predicted class {} with p = {:.3}",
        local.bag_id, local.predicted_class, local.probs[local.predicted_class]
    );
    let mut by_attention = local.attention.clone();
    by_attention.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    for a in by_attention.iter().take(3) {
        let inst = &truth.bag(&bag.bag_id).expect("ground truth").instances[a.instance_index];
        println!(
            "  instance {:>2}  attention {:.3}  planted concepts {:?}",
            a.instance_index, a.weight, inst.concepts
        );
    }
    for t in &local.top_concepts {
        println!(
            "  concept {:>3} {:<10} contribution {:+.4}  prototypes {}",
            t.concept,
            t.name.as_deref().unwrap_or("-"),
            t.contribution,
            t.prototypes.len()
        );
    }

    let global = explain_global(&ds, Split::Test, &sae, &params, &none, 5)?;
    for class in &global.classes {
        let names: Vec<String> = class
            .top_concepts
            .iter()
            .map(|t| {
                format!(
                    "{}={:+.3}",
                    catalog.name_of(t.concept).unwrap_or("?"),
                    t.mean_contribution
                )
            })
            .collect();
        println!("class {} mean contributions: {}", class.class, names.join(", "));
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example(std::env::args().any(|a| a == "--quick"))
}
