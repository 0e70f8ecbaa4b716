//! Builds a class-balanced probing set, finds the activated concepts, and
//! lists each concept's prototypes. Ground truth from the generator tells us
//! which planted concept each prototype really came from, which is what a
//! pathologist would judge by eye.
//!
//! cargo run --release --example prototype_probing [-- --quick]

use protomil::bagio::{gen_synthetic, Split, SynthConfig};
use protomil::probing::{build_catalog, build_probe_set, spurious_by_truth};
use protomil::sae::{train_sae, SaeTrainConfig};

pub fn run_example(quick: bool) -> anyhow::Result<()> {
    let mut synth = SynthConfig::default();
    let mut sae_cfg = SaeTrainConfig::default();
    let mut n_per_class = 1000;
    if quick {
        synth.n_train = 20;
        synth.n_val = 4;
        synth.n_test = 4;
        sae_cfg.epochs = 5;
        sae_cfg.d_hid = 96;
        n_per_class = 100;
    }
    let (ds, truth) = gen_synthetic(&synth)?;
    let sae = train_sae(&ds.pooled_instances(Split::Train), &sae_cfg)?.params;

    let probe = build_probe_set(&ds, n_per_class, synth.seed)?;
    let catalog = build_catalog(&probe, &sae, 10)?;
    println!(
        "{} of {} concepts activated on {} probing instances",
        catalog.concepts.len(),
        sae.d_hid(),
        probe.len()
    );

    println!("concept  prototypes  top activation  dominant planted concept (share)");
    for entry in catalog.concepts.iter().take(if quick { 5 } else { 25 }) {
        let mut counts = vec![0usize; truth.directions.len()];
        for p in &entry.prototypes {
            let inst = truth
                .instance(&p.bag_id, p.instance_index)
                .expect("prototype comes from a generated bag");
            counts[inst.dominant()] += 1;
        }
        let (dominant, n) = counts
            .iter()
            .enumerate()
            .max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i)))
            .expect("non-empty");
        println!(
            "{:>7}  {:>10}  {:>14.3}  {dominant} ({n}/{})",
            entry.id,
            entry.prototypes.len(),
            entry.prototypes[0].activation,
            entry.prototypes.len()
        );
    }

    let spurious = spurious_by_truth(&catalog, &truth)?;
    println!("concepts whose prototypes are mostly artifacts: {spurious:?}");
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example(std::env::args().any(|a| a == "--quick"))
}
