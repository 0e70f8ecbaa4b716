//! Trains the sparse autoencoder on pooled train instances and checks how
//! well its decoder rows line up with the planted concept directions. Also
//! compares code sparsity with and without the L1 term.
//!
//! cargo run --release --example concept_discovery [-- --quick]

use protomil::bagio::{gen_synthetic, Split, SynthConfig};
use protomil::numerics::cosine;
use protomil::sae::{sparsity_stats, train_sae, SaeTrainConfig};

pub fn run_example(quick: bool) -> anyhow::Result<()> {
    // one concept per instance makes every instance a pure direction
    let mut synth = SynthConfig { concepts_per_instance: 1, ..Default::default() };
    let mut sae_cfg = SaeTrainConfig::default();
    if quick {
        synth.n_train = 20;
        synth.n_val = 4;
        synth.n_test = 4;
        sae_cfg.epochs = 5;
        sae_cfg.d_hid = 96;
    }
    let (ds, truth) = gen_synthetic(&synth)?;
    let xs = ds.pooled_instances(Split::Train);
    println!("{} train instances, d_in = {}", xs.rows(), xs.cols());

    let trained = train_sae(&xs, &sae_cfg)?;
    let last = trained.history.last().expect("at least one epoch");
    println!(
        "after {} epochs: recon {:.3e}, L1 {:.3}",
        trained.history.len(),
        last.recon,
        last.sparsity
    );

    println!("planted  best latent  |cosine|");
    let mut recovered = 0;
    for (k, dir) in truth.directions.iter().enumerate() {
        let (best, cos) = trained
            .params
            .w_dec
            .iter_rows()
            .map(|f| cosine(f, dir).abs())
            .enumerate()
            .fold((0, 0.0), |acc, (i, c)| if c > acc.1 { (i, c) } else { acc });
        recovered += (cos >= 0.9) as usize;
        let role = if truth.tumor_concepts.contains(&k) {
            "tumor"
        } else if k == truth.spurious_concept {
            "spurious"
        } else {
            ""
        };
        println!("{k:>7}  {best:>11}  {cos:>8.3}  {role}");
    }
    println!("{recovered}/{} directions recovered at |cosine| >= 0.9", truth.directions.len());

    let with_l1 = sparsity_stats(&xs, &trained.params)?;
    let dense = train_sae(&xs, &SaeTrainConfig { l1: 0.0, ..sae_cfg.clone() })?;
    let without = sparsity_stats(&xs, &dense.params)?;
    println!(
        "mean L0: {:.2} with l1 = {}, {:.2} without; activated concepts {} vs {}",
        with_l1.mean_l0, sae_cfg.l1, without.mean_l0, with_l1.activated, without.activated
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example(std::env::args().any(|a| a == "--quick"))
}
