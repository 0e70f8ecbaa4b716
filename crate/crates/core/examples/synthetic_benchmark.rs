//! Generates the synthetic bag benchmark, writes it to disk in the PMB1
//! layout, reads it back, and shows how to package embeddings produced by
//! some other encoder into the same format.
//!
//! cargo run --release --example synthetic_benchmark [-- --quick]

use protomil::bagio::{
    gen_synthetic, load_dataset, write_dataset, BagDataset, EmbeddingBag, Split, SynthConfig,
};
use protomil::numerics::{seeded_rng, Matrix};
use rand_distr::{Distribution, StandardNormal};

pub fn run_example(quick: bool) -> anyhow::Result<()> {
    let cfg = if quick {
        SynthConfig { n_train: 20, n_val: 6, n_test: 10, ..Default::default() }
    } else {
        SynthConfig::default()
    };
    let (ds, truth) = gen_synthetic(&cfg)?;

    println!("split  bags  positive  mean N  with spurious  tumor instances");
    for split in Split::ALL {
        let bags: Vec<&EmbeddingBag> = ds.split(split).collect();
        let positive = bags.iter().filter(|b| b.label == 1).count();
        let mean_n = bags.iter().map(|b| b.len()).sum::<usize>() as f64 / bags.len() as f64;
        let mut spurious = 0;
        let mut tumor = 0;
        for b in &bags {
            let t = truth.bag(&b.bag_id).expect("every bag has ground truth");
            spurious += t.instances.iter().any(|i| i.spurious) as usize;
            tumor += t
                .instances
                .iter()
                .filter(|i| i.concepts.iter().any(|c| truth.tumor_concepts.contains(c)))
                .count();
        }
        println!(
            "{:<6} {:>4}  {:>8}  {:>6.1}  {:>13}  {:>15}",
            split.as_str(),
            bags.len(),
            positive,
            mean_n,
            spurious,
            tumor
        );
    }

    let dir = tempfile::tempdir()?;
    write_dataset(dir.path(), &ds)?;
    let reloaded = load_dataset(dir.path())?;
    assert_eq!(reloaded, ds);
    println!("round trip through {} ok", dir.path().display());

    // Embeddings from any encoder: one matrix of instance rows per bag.
    let mut rng = seeded_rng(7);
    let d_in = 16;
    let external: Vec<EmbeddingBag> = (0..4)
        .map(|i| {
            let n = 5 + i;
            let data = (0..n * d_in)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            EmbeddingBag::new(format!("slide-{i}"), i % 2, Matrix::from_vec(n, d_in, data)?)
        })
        .collect::<protomil::Result<_>>()?;
    let splits = vec![Split::Train, Split::Train, Split::Val, Split::Test];
    let own = BagDataset::new(d_in, 2, external, splits)?;
    let own_dir = dir.path().join("external");
    write_dataset(&own_dir, &own)?;
    println!(
        "packaged {} external bags ({} instances) in {}",
        own.bags.len(),
        own.bags.iter().map(|b| b.len()).sum::<usize>(),
        own_dir.display()
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example(std::env::args().any(|a| a == "--quick"))
}
