//! Cross-module invariants over randomized inputs.

use proptest::prelude::*;
use protomil::bagio::{read_bag, write_bag, EmbeddingBag};
use protomil::mil::{forward, forward_concepts, ConceptBag, InterventionMask, ProtoMilParams};
use protomil::numerics::{seeded_rng, softmax, Matrix};
use protomil::sae::SaeParams;
use rand::Rng;

fn random_bag(n: usize, d_in: usize, seed: u64) -> EmbeddingBag {
    let mut rng = seeded_rng(seed);
    let data = (0..n * d_in).map(|_| rng.random_range(-2.0..2.0)).collect();
    EmbeddingBag::new(format!("bag-{seed}"), (seed % 2) as usize, Matrix::from_vec(n, d_in, data).unwrap()).unwrap()
}

fn random_sae(d_in: usize, d_hid: usize, seed: u64) -> SaeParams {
    let mut sae = SaeParams::init(d_in, d_hid, seed).unwrap();
    let mut rng = seeded_rng(seed ^ 0xabc);
    sae.b.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    sae
}

#[test]
fn long_softmax_sums_to_one() {
    let mut rng = seeded_rng(11);
    for scale in [1.0, 30.0, 700.0] {
        let scores: Vec<f64> = (0..100_000).map(|_| rng.random_range(-scale..scale)).collect();
        let p = softmax(&scores).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
    }
}

#[test]
fn bag_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut seed = 0;
    for d_in in [4, 16, 512] {
        for n in [1, 2, 7, 33, 64] {
            seed += 1;
            let bag = random_bag(n, d_in, seed);
            let path = dir.path().join(format!("{n}-{d_in}.pmb"));
            write_bag(&path, &bag).unwrap();
            let back = read_bag(&path).unwrap();
            assert_eq!(back.bag_id, bag.bag_id);
            assert_eq!((back.len(), back.d_in()), (n, d_in));
            // stored as f32
            for (a, b) in back.instances.data().iter().zip(bag.instances.data()) {
                assert_eq!(*a, *b as f32 as f64);
            }
            write_bag(&path, &back).unwrap();
            assert_eq!(read_bag(&path).unwrap(), back);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_inside_forward_equals_zeroing_outside(
        seed in any::<u64>(),
        n in 1usize..20,
        masked in prop::collection::btree_set(0usize..24, 0..24),
    ) {
        let (d_in, d_hid) = (8, 24);
        let sae = random_sae(d_in, d_hid, seed);
        let params = ProtoMilParams::init(d_hid, 6, 2, seed).unwrap();
        let bag = random_bag(n, d_in, seed);
        let mask = InterventionMask::new(masked.iter().copied(), d_hid).unwrap();
        let inside = forward(&bag, &sae, &params, &mask).unwrap();

        let mut h = sae.encode_matrix(&bag.instances).unwrap();
        for r in 0..h.rows() {
            for &i in &masked {
                h.set(r, i, 0.0);
            }
        }
        let outside = forward_concepts(&ConceptBag::new(h), &params).unwrap();
        for (a, b) in inside.logits.iter().zip(&outside.logits) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in inside.attention.iter().zip(&outside.attention) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn logits_decompose_and_ignore_instance_order(
        seed in any::<u64>(),
        n in 1usize..30,
        c in 2usize..5,
    ) {
        let (d_in, d_hid) = (6, 20);
        let sae = random_sae(d_in, d_hid, seed);
        let params = ProtoMilParams::init(d_hid, 5, c, seed).unwrap();
        let bag = ConceptBag::encode(&random_bag(n, d_in, seed), &sae, &InterventionMask::empty()).unwrap();
        let out = forward_concepts(&bag, &params).unwrap();
        for class in 0..c {
            let sum: f64 = out.contributions[class].iter().sum::<f64>() + params.b_cls[class];
            prop_assert!((sum - out.logits[class]).abs() <= 1e-9);
        }
        let mut rng = seeded_rng(seed.wrapping_add(1));
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let shuffled = forward_concepts(&bag.permuted(&order), &params).unwrap();
        for (a, b) in out.logits.iter().zip(&shuffled.logits) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        for (i, &j) in order.iter().enumerate() {
            prop_assert!((shuffled.attention[i] - out.attention[j]).abs() <= 1e-12);
        }
    }
}
