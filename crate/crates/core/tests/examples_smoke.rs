//! Runs every example end to end on a reduced configuration.

#[allow(dead_code)]
#[path = "../examples/synthetic_benchmark.rs"]
mod synthetic_benchmark;

#[test]
fn synthetic_benchmark_quick() {
    synthetic_benchmark::run_example(true).unwrap();
}

#[allow(dead_code)]
#[path = "../examples/concept_discovery.rs"]
mod concept_discovery;

#[test]
fn concept_discovery_quick() {
    concept_discovery::run_example(true).unwrap();
}

#[allow(dead_code)]
#[path = "../examples/prototype_probing.rs"]
mod prototype_probing;

#[test]
fn prototype_probing_quick() {
    prototype_probing::run_example(true).unwrap();
}

#[allow(dead_code)]
#[path = "../examples/train_protomil.rs"]
mod train_protomil;

#[test]
fn train_protomil_quick() {
    train_protomil::run_example(true).unwrap();
}

#[allow(dead_code)]
#[path = "../examples/explanations.rs"]
mod explanations;

#[test]
fn explanations_quick() {
    explanations::run_example(true).unwrap();
}

#[allow(dead_code)]
#[path = "../examples/spurious_intervention.rs"]
mod spurious_intervention;

#[test]
fn spurious_intervention_quick() {
    spurious_intervention::run_example(true).unwrap();
}
