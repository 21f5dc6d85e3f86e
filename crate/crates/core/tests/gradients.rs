use matanet::config::Ablation;
use matanet::gradcheck::{end_to_end, op_suite};

#[test]
fn every_operation_matches_finite_differences() {
    for seed in [1, 2] {
        for r in op_suite(seed).unwrap() {
            assert!(r.passed(), "{} rel error {:e} ({}, seed {})", r.name, r.rel_error, r.worst, r.seed);
        }
    }
}

#[test]
fn end_to_end_episode_loss_matches_finite_differences() {
    for ablation in [Ablation::FULL, Ablation::NO_GENERATOR, Ablation::NO_ATTENTION, Ablation::NO_TOPK, Ablation::BASELINE] {
        for r in end_to_end(ablation, 3).unwrap() {
            eprintln!("{} {:e}", r.name, r.rel_error);
            assert!(r.passed(), "{} rel error {:e}", r.name, r.rel_error);
        }
    }
}
