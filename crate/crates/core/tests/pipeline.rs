//! Episode sampling, training and persistence working together on small
//! synthetic data.

use matanet::config::{ArchConfig, EpisodeShape};
use matanet::data::checkpoint::{from_bytes, load_checkpoint_for, save_checkpoint, to_bytes};
use matanet::data::synthetic::{generate_synthetic, synthetic_benchmark, SyntheticSpec};
use matanet::data::{check_disjoint, load_splits};
use matanet::episode::{episode_rng, sample_episode};
use matanet::eval::evaluate;
use matanet::train::train;
use matanet::{Config, Error, ModelState};

fn small() -> Config {
    let mut c = Config::compact();
    c.arch = ArchConfig {
        image_size: 16,
        width: 4,
        ..ArchConfig::default()
    };
    c.head.k = 1;
    c.train.episode.queries = 3;
    c.train.episodes = 6;
    c.eval.episode.queries = 3;
    c.eval.episodes = 8;
    c.eval.repeats = 2;
    c.data.synth_images = 8;
    c
}

#[test]
fn episodes_draw_distinct_classes_and_images() {
    let split = generate_synthetic(&SyntheticSpec {
        classes: 8,
        images_per_class: 6,
        image_size: 8,
        noise: 0.1,
        distractors: 0,
        seed: 3,
        first_class: 0,
        split_name: "train".into(),
    });
    let shape = EpisodeShape {
        way: 5,
        shot: 2,
        queries: 3,
    };
    for e in 0..50 {
        let task = sample_episode::<f32, _>(&split, shape, &mut episode_rng(1, e)).unwrap();
        let mut classes = task.classes.clone();
        classes.sort();
        classes.dedup();
        assert_eq!(classes.len(), 5);
        let mut refs: Vec<_> = task.support_refs.iter().chain(&task.query_refs).copied().collect();
        refs.sort();
        refs.dedup();
        assert_eq!(refs.len(), 5 * (2 + 3));
        for n in 0..5 {
            assert_eq!(task.support_labels.iter().filter(|&&l| l == n).count(), 2);
            assert_eq!(task.query_labels.iter().filter(|&&l| l == n).count(), 3);
        }
    }
}

#[test]
fn benchmark_splits_are_disjoint() {
    let (train, test) = synthetic_benchmark(20, 5, 2, 8, 0.1, 0, 0);
    assert_eq!(train.len(), 40);
    check_disjoint(&[&train, &test]).unwrap();
    let full = synthetic_benchmark(20, 5, 30, 84, 0.1, 0, 0).0;
    assert_eq!((full.len(), full.sample_shape), (600, [3, 84, 84]));
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let c = small();
    let splits = load_splits(&c, None).unwrap();
    let run = || {
        let mut m = ModelState::<f32>::init(&c.arch, c.train.seed).unwrap();
        m.input_norm = splits.norm.clone();
        train(&mut m, &c, &splits.train, |_| Ok(())).unwrap();
        m
    };
    let (a, b) = (run(), run());
    assert_eq!(to_bytes(&a, &c), to_bytes(&b, &c));

    let (back, echo) = from_bytes::<f32>(&to_bytes(&a, &c)).unwrap();
    assert_eq!(back, a);
    assert_eq!(echo, c);
    let r1 = evaluate(&a, &c.head, &c.eval, &splits.test, c.to_text()).unwrap();
    let r2 = evaluate(&back, &echo.head, &echo.eval, &splits.test, echo.to_text()).unwrap();
    assert_eq!(r1.to_text(), r2.to_text());
    assert_eq!(r1.repeat_accuracies.len(), 2);
}

#[test]
fn checkpoints_refuse_other_architectures() {
    let c = small();
    let m = ModelState::<f32>::init(&c.arch, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &m, &c).unwrap();
    let wider = ArchConfig { width: 8, ..c.arch.clone() };
    assert!(load_checkpoint_for::<f32>(&path, &wider).is_err());
    assert!(load_checkpoint_for::<f32>(&path, &c.arch).is_ok());
}

#[test]
fn short_classes_are_named_in_errors() {
    let mut c = small();
    c.data.synth_images = 2;
    let splits = load_splits(&c, None).unwrap();
    let shape = EpisodeShape {
        way: 5,
        shot: 1,
        queries: 3,
    };
    match sample_episode::<f32, _>(&splits.train, shape, &mut episode_rng(0, 0)) {
        Err(Error::Data(msg)) => assert!(msg.contains("synth000"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let compact = Config::load(&dir.join("compact.cfg")).unwrap();
    assert_eq!(compact, Config::compact());
    let desk = Config::load(&dir.join("desk.cfg")).unwrap();
    assert_eq!((desk.arch.image_size, desk.arch.width), (84, 64));
    let paper = Config::load(&dir.join("paper.cfg")).unwrap();
    assert_eq!(paper.train.episodes, Config::paper_scale().train.episodes);
}
