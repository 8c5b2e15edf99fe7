use std::collections::BTreeSet;

use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

use super::*;
use crate::datasets::{generate_synthetic, GeneratorSpec, Split};

fn dataset(classes: usize, seed: u64) -> FeatureDataset {
    generate_synthetic(&GeneratorSpec {
        num_classes: classes,
        train_per_class: 12,
        test_per_class: 6,
        d: 6,
        frames: 2,
        cells: 3,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn config(strategy: Strategy, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr: 1e-2,
        memory_capacity: 8,
        seed: 3,
        strategy,
        ..Default::default()
    }
}

fn classes(n: u32) -> Vec<u32> {
    (0..n).collect()
}

#[test]
fn task_sequence_shapes() {
    let s = build_task_sequence(&classes(28), 4, 7, 1).unwrap();
    assert_eq!(s.tasks.len(), 4);
    assert!(s.tasks.iter().all(|t| t.len() == 7));
    let s = build_task_sequence(&classes(28), 7, 4, 1).unwrap();
    assert_eq!(s.tasks.len(), 7);
    let all: BTreeSet<u32> = s.class_order().into_iter().collect();
    assert_eq!(all.len(), 28);
    assert_eq!(build_task_sequence(&classes(28), 4, 7, 1).unwrap(), build_task_sequence(&classes(28), 4, 7, 1).unwrap());
    assert_ne!(build_task_sequence(&classes(28), 4, 7, 1).unwrap(), build_task_sequence(&classes(28), 4, 7, 2).unwrap());
    assert!(build_task_sequence(&classes(27), 4, 7, 1).is_err());
    assert!(TaskSequence::new(vec![vec![1, 2], vec![2]], 0).is_err());
}

proptest! {
    #[test]
    fn sequences_are_disjoint(n in 1u32..40, steps in 1usize..8, per in 1usize..6, seed in any::<u64>()) {
        let ids = classes(n);
        match build_task_sequence(&ids, steps, per, seed) {
            Ok(s) => {
                let order = s.class_order();
                let set: BTreeSet<u32> = order.iter().copied().collect();
                prop_assert_eq!(set.len(), order.len());
                prop_assert_eq!(order.len(), steps * per);
            }
            Err(_) => prop_assert!(steps * per > n as usize),
        }
    }
}

fn fake_samples(classes: &[u32], per_class: usize, first_id: u32) -> Vec<FeatureSample> {
    let mut out = Vec::new();
    let mut id = first_id;
    for &c in classes {
        for _ in 0..per_class {
            out.push(FeatureSample {
                sample_id: id,
                label: c,
                split: Split::Train,
                audio: vec![],
                visual: vec![],
            });
            id += 1;
        }
    }
    out
}

#[test]
fn memory_default_capacity() {
    let m = ExemplarMemory::new(340, 0);
    assert!(m.is_empty());
    let first: Vec<u32> = (0..7).collect();
    let s1 = fake_samples(&first, 60, 0);
    let (m, short) = update_memory(&m, &s1.iter().collect::<Vec<_>>(), &first, 1).unwrap();
    assert!(short.is_empty());
    assert!(m.per_class().values().all(|&c| c == 48));
    assert_eq!(m.len(), 336);
    let second: Vec<u32> = (7..14).collect();
    let s2 = fake_samples(&second, 60, 1000);
    let (m2, _) = update_memory(&m, &s2.iter().collect::<Vec<_>>(), &second, 2).unwrap();
    assert!(m2.per_class().values().all(|&c| c == 24));
    assert_eq!(m2.len(), 336);
    // old classes keep a subset of what they had
    for (c, ids) in &m2.store {
        if let Some(old) = m.store.get(c) {
            assert!(ids.iter().all(|i| old.contains(i)));
        }
    }
    assert!(update_memory(&m2, &[], &[3], 3).is_err());
}

#[test]
fn memory_flags_short_classes() {
    let m = ExemplarMemory::new(20, 0);
    let s = fake_samples(&[0, 1], 4, 0);
    let (m, short) = update_memory(&m, &s.iter().collect::<Vec<_>>(), &[0, 1], 1).unwrap();
    assert_eq!(short, vec![0, 1]);
    assert_eq!(m.len(), 8);
}

proptest! {
    #[test]
    fn memory_invariants(capacity in 0usize..400, steps in prop::collection::vec(1usize..6, 1..5), per_class in 1usize..60, seed in any::<u64>()) {
        let mut m = ExemplarMemory::new(capacity, seed);
        let mut next = 0u32;
        let mut twin = m.clone();
        for (t, &k) in steps.iter().enumerate() {
            let cls: Vec<u32> = (next..next + k as u32).collect();
            next += k as u32;
            let s = fake_samples(&cls, per_class, next * 1000);
            let refs: Vec<&FeatureSample> = s.iter().collect();
            let (a, _) = update_memory(&m, &refs, &cls, t + 1).unwrap();
            let (b, _) = update_memory(&twin, &refs, &cls, t + 1).unwrap();
            prop_assert_eq!(&a, &b);
            let share = capacity / a.num_classes();
            prop_assert!(a.len() <= capacity);
            for &n in a.per_class().values() {
                prop_assert_eq!(n, share.min(per_class));
            }
            m = a;
            twin = b;
        }
    }
}

fn run(ds: &FeatureDataset, seq: &TaskSequence, cfg: &TrainConfig) -> RunOutput {
    run_incremental(ds, seq, cfg).unwrap()
}

#[test]
fn first_step_finetune_equals_avcil_without_constraints() {
    let ds = dataset(4, 0);
    let seq = build_task_sequence(&classes(4), 1, 4, 0).unwrap();
    let ft = run(&ds, &seq, &config(Strategy::Finetune, 5));
    let mut cfg = config(Strategy::Avcil, 5);
    cfg.weights.lambda_i = 0.0;
    cfg.weights.lambda_c = 0.0;
    let av = run(&ds, &seq, &cfg);
    assert!(ft.params.bit_eq(&av.params));
}

#[test]
fn oracle_first_step_equals_finetune() {
    let ds = dataset(4, 0);
    let seq = build_task_sequence(&classes(4), 1, 4, 0).unwrap();
    let ft = run(&ds, &seq, &config(Strategy::Finetune, 4));
    let or = run(&ds, &seq, &config(Strategy::Oracle, 4));
    assert!(ft.params.bit_eq(&or.params));
    assert_eq!(ft.matrix, or.matrix);
    assert!(or.memory_history.iter().all(|m| m.is_empty()));
}

#[test]
fn loss_decreases_on_separable_data() {
    let ds = dataset(4, 1);
    let seq = build_task_sequence(&classes(4), 1, 4, 0).unwrap();
    let out = run(&ds, &seq, &config(Strategy::Finetune, 50));
    let curve = &out.loss_curves()[0];
    assert_eq!(curve.len(), 50);
    assert!(curve[49] < 0.5 * curve[0], "{} -> {}", curve[0], curve[49]);
}

#[test]
fn runs_are_deterministic() {
    let ds = dataset(6, 2);
    let seq = build_task_sequence(&classes(6), 3, 2, 5).unwrap();
    let cfg = config(Strategy::Avcil, 3);
    let a = run(&ds, &seq, &cfg);
    let b = run(&ds, &seq, &cfg);
    assert!(a.params.bit_eq(&b.params));
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(events_to_jsonl(&a.log).unwrap(), events_to_jsonl(&b.log).unwrap());
    let c = run(&ds, &seq, &TrainConfig { seed: 4, ..cfg });
    assert!(!a.params.bit_eq(&c.params));
}

#[test]
fn matrix_structure_and_memory_history() {
    let ds = dataset(6, 2);
    let seq = build_task_sequence(&classes(6), 3, 2, 5).unwrap();
    let out = run(&ds, &seq, &config(Strategy::Ssil, 2));
    assert_eq!(out.matrix.steps(), 3);
    for t in 0..3 {
        assert_eq!(out.matrix.per_task[t].len(), t + 1);
    }
    assert_eq!(out.memory_history[0].len(), 8);
    assert_eq!(out.memory_history[2].per_class().values().copied().collect::<Vec<_>>(), vec![1; 6]);
    assert_eq!(out.step_params[1].num_classes, 4);

    let one = build_task_sequence(&classes(6), 1, 2, 5).unwrap();
    let out = run(&ds, &one, &config(Strategy::Ssil, 1));
    assert_eq!(out.matrix.steps(), 1);
}

#[test]
fn teacher_is_previous_step_and_projections_warm_start() {
    let ds = dataset(4, 0);
    let seq = build_task_sequence(&classes(4), 2, 2, 0).unwrap();
    let cfg = config(Strategy::Avcil, 2);
    let mut log = Vec::new();
    let s1 = train_step(StepState::new(8, 3), &ds, &seq, &cfg, &mut log).unwrap();
    assert!(s1.teacher.is_none());
    let p1 = s1.params.clone().unwrap();
    let s2 = train_step(s1, &ds, &seq, &TrainConfig { epochs: 1, ..cfg.clone() }, &mut log).unwrap();
    assert!(s2.teacher.as_ref().unwrap().bit_eq(&p1));
    assert_eq!(s2.layout.as_ref().unwrap().boundaries(), &[2, 2]);
    assert!(train_step(s2, &ds, &seq, &cfg, &mut log).is_err());
}

#[test]
fn memoryless_strategies_ignore_capacity() {
    let ds = dataset(4, 0);
    let seq = build_task_sequence(&classes(4), 2, 2, 0).unwrap();
    for s in [Strategy::Finetune, Strategy::Lwf, Strategy::Oracle] {
        let small = run(&ds, &seq, &TrainConfig { memory_capacity: 0, ..config(s, 2) });
        let big = run(&ds, &seq, &TrainConfig { memory_capacity: 1_000_000, ..config(s, 2) });
        assert!(small.params.bit_eq(&big.params));
        assert_eq!(small.matrix, big.matrix);
    }
    let err = run_incremental(&ds, &seq, &TrainConfig { memory_capacity: 0, ..config(Strategy::Ssil, 2) });
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn finetune_forgets_first_task() {
    let ds = generate_synthetic(&GeneratorSpec {
        num_classes: 8,
        train_per_class: 20,
        test_per_class: 10,
        d: 8,
        frames: 2,
        cells: 2,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let seq = build_task_sequence(&classes(8), 4, 2, 1).unwrap();
    let out = run(&ds, &seq, &config(Strategy::Finetune, 20));
    let first: Vec<f64> = (0..4).map(|t| out.matrix.get(t, 0).unwrap()).collect();
    assert!(first[3] < first[0], "{first:?}");
}

#[test]
fn blow_up_is_reported_as_divergence() {
    let ds = dataset(4, 0);
    let seq = build_task_sequence(&classes(4), 1, 4, 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e300,
        ..config(Strategy::Finetune, 3)
    };
    match run_incremental(&ds, &seq, &cfg) {
        Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
    let mut log = Vec::new();
    assert!(run_incremental_logged(&ds, &seq, &cfg, &mut log).is_err());
    assert!(matches!(log.first(), Some(RunEvent::StepStarted { step: 1, .. })));
}

#[test]
fn logged_run_matches_plain_run() {
    let ds = dataset(4, 0);
    let seq = build_task_sequence(&classes(4), 2, 2, 0).unwrap();
    let cfg = config(Strategy::Avcil, 2);
    let plain = run(&ds, &seq, &cfg);
    let mut log = Vec::new();
    let logged = run_incremental_logged(&ds, &seq, &cfg, &mut log).unwrap();
    assert_eq!(log, plain.log);
    assert_eq!(logged.log, plain.log);
    assert_eq!(logged.matrix, plain.matrix);
    assert_eq!(logged.step_seconds.len(), 2);
}

#[test]
fn icarl_variants_share_a_trajectory() {
    let ds = dataset(4, 0);
    let seq = build_task_sequence(&classes(4), 2, 2, 0).unwrap();
    let fc = run(&ds, &seq, &config(Strategy::IcarlFc, 3));
    let nme = run(&ds, &seq, &config(Strategy::IcarlNme, 3));
    for (a, b) in fc.step_params.iter().zip(&nme.step_params) {
        assert!(a.bit_eq(b));
    }
}
