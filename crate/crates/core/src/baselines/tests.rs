use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datasets::{FeatureSample, Geometry, Split};
use crate::diffmath::{grad_check, Tensor};
use crate::metrics::{nme_classify, predict};
use crate::model::{forward, infer, init_params, Batch, Modality, ModelParams};
use crate::objectives::ss_ce;

const G: Geometry = Geometry { d: 8, frames: 3, cells: 4 };

fn samples(n: usize, seed: u64) -> Vec<FeatureSample> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| FeatureSample {
            sample_id: i as u32,
            label: (i % 5) as u32,
            split: Split::Train,
            audio: (0..G.d).map(|_| r.random_range(-1.0..1.0)).collect(),
            visual: (0..G.visual_len()).map(|_| r.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

fn batch(s: &[FeatureSample]) -> Batch {
    Batch::from_samples(&s.iter().collect::<Vec<_>>(), G).unwrap()
}

fn bf_ce(logits: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[labels[i]].exp() / z).ln()
        })
        .sum::<f64>()
        / n as f64
}

fn bf_kd(logits: &Tensor, teacher: &Tensor) -> f64 {
    let (n, w) = (teacher.shape()[0], teacher.shape()[1]);
    let sm = |x: &[f64]| {
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        x.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
    };
    (0..n)
        .map(|i| {
            let p = sm(&logits.row(i)[..w]);
            let q = sm(teacher.row(i));
            p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}

struct Setup {
    params: ModelParams,
    batch: Batch,
    teacher: Inference,
    labels: Vec<usize>,
}

fn setup(seed: u64) -> Setup {
    let s = samples(6, seed);
    let batch = batch(&s);
    let teacher = infer(&init_params(G.d, 3, seed + 1).unwrap(), &batch, Modality::Audiovisual).unwrap();
    Setup {
        params: init_params(G.d, 5, seed).unwrap(),
        batch,
        teacher,
        labels: vec![0, 4, 2, 1, 3, 3],
    }
}

fn eval(s: &Setup, f: impl FnOnce(&mut Tape, &ForwardTrace) -> Result<Var>) -> f64 {
    let mut t = Tape::new();
    let pv = s.params.register(&mut t, true);
    let tr = forward(&mut t, &pv, &s.batch, Modality::Audiovisual).unwrap();
    let l = f(&mut t, &tr).unwrap();
    t.value(l).item()
}

#[test]
fn finetune_is_plain_cross_entropy() {
    let s = setup(0);
    let logits = infer(&s.params, &s.batch, Modality::Audiovisual).unwrap().logits;
    let ft = eval(&s, |t, tr| finetune_loss(t, tr, &s.labels));
    let layout = TaskLayout::new(vec![5]).unwrap();
    let ss = eval(&s, |t, tr| ss_ce(t, tr.logits, &s.labels, &layout));
    assert_eq!(ft.to_bits(), ss.to_bits());
    assert!((ft - bf_ce(&logits, &s.labels)).abs() < 1e-12);

    let mut zero = s.params.clone();
    zero.cls_weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let z = Setup { params: zero, ..setup(0) };
    assert!((eval(&z, |t, tr| finetune_loss(t, tr, &z.labels)) - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn lwf_and_icarl() {
    let s = setup(1);
    let logits = infer(&s.params, &s.batch, Modality::Audiovisual).unwrap().logits;
    let lwf = eval(&s, |t, tr| lwf_loss(t, tr, Some(&s.teacher), &s.labels));
    let icarl = eval(&s, |t, tr| icarl_loss(t, tr, Some(&s.teacher), &s.labels));
    assert_eq!(lwf.to_bits(), icarl.to_bits());
    let want = bf_ce(&logits, &s.labels) + bf_kd(&logits, &s.teacher.logits);
    assert!((lwf - want).abs() < 1e-12);
    let first = eval(&s, |t, tr| lwf_loss(t, tr, None, &s.labels));
    assert!((first - bf_ce(&logits, &s.labels)).abs() < 1e-12);

    // a teacher that agrees with the current old block adds nothing
    let own = Inference {
        logits: Tensor::new(vec![6, 3], (0..6).flat_map(|i| logits.row(i)[..3].to_vec()).collect()).unwrap(),
        ..s.teacher.clone()
    };
    let same = eval(&s, |t, tr| lwf_loss(t, tr, Some(&own), &s.labels));
    assert!((same - bf_ce(&logits, &s.labels)).abs() < 1e-12);
}

#[test]
fn ssil_is_avcil_without_extras() {
    for seed in 0..3 {
        let s = setup(seed);
        let layout = TaskLayout::new(vec![3, 2]).unwrap();
        let mask = [true, false, true, false, false, true];
        let a = eval(&s, |t, tr| ssil_loss(t, tr, Some(&s.teacher), &s.labels, &layout));
        let b = eval(&s, |t, tr| {
            strategy_loss(Strategy::Avcil, t, tr, Some(&s.teacher), &s.labels, &mask, &layout, &LossWeights::none())
        });
        assert_eq!(a.to_bits(), b.to_bits());
        let first = TaskLayout::new(vec![5]).unwrap();
        let c = eval(&s, |t, tr| ssil_loss(t, tr, None, &s.labels, &first));
        let d = eval(&s, |t, tr| finetune_loss(t, tr, &s.labels));
        assert_eq!(c.to_bits(), d.to_bits());
    }
}

#[test]
fn every_baseline_loss_passes_grad_check() {
    let layout = TaskLayout::new(vec![3, 2]).unwrap();
    let mask = [true, false, true, false, false, true];
    for seed in 0..3 {
        let s = setup(seed);
        for strategy in Strategy::ALL {
            let teacher = strategy.uses_teacher().then_some(&s.teacher);
            let layout = if teacher.is_some() { layout.clone() } else { TaskLayout::new(vec![5]).unwrap() };
            let err = grad_check(
                |t, w| {
                    let mut pv = s.params.register(t, false);
                    pv.w_v = w;
                    let tr = forward(t, &pv, &s.batch, Modality::Audiovisual)?;
                    strategy_loss(strategy, t, &tr, teacher, &s.labels, &mask, &layout, &LossWeights::default())
                },
                &s.params.w_v,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{strategy}: {err}");
        }
    }
}

#[test]
fn nme_and_fc_can_disagree() {
    let params = init_params(G.d, 2, 5).unwrap();
    let pool = samples(40, 9);
    let refs: Vec<&FeatureSample> = pool.iter().collect();
    let fc = predict(&params, &refs, G, Modality::Audiovisual).unwrap();
    let zero = fc.iter().position(|&p| p == 0).expect("some sample goes to class 0");
    let one = fc.iter().position(|&p| p == 1).expect("some sample goes to class 1");
    // skewed exemplars: each class is represented by a sample the head assigns to the other
    let nme = nme_classify(&params, &[refs[zero], refs[one]], &[1, 0], &[refs[zero], refs[one]], G, Modality::Audiovisual)
        .unwrap();
    assert_eq!(nme, vec![1, 0]);
    assert_ne!(nme, vec![fc[zero], fc[one]]);
}

#[test]
fn tags_and_policies() {
    for s in Strategy::ALL {
        assert_eq!(s.tag().parse::<Strategy>().unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.tag()));
    }
    assert!("afc".parse::<Strategy>().is_err());
    for s in [Strategy::Finetune, Strategy::Lwf, Strategy::Oracle] {
        assert!(!s.uses_memory());
    }
    for s in [Strategy::Lwf, Strategy::IcarlFc, Strategy::IcarlNme, Strategy::Ssil, Strategy::Avcil] {
        assert!(s.uses_teacher());
    }
}
