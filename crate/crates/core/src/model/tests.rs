use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datasets::{FeatureSample, Geometry, Split};
use crate::diffmath::grad_check;

fn geometry(d: usize, frames: usize, cells: usize) -> Geometry {
    Geometry { d, frames, cells }
}

fn random_samples(g: Geometry, n: usize, seed: u64) -> Vec<FeatureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| FeatureSample {
            sample_id: i as u32,
            label: 0,
            split: Split::Train,
            audio: (0..g.d).map(|_| rng.random_range(-1.5..1.5)).collect(),
            visual: (0..g.visual_len()).map(|_| rng.random_range(-1.5..1.5)).collect(),
        })
        .collect()
}

fn batch(samples: &[FeatureSample], g: Geometry) -> Batch {
    Batch::from_samples(&samples.iter().collect::<Vec<_>>(), g).unwrap()
}

fn at(m: &Tensor, r: usize, c: usize) -> f64 {
    m.data()[r * m.shape()[1] + c]
}

/// Row vector times matrix, one sample at a time.
fn vecmat(x: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.shape()[1]).map(|j| x.iter().enumerate().map(|(i, v)| v * at(m, i, j)).sum()).collect()
}

struct Naive {
    spatial: Vec<f64>,
    temporal: Vec<f64>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

/// Scalar-loop evaluation of attention, fusion and the classifier.
fn naive(p: &ModelParams, s: &FeatureSample, g: Geometry) -> Naive {
    let (d, frames, cells) = (g.d, g.frames, g.cells);
    let score_a: Vec<f64> = vecmat(&s.audio, &p.w_a).iter().map(|v| v.tanh()).collect();
    let cell = |l: usize, c: usize| &s.visual[(l * cells + c) * d..(l * cells + c + 1) * d];
    let score_v: Vec<Vec<Vec<f64>>> = (0..frames)
        .map(|l| (0..cells).map(|c| vecmat(cell(l, c), &p.w_v).iter().map(|v| v.tanh()).collect()).collect())
        .collect();
    let mut spatial = vec![0.0; frames * cells * d];
    let mut frame_score = vec![0.0; frames * d];
    let mut per_frame = vec![0.0; frames * d];
    for l in 0..frames {
        for k in 0..d {
            let z: f64 = (0..cells).map(|c| (score_v[l][c][k] * score_a[k]).exp()).sum();
            for c in 0..cells {
                let w = (score_v[l][c][k] * score_a[k]).exp() / z;
                spatial[(l * cells + c) * d + k] = w;
                frame_score[l * d + k] += w * score_v[l][c][k];
                per_frame[l * d + k] += w * cell(l, c)[k];
            }
        }
    }
    let mut temporal = vec![0.0; frames * d];
    let mut pooled = vec![0.0; d];
    for k in 0..d {
        let z: f64 = (0..frames).map(|l| frame_score[l * d + k].exp()).sum();
        for l in 0..frames {
            let w = frame_score[l * d + k].exp() / z;
            temporal[l * d + k] = w;
            pooled[k] += w * per_frame[l * d + k];
        }
    }
    let ha = vecmat(&s.audio, &p.u_a);
    let hv = vecmat(&pooled, &p.u_v);
    let fused: Vec<f64> = ha.iter().zip(&hv).map(|(a, v)| a.tanh() + v.tanh()).collect();
    let logits = (0..p.num_classes)
        .map(|c| p.cls_bias.data()[c] + (0..d).map(|k| fused[k] * at(&p.cls_weight, c, k)).sum::<f64>())
        .collect();
    Naive {
        spatial,
        temporal,
        pooled,
        logits,
    }
}

#[test]
fn forward_matches_scalar_loops() {
    let g = geometry(5, 3, 4);
    let p = init_params(5, 6, 3).unwrap();
    let samples = random_samples(g, 4, 11);
    let out = infer(&p, &batch(&samples, g), Modality::Audiovisual).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let want = naive(&p, s, g);
        let maps = out.maps(i).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(maps.spatial.data(), &want.spatial));
        assert!(close(maps.temporal.data(), &want.temporal));
        assert!(close(out.attended_visual.row(i), &want.pooled));
        assert!(close(out.logits.row(i), &want.logits));
    }
}

#[test]
fn zero_audio_gives_uniform_spatial_attention() {
    let g = geometry(3, 2, 5);
    let p = init_params(3, 2, 0).unwrap();
    let mut samples = random_samples(g, 2, 1);
    for s in &mut samples {
        s.audio.iter_mut().for_each(|v| *v = 0.0);
    }
    let out = infer(&p, &batch(&samples, g), Modality::Audiovisual).unwrap();
    for v in out.spatial.unwrap().data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn single_frame_temporal_weights_are_one() {
    let g = geometry(4, 1, 3);
    let p = init_params(4, 3, 0).unwrap();
    let out = infer(&p, &batch(&random_samples(g, 3, 2), g), Modality::Audiovisual).unwrap();
    assert!(out.temporal.unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn attention_is_normalized() {
    let g = geometry(6, 4, 5);
    for seed in 0..4 {
        let p = init_params(6, 4, seed).unwrap();
        let out = infer(&p, &batch(&random_samples(g, 3, seed + 7), g), Modality::Audiovisual).unwrap();
        for i in 0..3 {
            let m = out.maps(i).unwrap();
            for l in 0..4 {
                for k in 0..6 {
                    let s: f64 = (0..5).map(|c| m.spatial.data()[(l * 5 + c) * 6 + k]).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
            for k in 0..6 {
                let s: f64 = (0..4).map(|l| m.temporal.data()[l * 6 + k]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn batch_permutation_equivariance() {
    let g = geometry(4, 3, 2);
    let p = init_params(4, 5, 9).unwrap();
    let samples = random_samples(g, 5, 3);
    let perm = [3, 0, 4, 1, 2];
    let permuted: Vec<FeatureSample> = perm.iter().map(|&i| samples[i].clone()).collect();
    let a = infer(&p, &batch(&samples, g), Modality::Audiovisual).unwrap();
    let b = infer(&p, &batch(&permuted, g), Modality::Audiovisual).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(a.logits.row(i), b.logits.row(j));
        assert_eq!(a.spatial.as_ref().unwrap().row(i), b.spatial.as_ref().unwrap().row(j));
    }
}

#[test]
fn unimodal_paths() {
    let g = geometry(3, 2, 2);
    let p = init_params(3, 2, 4).unwrap();
    let samples = random_samples(g, 2, 5);
    let audio = infer(&p, &batch(&samples, g), Modality::Audio).unwrap();
    let visual = infer(&p, &batch(&samples, g), Modality::Visual).unwrap();
    assert!(audio.spatial.is_none() && visual.temporal.is_none());
    for (i, s) in samples.iter().enumerate() {
        let fa: Vec<f64> = vecmat(&s.audio, &p.u_a).iter().map(|v| v.tanh()).collect();
        let mean: Vec<f64> = (0..3).map(|k| (0..4).map(|c| s.visual[c * 3 + k]).sum::<f64>() / 4.0).collect();
        let fv: Vec<f64> = vecmat(&mean, &p.u_v).iter().map(|v| v.tanh()).collect();
        for k in 0..3 {
            assert!((audio.fused.row(i)[k] - fa[k]).abs() < 1e-12);
            assert!((visual.fused.row(i)[k] - fv[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn gradients_for_every_parameter() {
    let g = geometry(3, 2, 3);
    let p = init_params(3, 4, 1).unwrap();
    let b = batch(&random_samples(g, 2, 8), g);
    for which in 0..6 {
        let x = p.buffers()[which].clone();
        let err = grad_check(
            |t, v| {
                let mut pv = p.register(t, false);
                match which {
                    0 => pv.w_a = v,
                    1 => pv.w_v = v,
                    2 => pv.u_a = v,
                    3 => pv.u_v = v,
                    4 => pv.cls_weight = v,
                    _ => pv.cls_bias = v,
                }
                let tr = forward(t, &pv, &b, Modality::Audiovisual)?;
                let lsm = t.log_softmax(tr.logits, 1)?;
                let picked = t.gather(lsm, &[1, 3])?;
                let spa = t.tanh(tr.spatial.unwrap());
                let a = t.mean_all(picked);
                let s = t.sum_all(spa);
                t.add(a, s)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "buffer {which}: {err}");
    }
}

#[test]
fn expansion_preserves_old_logits() {
    let g = geometry(4, 2, 2);
    let p = init_params(4, 3, 2).unwrap();
    let q = expand_classifier(&p, 2, 2).unwrap();
    assert_eq!(q.num_classes, 5);
    assert_eq!(&q.cls_weight.data()[..12], p.cls_weight.data());
    assert_eq!(&q.cls_bias.data()[3..], &[0.0, 0.0]);
    let b = batch(&random_samples(g, 3, 4), g);
    let before = infer(&p, &b, Modality::Audiovisual).unwrap();
    let after = infer(&q, &b, Modality::Audiovisual).unwrap();
    for i in 0..3 {
        assert_eq!(before.logits.row(i), &after.logits.row(i)[..3]);
    }
    assert!(expand_classifier(&p, 0, 2).is_err());
}

#[test]
fn init_is_seeded() {
    assert!(init_params(5, 3, 1).unwrap().bit_eq(&init_params(5, 3, 1).unwrap()));
    assert!(!init_params(5, 3, 1).unwrap().bit_eq(&init_params(5, 3, 2).unwrap()));
    let p = init_params(4, 2, 0).unwrap();
    assert!(p.buffers().iter().all(|t| t.data().iter().all(|v| v.abs() <= 0.5)));
}

#[test]
fn snapshot_is_independent() {
    let mut p = init_params(3, 2, 0).unwrap();
    let snap = snapshot(&p);
    p.w_a.data_mut()[0] += 1.0;
    assert_ne!(snap.w_a.data()[0], p.w_a.data()[0]);
    let mut t = Tape::new();
    let vars = snap.register(&mut t);
    assert!(vars.all().iter().all(|&v| !t.requires_grad(v)));
}

#[test]
fn checkpoint_round_trip() {
    let p = expand_classifier(&init_params(4, 3, 5).unwrap(), 2, 5).unwrap();
    let bytes = encode_checkpoint(&p).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert_eq!(bytes.len(), 16 + 8 * (4 * 16 + 5 * 4 + 5));
    assert!(decode_checkpoint(&bytes).unwrap().bit_eq(&p));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.avcp");
    save_checkpoint(&p, &path).unwrap();
    assert!(load_checkpoint(&path).unwrap().bit_eq(&p));
}

#[test]
fn checkpoint_corruption() {
    let p = init_params(2, 2, 0).unwrap();
    let bytes = encode_checkpoint(&p).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(crate::Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad), Err(crate::Error::Format { offset: 4, .. })));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 3]),
        Err(crate::Error::Format { .. })
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long).is_err());
}
