//! Synthetic stand-ins for frozen encoder outputs.
//!
//! Every class owns an audio mean and a visual "object" mean. A visual sample
//! places the object in one random cell of some frames and fills the remaining
//! cells with noise or, optionally, with other classes' objects, so
//! audio-guided attention has something to find.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureDataset, FeatureSample, Geometry, Manifest, Split};
use crate::error::{ensure, Result};
use crate::rng::{stream, Purpose};

/// Probability that the object is visible in a given frame.
const FRAME_PRESENCE: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// Audio and visual means share a per-class latent direction.
    Aligned,
    /// Class = (a, b); `a` lives only in audio, `b` only in the visual stream.
    XorPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub mode: GeneratorMode,
    pub num_classes: usize,
    pub train_per_class: usize,
    #[serde(default)]
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub d: usize,
    pub frames: usize,
    pub cells: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Number of audio groups |A| in `xor_pairs` mode; |B| = classes / |A|.
    #[serde(default = "default_xor_groups")]
    pub xor_audio_groups: usize,
    /// Probability that a non-object cell shows another class's object.
    #[serde(default)]
    pub distractor_prob: f64,
}

fn default_xor_groups() -> usize {
    4
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            mode: GeneratorMode::Aligned,
            num_classes: 16,
            train_per_class: 30,
            val_per_class: 0,
            test_per_class: 10,
            d: 16,
            frames: 4,
            cells: 4,
            separation: 3.0,
            noise_sigma: 1.0,
            seed: 0,
            xor_audio_groups: default_xor_groups(),
            distractor_prob: 0.0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.d > 0, "d must be positive");
        ensure!(self.frames > 0, "frames must be positive");
        ensure!(self.cells > 0, "cells must be positive");
        ensure!(self.num_classes > 0, "num_classes must be positive");
        ensure!(
            self.separation > 0.0 && self.separation.is_finite(),
            "separation must be positive, got {}",
            self.separation
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise_sigma must be non-negative, got {}",
            self.noise_sigma
        );
        ensure!(
            (0.0..=1.0).contains(&self.distractor_prob),
            "distractor_prob must lie in [0, 1], got {}",
            self.distractor_prob
        );
        if self.mode == GeneratorMode::XorPairs {
            ensure!(
                self.xor_audio_groups > 0 && self.num_classes.is_multiple_of(self.xor_audio_groups),
                "xor_pairs needs num_classes divisible by xor_audio_groups ({} / {})",
                self.num_classes,
                self.xor_audio_groups
            );
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            d: self.d,
            frames: self.frames,
            cells: self.cells,
        }
    }

    fn visual_groups(&self) -> usize {
        self.num_classes / self.xor_audio_groups
    }
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

fn noisy<'a>(mean: &'a [f64], sigma: f64, rng: &mut ChaCha8Rng) -> impl Iterator<Item = f64> + 'a {
    let noise: Vec<f64> = (0..mean.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect();
    mean.iter()
        .zip(noise)
        .map(|(m, n)| to_f32_precision(m + n))
}

fn visual_sample(
    object: &[f64],
    distractors: &[&[f64]],
    distractor_prob: f64,
    g: Geometry,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut present: Vec<bool> = (0..g.frames)
        .map(|_| rng.random_bool(FRAME_PRESENCE))
        .collect();
    if !present.iter().any(|&p| p) {
        present[rng.random_range(0..g.frames)] = true;
    }
    let zeros = vec![0.0; g.d];
    let mut out = Vec::with_capacity(g.visual_len());
    for &here in &present {
        let hot = rng.random_range(0..g.cells);
        for s in 0..g.cells {
            let mean = if here && s == hot {
                object
            } else if !distractors.is_empty() && distractor_prob > 0.0 && rng.random_bool(distractor_prob) {
                distractors[rng.random_range(0..distractors.len())]
            } else {
                &zeros
            };
            out.extend(noisy(mean, sigma, rng));
        }
    }
    out
}

/// Deterministic synthetic dataset described by `spec`.
pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    match spec.mode {
        GeneratorMode::Aligned => generate_aligned(spec),
        GeneratorMode::XorPairs => {
            let order: Vec<usize> = (0..spec.visual_groups()).collect();
            generate_xor_with_visual_order(spec, &order)
        }
    }
}

fn splits(spec: &GeneratorSpec) -> impl Iterator<Item = Split> {
    std::iter::repeat_n(Split::Train, spec.train_per_class)
        .chain(std::iter::repeat_n(Split::Val, spec.val_per_class))
        .chain(std::iter::repeat_n(Split::Test, spec.test_per_class))
}

fn generate_aligned(spec: &GeneratorSpec) -> Result<FeatureDataset> {
    let g = spec.geometry();
    let mut means_rng = stream(spec.seed, Purpose::ClassMeans, 0);
    let mut audio_means = Vec::new();
    let mut visual_means = Vec::new();
    for _ in 0..spec.num_classes {
        let shared = unit_vector(g.d, &mut means_rng);
        let own = unit_vector(g.d, &mut means_rng);
        let mixed: Vec<f64> = shared.iter().zip(&own).map(|(a, b)| a + 0.75 * b).collect();
        let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
        audio_means.push(scaled(&shared, spec.separation));
        visual_means.push(scaled(&mixed, spec.separation / norm));
    }
    let mut audio_rng = stream(spec.seed, Purpose::AudioNoise, 0);
    let mut visual_rng = stream(spec.seed, Purpose::VisualNoise, 0);
    let mut samples = Vec::new();
    for c in 0..spec.num_classes {
        for split in splits(spec) {
            let audio = noisy(&audio_means[c], spec.noise_sigma, &mut audio_rng).collect();
            let others: Vec<&[f64]> = (0..spec.num_classes)
                .filter(|&o| o != c)
                .map(|o| visual_means[o].as_slice())
                .collect();
            let visual = visual_sample(&visual_means[c], &others, spec.distractor_prob, g, spec.noise_sigma, &mut visual_rng);
            samples.push(FeatureSample {
                sample_id: samples.len() as u32,
                label: c as u32,
                split,
                audio,
                visual,
            });
        }
    }
    let mut ds = FeatureDataset::new(g, spec.num_classes, samples)?;
    ds.manifest = Manifest {
        class_names: (0..spec.num_classes).map(|c| format!("class_{c:02}")).collect(),
        generator: Some(spec.clone()),
        seed: Some(spec.seed),
    };
    Ok(ds)
}

/// `xor_pairs` generation with class `c` showing visual group
/// `visual_order[c % |B|]`. Audio draws never depend on the visual group.
pub(crate) fn generate_xor_with_visual_order(
    spec: &GeneratorSpec,
    visual_order: &[usize],
) -> Result<FeatureDataset> {
    spec.validate()?;
    let g = spec.geometry();
    let groups_a = spec.xor_audio_groups;
    let groups_b = spec.visual_groups();
    ensure!(
        visual_order.len() == groups_b,
        "visual order must list {} groups",
        groups_b
    );
    let mut audio_mean_rng = stream(spec.seed, Purpose::ClassMeans, 1);
    let audio_means: Vec<Vec<f64>> = (0..groups_a)
        .map(|_| scaled(&unit_vector(g.d, &mut audio_mean_rng), spec.separation))
        .collect();
    let mut visual_mean_rng = stream(spec.seed, Purpose::ClassMeans, 2);
    let visual_means: Vec<Vec<f64>> = (0..groups_b)
        .map(|_| scaled(&unit_vector(g.d, &mut visual_mean_rng), spec.separation))
        .collect();

    let mut audio_rng = stream(spec.seed, Purpose::AudioNoise, 1);
    let mut visual_rng = stream(spec.seed, Purpose::VisualNoise, 1);
    let mut samples = Vec::new();
    for c in 0..spec.num_classes {
        let a = c / groups_b;
        let b = visual_order[c % groups_b];
        for split in splits(spec) {
            let audio = noisy(&audio_means[a], spec.noise_sigma, &mut audio_rng).collect();
            let visual = visual_sample(&visual_means[b], &[], 0.0, g, spec.noise_sigma, &mut visual_rng);
            samples.push(FeatureSample {
                sample_id: samples.len() as u32,
                label: c as u32,
                split,
                audio,
                visual,
            });
        }
    }
    let mut ds = FeatureDataset::new(g, spec.num_classes, samples)?;
    ds.manifest = Manifest {
        class_names: (0..spec.num_classes)
            .map(|c| format!("a{}_b{}", c / groups_b, c % groups_b))
            .collect(),
        generator: Some(spec.clone()),
        seed: Some(spec.seed),
    };
    Ok(ds)
}
