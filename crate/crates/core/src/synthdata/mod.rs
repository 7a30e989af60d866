//! Paired weather-degraded toy images with type, property and content labels.

mod ppm;
mod scenes;
mod weather;

pub use ppm::{read_manifest, read_ppm, write_manifest, write_ppm, ManifestEntry};
pub use scenes::CONTENT_NAMES;
pub use weather::{Degradation, FlakeParams, StreakParams};

use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const K_TYPE: usize = 5;
pub const K_PROP: usize = 3;
pub const K_CONTENT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Rain,
    Haze,
    Snow,
    LowLight,
    Mix,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; K_TYPE] = [Self::Rain, Self::Haze, Self::Snow, Self::LowLight, Self::Mix];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rain => "rain",
            Self::Haze => "haze",
            Self::Snow => "snow",
            Self::LowLight => "lowlight",
            Self::Mix => "mix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Class labels for the three prompt heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptLabels {
    pub type_id: usize,
    pub property_id: usize,
    pub content_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Level in `0..3`; larger is stronger.
    pub intensity: u8,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, intensity: u8, seed: u64) -> Self {
        assert!((intensity as usize) < K_PROP, "intensity level {intensity} out of range");
        Self { kind, intensity, seed }
    }

    /// The continuous degradations this spec applies, in order.
    pub fn stages(&self) -> Vec<Degradation> {
        let l = self.intensity as usize;
        match self.kind {
            DegradationKind::Rain => vec![rain(l)],
            DegradationKind::Haze => vec![haze(l)],
            DegradationKind::Snow => vec![snow(l)],
            DegradationKind::LowLight => vec![Degradation::LowLight { gamma: [1.5, 2.5, 4.0][l] }],
            DegradationKind::Mix => {
                // rain falls in front of the haze or snow layer
                let first = if self.seed % 2 == 0 { snow(l) } else { haze(l) };
                vec![first, rain(l)]
            }
        }
    }

    pub fn labels(&self, content_id: usize) -> PromptLabels {
        PromptLabels { type_id: self.kind.index(), property_id: self.intensity as usize, content_id }
    }
}

fn rain(l: usize) -> Degradation {
    Degradation::Rain(StreakParams { amplitude: [0.3, 0.55, 0.8][l], density: [0.008, 0.014, 0.022][l], length: 0.3 })
}

fn snow(l: usize) -> Degradation {
    Degradation::Snow(FlakeParams { amplitude: [0.4, 0.6, 0.85][l], density: [0.008, 0.014, 0.022][l], radius: 1.2 })
}

fn haze(l: usize) -> Degradation {
    Degradation::Haze { transmission: [0.75, 0.55, 0.35][l], airlight: 0.9 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSample {
    pub clean: Tensor<f32>,
    pub degraded: Tensor<f32>,
    pub labels: PromptLabels,
    pub spec: DegradationSpec,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(splitmix(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Procedural scene for `content_id` (< 8) with per-seed jitter.
pub fn make_clean(content_id: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    assert!(content_id < K_CONTENT, "content id {content_id} out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, content_id as u64));
    scenes::render(content_id, h, w, &mut rng)
}

/// Applies every stage of `spec` to `clean`, seeded by `spec.seed`.
pub fn apply_degradation(clean: &Tensor<f32>, spec: &DegradationSpec) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xDE6));
    spec.stages().iter().fold(clean.clone(), |img, d| weather::apply(&img, d, &mut rng))
}

/// Applies one continuous degradation; exposed for parameter sweeps.
pub fn apply_params(clean: &Tensor<f32>, d: &Degradation, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    weather::apply(clean, d, &mut rng)
}

/// Description of the `i`-th sample of a dataset, without pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePlan {
    pub index: usize,
    pub spec: DegradationSpec,
    pub content_id: usize,
    pub clean_seed: u64,
}

impl SamplePlan {
    pub fn labels(&self) -> PromptLabels {
        self.spec.labels(self.content_id)
    }

    pub fn realize(&self, h: usize, w: usize) -> DegradationSample {
        let clean = make_clean(self.content_id, h, w, self.clean_seed);
        let degraded = apply_degradation(&clean, &self.spec);
        DegradationSample { clean, degraded, labels: self.labels(), spec: self.spec }
    }
}

/// Kinds cycle with the sample index; within each kind, (intensity, content)
/// pairs are drawn from a seeded permutation of all 24 combinations.
pub fn plan(index: usize, kinds: &[DegradationKind], seed: u64) -> SamplePlan {
    assert!(!kinds.is_empty(), "at least one degradation kind is required");
    let kind = kinds[index % kinds.len()];
    let round = index / kinds.len();
    let combos = K_PROP * K_CONTENT;
    let mut order: Vec<usize> = (0..combos).collect();
    let block = (round / combos) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (block << 8) | kind.index() as u64));
    order.shuffle(&mut rng);
    let combo = order[round % combos];
    let sample_seed = derive_seed(seed, 0x1_0000_0000 + index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    SamplePlan {
        index,
        spec: DegradationSpec::new(kind, (combo % K_PROP) as u8, rng.random()),
        content_id: combo / K_PROP,
        clean_seed: rng.random(),
    }
}

/// Lazy, deterministic stream of `n` samples.
pub fn make_dataset(
    n: usize,
    h: usize,
    w: usize,
    kinds: &[DegradationKind],
    seed: u64,
) -> impl Iterator<Item = DegradationSample> + '_ {
    assert!(n >= 1, "dataset needs at least one sample");
    (0..n).map(move |i| plan(i, kinds, seed).realize(h, w))
}

/// Producer threads: `ADSM_THREADS` if set, else available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("ADSM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Materializes the same samples as [`make_dataset`], partitioned by index
/// across producer threads.
pub fn generate(n: usize, h: usize, w: usize, kinds: &[DegradationKind], seed: u64) -> Vec<DegradationSample> {
    assert!(n >= 1, "dataset needs at least one sample");
    let threads = thread_budget().min(n);
    if threads <= 1 {
        return make_dataset(n, h, w, kinds, seed).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + chunk).min(n)).map(|i| plan(i, kinds, seed).realize(h, w)).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("producer thread panicked")).collect()
    })
}
