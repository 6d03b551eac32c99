//! Seeded experiments: rooms x loudspeaker subsets x utterance draws, each
//! scene separated by every configured method and scored with SDR.

mod run;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustics::{ArraySpec, HeadGeometry, ReflectionTap, Reflector, RoomSpec, Vec3};
use crate::dsp::{StftParams, Waveform};
use crate::em::{EmConfig, SourceInit, Variant};
use crate::error::{Error, Result};
use crate::eval::{mixture_count, Method};
use crate::speech::synthetic_utterance;
use crate::wav::read_mono;

pub use run::{
    build_positions, position_rirs, render_scene, run_experiment, run_scene, score_separation, separate, synthesize_position, EmTrace,
    ExperimentOutcome, PositionAssets, RenderedScene, RunManifest, RunReport, SceneFailure, SceneResult, Separation,
};

/// Mixes a base seed with a path of indices (SplitMix64 finaliser per step).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut x = base;
    for p in path {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomScenario {
    pub name: String,
    pub room: RoomSpec,
    /// Scale the reflections of each BRIR to reach this DRR, dB.
    #[serde(default)]
    pub target_drr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum UtterancePool {
    /// Seeded speech-like signals.
    Synthetic { count: usize, seed: u64 },
    /// Mono WAV files at the experiment sample rate.
    Files { paths: Vec<PathBuf> },
}

impl UtterancePool {
    pub fn len(&self) -> usize {
        match self {
            UtterancePool::Synthetic { count, .. } => *count,
            UtterancePool::Files { paths } => paths.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every utterance, trimmed or zero-padded to `duration_s`.
    pub fn load(&self, duration_s: f64, sample_rate_hz: f64) -> Result<Vec<Waveform>> {
        let len = (duration_s * sample_rate_hz).round() as usize;
        match self {
            UtterancePool::Synthetic { count, seed } => (0..*count)
                .map(|i| synthetic_utterance(derive_seed(*seed, &[i as u64]), duration_s, sample_rate_hz).map(|w| w.fit_to(len)))
                .collect(),
            UtterancePool::Files { paths } => paths
                .iter()
                .map(|p| {
                    let w = read_mono(p)?;
                    if w.sample_rate_hz != sample_rate_hz {
                        return Err(Error::invalid(format!(
                            "{}: sample rate {} Hz, expected {sample_rate_hz} Hz",
                            p.display(),
                            w.sample_rate_hz
                        )));
                    }
                    Ok(w.fit_to(len))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sample_rate_hz: f64,
    pub rooms: Vec<RoomScenario>,
    /// Loudspeaker azimuths, degrees, positive to the left.
    pub angles_deg: Vec<f64>,
    pub source_distance_m: f64,
    pub utterances: UtterancePool,
    pub utterance_s: f64,
    /// Sources per mixture.
    pub sources: usize,
    /// Utterance draws per loudspeaker subset.
    pub combinations: usize,
    pub methods: Vec<Method>,
    pub baseline: Method,
    pub stft: StftParams,
    pub em: EmConfig,
    pub head: HeadGeometry,
    pub array_mics: usize,
    pub array_radius_m: f64,
    /// Added to localised positions before conversion to ear delays.
    pub init_translation_m: [f64; 2],
    pub tir_db: f64,
    pub snr_db: Option<f64>,
    /// Hamming window around the direct sound for SDR references.
    pub reference_window_ms: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000.0,
            rooms: vec![RoomScenario {
                name: "floor".into(),
                room: RoomSpec {
                    reflectors: vec![Reflector::floor(0.8)],
                    rt60_s: 0.3,
                    tail_to_direct_db: -6.0,
                    ..RoomSpec::anechoic()
                },
                target_drr_db: None,
            }],
            angles_deg: vec![-60.0, -30.0, 0.0, 30.0, 60.0],
            source_distance_m: 1.2,
            utterances: UtterancePool::Synthetic { count: 15, seed: 1 },
            utterance_s: 3.0,
            sources: 2,
            combinations: 3,
            methods: vec![
                Method::Em(Variant::Messl),
                Method::Em(Variant::IcMessl),
                Method::Em(Variant::ErMessl),
                Method::Em(Variant::EricMessl),
                Method::Oracle,
                Method::Random,
            ],
            baseline: Method::Em(Variant::Messl),
            stft: StftParams::default(),
            em: EmConfig::default(),
            head: HeadGeometry::default(),
            array_mics: 8,
            array_radius_m: 0.106,
            init_translation_m: [0.0, 0.0],
            tir_db: 0.0,
            snr_db: None,
            reference_window_ms: 5.0,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        self.stft.validate()?;
        self.em.validate()?;
        if self.rooms.is_empty() {
            return Err(Error::invalid("no rooms configured"));
        }
        for (i, r) in self.rooms.iter().enumerate() {
            r.room.validate()?;
            if self.rooms[..i].iter().any(|o| o.name == r.name) {
                return Err(Error::invalid(format!("room name '{}' repeated", r.name)));
            }
        }
        for (i, a) in self.angles_deg.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::invalid("angles must be finite"));
            }
            if self.angles_deg[..i].iter().any(|b| (a - b).abs() < 1e-9) {
                return Err(Error::invalid(format!("angle {a} repeated")));
            }
        }
        if self.sources < 2 {
            return Err(Error::invalid("mixtures need at least two sources"));
        }
        if self.angles_deg.len() < self.sources {
            return Err(Error::invalid(format!(
                "{} angles cannot host {} sources",
                self.angles_deg.len(),
                self.sources
            )));
        }
        if self.combinations == 0 {
            return Err(Error::invalid("combinations must be at least 1"));
        }
        if self.utterances.len() < self.sources {
            return Err(Error::invalid(format!(
                "utterance pool of {} is smaller than {} sources",
                self.utterances.len(),
                self.sources
            )));
        }
        if let UtterancePool::Files { paths } = &self.utterances {
            if let Some(p) = paths.iter().find(|p| !p.is_file()) {
                return Err(Error::invalid(format!("utterance file {} not found", p.display())));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods configured"));
        }
        if !(self.source_distance_m > self.head.radius_m) || !(self.utterance_s > 0.0) || !(self.reference_window_ms > 0.0) {
            return Err(Error::invalid("distance, utterance length and reference window must be positive"));
        }
        if self.array_mics < 2 || !(self.array_radius_m > 0.0) {
            return Err(Error::invalid("array needs two or more microphones and a positive radius"));
        }
        Ok(())
    }

    pub fn array(&self) -> ArraySpec {
        ArraySpec::ring(self.array_mics, self.array_radius_m, self.head.center)
    }

    /// Scenes per method: rooms x C(angles, sources) x combinations.
    pub fn expected_scenes(&self) -> usize {
        self.rooms.len() * mixture_count(self.angles_deg.len(), self.sources, self.combinations)
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every scene in a fixed order.
    pub fn scenes(&self) -> Vec<SceneSpec> {
        let mut out = Vec::with_capacity(self.expected_scenes());
        for (r, room) in self.rooms.iter().enumerate() {
            for (c, subset) in combinations(self.angles_deg.len(), self.sources).into_iter().enumerate() {
                for u in 0..self.combinations {
                    let seed = derive_seed(self.seed, &[2, r as u64, c as u64, u as u64]);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let utterances = rand::seq::index::sample(&mut rng, self.utterances.len(), self.sources).into_vec();
                    let tag: Vec<String> = subset.iter().map(|a| format!("a{a}")).collect();
                    out.push(SceneSpec {
                        id: format!("{}-{}-u{u}", room.name, tag.join("-")),
                        room: r,
                        angles: subset.clone(),
                        utterances,
                        seed,
                    });
                }
            }
        }
        out
    }
}

/// Index subsets of size `k` from `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// One mixture: indices into the room, angle and utterance lists. Source 0
/// is the first angle of the subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub room: usize,
    pub angles: Vec<usize>,
    pub utterances: Vec<usize>,
    pub seed: u64,
}

/// Sidecar of a multichannel array RIR file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySidecar {
    pub array: ArraySpec,
    pub head: HeadGeometry,
    pub source: Vec3,
    pub taps: Vec<Vec<ReflectionTap>>,
    pub sample_rate_hz: f64,
}

/// Initialisation handed to the separator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitFile {
    pub sample_rate_hz: f64,
    pub stft: StftParams,
    pub sources: Vec<SourceInit>,
}

impl InitFile {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.sources.is_empty() {
            return Err(Error::invalid("init file lists no sources"));
        }
        let bins = self.stft.num_bins();
        for s in &self.sources {
            if s.ild_mean_db.len() != bins {
                return Err(Error::mismatch(format!("{bins} ILD bins"), s.ild_mean_db.len()));
            }
            s.comb.validate()?;
        }
        Ok(())
    }
}
