use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, ExperimentConfig, SceneSpec};
use crate::acoustics::{
    calibrate_drr, direct_path_reference, render_ir, synthesize_array_rirs, synthesize_brir, ArrayRirs, BinauralIr,
    Brir, RoomSpec, Vec3,
};
use crate::dsp::{bin_frequencies, fft_convolve, stft, StftParams, Waveform};
use crate::em::{apply_masks, run_em, BinPrior, EmConfig, EmDiagnostics, SoftMask, SourceInit};
use crate::error::{Error, Result};
use crate::eval::{aggregate, image_energies, oracle_masks, random_masks, sdr, ExperimentReport, Method, SeparationScore};
use crate::init::{initialize, InitOptions, InitReport};
use crate::mixture::{mix_images, observe, render_source_images, rms_normalize, MixtureScene};
use crate::models::ic_mask;

/// Everything synthesised for one loudspeaker in one room.
#[derive(Debug, Clone)]
pub struct PositionAssets {
    pub room: usize,
    pub angle_deg: f64,
    pub brir: Brir,
    pub array: ArrayRirs,
    /// Direct sound only, for SDR references.
    pub reference: BinauralIr,
    pub init: InitReport,
}

/// BRIR and array RIRs of the loudspeaker at `angle`, with the room
/// actually used (noise seed set, DRR calibrated).
pub fn position_rirs(cfg: &ExperimentConfig, room: usize, angle: usize) -> Result<(Brir, ArrayRirs, RoomSpec)> {
    let fs = cfg.sample_rate_hz;
    let scenario = &cfg.rooms[room];
    let source = Vec3::polar(cfg.head.center, cfg.source_distance_m, cfg.angles_deg[angle].to_radians());
    let mut spec = scenario.room.clone();
    spec.noise_seed = derive_seed(cfg.seed ^ scenario.room.noise_seed, &[1, room as u64, angle as u64]);
    if let Some(drr) = scenario.target_drr_db {
        spec = calibrate_drr(&spec, source, &cfg.head, fs, drr)?;
    }
    let brir = synthesize_brir(&spec, source, &cfg.head, fs)?;
    let array = synthesize_array_rirs(&spec, source, &cfg.array(), fs)?;
    Ok((brir, array, spec))
}

/// BRIR, array RIRs and initialisation of the loudspeaker at `angle`.
pub fn synthesize_position(cfg: &ExperimentConfig, room: usize, angle: usize) -> Result<PositionAssets> {
    let fs = cfg.sample_rate_hz;
    let angle_deg = cfg.angles_deg[angle];
    let (brir, array, _) = position_rirs(cfg, room, angle)?;
    let ir = render_ir(&brir, brir.natural_len() as f64 / fs)?;
    let reference = direct_path_reference(&brir, cfg.reference_window_ms)?;
    let freqs = bin_frequencies(&cfg.stft, fs);
    let init = initialize(
        &array.channels,
        &array.array,
        &cfg.head,
        &ir,
        &freqs,
        &InitOptions {
            translation_m: cfg.init_translation_m,
        },
    )?;
    Ok(PositionAssets {
        room,
        angle_deg,
        brir,
        array,
        reference,
        init,
    })
}

/// Assets of every (room, angle), indexed `[room][angle]`. Failures are kept
/// as messages so the scenes that need them can be reported.
pub fn build_positions(cfg: &ExperimentConfig) -> Vec<Vec<std::result::Result<PositionAssets, String>>> {
    let jobs: Vec<(usize, usize)> = (0..cfg.rooms.len())
        .flat_map(|r| (0..cfg.angles_deg.len()).map(move |a| (r, a)))
        .collect();
    let mut flat = jobs
        .par_iter()
        .map(|&(r, a)| synthesize_position(cfg, r, a).map_err(|e| e.to_string()))
        .collect::<Vec<_>>()
        .into_iter();
    (0..cfg.rooms.len())
        .map(|_| flat.by_ref().take(cfg.angles_deg.len()).collect())
        .collect()
}

/// A mixture with its clean images, SDR references and initialisation.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub spec: SceneSpec,
    pub angles_deg: Vec<f64>,
    pub mixture: (Waveform, Waveform),
    pub images: Vec<[Waveform; 2]>,
    /// Scaled utterance convolved with the direct sound of its BRIR.
    pub references: Vec<[Waveform; 2]>,
    pub inits: Vec<SourceInit>,
}

pub fn render_scene(
    cfg: &ExperimentConfig,
    spec: &SceneSpec,
    positions: &[PositionAssets],
    utterances: &[Waveform],
) -> Result<RenderedScene> {
    let scene = MixtureScene {
        sources: positions
            .iter()
            .zip(&spec.utterances)
            .map(|(p, &u)| (utterances[u].clone(), p.brir.clone()))
            .collect(),
        tir_db: cfg.tir_db,
        snr_db: cfg.snr_db,
        seed: derive_seed(spec.seed, &[4]),
    };
    let images = render_source_images(&scene)?;
    let mixture = mix_images(&images, scene.snr_db, scene.seed)?;
    let len = scene.len();
    let references = scene
        .sources
        .iter()
        .zip(scene.source_gains())
        .zip(positions)
        .map(|(((utt, _), gain), p)| {
            let x = rms_normalize(utt)?.scaled(gain);
            let ear = |h: &Waveform| {
                let mut y = fft_convolve(&x.samples, &h.samples);
                y.resize(len, 0.0);
                Waveform::new(y, cfg.sample_rate_hz)
            };
            Ok([ear(&p.reference.left)?, ear(&p.reference.right)?])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderedScene {
        spec: spec.clone(),
        angles_deg: positions.iter().map(|p| p.angle_deg).collect(),
        mixture,
        images,
        references,
        inits: positions.iter().map(|p| p.init.source_init()).collect(),
    })
}

/// EM trace kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub loglik_trace: Vec<f64>,
    pub diagnostics: EmDiagnostics,
    pub beta: Vec<f64>,
}

pub struct Separation {
    pub method: Method,
    /// Every mask produced, garbage included.
    pub masks: Vec<SoftMask>,
    /// One stereo estimate per emitting mask.
    pub estimates: Vec<(Waveform, Waveform)>,
    pub em: Option<EmTrace>,
}

/// Separates a stereo mixture. `images` (clean source images) are needed
/// only by the oracle; `seed` only by the random masks.
pub fn separate(
    method: Method,
    mixture: (&Waveform, &Waveform),
    inits: &[SourceInit],
    stft_params: &StftParams,
    em: &EmConfig,
    images: Option<&[[Waveform; 2]]>,
    seed: u64,
) -> Result<Separation> {
    let obs = observe(mixture.0, mixture.1, stft_params)?;
    let (masks, trace) = match method {
        Method::Em(variant) => {
            let config = EmConfig { variant, ..em.clone() };
            let prior = if variant.uses_ic() {
                let kappa = config.kappa.kappa(mixture.0.sample_rate_hz)?;
                Some(BinPrior::from_ic(&ic_mask(&obs.left_spec, &obs.right_spec, kappa)?))
            } else {
                None
            };
            let out = run_em(&obs, inits, &config, prior.as_ref())?;
            let trace = EmTrace {
                loglik_trace: out.state.loglik_trace.clone(),
                diagnostics: out.state.diagnostics.clone(),
                beta: out.state.beta.clone(),
            };
            (out.masks, Some(trace))
        }
        Method::Oracle => {
            let images = images.ok_or_else(|| Error::invalid("the oracle needs the clean source images"))?;
            let specs = images
                .iter()
                .map(|[l, r]| Ok([stft(l, stft_params)?, stft(r, stft_params)?]))
                .collect::<Result<Vec<_>>>()?;
            (oracle_masks(&image_energies(&specs)?)?, None)
        }
        Method::Random => (random_masks(obs.frames(), obs.bins(), inits.len(), seed)?, None),
    };
    let emitting: Vec<SoftMask> = masks.iter().filter(|m| m.emitting).cloned().collect();
    let estimates = apply_masks(&obs.left_spec, &obs.right_spec, &emitting)?;
    Ok(Separation {
        method,
        masks,
        estimates,
        em: trace,
    })
}

/// One score row per target source.
pub fn score_separation(scene: &RenderedScene, sep: &Separation) -> Result<Vec<SeparationScore>> {
    if sep.estimates.len() != scene.references.len() {
        return Err(Error::mismatch(scene.references.len(), sep.estimates.len()));
    }
    sep.estimates
        .iter()
        .zip(&scene.references)
        .enumerate()
        .map(|(l, ((el, er), [rl, rr]))| {
            let other = if l == 0 { 1 } else { 0 };
            Ok(SeparationScore {
                scene_id: scene.spec.id.clone(),
                method: sep.method,
                target_angle_deg: scene.angles_deg[l],
                interferer_angle_deg: scene.angles_deg[other],
                sdr_db_left: sdr(el, rl)?,
                sdr_db_right: sdr(er, rr)?,
                seed: scene.spec.seed,
            })
        })
        .collect()
}

/// Scores and EM traces of one scene.
#[derive(Debug, Clone)]
pub struct SceneResult {
    pub scores: Vec<SeparationScore>,
    pub traces: Vec<(Method, EmTrace)>,
}

pub fn run_scene(
    cfg: &ExperimentConfig,
    spec: &SceneSpec,
    positions: &[PositionAssets],
    utterances: &[Waveform],
) -> Result<SceneResult> {
    let scene = render_scene(cfg, spec, positions, utterances)?;
    let mut out = SceneResult {
        scores: Vec::new(),
        traces: Vec::new(),
    };
    for &method in &cfg.methods {
        let sep = separate(
            method,
            (&scene.mixture.0, &scene.mixture.1),
            &scene.inits,
            &cfg.stft,
            &cfg.em,
            Some(&scene.images),
            derive_seed(spec.seed, &[3]),
        )?;
        out.scores.extend(score_separation(&scene, &sep)?);
        if let Some(t) = sep.em {
            out.traces.push((method, t));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFailure {
    pub scene_id: String,
    /// "bad-input" or "numeric".
    pub status: String,
    pub error: String,
}

/// Report JSON: completion counts, failures and the aggregated scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub scenes_expected: usize,
    pub scenes_completed: usize,
    pub failures: Vec<SceneFailure>,
    #[serde(flatten)]
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    /// Files written, relative to the output directory, keyed by scene id
    /// ("" for run-level files).
    pub artifacts: BTreeMap<String, Vec<String>>,
    pub stage_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        Self {
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: BTreeMap::new(),
            stage_seconds: BTreeMap::new(),
        }
    }
}

pub struct ExperimentOutcome {
    pub report: RunReport,
    /// EM traces per completed scene, in scene order.
    pub traces: Vec<(String, Vec<(Method, EmTrace)>)>,
    pub rendered: Vec<RenderedScene>,
    pub stage_seconds: BTreeMap<String, f64>,
}

/// Runs every scene of `cfg` in parallel. Scenes that fail are recorded and
/// skipped. With `keep_scenes` the rendered mixtures are returned too.
pub fn run_experiment(cfg: &ExperimentConfig, keep_scenes: bool) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut stages = BTreeMap::new();
    let t = Instant::now();
    let utterances = cfg.utterances.load(cfg.utterance_s, cfg.sample_rate_hz)?;
    let positions = build_positions(cfg);
    stages.insert("synthesis".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let scenes = cfg.scenes();
    let results: Vec<std::result::Result<(SceneResult, Option<RenderedScene>), SceneFailure>> = scenes
        .par_iter()
        .map(|spec| {
            let fail = |status: &str, error: String| SceneFailure {
                scene_id: spec.id.clone(),
                status: status.to_string(),
                error,
            };
            let assets: Vec<PositionAssets> = spec
                .angles
                .iter()
                .map(|&a| positions[spec.room][a].clone())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| fail("bad-input", format!("initialisation failed: {e}")))?;
            let run = || -> Result<(SceneResult, Option<RenderedScene>)> {
                let res = run_scene(cfg, spec, &assets, &utterances)?;
                let rendered = if keep_scenes {
                    Some(render_scene(cfg, spec, &assets, &utterances)?)
                } else {
                    None
                };
                Ok((res, rendered))
            };
            run().map_err(|e| {
                let status = if e.is_numeric() { "numeric" } else { "bad-input" };
                fail(status, e.to_string())
            })
        })
        .collect();
    stages.insert("separation".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut scores = Vec::new();
    let mut traces = Vec::new();
    let mut rendered = Vec::new();
    let mut failures = Vec::new();
    for (spec, r) in scenes.iter().zip(results) {
        match r {
            Ok((res, scene)) => {
                scores.extend(res.scores);
                traces.push((spec.id.clone(), res.traces));
                rendered.extend(scene);
            }
            Err(f) => {
                log::warn!("scene {} failed: {}", f.scene_id, f.error);
                failures.push(f);
            }
        }
    }
    if scores.is_empty() {
        let numeric = failures.iter().any(|f| f.status == "numeric");
        let msg = failures.first().map(|f| f.error.clone()).unwrap_or_default();
        return Err(if numeric {
            Error::NonFinite { iteration: 0 }
        } else {
            Error::invalid(format!("every scene failed; first error: {msg}"))
        });
    }
    let report = aggregate(&scores, cfg.baseline)?;
    stages.insert("aggregation".to_string(), t.elapsed().as_secs_f64());
    Ok(ExperimentOutcome {
        report: RunReport {
            config_hash: cfg.hash(),
            scenes_expected: cfg.expected_scenes(),
            scenes_completed: traces.len(),
            failures,
            report,
        },
        traces,
        rendered,
        stage_seconds: stages,
    })
}
