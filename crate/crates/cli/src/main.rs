use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use binsep::acoustics::{render_ir, BinauralIr};
use binsep::dsp::{bin_frequencies, Waveform};
use binsep::em::EmConfig;
use binsep::eval::Method;
use binsep::experiment::{
    position_rirs, render_scene, run_experiment, score_separation, separate, synthesize_position, ArraySidecar,
    ExperimentConfig, InitFile, PositionAssets, RenderedScene, RunManifest, SceneSpec,
};
use binsep::export::{read_json, write_json, write_mask, write_pgm, write_scores_csv};
use binsep::init::{init_comb_params, init_ild_prior, localize, synthetic_brir_at, InitReport};
use binsep::wav::{read_stereo, read_wav, write_wav, WavEncoding};
use binsep::{Error, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

const EXIT_BAD_INPUT: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_NUMERIC: u8 = 70;

#[derive(Parser)]
#[command(name = "binsep", version, about = "Binaural source separation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one BRIR and one array RIR set per (room, angle).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render one scene: mixture, initialisation and ground truth.
    Mix {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Scene id or index in enumeration order.
        #[arg(long, default_value = "0")]
        scene: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Localise a source and its first image from array RIRs.
    Localize {
        /// Multichannel array RIR WAV.
        #[arg(long)]
        array: PathBuf,
        /// Array sidecar JSON with microphone positions and head geometry.
        #[arg(long)]
        geometry: PathBuf,
        /// Stereo BRIR WAV; adds comb parameters and ILD prior to the report.
        #[arg(long)]
        brir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Separate a stereo mixture.
    Separate {
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        init: PathBuf,
        /// messl, ic-messl, er-messl, eric-messl, oracle or random.
        #[arg(long)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Directory written by `mix`; needed by the oracle and for scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// EM configuration JSON; missing fields take their defaults.
        #[arg(long)]
        em_config: Option<PathBuf>,
        /// Seed of the random masks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write each mask as a PGM image.
        #[arg(long)]
        pgm: bool,
    },
    /// Run every scene of a configuration and write scores and a report.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write each scene's mixture and initialisation.
        #[arg(long)]
        save_scenes: bool,
    },
}

/// Ground-truth description written by `mix`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneInfo {
    spec: SceneSpec,
    angles_deg: Vec<f64>,
    sample_rate_hz: f64,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    method: Method,
    frames: usize,
    bins: usize,
    sources: usize,
    em: Option<&'a binsep::experiment::EmTrace>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match path {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stem(cfg: &ExperimentConfig, room: usize, angle: usize) -> String {
    format!("{}-a{angle}", cfg.rooms[room].name)
}

fn write_stereo(path: &Path, pair: (&Waveform, &Waveform)) -> Result<()> {
    write_wav(path, &[pair.0, pair.1], WavEncoding::Float32)
}

fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    fs::create_dir_all(out)?;
    for room in 0..cfg.rooms.len() {
        for angle in 0..cfg.angles_deg.len() {
            let (brir, array, _) = position_rirs(&cfg, room, angle)?;
            let name = stem(&cfg, room, angle);
            let ir = render_ir(&brir, brir.natural_len() as f64 / cfg.sample_rate_hz)?;
            write_stereo(&out.join(format!("brir-{name}.wav")), (&ir.left, &ir.right))?;
            write_json(out.join(format!("brir-{name}.json")), &brir.sidecar())?;
            let chans: Vec<&Waveform> = array.channels.iter().collect();
            write_wav(out.join(format!("array-{name}.wav")), &chans, WavEncoding::Float32)?;
            write_json(
                out.join(format!("array-{name}.json")),
                &ArraySidecar {
                    array: array.array.clone(),
                    head: cfg.head,
                    source: array.source,
                    taps: array.taps.clone(),
                    sample_rate_hz: cfg.sample_rate_hz,
                },
            )?;
            log::info!("wrote {name}");
        }
    }
    Ok(())
}

fn find_scene(cfg: &ExperimentConfig, key: &str) -> Result<SceneSpec> {
    let scenes = cfg.scenes();
    let found = match key.parse::<usize>() {
        Ok(i) => scenes.get(i).cloned(),
        Err(_) => scenes.iter().find(|s| s.id == key).cloned(),
    };
    found.ok_or_else(|| Error::invalid(format!("no scene '{key}' among {} scenes", scenes.len())))
}

fn write_scene(cfg: &ExperimentConfig, scene: &RenderedScene, out: &Path, truth: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = vec![out.join("mixture.wav"), out.join("init.json")];
    write_stereo(&written[0], (&scene.mixture.0, &scene.mixture.1))?;
    write_json(
        &written[1],
        &InitFile {
            sample_rate_hz: cfg.sample_rate_hz,
            stft: cfg.stft.clone(),
            sources: scene.inits.clone(),
        },
    )?;
    if truth {
        let dir = out.join("truth");
        fs::create_dir_all(&dir)?;
        for (l, (img, r)) in scene.images.iter().zip(&scene.references).enumerate() {
            let (pi, pr) = (dir.join(format!("image-{l}.wav")), dir.join(format!("reference-{l}.wav")));
            write_stereo(&pi, (&img[0], &img[1]))?;
            write_stereo(&pr, (&r[0], &r[1]))?;
            written.extend([pi, pr]);
        }
        let p = dir.join("scene.json");
        write_json(
            &p,
            &SceneInfo {
                spec: scene.spec.clone(),
                angles_deg: scene.angles_deg.clone(),
                sample_rate_hz: cfg.sample_rate_hz,
            },
        )?;
        written.push(p);
    }
    Ok(written)
}

fn cmd_mix(config: Option<&Path>, out: &Path, key: &str, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let spec = find_scene(&cfg, key)?;
    let utterances = cfg.utterances.load(cfg.utterance_s, cfg.sample_rate_hz)?;
    let assets = spec
        .angles
        .iter()
        .map(|&a| synthesize_position(&cfg, spec.room, a))
        .collect::<Result<Vec<PositionAssets>>>()?;
    for a in &assets {
        write_json(out_path(out, &format!("localization-a{}.json", a.angle_deg))?, &a.init)?;
    }
    let scene = render_scene(&cfg, &spec, &assets, &utterances)?;
    write_scene(&cfg, &scene, out, true)?;
    Ok(())
}

fn out_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

fn cmd_localize(array: &Path, geometry: &Path, brir: Option<&Path>, out: &Path) -> Result<()> {
    let side: ArraySidecar = read_json(geometry)?;
    let channels = read_wav(array)?;
    if channels.len() != side.array.len() {
        return Err(Error::mismatch(
            format!("{} channels", side.array.len()),
            format!("{} channels", channels.len()),
        ));
    }
    let loc = localize(&channels, &side.array)?;
    match brir {
        None => write_json(out, &loc),
        Some(p) => {
            let (left, right) = read_stereo(p)?;
            let fs_hz = left.sample_rate_hz;
            let ir = BinauralIr {
                left,
                right,
                direct_toa_s: [0.0, 0.0],
            };
            let comb = init_comb_params(&loc, &side.head, &ir)?;
            let freqs = bin_frequencies(&Default::default(), fs_hz);
            let at_doa = synthetic_brir_at(&side.head, loc.direct.azimuth_rad, loc.direct.radius_m.max(0.5), fs_hz)?;
            let ild_prior = init_ild_prior(&at_doa, &freqs)?;
            write_json(
                out,
                &InitReport {
                    localization: loc,
                    comb,
                    ild_prior,
                },
            )
        }
    }
}

struct SeparateArgs<'a> {
    mixture: &'a Path,
    init: &'a Path,
    method: Method,
    out: &'a Path,
    truth: Option<&'a Path>,
    em_config: Option<&'a Path>,
    seed: u64,
    pgm: bool,
}

fn cmd_separate(a: SeparateArgs) -> Result<()> {
    let (left, right) = read_stereo(a.mixture)?;
    let init: InitFile = read_json(a.init)?;
    init.validate()?;
    if init.sample_rate_hz != left.sample_rate_hz {
        return Err(Error::mismatch(
            format!("{} Hz", init.sample_rate_hz),
            format!("{} Hz", left.sample_rate_hz),
        ));
    }
    let em: EmConfig = match a.em_config {
        Some(p) => read_json(p)?,
        None => EmConfig::default(),
    };
    em.validate()?;
    let truth = match a.truth {
        Some(dir) => {
            let info: SceneInfo = read_json(dir.join("scene.json"))?;
            let load = |kind: &str| {
                (0..init.sources.len())
                    .map(|l| {
                        let (x, y) = read_stereo(dir.join(format!("{kind}-{l}.wav")))?;
                        Ok([x, y])
                    })
                    .collect::<Result<Vec<_>>>()
            };
            Some((info, load("image")?, load("reference")?))
        }
        None => None,
    };
    if a.method == Method::Oracle && truth.is_none() {
        return Err(Error::invalid("--method oracle needs --truth"));
    }
    let sep = separate(
        a.method,
        (&left, &right),
        &init.sources,
        &init.stft,
        &em,
        truth.as_ref().map(|t| t.1.as_slice()),
        a.seed,
    )?;
    fs::create_dir_all(a.out)?;
    for (l, (x, y)) in sep.estimates.iter().enumerate() {
        write_stereo(&a.out.join(format!("source-{l}.wav")), (x, y))?;
    }
    for m in &sep.masks {
        write_mask(a.out, &format!("mask-{}", m.source_id), m)?;
        if a.pgm {
            write_pgm(a.out.join(format!("mask-{}.pgm", m.source_id)), &m.values)?;
        }
    }
    let (frames, bins) = sep.masks[0].values.shape();
    write_json(
        a.out.join("diagnostics.json"),
        &Diagnostics {
            method: a.method,
            frames,
            bins,
            sources: init.sources.len(),
            em: sep.em.as_ref(),
        },
    )?;
    if let Some((info, images, references)) = truth {
        let scene = RenderedScene {
            spec: info.spec,
            angles_deg: info.angles_deg,
            mixture: (left, right),
            images,
            references,
            inits: init.sources,
        };
        write_scores_csv(a.out.join("scores.csv"), &score_separation(&scene, &sep)?)?;
    }
    Ok(())
}

fn cmd_experiment(config: Option<&Path>, out: &Path, seed: Option<u64>, save_scenes: bool) -> Result<()> {
    let cfg = load_config(config, seed)?;
    fs::create_dir_all(out)?;
    let outcome = run_experiment(&cfg, save_scenes)?;
    let t = Instant::now();
    let mut manifest = RunManifest::new(cfg.hash());
    manifest.stage_seconds = outcome.stage_seconds;
    write_scores_csv(out.join("scores.csv"), &outcome.report.report.scores)?;
    write_json(out.join("report.json"), &outcome.report)?;
    write_json(out.join("em-traces.json"), &outcome.traces)?;
    write_json(out.join("config.json"), &cfg)?;
    manifest.artifacts.insert(
        String::new(),
        ["scores.csv", "report.json", "em-traces.json", "config.json", "manifest.json"]
            .map(String::from)
            .to_vec(),
    );
    for scene in &outcome.rendered {
        let dir = out.join("scenes").join(&scene.spec.id);
        let files = write_scene(&cfg, scene, &dir, false)?;
        manifest.artifacts.insert(
            scene.spec.id.clone(),
            files
                .iter()
                .map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string())
                .collect(),
        );
    }
    manifest.stage_seconds.insert("output".into(), t.elapsed().as_secs_f64());
    write_json(out.join("manifest.json"), &manifest)?;
    let r = &outcome.report;
    println!(
        "{} of {} scenes completed, {} failed",
        r.scenes_completed,
        r.scenes_expected,
        r.failures.len()
    );
    for m in &r.report.methods {
        let p = r
            .report
            .ttest(m.method)
            .and_then(|t| t.test)
            .map(|t| format!("p = {:.4}", t.p_value))
            .unwrap_or_else(|| "baseline".into());
        println!("{:<11} {:>7.2} dB  ({p})", m.method.name(), m.mean_sdr_db);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed),
        Command::Mix { config, out, scene, seed } => cmd_mix(config.as_deref(), &out, &scene, seed),
        Command::Localize {
            array,
            geometry,
            brir,
            out,
        } => cmd_localize(&array, &geometry, brir.as_deref(), &out),
        Command::Separate {
            mixture,
            init,
            method,
            out,
            truth,
            em_config,
            seed,
            pgm,
        } => cmd_separate(SeparateArgs {
            mixture: &mixture,
            init: &init,
            method,
            out: &out,
            truth: truth.as_deref(),
            em_config: em_config.as_deref(),
            seed,
            pgm,
        }),
        Command::Experiment {
            config,
            out,
            seed,
            save_scenes,
        } => cmd_experiment(config.as_deref(), &out, seed, save_scenes),
    }
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("BINSEP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("BINSEP_THREADS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_BAD_INPUT })
        }
    }
}
