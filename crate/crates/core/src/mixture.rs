//! Reverberant two-ear mixtures and their interaural spectrogram.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::acoustics::{render_ir, Brir};
use crate::dsp::{fft_convolve, stft, wrap_phase, Spectrogram, StftParams, Waveform};
use crate::error::{Error, Result};
use crate::grid::TfGrid;

/// Magnitude below which a time-frequency bin counts as silent.
pub const SILENCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct MixtureScene {
    pub sources: Vec<(Waveform, Brir)>,
    /// Level of source 0 relative to the remaining sources, dB.
    pub tir_db: f64,
    /// Sensor noise level relative to the mixture; `None` for no noise.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl MixtureScene {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .sources
            .first()
            .ok_or_else(|| Error::invalid("a scene needs at least one source"))?;
        let fs = first.0.sample_rate_hz;
        for (utt, brir) in &self.sources {
            if utt.sample_rate_hz != fs || brir.sample_rate_hz != fs {
                return Err(Error::mismatch(
                    format!("{fs} Hz"),
                    format!("utterance {} Hz, BRIR {} Hz", utt.sample_rate_hz, brir.sample_rate_hz),
                ));
            }
        }
        if !self.tir_db.is_finite() {
            return Err(Error::invalid("tir_db must be finite"));
        }
        Ok(())
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sources[0].0.sample_rate_hz
    }

    /// Output length: the longest utterance.
    pub fn len(&self) -> usize {
        self.sources.iter().map(|(u, _)| u.len()).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear gain applied to each RMS-normalised utterance.
    pub fn source_gains(&self) -> Vec<f64> {
        let rest = self.sources.len().saturating_sub(1).max(1) as f64;
        let other = 10f64.powf(-self.tir_db / 20.0) / rest.sqrt();
        (0..self.sources.len())
            .map(|l| if l == 0 { 1.0 } else { other })
            .collect()
    }
}

pub fn rms_normalize(wave: &Waveform) -> Result<Waveform> {
    let rms = wave.rms();
    if !(rms > 0.0) {
        return Err(Error::Silent);
    }
    Ok(wave.scaled(1.0 / rms))
}

/// Each source's contribution at both ears, after normalisation and gain,
/// truncated to the scene length.
pub fn render_source_images(scene: &MixtureScene) -> Result<Vec<[Waveform; 2]>> {
    scene.validate()?;
    let fs = scene.sample_rate_hz();
    let len = scene.len();
    scene
        .sources
        .iter()
        .zip(scene.source_gains())
        .map(|((utt, brir), gain)| {
            let x = rms_normalize(utt)?.scaled(gain);
            let ir = render_ir(brir, brir.natural_len() as f64 / fs)?;
            let ear = |h: &Waveform| {
                let mut y = fft_convolve(&x.samples, &h.samples);
                y.resize(len, 0.0);
                Waveform::new(y, fs)
            };
            Ok([ear(&ir.left)?, ear(&ir.right)?])
        })
        .collect()
}

/// Sums pre-rendered source images and adds sensor noise if requested.
pub fn mix_images(images: &[[Waveform; 2]], snr_db: Option<f64>, seed: u64) -> Result<(Waveform, Waveform)> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("no source images to mix"))?;
    let fs = first[0].sample_rate_hz;
    let len = first[0].len();
    let mut out = [vec![0.0; len], vec![0.0; len]];
    for img in images {
        for (ear, acc) in out.iter_mut().enumerate() {
            if img[ear].len() != len {
                return Err(Error::mismatch(len, img[ear].len()));
            }
            acc.iter_mut().zip(&img[ear].samples).for_each(|(a, v)| *a += v);
        }
    }
    if let Some(snr) = snr_db {
        let power = out.iter().flatten().map(|v| v * v).sum::<f64>() / (2 * len) as f64;
        let sigma = (power * 10f64.powf(-snr / 10.0)).sqrt();
        for (ear, acc) in out.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ear as u64);
            for v in acc.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * g;
            }
        }
    }
    let [l, r] = out;
    Ok((Waveform::new(l, fs)?, Waveform::new(r, fs)?))
}

/// y_i = sum_l x_l * I_{i,l} (+ white Gaussian sensor noise).
pub fn render_mixture(scene: &MixtureScene) -> Result<(Waveform, Waveform)> {
    let images = render_source_images(scene)?;
    mix_images(&images, scene.snr_db, scene.seed)
}

/// ILD, IPD and the two spectrograms they were computed from.
#[derive(Debug, Clone)]
pub struct InterauralObservation {
    pub ild_db: TfGrid<f64>,
    pub ipd_rad: TfGrid<f64>,
    /// Bins where either channel is below [`SILENCE_EPS`]; their cues are 0.
    pub silent: TfGrid<bool>,
    pub left_spec: Spectrogram,
    pub right_spec: Spectrogram,
}

impl InterauralObservation {
    pub fn frames(&self) -> usize {
        self.ild_db.frames()
    }

    pub fn bins(&self) -> usize {
        self.ild_db.bins()
    }

    pub fn freqs_hz(&self) -> Vec<f64> {
        self.left_spec.freqs_hz()
    }

    pub fn active_count(&self) -> usize {
        self.silent.as_slice().iter().filter(|s| !**s).count()
    }
}

pub fn interaural_spectrogram(left_spec: &Spectrogram, right_spec: &Spectrogram) -> Result<InterauralObservation> {
    left_spec.bins.ensure_shape(&right_spec.bins)?;
    let (frames, bins) = left_spec.bins.shape();
    let n = frames * bins;
    let mut ild = Vec::with_capacity(n);
    let mut ipd = Vec::with_capacity(n);
    let mut silent = Vec::with_capacity(n);
    for (a, b) in left_spec.bins.as_slice().iter().zip(right_spec.bins.as_slice()) {
        let (ma, mb) = (a.norm(), b.norm());
        if ma < SILENCE_EPS || mb < SILENCE_EPS {
            ild.push(0.0);
            ipd.push(0.0);
            silent.push(true);
        } else {
            ild.push(20.0 * (ma / mb).log10());
            ipd.push(wrap_phase(a.arg() - b.arg()));
            silent.push(false);
        }
    }
    Ok(InterauralObservation {
        ild_db: TfGrid::from_vec(frames, bins, ild)?,
        ipd_rad: TfGrid::from_vec(frames, bins, ipd)?,
        silent: TfGrid::from_vec(frames, bins, silent)?,
        left_spec: left_spec.clone(),
        right_spec: right_spec.clone(),
    })
}

/// STFT of both channels followed by [`interaural_spectrogram`].
pub fn observe(left: &Waveform, right: &Waveform, params: &StftParams) -> Result<InterauralObservation> {
    if left.len() != right.len() || left.sample_rate_hz != right.sample_rate_hz {
        return Err(Error::mismatch(
            format!("{} samples @ {} Hz", left.len(), left.sample_rate_hz),
            format!("{} samples @ {} Hz", right.len(), right.sample_rate_hz),
        ));
    }
    interaural_spectrogram(&stft(left, params)?, &stft(right, params)?)
}
