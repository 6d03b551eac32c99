//! Seeded speech-like test signals: voiced syllables with a gliding pitch
//! and formant envelope, unvoiced noise bursts, and short pauses.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Resonance gain of a formant centred at `fc` with bandwidth `bw`.
fn formant_gain(f: f64, fc: f64, bw: f64) -> f64 {
    let x = (f - fc) / (0.5 * bw);
    1.0 / (1.0 + x * x)
}

fn voiced(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let f0_start: f64 = rng.gen_range(95.0..230.0);
    let f0_end = f0_start * rng.gen_range(0.8..1.25);
    let formants = [
        (rng.gen_range(300.0..850.0), 90.0),
        (rng.gen_range(900.0..2300.0), 120.0),
        (rng.gen_range(2300.0..3300.0), 180.0),
    ];
    let nyq = 0.5 * fs;
    let mut phase = 0.0;
    let mut out = vec![0.0; len];
    let max_harm = (0.45 * fs / f0_start.min(f0_end)).floor() as usize;
    let harm_phase: Vec<f64> = (0..max_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    for (n, v) in out.iter_mut().enumerate() {
        let t = n as f64 / len as f64;
        let f0 = f0_start + (f0_end - f0_start) * t;
        phase += 2.0 * PI * f0 / fs;
        let mut s = 0.0;
        for (h, hp) in harm_phase.iter().enumerate() {
            let f = f0 * (h + 1) as f64;
            if f >= 0.9 * nyq {
                break;
            }
            let env: f64 = formants.iter().map(|&(fc, bw)| formant_gain(f, fc, bw)).sum::<f64>() + 0.02;
            s += env / (1.0 + f / 1000.0) * (phase * (h + 1) as f64 + hp).sin();
        }
        // raised-cosine syllable envelope with a touch of tremolo
        let am = (PI * t).sin().powf(0.7) * (1.0 + 0.2 * (2.0 * PI * 4.0 * t).sin());
        *v = s * am;
    }
    out
}

fn unvoiced(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut prev = 0.0;
    (0..len)
        .map(|n| {
            let g: f64 = StandardNormal.sample(rng);
            // first difference tilts the noise towards high frequencies
            let v = g - 0.7 * prev;
            prev = g;
            let t = n as f64 / len as f64;
            0.3 * v * (PI * t).sin()
        })
        .collect()
}

/// A deterministic speech-like signal of `duration_s` seconds, unit RMS.
pub fn synthetic_utterance(seed: u64, duration_s: f64, sample_rate_hz: f64) -> Result<Waveform> {
    if !(duration_s > 0.0) || !(sample_rate_hz >= 8000.0) {
        return Err(Error::invalid("utterance needs positive duration and fs >= 8 kHz"));
    }
    let total = (duration_s * sample_rate_hz).round() as usize;
    let ms = |x: f64| (x * 1e-3 * sample_rate_hz) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    out.resize(ms(rng.gen_range(20.0..80.0)).min(total), 0.0);
    while out.len() < total {
        let seg = match rng.gen_range(0..10) {
            0..=5 => {
                let n = ms(rng.gen_range(120.0..320.0));
                voiced(&mut rng, n, sample_rate_hz)
            }
            6 | 7 => {
                let n = ms(rng.gen_range(50.0..130.0));
                unvoiced(&mut rng, n)
            }
            _ => vec![0.0; ms(rng.gen_range(30.0..160.0))],
        };
        out.extend(seg);
    }
    out.truncate(total);
    let w = Waveform::new(out, sample_rate_hz)?;
    let rms = w.rms();
    if !(rms > 0.0) {
        return Err(Error::Silent);
    }
    Ok(w.scaled(1.0 / rms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_rms() {
        let a = synthetic_utterance(3, 1.5, 16_000.0).unwrap();
        let b = synthetic_utterance(3, 1.5, 16_000.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 24_000);
        assert!((a.rms() - 1.0).abs() < 1e-12);
        assert_ne!(a, synthetic_utterance(4, 1.5, 16_000.0).unwrap());
    }

    #[test]
    fn has_pauses_and_activity() {
        let x = synthetic_utterance(8, 3.0, 16_000.0).unwrap();
        let frame = 320;
        let energies: Vec<f64> = x
            .samples
            .chunks(frame)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>() / frame as f64)
            .collect();
        let quiet = energies.iter().filter(|e| **e < 1e-3).count();
        let loud = energies.iter().filter(|e| **e > 0.5).count();
        assert!(quiet > 3, "{quiet}");
        assert!(loud > energies.len() / 4, "{loud}");
    }
}
