use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::toa::parabolic_offset;
use crate::acoustics::{ArraySpec, Vec3, SPEED_OF_SOUND};
use crate::dsp::{real_spectrum, Waveform};
use crate::error::{Error, Result};

/// Frequencies used by the steered response, Hz.
pub const DOA_BAND_HZ: (f64, f64) = (200.0, 6000.0);

/// Steered-response spread below which an estimate is flagged.
pub const MIN_SPREAD_DB: f64 = 1.0;

const GRID_DEG: usize = 360;
const ELEVATION_STEP_DEG: f64 = 5.0;
const ELEVATION_STEPS: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoaEstimate {
    /// Counter-clockwise from +x, in (-pi, pi].
    pub azimuth_rad: f64,
    /// Max over min steered response power, dB.
    pub spread_db: f64,
    pub low_confidence: bool,
}

fn wrap_azimuth(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Delay-and-sum steered response power over a 1 degree azimuth grid,
/// computed on the segment `window_s` of every channel. Far field plane
/// waves; elevations 0 to 85 degrees are tried and the best row is used.
pub fn das_doa(channels: &[Waveform], array: &ArraySpec, window_s: (f64, f64)) -> Result<DoaEstimate> {
    array.validate()?;
    if channels.len() != array.len() {
        return Err(Error::mismatch(format!("{} channels", array.len()), channels.len()));
    }
    let fs = channels[0].sample_rate_hz;
    if channels.iter().any(|c| c.sample_rate_hz != fs) {
        return Err(Error::invalid("array channels differ in sample rate"));
    }
    let (t0, t1) = window_s;
    if !(t1 > t0) || t0 < 0.0 {
        return Err(Error::invalid(format!("bad analysis window [{t0}, {t1}] s")));
    }
    let a = (t0 * fs).floor() as usize;
    let b = (t1 * fs).ceil() as usize;
    let seg_len = b - a;
    let n = (4 * seg_len).next_power_of_two().max(256);
    let spectra: Vec<Vec<Complex64>> = channels
        .iter()
        .map(|c| {
            let lo = a.min(c.len());
            let hi = b.min(c.len());
            real_spectrum(&c.samples[lo..hi], n)
        })
        .collect();
    let df = fs / n as f64;
    let k_lo = (DOA_BAND_HZ.0 / df).ceil() as usize;
    let k_hi = ((DOA_BAND_HZ.1.min(0.5 * fs)) / df).floor() as usize;
    let rel: Vec<Vec3> = array.positions.iter().map(|p| *p - array.reference).collect();

    let steer = |az: f64, el: f64| -> f64 {
        let u = Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin());
        // arrival delay of each microphone relative to the reference point
        let tau: Vec<f64> = rel.iter().map(|r| -r.dot(u) / SPEED_OF_SOUND).collect();
        (k_lo..=k_hi)
            .map(|k| {
                let w = 2.0 * PI * k as f64 * df;
                spectra
                    .iter()
                    .zip(&tau)
                    .map(|(x, t)| x[k] * Complex64::from_polar(1.0, w * t))
                    .sum::<Complex64>()
                    .norm_sqr()
            })
            .sum()
    };
    // image sources off the array plane shrink the apparent aperture, so
    // elevation is searched too and only the azimuth is reported
    let mut srp = Vec::new();
    let mut best_power = f64::NEG_INFINITY;
    for e in 0..ELEVATION_STEPS {
        let el = (e as f64 * ELEVATION_STEP_DEG).to_radians();
        let row: Vec<f64> = (0..GRID_DEG).map(|d| steer((d as f64).to_radians(), el)).collect();
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if top > best_power {
            best_power = top;
            srp = row;
        }
    }

    let (best, &max) = srp
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .expect("grid is non-empty");
    if max == 0.0 {
        return Err(Error::Silent);
    }
    let min = srp.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread_db = if min > 0.0 { 10.0 * (max / min).log10() } else { f64::INFINITY };
    let prev = srp[(best + GRID_DEG - 1) % GRID_DEG];
    let next = srp[(best + 1) % GRID_DEG];
    let deg = best as f64 + parabolic_offset(prev, max, next);
    Ok(DoaEstimate {
        azimuth_rad: wrap_azimuth(deg.to_radians()),
        spread_db,
        low_confidence: spread_db < MIN_SPREAD_DB,
    })
}
