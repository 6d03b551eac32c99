use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Reflection search window after the direct sound, seconds.
pub const REFLECTION_WINDOW_S: (f64, f64) = (0.005, 0.040);

/// A reflection peak must exceed this multiple of the robust noise level
/// in its search window.
pub const PEAK_TO_NOISE: f64 = 6.0;

/// Direct-sound and first-reflection arrival times of one channel, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToaPair {
    pub direct_s: f64,
    pub reflection_s: f64,
}

/// Offset in [-0.5, 0.5] of the vertex of the parabola through three points.
pub(crate) fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let den = a - 2.0 * b + c;
    if den.abs() < 1e-300 {
        return 0.0;
    }
    (0.5 * (a - c) / den).clamp(-0.5, 0.5)
}

/// Sub-sample position of the peak of `mag` at index `n`.
pub(crate) fn refine(mag: &[f64], n: usize) -> f64 {
    if n == 0 || n + 1 >= mag.len() {
        return n as f64;
    }
    n as f64 + parabolic_offset(mag[n - 1], mag[n], mag[n + 1])
}

fn is_local_max(mag: &[f64], n: usize) -> bool {
    let left = n == 0 || mag[n] >= mag[n - 1];
    let right = n + 1 >= mag.len() || mag[n] >= mag[n + 1];
    left && right
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Peak-picking arrival times for one impulse response. The direct sound is
/// the first local maximum of |h| reaching half the global maximum; the
/// first reflection is the largest peak in (direct + 5 ms, direct + 40 ms].
pub fn estimate_toa_pair(rir: &Waveform, channel: usize) -> Result<ToaPair> {
    let fs = rir.sample_rate_hz;
    let mag: Vec<f64> = rir.samples.iter().map(|v| v.abs()).collect();
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::Silent);
    }
    let d = (0..mag.len())
        .find(|&n| mag[n] >= 0.5 * peak && is_local_max(&mag, n))
        .expect("the global maximum qualifies");
    let direct = refine(&mag, d);

    let lo = (direct + REFLECTION_WINDOW_S.0 * fs).floor() as usize + 1;
    let hi = ((direct + REFLECTION_WINDOW_S.1 * fs).floor() as usize).min(mag.len().saturating_sub(1));
    if lo > hi {
        return Err(Error::NoSpecularReflection { channel });
    }
    let window = &mag[lo..=hi];
    let (off, &best) = window
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("window is non-empty");
    // median absolute value of Gaussian noise is 0.6745 sigma
    let sigma = median(window.to_vec()) / 0.6745;
    if best == 0.0 || best < PEAK_TO_NOISE * sigma {
        return Err(Error::NoSpecularReflection { channel });
    }
    Ok(ToaPair {
        direct_s: direct / fs,
        reflection_s: refine(&mag, lo + off) / fs,
    })
}

/// Arrival times for every channel of a multichannel recording.
pub fn estimate_toas(rirs: &[Waveform]) -> Result<Vec<ToaPair>> {
    rirs.iter()
        .enumerate()
        .map(|(i, r)| estimate_toa_pair(r, i))
        .collect()
}
