use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::synth::{Brir, ReflectionTap};
use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Support of the windowed-sinc fractional delay kernel.
pub const KERNEL_POINTS: usize = 8;

/// Samples the head-shadow filter is run for past the kernel.
const SHADOW_RINGOUT: usize = 64;

/// Contralateral head shadow: a first-order high-frequency shelf whose
/// attenuation at Nyquist equals the tap's `shadow_db`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowFilter {
    pub cutoff_hz: f64,
    pub max_db: f64,
}

impl Default for ShadowFilter {
    fn default() -> Self {
        Self {
            cutoff_hz: 1500.0,
            max_db: 6.0,
        }
    }
}

impl ShadowFilter {
    /// `H(z) = g + (1 - g) LP(z)` with a bilinear one-pole low-pass `LP`
    /// (unit gain at DC, zero at Nyquist), so `|H(Nyquist)| = g`.
    pub fn apply(&self, x: &[f64], atten_db: f64, sample_rate_hz: f64) -> Vec<f64> {
        let g = 10f64.powf(-atten_db / 20.0);
        let k = (PI * self.cutoff_hz.min(0.49 * sample_rate_hz) / sample_rate_hz).tan();
        let a = (1.0 - k) / (1.0 + k);
        let b0 = k / (1.0 + k);
        let mut prev_x = 0.0;
        let mut prev_y = 0.0;
        x.iter()
            .map(|&v| {
                let lp = b0 * (v + prev_x) + a * prev_y;
                prev_x = v;
                prev_y = lp;
                g * v + (1.0 - g) * lp
            })
            .collect()
    }
}

/// Windowed-sinc interpolation kernel for a delay of `tau` samples.
/// Returns the index of the first output sample and the coefficients.
/// Delays on the sample grid produce a single unit coefficient.
pub fn fractional_delay_kernel(tau: f64) -> (i64, Vec<f64>) {
    let nearest = tau.round();
    if (tau - nearest).abs() < 1e-9 {
        return (nearest as i64, vec![1.0]);
    }
    let half = (KERNEL_POINTS / 2) as f64;
    let n0 = tau.floor() as i64;
    let start = n0 - (KERNEL_POINTS as i64 / 2 - 1);
    let coeffs = (0..KERNEL_POINTS as i64)
        .map(|j| {
            let x = (start + j) as f64 - tau;
            let sinc = (PI * x).sin() / (PI * x);
            let w = 0.5 * (1.0 + (PI * x / half).cos());
            sinc * w
        })
        .collect();
    (start, coeffs)
}

fn add_tap(out: &mut [f64], tap: &ReflectionTap, sample_rate_hz: f64, shadow: &ShadowFilter) {
    let (start, mut coeffs) = fractional_delay_kernel(tap.toa_s * sample_rate_hz);
    if tap.shadow_db > 0.0 {
        coeffs.resize(coeffs.len() + SHADOW_RINGOUT, 0.0);
        coeffs = shadow.apply(&coeffs, tap.shadow_db, sample_rate_hz);
    }
    for (j, c) in coeffs.iter().enumerate() {
        let idx = start + j as i64;
        if idx >= 0 && (idx as usize) < out.len() {
            out[idx as usize] += tap.amplitude * c;
        }
    }
}

/// Renders taps into a buffer of `len` samples.
pub fn render_taps(taps: &[ReflectionTap], len: usize, sample_rate_hz: f64, shadow: &ShadowFilter) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for tap in taps {
        add_tap(&mut out, tap, sample_rate_hz, shadow);
    }
    out
}

/// A rendered two-ear impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct BinauralIr {
    pub left: Waveform,
    pub right: Waveform,
    /// Direct-sound arrival per ear, seconds.
    pub direct_toa_s: [f64; 2],
}

impl BinauralIr {
    pub fn channel(&self, ear: usize) -> &Waveform {
        if ear == 0 {
            &self.left
        } else {
            &self.right
        }
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.left.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

pub fn render_ir(brir: &Brir, length_s: f64) -> Result<BinauralIr> {
    let fs = brir.sample_rate_hz;
    let len = (length_s * fs).ceil() as usize;
    let last_tap = brir
        .left_taps
        .iter()
        .chain(&brir.right_taps)
        .map(|t| t.toa_s)
        .fold(0.0, f64::max);
    let needed = (last_tap * fs).floor() as usize + KERNEL_POINTS / 2 + 1;
    if len < needed {
        return Err(Error::invalid(format!(
            "IR length {len} samples does not cover last tap (needs {needed})"
        )));
    }
    let mut chans = [Vec::new(), Vec::new()];
    for (ear, out) in chans.iter_mut().enumerate() {
        *out = render_taps(brir.taps(ear), len, fs, &brir.shadow);
        for (i, v) in brir.tail[ear].iter().enumerate() {
            match out.get_mut(brir.tail_start + i) {
                Some(s) => *s += v,
                None => break,
            }
        }
    }
    let [l, r] = chans;
    let direct = |ear| brir.direct_toa_s(ear).unwrap_or(0.0);
    Ok(BinauralIr {
        left: Waveform::new(l, fs)?,
        right: Waveform::new(r, fs)?,
        direct_toa_s: [direct(0), direct(1)],
    })
}

/// Renders the full BRIR and keeps only what falls under a Hamming window
/// of `window_ms` centred on each ear's direct-sound arrival.
pub fn direct_path_reference(brir: &Brir, window_ms: f64) -> Result<BinauralIr> {
    if !(window_ms > 0.0) {
        return Err(Error::invalid("direct-path window must be positive"));
    }
    let fs = brir.sample_rate_hz;
    let mut ir = render_ir(brir, brir.natural_len() as f64 / fs)?;
    let width = window_ms * 1e-3;
    for ear in 0..2 {
        let toa = ir.direct_toa_s[ear];
        let chan = if ear == 0 { &mut ir.left } else { &mut ir.right };
        for (n, v) in chan.samples.iter_mut().enumerate() {
            let t = n as f64 / fs - toa;
            *v *= if t.abs() <= 0.5 * width {
                0.54 + 0.46 * (2.0 * PI * t / width).cos()
            } else {
                0.0
            };
        }
    }
    Ok(ir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::{synthesize_brir, HeadGeometry, Reflector, RoomSpec, Vec3};

    fn tap(toa_s: f64, amplitude: f64, order_index: u32) -> ReflectionTap {
        ReflectionTap {
            toa_s,
            amplitude,
            order_index,
            shadow_db: 0.0,
        }
    }

    #[test]
    fn integer_tap_is_a_unit_impulse() {
        let fs = 16_000.0;
        let out = render_taps(&[tap(37.0 / fs, 1.0, 0)], 100, fs, &ShadowFilter::default());
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, if i == 37 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn half_sample_tap_is_symmetric_sinc() {
        let fs = 16_000.0;
        let out = render_taps(&[tap(20.5 / fs, 1.0, 0)], 64, fs, &ShadowFilter::default());
        // direct evaluation of a Hann-windowed sinc with half-width 4
        let expect = |n: f64| {
            let x = n - 20.5;
            (PI * x).sin() / (PI * x) * 0.5 * (1.0 + (PI * x / 4.0).cos())
        };
        for n in 17..=24 {
            assert!((out[n] - expect(n as f64)).abs() < 1e-12);
        }
        assert!((out[20] - out[21]).abs() < 1e-12);
        assert!((out[19] - out[22]).abs() < 1e-12);
        assert!(out[16].abs() < 1e-15 && out[25].abs() < 1e-15);
    }

    #[test]
    fn rendering_is_linear_in_taps() {
        let fs = 16_000.0;
        let a = vec![tap(0.01, 0.7, 0), ReflectionTap { shadow_db: 3.0, ..tap(0.0153, -0.3, 1) }];
        let b = vec![tap(0.0121, 0.2, 1), tap(0.0042, 1.1, 0)];
        let shadow = ShadowFilter::default();
        let ra = render_taps(&a, 512, fs, &shadow);
        let rb = render_taps(&b, 512, fs, &shadow);
        let merged: Vec<_> = a.iter().chain(&b).copied().collect();
        let rm = render_taps(&merged, 512, fs, &shadow);
        for i in 0..512 {
            assert!((ra[i] + rb[i] - rm[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shadow_shelf_gains() {
        let shadow = ShadowFilter::default();
        let fs = 16_000.0;
        let dc = shadow.apply(&vec![1.0; 400], 6.0, fs);
        assert!((dc[399] - 1.0).abs() < 1e-9);
        let alt: Vec<f64> = (0..400).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let ny = shadow.apply(&alt, 6.0, fs);
        assert!((ny[399].abs() - 10f64.powf(-6.0 / 20.0)).abs() < 1e-9);
    }

    #[test]
    fn render_rejects_short_length() {
        let brir = Brir::from_taps(vec![tap(0.01, 1.0, 0)], vec![tap(0.01, 1.0, 0)], 16_000.0);
        assert!(render_ir(&brir, 0.005).is_err());
        assert!(render_ir(&brir, 0.02).is_ok());
    }

    #[test]
    fn short_direct_window_removes_reflection() {
        let fs = 16_000.0;
        let taps = vec![tap(160.0 / fs, 1.0, 0), tap(288.0 / fs, 0.5, 1)];
        let brir = Brir::from_taps(taps.clone(), taps, fs);
        let ir = direct_path_reference(&brir, 5.0).unwrap();
        assert_eq!(ir.left.samples[160], 1.0);
        assert!(ir.left.samples[200..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wide_window_scales_taps_by_window() {
        let fs = 16_000.0;
        let taps = vec![tap(160.0 / fs, 1.0, 0), tap(240.0 / fs, 0.5, 1)];
        let brir = Brir::from_taps(taps.clone(), taps, fs);
        let width_ms = 100.0;
        let ir = direct_path_reference(&brir, width_ms).unwrap();
        let t = 80.0 / fs;
        let w = 0.54 + 0.46 * (2.0 * PI * t / (width_ms * 1e-3)).cos();
        assert_eq!(ir.left.samples[160], 1.0);
        assert!((ir.left.samples[240] - 0.5 * w).abs() < 1e-12);
    }

    #[test]
    fn windowed_energy_matches_brute_force() {
        let fs = 16_000.0;
        let room = RoomSpec {
            reflectors: vec![Reflector::floor(0.8)],
            rt60_s: 0.3,
            tail_onset_s: 0.001,
            tail_to_direct_db: -6.0,
            noise_seed: 4,
        };
        let head = HeadGeometry::default();
        let brir = synthesize_brir(&room, Vec3::new(1.2, 0.7, 1.5), &head, fs).unwrap();
        let full = render_ir(&brir, brir.natural_len() as f64 / fs).unwrap();
        let out = direct_path_reference(&brir, 5.0).unwrap();
        for ear in 0..2 {
            let toa = full.direct_toa_s[ear];
            let brute: f64 = full
                .channel(ear)
                .samples
                .iter()
                .enumerate()
                .map(|(n, v)| {
                    let t = n as f64 / fs - toa;
                    if t.abs() <= 0.0025 {
                        (v * (0.54 + 0.46 * (2.0 * PI * t / 0.005).cos())).powi(2)
                    } else {
                        0.0
                    }
                })
                .sum();
            let got = out.channel(ear).energy();
            assert!((got - brute).abs() <= 1e-12 * brute.max(1.0));
        }
    }
}
