//! Time-frequency analysis and synthesis primitives.
//!
//! The STFT zero-pads `window_len - hop` samples on both ends of the signal,
//! so every original sample is covered by the full set of overlapping frames
//! and `istft(stft(x))` returns `x` on its whole support. Windows are
//! periodic; the same window is used for analysis and synthesis, and the
//! overlap-add is normalised by the constant `sum_m w(n - mH)^2`.

use std::f64::consts::PI;

use num_complex::Complex64;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TfGrid;

const TWO_PI: f64 = 2.0 * PI;
const COLA_TOLERANCE: f64 = 1e-9;

/// A uniformly sampled mono signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(Error::invalid(format!("sample rate {sample_rate_hz}")));
        }
        if samples.is_empty() {
            return Err(Error::invalid("empty waveform"));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: f64) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn rms(&self) -> f64 {
        (self.energy() / self.samples.len() as f64).sqrt()
    }

    /// Truncates or zero-pads to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    SqrtHann,
    Hann,
    Hamming,
}

impl WindowKind {
    /// Periodic window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let x = i as f64 / n;
                match self {
                    WindowKind::SqrtHann => (PI * x).sin(),
                    WindowKind::Hann => 0.5 - 0.5 * (TWO_PI * x).cos(),
                    WindowKind::Hamming => 0.54 - 0.46 * (TWO_PI * x).cos(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftParams {
    pub window_len: usize,
    pub hop: usize,
    pub window_kind: WindowKind,
    pub fft_len: usize,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            window_len: 1024,
            hop: 256,
            window_kind: WindowKind::SqrtHann,
            fft_len: 1024,
        }
    }
}

impl StftParams {
    pub fn new(window_len: usize, hop: usize, window_kind: WindowKind) -> Self {
        Self {
            window_len,
            hop,
            window_kind,
            fft_len: window_len,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Zero padding applied at each end of the signal.
    pub fn edge_padding(&self) -> usize {
        self.window_len - self.hop
    }

    pub fn num_frames(&self, signal_len: usize) -> usize {
        let padded = signal_len + 2 * self.edge_padding();
        (padded - self.window_len).div_ceil(self.hop) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 {
            return Err(Error::invalid("window_len and hop must be positive"));
        }
        if self.hop > self.window_len {
            return Err(Error::invalid(format!(
                "hop {} exceeds window length {}",
                self.hop, self.window_len
            )));
        }
        if self.fft_len < self.window_len {
            return Err(Error::invalid(format!(
                "fft_len {} shorter than window {}",
                self.fft_len, self.window_len
            )));
        }
        Ok(())
    }

    /// Returns the overlap-add normalisation constant `sum_m w(n - mH)^2`,
    /// or an error when it is not constant in `n`.
    pub fn cola_constant(&self) -> Result<f64> {
        self.validate()?;
        let w = self.window_kind.coefficients(self.window_len);
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| {
                (n..self.window_len)
                    .step_by(self.hop)
                    .map(|i| w[i] * w[i])
                    .sum()
            })
            .collect();
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        if max <= 0.0 {
            return Err(Error::NonCola { ripple: f64::INFINITY });
        }
        let ripple = (max - min) / max;
        if ripple > COLA_TOLERANCE {
            return Err(Error::NonCola { ripple });
        }
        Ok(sums.iter().sum::<f64>() / sums.len() as f64)
    }
}

/// One-sided complex STFT of a real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: TfGrid<Complex64>,
    pub params: StftParams,
    pub sample_rate_hz: f64,
    /// Length of the analysed signal before edge padding.
    pub signal_len: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.bins.frames()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.bins()
    }

    pub fn freqs_hz(&self) -> Vec<f64> {
        bin_frequencies(&self.params, self.sample_rate_hz)
    }

    /// Element-wise product with a real mask of the same shape.
    pub fn masked(&self, mask: &TfGrid<f64>) -> Result<Spectrogram> {
        self.bins.ensure_shape(mask)?;
        let data = self
            .bins
            .as_slice()
            .iter()
            .zip(mask.as_slice())
            .map(|(z, m)| z * m)
            .collect();
        Ok(Spectrogram {
            bins: TfGrid::from_vec(self.frames(), self.num_bins(), data)?,
            params: self.params,
            sample_rate_hz: self.sample_rate_hz,
            signal_len: self.signal_len,
        })
    }

    pub fn power(&self) -> TfGrid<f64> {
        self.bins.map(|z| z.norm_sqr())
    }
}

pub fn bin_frequencies(params: &StftParams, sample_rate_hz: f64) -> Vec<f64> {
    (0..params.num_bins())
        .map(|k| k as f64 * sample_rate_hz / params.fft_len as f64)
        .collect()
}

pub fn stft(wave: &Waveform, params: &StftParams) -> Result<Spectrogram> {
    params.validate()?;
    let n = wave.len();
    if n < params.window_len {
        return Err(Error::InputTooShort {
            len: n,
            needed: params.window_len,
        });
    }
    let pad = params.edge_padding();
    let frames = params.num_frames(n);
    let bins = params.num_bins();
    let window = params.window_kind.coefficients(params.window_len);

    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(params.fft_len);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();
    let mut data = Vec::with_capacity(frames * bins);

    for m in 0..frames {
        let start = m * params.hop;
        input.iter_mut().for_each(|x| *x = 0.0);
        for (i, w) in window.iter().enumerate() {
            // position in the padded signal -> original index
            let p = start + i;
            if p >= pad && p - pad < n {
                input[i] = wave.samples[p - pad] * w;
            }
        }
        fft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .map_err(|e| Error::invalid(e.to_string()))?;
        data.extend_from_slice(&output);
    }

    Ok(Spectrogram {
        bins: TfGrid::from_vec(frames, bins, data)?,
        params: *params,
        sample_rate_hz: wave.sample_rate_hz,
        signal_len: n,
    })
}

pub fn istft(spec: &Spectrogram) -> Result<Waveform> {
    let params = &spec.params;
    let norm = params.cola_constant()?;
    let frames = spec.frames();
    if spec.num_bins() != params.num_bins() {
        return Err(Error::mismatch(params.num_bins(), spec.num_bins()));
    }
    let pad = params.edge_padding();
    let window = params.window_kind.coefficients(params.window_len);
    let total = (frames - 1) * params.hop + params.window_len;

    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(params.fft_len);
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let mut acc = vec![0.0; total];
    let scale = 1.0 / (params.fft_len as f64 * norm);

    for m in 0..frames {
        input.copy_from_slice(spec.bins.row(m));
        // DC and Nyquist must be real for the inverse real FFT.
        input[0].im = 0.0;
        if params.fft_len % 2 == 0 {
            let last = input.len() - 1;
            input[last].im = 0.0;
        }
        ifft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let start = m * params.hop;
        for (i, w) in window.iter().enumerate() {
            acc[start + i] += output[i] * w * scale;
        }
    }

    let end = (pad + spec.signal_len).min(total);
    let mut samples = acc[pad.min(end)..end].to_vec();
    samples.resize(spec.signal_len, 0.0);
    Ok(Waveform {
        samples,
        sample_rate_hz: spec.sample_rate_hz,
    })
}

/// Wraps an angle into the half-open interval `[-pi, pi)`.
pub fn wrap_phase(x: f64) -> f64 {
    let mut r = x - TWO_PI * ((x + PI) / TWO_PI).floor();
    if r >= PI {
        r -= TWO_PI;
    } else if r < -PI {
        r += TWO_PI;
    }
    r
}

/// Full linear convolution via real FFT; output length `a.len() + b.len() - 1`.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 32 {
        let mut out = vec![0.0; out_len];
        for (i, x) in a.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let mut buf_a = vec![0.0; n];
    buf_a[..a.len()].copy_from_slice(a);
    let mut buf_b = vec![0.0; n];
    buf_b[..b.len()].copy_from_slice(b);
    let mut spec_a = fwd.make_output_vec();
    let mut spec_b = fwd.make_output_vec();
    fwd.process(&mut buf_a, &mut spec_a).expect("fft size fixed");
    fwd.process(&mut buf_b, &mut spec_b).expect("fft size fixed");
    for (x, y) in spec_a.iter_mut().zip(&spec_b) {
        *x *= y;
    }
    spec_a[0].im = 0.0;
    let last = spec_a.len() - 1;
    spec_a[last].im = 0.0;
    let mut out = vec![0.0; n];
    inv.process(&mut spec_a, &mut out).expect("fft size fixed");
    out.truncate(out_len);
    let scale = 1.0 / n as f64;
    out.iter_mut().for_each(|x| *x *= scale);
    out
}

/// One-sided spectrum of `x` zero-padded to `n` points.
pub fn real_spectrum(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let mut buf = vec![0.0; n];
    let take = x.len().min(n);
    buf[..take].copy_from_slice(&x[..take]);
    let mut out = fwd.make_output_vec();
    fwd.process(&mut buf, &mut out).expect("fft size fixed");
    out
}
