use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::grid::TfGrid;

/// How the recursive-averaging factor is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum KappaMode {
    Fixed(f64),
    /// kappa = 1 / (tau * fs), tau in seconds.
    TimeConstant(f64),
}

impl Default for KappaMode {
    fn default() -> Self {
        KappaMode::Fixed(0.5)
    }
}

impl KappaMode {
    pub fn kappa(self, sample_rate_hz: f64) -> Result<f64> {
        let k = match self {
            KappaMode::Fixed(k) => k,
            KappaMode::TimeConstant(tau) => 1.0 / (tau * sample_rate_hz),
        };
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::invalid(format!("smoothing factor {k} outside [0, 1]")));
        }
        Ok(k)
    }
}

/// Magnitude-squared coherence between the two ears.
#[derive(Debug, Clone, PartialEq)]
pub struct IcMask {
    pub gamma: TfGrid<f64>,
    pub kappa: f64,
}

impl IcMask {
    pub fn mean(&self) -> f64 {
        let s = self.gamma.as_slice();
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Recursively smoothed auto- and cross-spectra, then |Phi12|^2 / (Phi1 Phi2).
pub fn ic_mask(left: &Spectrogram, right: &Spectrogram, kappa: f64) -> Result<IcMask> {
    left.bins.ensure_shape(&right.bins)?;
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::invalid(format!("smoothing factor {kappa} outside [0, 1]")));
    }
    let (frames, bins) = left.bins.shape();
    let mut gamma = TfGrid::filled(frames, bins, 0.0);
    if frames == 0 {
        return Ok(IcMask { gamma, kappa });
    }
    let y1 = left.bins.row(0);
    let y2 = right.bins.row(0);
    let mut p1: Vec<f64> = y1.iter().map(|z| z.norm_sqr()).collect();
    let mut p2: Vec<f64> = y2.iter().map(|z| z.norm_sqr()).collect();
    let mut p12: Vec<Complex64> = y1.iter().zip(y2).map(|(a, b)| a * b.conj()).collect();
    let a = 1.0 - kappa;
    for m in 0..frames {
        let (y1, y2) = (left.bins.row(m), right.bins.row(m));
        let row = gamma.row_mut(m);
        for k in 0..bins {
            p1[k] = kappa * p1[k] + a * y1[k].norm_sqr();
            p2[k] = kappa * p2[k] + a * y2[k].norm_sqr();
            p12[k] = p12[k] * kappa + y1[k] * y2[k].conj() * a;
            let den = p1[k] * p2[k];
            row[k] = if den > 0.0 {
                (p12[k].norm_sqr() / den).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    Ok(IcMask { gamma, kappa })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftParams, Waveform};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| StandardNormal.sample(&mut rng)).collect(), 16_000.0).unwrap()
    }

    #[test]
    fn identical_channels_are_fully_coherent() {
        let p = StftParams::default();
        let s = stft(&noise(16_000, 1), &p).unwrap();
        for kappa in [0.0, 0.5, 0.9] {
            let ic = ic_mask(&s, &s, kappa).unwrap();
            assert!(ic.gamma.as_slice().iter().all(|g| *g == 1.0));
        }
    }

    #[test]
    fn instantaneous_estimate_is_degenerate() {
        let p = StftParams::default();
        let l = stft(&noise(16_000, 1), &p).unwrap();
        let r = stft(&noise(16_000, 2), &p).unwrap();
        let ic = ic_mask(&l, &r, 0.0).unwrap();
        assert!(ic.gamma.as_slice().iter().all(|g| (g - 1.0).abs() < 1e-12));
    }

    #[test]
    fn independent_noise_is_incoherent() {
        let p = StftParams::default();
        let l = stft(&noise(48_000, 3), &p).unwrap();
        let r = stft(&noise(48_000, 4), &p).unwrap();
        let g5 = ic_mask(&l, &r, 0.5).unwrap().mean();
        let g9 = ic_mask(&l, &r, 0.9).unwrap().mean();
        // the smoothing averages about (1 + kappa) / (1 - kappa) frames
        assert!(g5 < 0.5, "{g5}");
        assert!(g9 < 0.15, "{g9}");
        assert!(g9 < g5);
    }

    #[test]
    fn zero_power_bins_are_zero() {
        let p = StftParams::default();
        let l = stft(&noise(8000, 1), &p).unwrap();
        let r = stft(&Waveform::zeros(8000, 16_000.0), &p).unwrap();
        assert!(ic_mask(&l, &r, 0.5).unwrap().gamma.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn kappa_modes() {
        assert_eq!(KappaMode::default().kappa(16_000.0).unwrap(), 0.5);
        let k = KappaMode::TimeConstant(0.01).kappa(48_000.0).unwrap();
        assert!((k - 1.0 / 480.0).abs() < 1e-15);
        assert!(KappaMode::Fixed(1.5).kappa(16_000.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gamma_in_unit_interval(seed in 0u64..1000, kappa in 0.0f64..1.0, mix in 0.0f64..1.0) {
            let p = StftParams::default();
            let a = noise(6000, seed);
            let b = noise(6000, seed + 1);
            let r: Vec<f64> = a.samples.iter().zip(&b.samples).map(|(x, y)| mix * x + (1.0 - mix) * y).collect();
            let l = stft(&a, &p).unwrap();
            let r = stft(&Waveform::new(r, 16_000.0).unwrap(), &p).unwrap();
            let ic = ic_mask(&l, &r, kappa).unwrap();
            prop_assert!(ic.gamma.as_slice().iter().all(|g| (0.0..=1.0).contains(g)));
        }
    }
}
