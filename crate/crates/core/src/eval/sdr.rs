use nalgebra::{DMatrix, DVector};

use crate::dsp::{fft_convolve, Waveform};
use crate::error::{Error, Result};

/// Length of the distortion filter allowed in the projection.
pub const SDR_TAPS: usize = 512;

/// Magnitude cap of reported SDR values, dB.
pub const SDR_CAP_DB: f64 = 100.0;

fn correlate(x: &[f64], y: &[f64], lags: usize) -> Vec<f64> {
    // sum_n x[n] y[n - lag] for lag in 0..lags, through one convolution
    let rev: Vec<f64> = y.iter().rev().cloned().collect();
    let full = fft_convolve(x, &rev);
    let zero = y.len() - 1;
    (0..lags).map(|l| full.get(zero + l).copied().unwrap_or(0.0)).collect()
}

/// Source-to-distortion ratio of `estimate` against `reference`. The
/// estimate is projected onto the span of the reference delayed by
/// 0..512 samples; the ratio is projection energy over residual energy.
pub fn sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    sdr_with_taps(estimate, reference, SDR_TAPS)
}

pub fn sdr_with_taps(estimate: &Waveform, reference: &Waveform, taps: usize) -> Result<f64> {
    if estimate.sample_rate_hz != reference.sample_rate_hz {
        return Err(Error::mismatch(
            format!("{} Hz", reference.sample_rate_hz),
            format!("{} Hz", estimate.sample_rate_hz),
        ));
    }
    if taps == 0 {
        return Err(Error::invalid("projection needs at least one tap"));
    }
    let n = estimate.len().min(reference.len());
    let r = &reference.samples[..n];
    let e = &estimate.samples[..n];
    let r_energy: f64 = r.iter().map(|v| v * v).sum();
    if r_energy == 0.0 {
        return Err(Error::Silent);
    }
    let taps = taps.min(n);
    // Gram matrix of the delayed references is Toeplitz in the autocorrelation
    let acf = correlate(r, r, taps);
    let gram = DMatrix::from_fn(taps, taps, |i, j| acf[i.abs_diff(j)]);
    let rhs = DVector::from_vec(correlate(e, r, taps));
    // tiny ridge keeps nearly band-limited references solvable
    let ridge = 1e-12 * acf[0];
    let gram = gram + DMatrix::identity(taps, taps) * ridge;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("reference autocorrelation is not positive definite".into()))?;
    let filt = chol.solve(&rhs);
    let proj = fft_convolve(r, filt.as_slice());
    let mut target = 0.0;
    let mut resid = 0.0;
    for (i, p) in proj.iter().enumerate() {
        let x = if i < n { e[i] } else { 0.0 };
        target += p * p;
        resid += (x - p) * (x - p);
    }
    let db = if resid == 0.0 {
        SDR_CAP_DB
    } else if target == 0.0 {
        -SDR_CAP_DB
    } else {
        10.0 * (target / resid).log10()
    };
    Ok(db.clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const FS: f64 = 16_000.0;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn wave(x: Vec<f64>) -> Waveform {
        Waveform::new(x, FS).unwrap()
    }

    /// Delayed-reference matrix of size (n + taps - 1) x taps.
    fn basis(r: &[f64], taps: usize) -> DMatrix<f64> {
        let rows = r.len() + taps - 1;
        DMatrix::from_fn(rows, taps, |i, j| if i >= j && i - j < r.len() { r[i - j] } else { 0.0 })
    }

    #[test]
    fn identical_and_scaled_estimates_hit_the_cap() {
        let r = noise(4000, 1);
        assert_eq!(sdr(&wave(r.clone()), &wave(r.clone())).unwrap(), SDR_CAP_DB);
        let half: Vec<f64> = r.iter().map(|v| 0.5 * v).collect();
        assert_eq!(sdr(&wave(half), &wave(r)).unwrap(), SDR_CAP_DB);
    }

    #[test]
    fn equal_power_orthogonal_noise_is_zero_db() {
        let n = 3000;
        let taps = 512;
        let rows = n + taps - 1;
        let r = noise(n, 2);
        // orthogonal to every delayed reference and zero past the estimate
        let b = basis(&r, taps);
        let span = DMatrix::from_fn(rows, 2 * taps - 1, |i, j| {
            if j < taps {
                b[(i, j)]
            } else if i == n + j - taps {
                1.0
            } else {
                0.0
            }
        });
        let mut v = noise(n, 3);
        v.resize(rows, 0.0);
        let v = DMatrix::from_vec(rows, 1, v);
        let q = span.qr().q();
        let orth = &v - &q * (q.transpose() * &v);
        let energy_r: f64 = r.iter().map(|x| x * x).sum();
        let k = (energy_r / orth.norm_squared()).sqrt();
        assert!(orth.as_slice()[n..].iter().all(|x| x.abs() < 1e-9));
        let est: Vec<f64> = (0..n).map(|i| r[i] + k * orth[i]).collect();
        let got = sdr(&wave(est), &wave(r)).unwrap();
        assert!(got.abs() < 0.2, "{got}");
    }

    #[test]
    fn matches_explicit_least_squares() {
        let n = 800;
        let taps = 32;
        let r = noise(n, 4);
        let e: Vec<f64> = noise(n, 5).iter().zip(&r).map(|(a, b)| 0.3 * a + b).collect();
        let b = basis(&r, taps);
        let mut ev = e.clone();
        ev.resize(n + taps - 1, 0.0);
        let ev = DMatrix::from_vec(n + taps - 1, 1, ev);
        let q = b.qr().q();
        let p = &q * (q.transpose() * &ev);
        let resid = &ev - &p;
        let expect = 10.0 * (p.norm_squared() / resid.norm_squared()).log10();
        let got = sdr_with_taps(&wave(e), &wave(r), taps).unwrap();
        assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
    }

    #[test]
    fn delayed_filtered_estimate_is_in_span() {
        let r = noise(3000, 6);
        let h = [0.0, 0.0, 0.7, -0.2, 0.1];
        let e: Vec<f64> = fft_convolve(&r, &h)[..3000].to_vec();
        assert!(sdr(&wave(e), &wave(r)).unwrap() > 25.0);
    }

    #[test]
    fn silent_reference_rejected() {
        assert!(sdr(&wave(noise(100, 1)), &Waveform::zeros(100, FS)).is_err());
    }

    #[test]
    fn lengths_truncate_to_shorter() {
        let r = noise(2000, 7);
        let mut e = r.clone();
        e.extend(noise(500, 8));
        assert_eq!(sdr(&wave(e), &wave(r)).unwrap(), SDR_CAP_DB);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn positive_scaling_invariance(seed in 0u64..1000, gain in 0.01f64..100.0) {
            let r = noise(2000, seed);
            let e: Vec<f64> = noise(2000, seed + 1).iter().zip(&r).map(|(a, b)| a + b).collect();
            let s: Vec<f64> = e.iter().map(|v| gain * v).collect();
            let a = sdr(&wave(e), &wave(r.clone())).unwrap();
            let b = sdr(&wave(s), &wave(r)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
