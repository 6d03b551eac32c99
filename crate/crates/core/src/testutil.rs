//! Helpers shared by unit tests.

use crate::dsp::{stft, StftParams, WindowKind, Waveform};
use crate::mixture::{interaural_spectrogram, InterauralObservation};

/// A small observation (7 frames x 5 bins) whose cues cycle through the
/// given values; every bin is non-silent.
pub fn toy_observation(ild: &[f64], ipd: &[f64]) -> InterauralObservation {
    let params = StftParams::new(8, 2, WindowKind::SqrtHann);
    let x = Waveform::new(vec![1.0; 8], 16_000.0).unwrap();
    let spec = stft(&x, &params).unwrap();
    let mut obs = interaural_spectrogram(&spec, &spec).unwrap();
    let (frames, bins) = (obs.frames(), obs.bins());
    for m in 0..frames {
        for k in 0..bins {
            obs.ild_db[(m, k)] = ild[(m * bins + k) % ild.len()];
            obs.ipd_rad[(m, k)] = ipd[(m * bins + k) % ipd.len()];
            obs.silent[(m, k)] = false;
        }
    }
    obs
}
