use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::wrap_phase;
use crate::error::{Error, Result};
use crate::grid::TfGrid;
use crate::mixture::InterauralObservation;

/// Delays (seconds) and amplitudes of the direct sound and first reflection
/// at both ears, relative to the direct arrival at the left ear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombParams {
    /// Right-ear direct arrival minus left-ear direct arrival.
    pub n_ds_s: f64,
    /// Left-ear reflection minus left-ear direct arrival.
    pub n_df_s: f64,
    /// Right-ear reflection minus left-ear reflection.
    pub n_st_s: f64,
    pub p01: f64,
    pub p11: f64,
    pub p02: f64,
    pub p12: f64,
}

impl CombParams {
    /// Direct path only, unit amplitudes.
    pub fn direct_only(n_ds_s: f64) -> Self {
        Self {
            n_ds_s,
            n_df_s: 0.0,
            n_st_s: 0.0,
            p01: 1.0,
            p11: 0.0,
            p02: 1.0,
            p12: 0.0,
        }
    }

    /// Same direct path with the reflection amplitudes zeroed.
    pub fn without_reflection(&self) -> Self {
        Self {
            p11: 0.0,
            p12: 0.0,
            ..*self
        }
    }

    pub fn has_reflection(&self) -> bool {
        self.p11 != 0.0 || self.p12 != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.n_ds_s, self.n_df_s, self.n_st_s, self.p01, self.p11, self.p02, self.p12];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("comb parameters must be finite"));
        }
        if self.n_df_s < 0.0 {
            return Err(Error::invalid(format!("reflection precedes direct sound: n_df = {}", self.n_df_s)));
        }
        if self.p01 == 0.0 || self.p02 == 0.0 {
            return Err(Error::invalid("direct-path amplitudes must be non-zero"));
        }
        Ok(())
    }
}

/// Model phase per frequency; bins where the right-ear response vanishes
/// are flagged and carry phase 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CombPhase {
    pub phase: Vec<f64>,
    pub undefined: Vec<bool>,
}

/// Phase of the model at one frequency, or `None` where it is undefined.
pub fn comb_phase_at(c: &CombParams, freq_hz: f64) -> Option<f64> {
    let w = 2.0 * PI * freq_hz;
    let num = Complex64::new(c.p01, 0.0) + Complex64::from_polar(c.p11, -w * c.n_df_s);
    // right-ear reflection relative to the left-ear direct sound: n_df + n_st
    let den = Complex64::from_polar(c.p02, -w * c.n_ds_s) + Complex64::from_polar(c.p12, -w * (c.n_df_s + c.n_st_s));
    if den.norm() < 1e-12 {
        return None;
    }
    Some(wrap_phase((num * den.conj()).arg()))
}

pub fn comb_ipd_model(c: &CombParams, freqs_hz: &[f64]) -> CombPhase {
    let mut phase = Vec::with_capacity(freqs_hz.len());
    let mut undefined = Vec::with_capacity(freqs_hz.len());
    for &f in freqs_hz {
        match comb_phase_at(c, f) {
            Some(p) => {
                phase.push(p);
                undefined.push(false);
            }
            None => {
                phase.push(0.0);
                undefined.push(true);
            }
        }
    }
    CombPhase { phase, undefined }
}

/// Wrapped difference between the observed IPD and a model phase.
#[derive(Debug, Clone)]
pub struct PhaseResidual {
    pub values: TfGrid<f64>,
    /// Per frequency bin: the model is undefined there.
    pub undefined_bins: Vec<bool>,
}

impl PhaseResidual {
    /// Silent or model-undefined.
    pub fn excluded(&self, obs: &InterauralObservation, m: usize, k: usize) -> bool {
        self.undefined_bins[k] || obs.silent[(m, k)]
    }
}

pub fn phase_residual(obs: &InterauralObservation, c: &CombParams) -> PhaseResidual {
    let model = comb_ipd_model(c, &obs.freqs_hz());
    let values = TfGrid::from_fn(obs.frames(), obs.bins(), |m, k| {
        if model.undefined[k] || obs.silent[(m, k)] {
            0.0
        } else {
            wrap_phase(obs.ipd_rad[(m, k)] - model.phase[k])
        }
    });
    PhaseResidual {
        values,
        undefined_bins: model.undefined,
    }
}
