//! Expectation-maximisation over sources and discrete comb-parameter
//! candidates. The four separation methods differ only in configuration:
//! whether the comb model includes the first reflection, and whether the
//! coherence mask weights the posterior.

mod engine;
mod grid;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{istft, Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::grid::TfGrid;
use crate::models::{IcMask, KappaMode, VARIANCE_FLOOR};

pub use engine::{argmax_candidates, e_step, initial_state, m_step, run_em, EmDiagnostics, EmOutput, EmState, Occupation, SourceInit};
pub use grid::{build_param_grid, ParamGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Messl,
    IcMessl,
    ErMessl,
    EricMessl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Messl, Variant::IcMessl, Variant::ErMessl, Variant::EricMessl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Messl => "messl",
            Variant::IcMessl => "ic-messl",
            Variant::ErMessl => "er-messl",
            Variant::EricMessl => "eric-messl",
        }
    }

    pub fn uses_ic(self) -> bool {
        matches!(self, Variant::IcMessl | Variant::EricMessl)
    }

    pub fn uses_reflection(self) -> bool {
        matches!(self, Variant::ErMessl | Variant::EricMessl)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}' (expected messl, ic-messl, er-messl or eric-messl)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub variant: Variant,
    pub max_iters: usize,
    /// Odd number of values per delay dimension (n_ds, n_df, n_st).
    pub grid_steps: [usize; 3],
    /// Half-width of every delay dimension, seconds.
    pub range_s: f64,
    pub variance_floor: f64,
    /// Initial IPD-residual variance, rad^2.
    pub init_ipd_var: f64,
    /// Initial ILD variance of real sources, dB^2.
    pub init_ild_var: f64,
    /// Model diffuse energy with an extra source.
    pub garbage: bool,
    pub kappa: KappaMode,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            variant: Variant::EricMessl,
            max_iters: 16,
            grid_steps: [5, 5, 5],
            range_s: 0.13e-3,
            variance_floor: VARIANCE_FLOOR,
            init_ipd_var: 1.0,
            init_ild_var: 100.0,
            garbage: true,
            kappa: KappaMode::default(),
        }
    }
}

impl EmConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.grid_steps.iter().any(|s| s % 2 == 0) {
            return Err(Error::invalid(format!("grid steps {:?} must be odd", self.grid_steps)));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::invalid("variance floor must be positive"));
        }
        if !(self.init_ipd_var >= self.variance_floor) || !(self.init_ild_var >= self.variance_floor) {
            return Err(Error::invalid("initial variances must be at least the floor"));
        }
        Ok(())
    }
}

/// Per-bin prior weights for real sources and for the garbage source.
#[derive(Debug, Clone, PartialEq)]
pub struct BinPrior {
    pub real: TfGrid<f64>,
    pub garbage: TfGrid<f64>,
}

impl BinPrior {
    /// Coherence for real sources, its complement for the garbage source.
    pub fn from_ic(ic: &IcMask) -> Self {
        Self {
            real: ic.gamma.clone(),
            garbage: ic.gamma.map(|g| 1.0 - g),
        }
    }

    /// Weight 1 everywhere.
    pub fn uniform(frames: usize, bins: usize) -> Self {
        Self {
            real: TfGrid::filled(frames, bins, 1.0),
            garbage: TfGrid::filled(frames, bins, 1.0),
        }
    }

    pub fn validate(&self, frames: usize, bins: usize) -> Result<()> {
        for g in [&self.real, &self.garbage] {
            if g.shape() != (frames, bins) {
                return Err(Error::mismatch(format!("{frames}x{bins}"), format!("{}x{}", g.frames(), g.bins())));
            }
            if g.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("prior weights must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Posterior membership of one source, summed over its candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub source_id: usize,
    pub values: TfGrid<f64>,
    /// False for the garbage source, whose mask is not resynthesised.
    pub emitting: bool,
}

/// Inverse STFT of each ear weighted by each mask, one stereo pair per mask.
pub fn apply_masks(left: &Spectrogram, right: &Spectrogram, masks: &[SoftMask]) -> Result<Vec<(Waveform, Waveform)>> {
    left.bins.ensure_shape(&right.bins)?;
    masks
        .iter()
        .map(|m| Ok((istft(&left.masked(&m.values)?)?, istft(&right.masked(&m.values)?)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16_000.0).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("gmm".parse::<Variant>().is_err());
    }

    #[test]
    fn mask_application() {
        let p = StftParams::default();
        let (l, r) = (noise(9000, 1), noise(9000, 2));
        let (sl, sr) = (stft(&l, &p).unwrap(), stft(&r, &p).unwrap());
        let (f, b) = sl.bins.shape();
        let ones = SoftMask {
            source_id: 0,
            values: TfGrid::filled(f, b, 1.0),
            emitting: true,
        };
        let zeros = SoftMask {
            source_id: 1,
            values: TfGrid::filled(f, b, 0.0),
            emitting: true,
        };
        let out = apply_masks(&sl, &sr, &[ones, zeros]).unwrap();
        for (a, b) in out[0].0.samples.iter().zip(&l.samples) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(out[1].0.samples.iter().chain(&out[1].1.samples).all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = TfGrid::from_fn(f, b, |_, _| rng.gen_range(0.0..1.0));
        let a = SoftMask {
            source_id: 0,
            values: m.clone(),
            emitting: true,
        };
        let c = SoftMask {
            source_id: 1,
            values: m.map(|v| 1.0 - v),
            emitting: true,
        };
        let out = apply_masks(&sl, &sr, &[a, c]).unwrap();
        for i in 0..l.len() {
            assert!((out[0].0.samples[i] + out[1].0.samples[i] - l.samples[i]).abs() < 1e-6);
            assert!((out[0].1.samples[i] + out[1].1.samples[i] - r.samples[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_shape_checked() {
        let p = StftParams::default();
        let s = stft(&noise(9000, 1), &p).unwrap();
        let bad = SoftMask {
            source_id: 0,
            values: TfGrid::filled(3, 3, 1.0),
            emitting: true,
        };
        assert!(apply_masks(&s, &s, &[bad]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EmConfig::default().validate().is_ok());
        let mut c = EmConfig::default();
        c.max_iters = 0;
        assert!(c.validate().is_err());
        let mut c = EmConfig::default();
        c.grid_steps = [5, 4, 5];
        assert!(c.validate().is_err());
        let c: EmConfig = serde_json::from_str(r#"{"variant":"messl","max_iters":3}"#).unwrap();
        assert_eq!(c.variant, Variant::Messl);
        assert_eq!(c.grid_steps, [5, 5, 5]);
    }
}
