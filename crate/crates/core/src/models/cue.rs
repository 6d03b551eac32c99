use std::f64::consts::PI;

use num_complex::Complex64;

use super::comb::PhaseResidual;
use crate::acoustics::{render_ir, BinauralIr, Brir};
use crate::error::{Error, Result};
use crate::grid::TfGrid;
use crate::mixture::InterauralObservation;

/// Lower bound on every ILD (dB^2) and IPD (rad^2) variance.
pub const VARIANCE_FLOOR: f64 = 1e-5;

/// Initial ILD variance of the garbage source, dB^2.
pub const GARBAGE_ILD_VAR: f64 = 400.0;

/// ln(1 / 2pi): log density of a uniform phase.
pub const LOG_UNIFORM_IPD: f64 = -1.8378770664093453;

pub fn log_gaussian(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * d * d / var
}

/// Per-frequency ILD of a BRIR with a flag where the right ear has no energy.
#[derive(Debug, Clone, PartialEq)]
pub struct IldModel {
    pub ild_db: Vec<f64>,
    pub flagged: Vec<bool>,
}

fn dtft(x: &[f64], freq_hz: f64, fs: f64) -> Complex64 {
    let step = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / fs);
    let mut rot = Complex64::new(1.0, 0.0);
    let mut acc = Complex64::new(0.0, 0.0);
    for (n, v) in x.iter().enumerate() {
        acc += rot * v;
        rot *= step;
        if n % 256 == 255 {
            // keep the rotor on the unit circle
            rot /= rot.norm();
        }
    }
    acc
}

/// 20 log10 |H_left(f) / H_right(f)| of a rendered two-ear response.
pub fn ild_model_ir(ir: &BinauralIr, freqs_hz: &[f64]) -> IldModel {
    let fs = ir.sample_rate_hz();
    let mut ild_db = Vec::with_capacity(freqs_hz.len());
    let mut flagged = Vec::with_capacity(freqs_hz.len());
    for &f in freqs_hz {
        let l = dtft(&ir.left.samples, f, fs).norm();
        let r = dtft(&ir.right.samples, f, fs).norm();
        if r < 1e-12 || l < 1e-12 {
            ild_db.push(0.0);
            flagged.push(true);
        } else {
            ild_db.push(20.0 * (l / r).log10());
            flagged.push(false);
        }
    }
    IldModel { ild_db, flagged }
}

pub fn ild_model(brir: &Brir, freqs_hz: &[f64]) -> Result<IldModel> {
    let ir = render_ir(brir, brir.natural_len() as f64 / brir.sample_rate_hz)?;
    Ok(ild_model_ir(&ir, freqs_hz))
}

/// ILD Gaussian per frequency and IPD-residual Gaussian per (candidate,
/// frequency). The garbage source keeps a uniform IPD.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceCueModel {
    pub ild_mean_db: Vec<f64>,
    pub ild_var: Vec<f64>,
    /// Row-major `[candidate][bin]`.
    pub ipd_mean_rad: Vec<f64>,
    pub ipd_var: Vec<f64>,
    pub candidates: usize,
    pub is_garbage: bool,
}

impl SourceCueModel {
    pub fn new(ild_mean_db: Vec<f64>, ild_var: Vec<f64>, candidates: usize, ipd_var: f64) -> Result<Self> {
        let bins = ild_mean_db.len();
        if ild_var.len() != bins {
            return Err(Error::mismatch(bins, ild_var.len()));
        }
        if candidates == 0 {
            return Err(Error::invalid("a source needs at least one grid candidate"));
        }
        let m = Self {
            ild_mean_db,
            ild_var,
            ipd_mean_rad: vec![0.0; candidates * bins],
            ipd_var: vec![ipd_var; candidates * bins],
            candidates,
            is_garbage: false,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn bins(&self) -> usize {
        self.ild_mean_db.len()
    }

    pub fn ipd_mean(&self, c: usize, k: usize) -> f64 {
        self.ipd_mean_rad[c * self.bins() + k]
    }

    pub fn ipd_var_at(&self, c: usize, k: usize) -> f64 {
        self.ipd_var[c * self.bins() + k]
    }

    pub fn validate(&self) -> Result<()> {
        let finite_floor = |v: &f64| v.is_finite() && *v >= VARIANCE_FLOOR;
        if !self.ild_var.iter().all(finite_floor) || !self.ipd_var.iter().all(finite_floor) {
            return Err(Error::invalid(format!("variances must be finite and >= {VARIANCE_FLOOR}")));
        }
        if self.ipd_mean_rad.len() != self.candidates * self.bins() || self.ipd_var.len() != self.ipd_mean_rad.len() {
            return Err(Error::mismatch(self.candidates * self.bins(), self.ipd_mean_rad.len()));
        }
        Ok(())
    }
}

/// Zero-mean wide ILD Gaussian and uniform IPD.
pub fn garbage_model(bins: usize) -> SourceCueModel {
    SourceCueModel {
        ild_mean_db: vec![0.0; bins],
        ild_var: vec![GARBAGE_ILD_VAR; bins],
        ipd_mean_rad: vec![0.0; bins],
        ipd_var: vec![1.0; bins],
        candidates: 1,
        is_garbage: true,
    }
}

/// log p(ILD | source) + log p(IPD residual | source, candidate) per bin.
/// Silent and model-undefined bins contribute 0. `residual` may be `None`
/// only for the garbage source.
pub fn cue_log_likelihood(
    obs: &InterauralObservation,
    model: &SourceCueModel,
    c_index: usize,
    residual: Option<&PhaseResidual>,
) -> Result<TfGrid<f64>> {
    if model.bins() != obs.bins() {
        return Err(Error::mismatch(obs.bins(), model.bins()));
    }
    if c_index >= model.candidates {
        return Err(Error::invalid(format!("candidate {c_index} of {}", model.candidates)));
    }
    if !model.is_garbage && residual.is_none() {
        return Err(Error::invalid("a real source needs a phase residual"));
    }
    Ok(TfGrid::from_fn(obs.frames(), obs.bins(), |m, k| {
        if obs.silent[(m, k)] {
            return 0.0;
        }
        let ild = log_gaussian(obs.ild_db[(m, k)], model.ild_mean_db[k], model.ild_var[k]);
        let ipd = match residual {
            _ if model.is_garbage => LOG_UNIFORM_IPD,
            Some(r) if r.undefined_bins[k] => return 0.0,
            Some(r) => log_gaussian(r.values[(m, k)], model.ipd_mean(c_index, k), model.ipd_var_at(c_index, k)),
            None => unreachable!(),
        };
        ild + ipd
    }))
}
