//! Initialisation by localisation: arrival times and directions of the
//! direct sound and the first reflection from an array recording, turned
//! into comb-filter delays and an ILD prior for the binaural model.

mod doa;
mod toa;

use serde::{Deserialize, Serialize};

use crate::acoustics::{
    fractional_delay_kernel, synthesize_brir, ArraySpec, BinauralIr, Brir, HeadGeometry, RoomSpec, Vec3,
    SPEED_OF_SOUND,
};
use crate::dsp::Waveform;
use crate::em::SourceInit;
use crate::error::{Error, Result};
use crate::models::{ild_model, CombParams};

pub use doa::{das_doa, DoaEstimate, DOA_BAND_HZ, MIN_SPREAD_DB};
pub use toa::{estimate_toa_pair, estimate_toas, ToaPair, PEAK_TO_NOISE, REFLECTION_WINDOW_S};

/// Initial ILD variance, dB^2.
pub const INIT_ILD_VAR: f64 = 100.0;

/// Margin around the arrivals of one reflection order for the DOA window, seconds.
const DOA_MARGIN_S: f64 = 0.001;

/// Half-width of the search around a predicted BRIR arrival, seconds.
pub const SNAP_RADIUS_S: f64 = 0.001;

/// Location of one arrival (0 direct, 1 first reflection) in the array frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalEstimate {
    pub toa_per_channel_s: Vec<f64>,
    pub azimuth_rad: f64,
    pub radius_m: f64,
    /// (b_x, b_y) relative to the array reference.
    pub position_m: [f64; 2],
    pub spread_db: f64,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    /// Array reference point in room coordinates.
    pub origin: Vec3,
    pub direct: ArrivalEstimate,
    pub reflection: ArrivalEstimate,
}

/// Mean of the per-channel path lengths.
pub fn radius_from_toas(toas_s: &[f64]) -> f64 {
    toas_s.iter().map(|t| t * SPEED_OF_SOUND).sum::<f64>() / toas_s.len() as f64
}

impl LocalizationResult {
    pub fn arrival(&self, order: usize) -> &ArrivalEstimate {
        if order == 0 {
            &self.direct
        } else {
            &self.reflection
        }
    }

    /// Room coordinates of an arrival, at the height of the array.
    pub fn world_position(&self, order: usize) -> Vec3 {
        let [x, y] = self.arrival(order).position_m;
        self.origin + Vec3::new(x, y, 0.0)
    }

    /// Shifts both estimated positions by `offset_m`, for arrays that are
    /// not centred on the listener.
    pub fn translated(&self, offset_m: [f64; 2]) -> Self {
        let mut out = self.clone();
        for a in [&mut out.direct, &mut out.reflection] {
            let x = a.position_m[0] + offset_m[0];
            let y = a.position_m[1] + offset_m[1];
            a.position_m = [x, y];
            a.radius_m = x.hypot(y);
            a.azimuth_rad = y.atan2(x);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for a in [&self.direct, &self.reflection] {
            if !(a.radius_m > 0.0) {
                return Err(Error::Degenerate(format!("radius {} m", a.radius_m)));
            }
        }
        for (d, r) in self.direct.toa_per_channel_s.iter().zip(&self.reflection.toa_per_channel_s) {
            if !(d < r) {
                return Err(Error::Degenerate("reflection precedes the direct sound".into()));
            }
        }
        Ok(())
    }
}

fn locate(channels: &[Waveform], array: &ArraySpec, toas: Vec<f64>) -> Result<ArrivalEstimate> {
    let lo = toas.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = toas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let doa = das_doa(channels, array, ((lo - DOA_MARGIN_S).max(0.0), hi + DOA_MARGIN_S))?;
    let radius = radius_from_toas(&toas);
    Ok(ArrivalEstimate {
        toa_per_channel_s: toas,
        azimuth_rad: doa.azimuth_rad,
        radius_m: radius,
        position_m: [radius * doa.azimuth_rad.cos(), radius * doa.azimuth_rad.sin()],
        spread_db: doa.spread_db,
        low_confidence: doa.low_confidence,
    })
}

/// Direct sound and first image source from array impulse responses.
pub fn localize(channels: &[Waveform], array: &ArraySpec) -> Result<LocalizationResult> {
    let toas = estimate_toas(channels)?;
    let direct = locate(channels, array, toas.iter().map(|p| p.direct_s).collect())?;
    let reflection = locate(channels, array, toas.iter().map(|p| p.reflection_s).collect())?;
    let out = LocalizationResult {
        origin: array.reference,
        direct,
        reflection,
    };
    out.validate()?;
    Ok(out)
}

/// Comb parameters with the per-ear arrival times they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombInit {
    pub params: CombParams,
    /// `[order][ear]`, geometric prediction.
    pub predicted_toa_s: [[f64; 2]; 2],
    /// `[order][ear]`, BRIR peak nearest the prediction.
    pub toa_s: [[f64; 2]; 2],
}

/// Largest |h| within the search radius of `predicted`, refined to a
/// fraction of a sample, and the tap amplitude fitted there.
fn snap(h: &[f64], fs: f64, predicted: f64) -> Result<(f64, f64)> {
    let centre = predicted * fs;
    if !(centre >= 0.0) || centre >= h.len() as f64 {
        return Err(Error::invalid(format!(
            "predicted arrival {:.3} ms outside the BRIR support",
            predicted * 1e3
        )));
    }
    let r = SNAP_RADIUS_S * fs;
    let lo = (centre - r).floor().max(0.0) as usize;
    let hi = ((centre + r).ceil() as usize).min(h.len() - 1);
    let mag: Vec<f64> = h.iter().map(|v| v.abs()).collect();
    let n = (lo..=hi)
        .max_by(|a, b| mag[*a].total_cmp(&mag[*b]))
        .expect("range is non-empty");
    if mag[n] == 0.0 {
        return Err(Error::Degenerate(format!(
            "no BRIR energy near {:.3} ms",
            predicted * 1e3
        )));
    }
    let tau = toa::refine(&mag, n);
    // least-squares gain of the interpolation kernel placed at tau
    let (start, kernel) = fractional_delay_kernel(tau);
    let (mut num, mut den) = (0.0, 0.0);
    for (j, c) in kernel.iter().enumerate() {
        let idx = start + j as i64;
        if idx >= 0 && (idx as usize) < h.len() {
            num += h[idx as usize] * c;
        }
        den += c * c;
    }
    Ok((tau / fs, num / den))
}

/// Ear-path arrival predictions from the localised source and image,
/// snapped to the peaks of the rendered BRIR.
pub fn init_comb_params(loc: &LocalizationResult, head: &HeadGeometry, ir: &BinauralIr) -> Result<CombInit> {
    let fs = ir.sample_rate_hz();
    let ears = head.ears();
    let mut predicted = [[0.0; 2]; 2];
    let mut toa = [[0.0; 2]; 2];
    let mut amp = [[0.0; 2]; 2];
    for order in 0..2 {
        let p = loc.world_position(order);
        for ear in 0..2 {
            predicted[order][ear] = p.distance(ears[ear]) / SPEED_OF_SOUND;
            let (t, a) = snap(&ir.channel(ear).samples, fs, predicted[order][ear])?;
            toa[order][ear] = t;
            amp[order][ear] = a;
        }
    }
    let params = CombParams {
        n_ds_s: toa[0][1] - toa[0][0],
        n_df_s: toa[1][0] - toa[0][0],
        n_st_s: toa[1][1] - toa[1][0],
        p01: amp[0][0],
        p11: amp[1][0],
        p02: amp[0][1],
        p12: amp[1][1],
    };
    params.validate()?;
    Ok(CombInit {
        params,
        predicted_toa_s: predicted,
        toa_s: toa,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IldPrior {
    pub mean_db: Vec<f64>,
    pub var_db2: Vec<f64>,
}

/// ILD prior from a BRIR at the estimated direction.
pub fn init_ild_prior(brir_at_doa: &Brir, freqs_hz: &[f64]) -> Result<IldPrior> {
    let m = ild_model(brir_at_doa, freqs_hz)?;
    Ok(IldPrior {
        mean_db: m.ild_db,
        var_db2: vec![INIT_ILD_VAR; freqs_hz.len()],
    })
}

/// Anechoic BRIR of a source at `azimuth_rad` (room frame) and `radius_m`
/// from the head centre.
pub fn synthetic_brir_at(head: &HeadGeometry, azimuth_rad: f64, radius_m: f64, sample_rate_hz: f64) -> Result<Brir> {
    synthesize_brir(
        &RoomSpec::anechoic(),
        Vec3::polar(head.center, radius_m, azimuth_rad),
        head,
        sample_rate_hz,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InitOptions {
    /// Added to localised positions before conversion to ear delays.
    pub translation_m: [f64; 2],
}

/// Everything estimated for one source; serialises as the localisation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub localization: LocalizationResult,
    pub comb: CombInit,
    pub ild_prior: IldPrior,
}

impl InitReport {
    pub fn source_init(&self) -> SourceInit {
        SourceInit {
            comb: self.comb.params,
            ild_mean_db: self.ild_prior.mean_db.clone(),
        }
    }
}

/// Localise, convert to comb parameters against the rendered BRIR `ir`,
/// and build the ILD prior from a synthetic BRIR at the estimated
/// direct-sound direction.
pub fn initialize(
    channels: &[Waveform],
    array: &ArraySpec,
    head: &HeadGeometry,
    ir: &BinauralIr,
    freqs_hz: &[f64],
    opts: &InitOptions,
) -> Result<InitReport> {
    let mut loc = localize(channels, array)?;
    if opts.translation_m != [0.0, 0.0] {
        loc = loc.translated(opts.translation_m);
    }
    let comb = init_comb_params(&loc, head, ir)?;
    let at_doa = synthetic_brir_at(head, loc.direct.azimuth_rad, loc.direct.radius_m.max(0.5), ir.sample_rate_hz())?;
    let ild_prior = init_ild_prior(&at_doa, freqs_hz)?;
    Ok(InitReport {
        localization: loc,
        comb,
        ild_prior,
    })
}
