//! Scoring: projection SDR, ORACLE and random control masks, paired
//! t-tests and per-method aggregation.

mod sdr;
mod stats;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::em::{SoftMask, Variant};
use crate::error::{Error, Result};
use crate::grid::TfGrid;

pub use sdr::{sdr, sdr_with_taps, SDR_CAP_DB, SDR_TAPS};
pub use stats::{aggregate, mixture_count, paired_ttest, AngleMean, ExperimentReport, MethodSummary, TTest, TTestEntry};

/// A separation method: one of the EM variants or a control mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Em(Variant),
    Oracle,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Em(v) => v.name(),
            Method::Oracle => "oracle",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Method::Oracle),
            "random" => Ok(Method::Random),
            other => other.parse().map(Method::Em),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

/// One CSV row: a target source separated by one method in one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationScore {
    pub scene_id: String,
    pub method: Method,
    pub target_angle_deg: f64,
    pub interferer_angle_deg: f64,
    pub sdr_db_left: f64,
    pub sdr_db_right: f64,
    pub seed: u64,
}

impl SeparationScore {
    pub fn mean_sdr_db(&self) -> f64 {
        0.5 * (self.sdr_db_left + self.sdr_db_right)
    }
}

/// Per-bin energy of each source image summed over both ears.
pub fn image_energies(images: &[[Spectrogram; 2]]) -> Result<Vec<TfGrid<f64>>> {
    let first = images.first().ok_or_else(|| Error::invalid("no source images"))?;
    images
        .iter()
        .map(|[l, r]| {
            first[0].bins.ensure_shape(&l.bins)?;
            l.bins.ensure_shape(&r.bins)?;
            let (pl, pr) = (l.power(), r.power());
            let (f, b) = pl.shape();
            Ok(TfGrid::from_fn(f, b, |m, k| pl[(m, k)] + pr[(m, k)]))
        })
        .collect()
}

/// Ideal binary masks: each bin goes to the source with the largest
/// energy, ties to the lowest index.
pub fn oracle_masks(energies: &[TfGrid<f64>]) -> Result<Vec<SoftMask>> {
    let first = energies.first().ok_or_else(|| Error::invalid("no sources"))?;
    for e in energies {
        first.ensure_shape(e)?;
    }
    let (frames, bins) = first.shape();
    let mut masks: Vec<SoftMask> = (0..energies.len())
        .map(|l| SoftMask {
            source_id: l,
            values: TfGrid::filled(frames, bins, 0.0),
            emitting: true,
        })
        .collect();
    for m in 0..frames {
        for k in 0..bins {
            let mut best = 0;
            for (l, e) in energies.iter().enumerate().skip(1) {
                if e[(m, k)] > energies[best][(m, k)] {
                    best = l;
                }
            }
            masks[best].values[(m, k)] = 1.0;
        }
    }
    Ok(masks)
}

/// I.i.d. uniform [0, 1) values for the first source and the complement
/// for the second. With more sources the draws are normalised per bin.
pub fn random_masks(frames: usize, bins: usize, sources: usize, seed: u64) -> Result<Vec<SoftMask>> {
    if sources == 0 {
        return Err(Error::invalid("no sources"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = |l, values| SoftMask {
        source_id: l,
        values,
        emitting: true,
    };
    if sources <= 2 {
        let first = TfGrid::from_fn(frames, bins, |_, _| rng.gen::<f64>());
        let mut out = vec![mask(0, first.clone())];
        if sources == 2 {
            out.push(mask(1, first.map(|v| 1.0 - v)));
        } else {
            out[0].values = TfGrid::filled(frames, bins, 1.0);
        }
        return Ok(out);
    }
    let draws: Vec<TfGrid<f64>> = (0..sources)
        .map(|_| TfGrid::from_fn(frames, bins, |_, _| rng.gen::<f64>()))
        .collect();
    Ok((0..sources)
        .map(|l| {
            mask(
                l,
                TfGrid::from_fn(frames, bins, |m, k| {
                    let total: f64 = draws.iter().map(|d| d[(m, k)]).sum();
                    draws[l][(m, k)] / total
                }),
            )
        })
        .collect())
}

/// Random mask of a single source.
pub fn random_mask(frames: usize, bins: usize, seed: u64) -> SoftMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SoftMask {
        source_id: 0,
        values: TfGrid::from_fn(frames, bins, |_, _| rng.gen::<f64>()),
        emitting: true,
    }
}
