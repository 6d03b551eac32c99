use super::render::{render_ir, BinauralIr};
use super::synth::{synthesize_brir, Brir};
use super::{HeadGeometry, RoomSpec, Vec3};
use crate::error::{Error, Result};

/// Returned by [`measure_drr`] when nothing follows the direct sound.
pub const DRR_CAP_DB: f64 = 100.0;

/// Half-width of the direct-sound window used for DRR.
const DIRECT_HALF_WIDTH_S: f64 = 0.0025;

/// Direct-to-reverberant ratio over both ears, dB. The direct part is
/// everything within +-2.5 ms of each ear's direct arrival.
pub fn measure_drr(ir: &BinauralIr) -> Result<f64> {
    let fs = ir.sample_rate_hz();
    let mut direct = 0.0;
    let mut total = 0.0;
    for ear in 0..2 {
        let toa = ir.direct_toa_s[ear];
        for (n, v) in ir.channel(ear).samples.iter().enumerate() {
            let e = v * v;
            total += e;
            if (n as f64 / fs - toa).abs() <= DIRECT_HALF_WIDTH_S {
                direct += e;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::Silent);
    }
    let rest = total - direct;
    if rest <= total * 1e-12 {
        return Ok(DRR_CAP_DB);
    }
    Ok((10.0 * (direct / rest).log10()).min(DRR_CAP_DB))
}

/// DRR of the full-length rendering of `brir`.
pub fn measure_drr_of(brir: &Brir) -> Result<f64> {
    let ir = render_ir(brir, brir.natural_len() as f64 / brir.sample_rate_hz)?;
    measure_drr(&ir)
}

/// Energy decay of `tail` over `rt60_s`, dB, from a straight-line fit to
/// the Schroeder backward integral between -5 and -35 dB.
pub fn schroeder_decay_db(tail: &[f64], sample_rate_hz: f64, rt60_s: f64) -> Result<f64> {
    let mut edc = vec![0.0; tail.len()];
    let mut acc = 0.0;
    for (i, v) in tail.iter().enumerate().rev() {
        acc += v * v;
        edc[i] = acc;
    }
    if acc <= 0.0 {
        return Err(Error::Silent);
    }
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, e) in edc.iter().enumerate() {
        let db = 10.0 * (e / acc).log10();
        if (-35.0..=-5.0).contains(&db) {
            let t = i as f64 / sample_rate_hz;
            n += 1.0;
            sx += t;
            sy += db;
            sxx += t * t;
            sxy += t * db;
        }
    }
    if n < 2.0 {
        return Err(Error::invalid("tail too short for decay regression"));
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    Ok(-slope * rt60_s)
}

/// Scales every reflection coefficient by a common factor so the BRIR
/// reaches `target_db` DRR (bisection; DRR falls monotonically with the
/// reflection level).
pub fn calibrate_drr(
    room: &RoomSpec,
    source: Vec3,
    head: &HeadGeometry,
    sample_rate_hz: f64,
    target_db: f64,
) -> Result<RoomSpec> {
    let max_coef = room
        .reflectors
        .iter()
        .map(|r| r.coefficient)
        .fold(0.0, f64::max);
    if max_coef <= 0.0 {
        return Err(Error::invalid("room has no reflecting surface to calibrate"));
    }
    let drr_at = |scale: f64| -> Result<f64> {
        let brir = synthesize_brir(&room.with_reflection_scale(scale), source, head, sample_rate_hz)?;
        measure_drr_of(&brir)
    };
    let mut lo = 0.0;
    let mut hi = 1.0 / max_coef;
    if drr_at(lo)? < target_db {
        return Err(Error::invalid(format!(
            "target DRR {target_db} dB unreachable: late tail alone is stronger"
        )));
    }
    if drr_at(hi)? > target_db {
        return Err(Error::invalid(format!(
            "target DRR {target_db} dB unreachable with reflection coefficients <= 1"
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if drr_at(mid)? > target_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(room.with_reflection_scale(0.5 * (lo + hi)))
}
