use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::render::{render_taps, ShadowFilter};
use super::{ArraySpec, HeadGeometry, Reflector, RoomSpec, Vec3, SPEED_OF_SOUND};
use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// A specular arrival approximated by a scaled Dirac delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTap {
    pub toa_s: f64,
    pub amplitude: f64,
    /// 0 for the direct sound, 1 for first-order reflections.
    pub order_index: u32,
    /// High-frequency attenuation applied by the head shadow, dB.
    #[serde(default)]
    pub shadow_db: f64,
}

/// Mirror image of `source` across the plane of `reflector`.
pub fn image_source(source: Vec3, reflector: &Reflector) -> Result<Vec3> {
    let n2 = reflector.normal.dot(reflector.normal);
    if !(n2 > 1e-24) || !n2.is_finite() {
        return Err(Error::Degenerate("reflector normal has zero length".into()));
    }
    let signed = reflector.normal.dot(source) - reflector.offset;
    if signed.abs() / n2.sqrt() < 1e-12 {
        return Err(Error::Degenerate("source lies on the reflector".into()));
    }
    Ok(source - reflector.normal * (2.0 * signed / n2))
}

/// Binaural room impulse response in parametric form.
#[derive(Debug, Clone, PartialEq)]
pub struct Brir {
    pub left_taps: Vec<ReflectionTap>,
    pub right_taps: Vec<ReflectionTap>,
    /// Late reverberation per ear, starting at `tail_start` samples.
    pub tail: [Vec<f64>; 2],
    pub tail_start: usize,
    pub sample_rate_hz: f64,
    pub source: Vec3,
    pub head: HeadGeometry,
    pub rt60_s: f64,
    pub seed: u64,
    pub shadow: ShadowFilter,
}

/// JSON sidecar stored next to a rendered BRIR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrirSidecar {
    pub left_taps: Vec<ReflectionTap>,
    pub right_taps: Vec<ReflectionTap>,
    pub source: Vec3,
    pub head: HeadGeometry,
    pub rt60_s: f64,
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub tail_empty: bool,
}

impl Brir {
    /// Direct and specular taps only, no tail.
    pub fn from_taps(
        left_taps: Vec<ReflectionTap>,
        right_taps: Vec<ReflectionTap>,
        sample_rate_hz: f64,
    ) -> Self {
        Self {
            left_taps,
            right_taps,
            tail: [Vec::new(), Vec::new()],
            tail_start: 0,
            sample_rate_hz,
            source: Vec3::default(),
            head: HeadGeometry::default(),
            rt60_s: 0.0,
            seed: 0,
            shadow: ShadowFilter::default(),
        }
    }

    pub fn taps(&self, ear: usize) -> &[ReflectionTap] {
        if ear == 0 {
            &self.left_taps
        } else {
            &self.right_taps
        }
    }

    pub fn direct_tap(&self, ear: usize) -> Option<&ReflectionTap> {
        self.taps(ear).iter().find(|t| t.order_index == 0)
    }

    pub fn direct_toa_s(&self, ear: usize) -> Option<f64> {
        self.direct_tap(ear).map(|t| t.toa_s)
    }

    /// Earliest first-order reflection of `ear`.
    pub fn first_reflection(&self, ear: usize) -> Option<&ReflectionTap> {
        self.taps(ear)
            .iter()
            .filter(|t| t.order_index == 1)
            .min_by(|a, b| a.toa_s.total_cmp(&b.toa_s))
    }

    /// Delay of the first reflection after the direct sound, left ear.
    pub fn first_reflection_lag_s(&self) -> Option<f64> {
        Some(self.first_reflection(0)?.toa_s - self.direct_toa_s(0)?)
    }

    pub fn tail_is_empty(&self) -> bool {
        self.tail.iter().all(|t| t.is_empty())
    }

    /// Samples needed to hold every tap and the full tail.
    pub fn natural_len(&self) -> usize {
        let last_tap = self
            .left_taps
            .iter()
            .chain(&self.right_taps)
            .map(|t| t.toa_s)
            .fold(0.0, f64::max);
        let taps_end = (last_tap * self.sample_rate_hz).ceil() as usize + super::KERNEL_POINTS + 64;
        let tail_end = self.tail_start + self.tail.iter().map(Vec::len).max().unwrap_or(0);
        taps_end.max(tail_end)
    }

    pub fn sidecar(&self) -> BrirSidecar {
        BrirSidecar {
            left_taps: self.left_taps.clone(),
            right_taps: self.right_taps.clone(),
            source: self.source,
            head: self.head,
            rt60_s: self.rt60_s,
            seed: self.seed,
            sample_rate_hz: self.sample_rate_hz,
            tail_empty: self.tail_is_empty(),
        }
    }
}

struct Arrival {
    position: Vec3,
    order: u32,
    coefficient: f64,
}

fn arrivals(room: &RoomSpec, source: Vec3) -> Result<Vec<Arrival>> {
    let mut out = vec![Arrival {
        position: source,
        order: 0,
        coefficient: 1.0,
    }];
    for r in &room.reflectors {
        let position = image_source(source, r)?;
        if r.coefficient > 0.0 {
            out.push(Arrival {
                position,
                order: 1,
                coefficient: r.coefficient,
            });
        }
    }
    Ok(out)
}

fn tap_for(arrival: &Arrival, receiver: Vec3) -> Result<ReflectionTap> {
    let d = arrival.position.distance(receiver);
    if d < 1e-6 {
        return Err(Error::Degenerate("source coincides with a receiver".into()));
    }
    Ok(ReflectionTap {
        toa_s: d / SPEED_OF_SOUND,
        amplitude: arrival.coefficient / d,
        order_index: arrival.order,
        shadow_db: 0.0,
    })
}

/// Samples per energy-normalised block of tail noise.
const TAIL_BLOCK: usize = 32;

/// Exponentially decaying Gaussian noise whose expected energy is
/// `direct_energy * 10^(level_db / 10)`; energy decays 60 dB over `rt60_s`.
fn stochastic_tail(room: &RoomSpec, direct_energy: f64, fs: f64, stream: u64) -> Vec<f64> {
    if room.rt60_s <= 0.0 {
        return Vec::new();
    }
    let rate = (1e6f64).ln() / room.rt60_s;
    let len = (1.5 * room.rt60_s * fs).ceil() as usize;
    let per_sample = (-rate / fs).exp();
    let target = direct_energy * 10f64.powf(room.tail_to_direct_db / 10.0);
    let geometric_sum = (1.0 - per_sample.powi(len as i32)) / (1.0 - per_sample);
    let sigma0 = (target / geometric_sum).sqrt();
    let amp_decay = per_sample.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(room.noise_seed);
    rng.set_stream(stream);
    let mut noise: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    // unit mean square per block keeps the realised envelope on the target decay
    for block in noise.chunks_mut(TAIL_BLOCK) {
        let ms = block.iter().map(|g| g * g).sum::<f64>() / block.len() as f64;
        if ms > 0.0 {
            let k = ms.sqrt().recip();
            block.iter_mut().for_each(|g| *g *= k);
        }
    }
    let mut env = sigma0;
    for v in &mut noise {
        *v *= env;
        env *= amp_decay;
    }
    noise
}

pub fn synthesize_brir(room: &RoomSpec, source: Vec3, head: &HeadGeometry, sample_rate_hz: f64) -> Result<Brir> {
    room.validate()?;
    let shadow = ShadowFilter::default();
    let arrivals = arrivals(room, source)?;
    let ears = head.ears();
    let mut taps: [Vec<ReflectionTap>; 2] = [Vec::new(), Vec::new()];
    for (ear_idx, ear) in ears.iter().enumerate() {
        for a in &arrivals {
            let mut tap = tap_for(a, *ear)?;
            let lateral = head.laterality(a.position);
            // far side of the head: left ear shadowed for sources on the right
            let contra = if ear_idx == 0 { -lateral } else { lateral };
            tap.shadow_db = shadow.max_db * contra.max(0.0);
            taps[ear_idx].push(tap);
        }
        taps[ear_idx].sort_by(|a, b| a.toa_s.total_cmp(&b.toa_s).then(a.order_index.cmp(&b.order_index)));
    }

    let direct: Vec<&ReflectionTap> = taps
        .iter()
        .map(|t| t.iter().find(|x| x.order_index == 0).expect("direct tap present"))
        .collect();
    let earliest = direct[0].toa_s.min(direct[1].toa_s);
    let direct_energy = 0.5 * (direct[0].amplitude.powi(2) + direct[1].amplitude.powi(2));
    let tail = [
        stochastic_tail(room, direct_energy, sample_rate_hz, 0),
        stochastic_tail(room, direct_energy, sample_rate_hz, 1),
    ];
    let tail_start = ((earliest + room.tail_onset_s) * sample_rate_hz).round() as usize;

    let [left_taps, right_taps] = taps;
    let brir = Brir {
        left_taps,
        right_taps,
        tail,
        tail_start,
        sample_rate_hz,
        source,
        head: *head,
        rt60_s: room.rt60_s,
        seed: room.noise_seed,
        shadow,
    };
    if let Some(lag) = brir.first_reflection_lag_s() {
        if !(0.005..=0.040).contains(&lag) {
            log::warn!("first reflection lag {:.2} ms outside [5, 40] ms", lag * 1e3);
        }
    }
    Ok(brir)
}

/// Omnidirectional multichannel room impulse responses.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayRirs {
    pub channels: Vec<Waveform>,
    pub taps: Vec<Vec<ReflectionTap>>,
    pub array: ArraySpec,
    pub source: Vec3,
}

pub fn synthesize_array_rirs(
    room: &RoomSpec,
    source: Vec3,
    array: &ArraySpec,
    sample_rate_hz: f64,
) -> Result<ArrayRirs> {
    room.validate()?;
    array.validate()?;
    let arrivals = arrivals(room, source)?;
    let mut all_taps = Vec::with_capacity(array.len());
    for mic in &array.positions {
        let mut taps = arrivals
            .iter()
            .map(|a| tap_for(a, *mic))
            .collect::<Result<Vec<_>>>()?;
        taps.sort_by(|a, b| a.toa_s.total_cmp(&b.toa_s));
        all_taps.push(taps);
    }
    let earliest = all_taps
        .iter()
        .map(|t| t[0].toa_s)
        .fold(f64::INFINITY, f64::min);
    let tail_start = ((earliest + room.tail_onset_s) * sample_rate_hz).round() as usize;
    let last_tap = all_taps
        .iter()
        .flat_map(|t| t.iter().map(|x| x.toa_s))
        .fold(0.0, f64::max);
    let tail_len = if room.rt60_s > 0.0 {
        (1.5 * room.rt60_s * sample_rate_hz).ceil() as usize
    } else {
        0
    };
    let len = ((last_tap * sample_rate_hz).ceil() as usize + super::KERNEL_POINTS + 64).max(tail_start + tail_len);

    let shadow = ShadowFilter::default();
    let channels = all_taps
        .iter()
        .enumerate()
        .map(|(m, taps)| {
            let mut samples = render_taps(taps, len, sample_rate_hz, &shadow);
            let direct_energy = taps[0].amplitude.powi(2);
            // streams 0/1 belong to the binaural tails
            let tail = stochastic_tail(room, direct_energy, sample_rate_hz, 16 + m as u64);
            for (i, v) in tail.iter().enumerate() {
                if let Some(s) = samples.get_mut(tail_start + i) {
                    *s += v;
                }
            }
            Waveform::new(samples, sample_rate_hz)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ArrayRirs {
        channels,
        taps: all_taps,
        array: array.clone(),
        source,
    })
}
