//! Parametric room acoustics: first-order image sources, a two-ear head
//! model with contralateral shadowing, and an exponentially decaying
//! stochastic late tail.

mod descriptors;
mod render;
mod synth;

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use descriptors::{
    calibrate_drr, measure_drr, measure_drr_of, schroeder_decay_db, DRR_CAP_DB,
};
pub use render::{
    direct_path_reference, fractional_delay_kernel, render_ir, render_taps, BinauralIr, ShadowFilter,
    KERNEL_POINTS,
};
pub use synth::{
    image_source, synthesize_array_rirs, synthesize_brir, ArrayRirs, Brir, BrirSidecar, ReflectionTap,
};

/// Speed of sound, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 1e-12).then(|| self * (1.0 / n))
    }

    /// Point at `radius` and `azimuth` (counter-clockwise from +x) in the
    /// horizontal plane through `origin`.
    pub fn polar(origin: Vec3, radius: f64, azimuth_rad: f64) -> Vec3 {
        origin + Vec3::new(radius * azimuth_rad.cos(), radius * azimuth_rad.sin(), 0.0)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self * -1.0
    }
}

/// An infinite plane `normal . p = offset` with a frequency-flat
/// reflection coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    pub normal: Vec3,
    pub offset: f64,
    pub coefficient: f64,
}

impl Reflector {
    pub fn new(normal: Vec3, offset: f64, coefficient: f64) -> Self {
        Self {
            normal,
            offset,
            coefficient,
        }
    }

    /// Floor plane `z = 0`.
    pub fn floor(coefficient: f64) -> Self {
        Self::new(Vec3::new(0.0, 0.0, 1.0), 0.0, coefficient)
    }

    /// Wall plane `x = x0`.
    pub fn wall_x(x0: f64, coefficient: f64) -> Self {
        Self::new(Vec3::new(1.0, 0.0, 0.0), x0, coefficient)
    }

    /// Wall plane `y = y0`.
    pub fn wall_y(y0: f64, coefficient: f64) -> Self {
        Self::new(Vec3::new(0.0, 1.0, 0.0), y0, coefficient)
    }

    /// Ceiling plane `z = height`.
    pub fn ceiling(height: f64, coefficient: f64) -> Self {
        Self::new(Vec3::new(0.0, 0.0, 1.0), height, coefficient)
    }
}

fn default_tail_onset() -> f64 {
    0.02
}

fn default_tail_level() -> f64 {
    -12.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub reflectors: Vec<Reflector>,
    pub rt60_s: f64,
    /// Tail start, seconds after the earliest direct arrival.
    #[serde(default = "default_tail_onset")]
    pub tail_onset_s: f64,
    /// Expected tail energy relative to the direct-sound energy, dB.
    #[serde(default = "default_tail_level")]
    pub tail_to_direct_db: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

impl RoomSpec {
    pub fn anechoic() -> Self {
        Self {
            reflectors: Vec::new(),
            rt60_s: 0.0,
            tail_onset_s: default_tail_onset(),
            tail_to_direct_db: default_tail_level(),
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rt60_s >= 0.0) {
            return Err(Error::invalid(format!("rt60 {} must be non-negative", self.rt60_s)));
        }
        if !(self.tail_onset_s > 0.0) {
            return Err(Error::invalid("tail onset must be positive"));
        }
        for r in &self.reflectors {
            if !(0.0..=1.0).contains(&r.coefficient) {
                return Err(Error::invalid(format!(
                    "reflection coefficient {} outside [0, 1]",
                    r.coefficient
                )));
            }
        }
        Ok(())
    }

    /// Copy with every reflection coefficient multiplied by `scale`.
    pub fn with_reflection_scale(&self, scale: f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.reflectors {
            r.coefficient = (r.coefficient * scale).clamp(0.0, 1.0);
        }
        out
    }
}

/// Two point ears on a sphere. Yaw 0 faces +x; the left ear is on +y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadGeometry {
    pub center: Vec3,
    pub yaw_rad: f64,
    pub radius_m: f64,
}

impl Default for HeadGeometry {
    fn default() -> Self {
        Self {
            center: Vec3::new(0.0, 0.0, 1.5),
            yaw_rad: 0.0,
            radius_m: 0.09,
        }
    }
}

impl HeadGeometry {
    pub fn at(center: Vec3) -> Self {
        Self {
            center,
            ..Self::default()
        }
    }

    /// Unit vector pointing out of the left ear.
    pub fn left_axis(&self) -> Vec3 {
        Vec3::new(-self.yaw_rad.sin(), self.yaw_rad.cos(), 0.0)
    }

    pub fn left_ear(&self) -> Vec3 {
        self.center + self.left_axis() * self.radius_m
    }

    pub fn right_ear(&self) -> Vec3 {
        self.center - self.left_axis() * self.radius_m
    }

    /// Ear positions ordered (left, right), i.e. channel 1 then channel 2.
    pub fn ears(&self) -> [Vec3; 2] {
        [self.left_ear(), self.right_ear()]
    }

    /// Lateral component in [-1, 1] of the direction towards `point`;
    /// positive on the left.
    pub fn laterality(&self, point: Vec3) -> f64 {
        (point - self.center)
            .normalized()
            .map(|u| u.dot(self.left_axis()))
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub positions: Vec<Vec3>,
    pub reference: Vec3,
}

impl ArraySpec {
    /// `count` microphones evenly spaced on a horizontal circle, the first on +x.
    pub fn ring(count: usize, radius_m: f64, center: Vec3) -> Self {
        let positions = (0..count)
            .map(|i| Vec3::polar(center, radius_m, 2.0 * std::f64::consts::PI * i as f64 / count as f64))
            .collect();
        Self {
            positions,
            reference: center,
        }
    }

    /// Eight microphones, radius 0.106 m.
    pub fn default_ring(center: Vec3) -> Self {
        Self::ring(8, 0.106, center)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() < 2 {
            return Err(Error::invalid("array needs at least two microphones"));
        }
        for (i, a) in self.positions.iter().enumerate() {
            for b in &self.positions[i + 1..] {
                if a.distance(*b) < 1e-9 {
                    return Err(Error::invalid("array microphone positions must be distinct"));
                }
            }
        }
        Ok(())
    }
}
