//! Parametric scene: a bright "hand" pointing from a palm blob in one of eight directions,
//! optionally covered at its tip by an occluding disk, on a noisy background.
//!
//! The label is the direction bin of the hand angle: bin `c` covers the half-open interval
//! `[45c - 22.5, 45c + 22.5)` degrees (modulo 360), so 0° is class 0 and 67.5° is class 2.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 8] = ["E", "NE", "N", "NW", "W", "SW", "S", "SE"];
pub const BIN_WIDTH: f64 = 45.0;

/// Direction class of an angle in degrees.
pub fn angle_to_class(angle: f64) -> usize {
    let a = (angle + BIN_WIDTH / 2.0).rem_euclid(360.0);
    ((a / BIN_WIDTH).floor() as usize).min(CLASS_NAMES.len() - 1)
}

/// Distance in degrees from `angle` to the closest bin boundary.
pub fn boundary_distance(angle: f64) -> f64 {
    let a = (angle - BIN_WIDTH / 2.0).rem_euclid(BIN_WIDTH);
    a.min(BIN_WIDTH - a)
}

/// Parameters of one rendered image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Hand direction in degrees, `[0, 360)`, counter-clockwise from the +x axis.
    pub angle: f64,
    /// Hand length in pixels.
    pub length: f64,
    /// Occluder radius as a fraction of the hand length, `[0, 1]`.
    pub occlusion: f64,
    /// Global foreground brightness, `[0, 1]`.
    pub brightness: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl SimParams {
    /// Names of the values exported per image: the sampled parameters followed by the derived
    /// distance to the nearest direction boundary.
    pub const NAMES: [&'static str; 7] = [
        "angle",
        "length",
        "occlusion",
        "brightness",
        "offset_x",
        "offset_y",
        "boundary_dist",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.angle,
            self.length,
            self.occlusion,
            self.brightness,
            self.offset_x,
            self.offset_y,
            boundary_distance(self.angle),
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| self.values()[i])
    }

    pub fn label(&self) -> usize {
        angle_to_class(self.angle)
    }

    pub fn validate(&self, spec: &SceneSpec) -> Result<()> {
        let checks = [
            ("angle", (0.0..360.0).contains(&self.angle)),
            ("length", self.length > 0.0 && self.length.is_finite()),
            ("occlusion", (0.0..=1.0).contains(&self.occlusion)),
            ("brightness", (0.0..=1.0).contains(&self.brightness)),
            ("offset_x", self.offset_x.abs() <= spec.max_offset),
            ("offset_y", self.offset_y.abs() <= spec.max_offset),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::invalid(format!("parameter {name} outside its domain"))),
            None => Ok(()),
        }
    }
}

/// Per-feature probability of drawing from a hard region, plus the hard-region shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardRegions {
    /// Probability, per feature and image, of drawing that feature from its hard region.
    pub probability: f64,
    /// Hard angles lie within this many degrees of a direction boundary.
    pub boundary_margin: f64,
    /// Hard occlusion range; otherwise there is no occluder.
    pub occlusion: (f64, f64),
    /// Hard brightness range.
    pub low_brightness: (f64, f64),
}

impl Default for HardRegions {
    fn default() -> Self {
        Self {
            probability: 0.0,
            boundary_margin: 4.0,
            occlusion: (0.35, 0.55),
            low_brightness: (0.05, 0.15),
        }
    }
}

/// Scene generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub side: usize,
    pub length: (f64, f64),
    pub brightness: (f64, f64),
    pub max_offset: f64,
    pub background: f64,
    pub noise_sigma: f64,
    pub hand_width: f64,
    pub tip_radius: f64,
    pub palm_radius: f64,
    pub occluder_level: f64,
    pub hard: HardRegions,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            side: 32,
            length: (8.0, 12.0),
            brightness: (0.6, 1.0),
            max_offset: 3.0,
            background: 0.1,
            noise_sigma: 0.08,
            hand_width: 1.0,
            tip_radius: 2.2,
            palm_radius: 3.0,
            occluder_level: 0.1,
            hard: HardRegions::default(),
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), domain: (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= domain.0 && hi <= domain.1) {
        return Err(Error::invalid(format!("{name} range ({lo}, {hi}) is invalid")));
    }
    Ok(())
}

impl SceneSpec {
    pub fn with_hard_probability(mut self, p: f64) -> Self {
        self.hard.probability = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::invalid("scene side must be at least 8 pixels"));
        }
        check_range("length", self.length, (0.5, self.side as f64))?;
        check_range("brightness", self.brightness, (0.0, 1.0))?;
        check_range("hard occlusion", self.hard.occlusion, (0.0, 1.0))?;
        check_range("hard brightness", self.hard.low_brightness, (0.0, 1.0))?;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.hard.probability) {
            return Err(Error::invalid("hard-region probability outside [0, 1]"));
        }
        if !(0.0..BIN_WIDTH / 2.0).contains(&self.hard.boundary_margin) {
            return Err(Error::invalid("boundary margin must lie in [0, 22.5)"));
        }
        if !unit(self.background) || !unit(self.occluder_level) {
            return Err(Error::invalid("background and occluder levels must lie in [0, 1]"));
        }
        let sizes = [self.hand_width, self.tip_radius, self.palm_radius];
        if sizes.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("hand, tip and palm sizes must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and nonnegative"));
        }
        if !(self.max_offset >= 0.0 && self.max_offset.is_finite()) {
            return Err(Error::invalid("maximum offset must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Draws the parameters of one image.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SimParams {
        let h = &self.hard;
        let angle = if rng.gen_bool(h.probability) {
            let boundary = BIN_WIDTH / 2.0 + BIN_WIDTH * rng.gen_range(0..8) as f64;
            (boundary + rng.gen_range(-h.boundary_margin..=h.boundary_margin)).rem_euclid(360.0)
        } else {
            rng.gen_range(0.0..360.0)
        };
        let occlusion = if rng.gen_bool(h.probability) {
            rng.gen_range(h.occlusion.0..=h.occlusion.1)
        } else {
            0.0
        };
        let brightness = if rng.gen_bool(h.probability) {
            rng.gen_range(h.low_brightness.0..=h.low_brightness.1)
        } else {
            rng.gen_range(self.brightness.0..=self.brightness.1)
        };
        SimParams {
            angle,
            length: rng.gen_range(self.length.0..=self.length.1),
            occlusion,
            brightness,
            offset_x: rng.gen_range(-self.max_offset..=self.max_offset),
            offset_y: rng.gen_range(-self.max_offset..=self.max_offset),
        }
    }

    /// Renders 8-bit pixels, row-major, `side * side`.
    pub fn render<R: Rng + ?Sized>(&self, p: &SimParams, rng: &mut R) -> Vec<u8> {
        let s = self.side;
        let centre = (s as f64 / 2.0 + p.offset_x, s as f64 / 2.0 + p.offset_y);
        let rad = p.angle.to_radians();
        let dir = (rad.cos(), -rad.sin());
        let tip = (centre.0 + p.length * dir.0, centre.1 + p.length * dir.1);
        let occluder = p.occlusion * p.length;
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("finite sigma");

        let coverage = |edge: f64| (edge + 0.5).clamp(0.0, 1.0);
        let mut out = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let q = (x as f64 + 0.5, y as f64 + 0.5);
                let rel = (q.0 - centre.0, q.1 - centre.1);
                let t = ((rel.0 * dir.0 + rel.1 * dir.1) / p.length).clamp(0.0, 1.0);
                let on_seg = (centre.0 + t * p.length * dir.0, centre.1 + t * p.length * dir.1);
                let d_seg = ((q.0 - on_seg.0).powi(2) + (q.1 - on_seg.1).powi(2)).sqrt();
                let d_tip = ((q.0 - tip.0).powi(2) + (q.1 - tip.1).powi(2)).sqrt();
                let d_palm = (rel.0 * rel.0 + rel.1 * rel.1).sqrt();

                let hand = coverage(self.hand_width - d_seg)
                    .max(coverage(self.tip_radius - d_tip))
                    .max(0.7 * coverage(self.palm_radius - d_palm));
                let mut v = self.background + p.brightness * hand * (1.0 - self.background);
                if occluder > 0.0 {
                    let cover = coverage(occluder - d_tip);
                    v = v * (1.0 - cover) + self.occluder_level * cover;
                }
                v += noise.sample(rng);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

/// One generated image with its parameters and label.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub id: String,
    pub params: SimParams,
    pub label: usize,
    pub pixels: Vec<u8>,
}

/// Renders `n` images. Image `i` uses its own ChaCha8 stream of `seed`, so the output does
/// not depend on the number of worker threads.
pub fn generate(spec: &SceneSpec, n: usize, seed: u64, id_prefix: &str) -> Result<Vec<GeneratedImage>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("number of images must be positive"));
    }
    let width = n.to_string().len().max(5);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let params = spec.sample(&mut rng);
            let pixels = spec.render(&params, &mut rng);
            GeneratedImage {
                id: format!("{id_prefix}{i:0width$}"),
                label: params.label(),
                params,
                pixels,
            }
        })
        .collect())
}
