//! Procedural near-infrared eye images with exact ground-truth masks.
//!
//! Geometry: an integer-centred iris disk, a pupil disk strictly inside it,
//! and two parabolic eyelids. The mask is the iris disk minus the pixels the
//! lids cover. Everything photometric (texture, cataract clouding, puncture
//! arcs, specular highlights, noise) is drawn on top and never touches the
//! mask.

use std::f64::consts::PI;

use image::GrayImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::sample::{ConditionLabel, EyeSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EyeCondition {
    Healthy,
    PreCataract,
    PostCataract,
}

impl EyeCondition {
    pub const ALL: [Self; 3] = [Self::Healthy, Self::PreCataract, Self::PostCataract];

    pub fn label_t2(self) -> ConditionLabel {
        match self {
            Self::Healthy => ConditionLabel::Others,
            Self::PreCataract => ConditionLabel::PreCataract,
            Self::PostCataract => ConditionLabel::PostCataract,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Healthy => "healthy",
            Self::PreCataract => "pre_cataract",
            Self::PostCataract => "post_cataract",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeGenParams {
    /// `(height, width)`.
    pub canvas: (usize, usize),
    /// Pupil radius as a fraction of the iris radius, before dilation.
    pub pupil_radius_fraction: f64,
    pub iris_radius_px: usize,
    pub condition: EyeCondition,
    /// 0 leaves the iris uncovered; 1 lowers the upper lid past the iris centre.
    pub eyelid_droop: f64,
    pub specular_count: usize,
    /// Scales the pupil from 0.85x (constricted) to 1.15x (dilated).
    pub dilation_level: f64,
    pub rng_seed: u64,
}

pub const DEFAULT_CANVAS: (usize, usize) = (240, 320);

impl EyeGenParams {
    /// Draws plausible parameters for `condition`.
    pub fn sample<R: Rng + ?Sized>(condition: EyeCondition, canvas: (usize, usize), rng: &mut R) -> Self {
        let short = canvas.0.min(canvas.1) as f64;
        Self {
            canvas,
            pupil_radius_fraction: rng.gen_range(0.3..0.5),
            iris_radius_px: (short * rng.gen_range(0.18..0.24)).round() as usize,
            condition,
            eyelid_droop: if rng.gen_bool(0.6) { rng.gen_range(0.0..0.6) } else { 0.0 },
            specular_count: rng.gen_range(0..=3),
            dilation_level: rng.gen_range(0.0..1.0),
            rng_seed: rng.gen(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        let (h, w) = self.canvas;
        if h < 16 || w < 16 {
            return bad(format!("canvas {h}x{w} is smaller than 16x16"));
        }
        if self.iris_radius_px < 4 {
            return bad(format!("iris radius {} is below 4 px", self.iris_radius_px));
        }
        if !(self.pupil_radius_fraction > 0.0 && self.pupil_radius_fraction < 1.0) {
            return bad(format!("pupil_radius_fraction {} outside (0, 1)", self.pupil_radius_fraction));
        }
        if !(0.0..=1.0).contains(&self.eyelid_droop) {
            return bad(format!("eyelid_droop {} outside [0, 1]", self.eyelid_droop));
        }
        if !(0.0..=1.0).contains(&self.dilation_level) {
            return bad(format!("dilation_level {} outside [0, 1]", self.dilation_level));
        }
        Ok(())
    }
}

/// Exact geometry of a generated eye, in pixel coordinates (x right, y down).
#[derive(Clone, Debug, PartialEq)]
pub struct EyeGeometry {
    pub iris_center: (i64, i64),
    pub iris_radius: i64,
    pub pupil_center: (f64, f64),
    pub pupil_radius: f64,
    /// Height of the upper-lid apex above the iris centre.
    pub upper_apex: f64,
    /// Depth of the lower-lid apex below the iris centre.
    pub lower_apex: f64,
    /// Lid curvature: the lid line bends by `curvature * dx^2`.
    pub curvature: f64,
}

impl EyeGeometry {
    pub fn in_iris_disk(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as i64 - self.iris_center.0, y as i64 - self.iris_center.1);
        dx * dx + dy * dy <= self.iris_radius * self.iris_radius
    }

    pub fn in_pupil(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.pupil_center.0, y - self.pupil_center.1);
        dx * dx + dy * dy <= self.pupil_radius * self.pupil_radius
    }

    pub fn upper_lid_y(&self, x: f64) -> f64 {
        let dx = x - self.iris_center.0 as f64;
        self.iris_center.1 as f64 - self.upper_apex + self.curvature * dx * dx
    }

    pub fn lower_lid_y(&self, x: f64) -> f64 {
        let dx = x - self.iris_center.0 as f64;
        self.iris_center.1 as f64 + self.lower_apex - self.curvature * dx * dx
    }

    /// True where skin covers the eye.
    pub fn occluded(&self, x: usize, y: usize) -> bool {
        let (xf, yf) = (x as f64, y as f64);
        yf < self.upper_lid_y(xf) || yf > self.lower_lid_y(xf)
    }

    /// Visible iris-or-pupil pixels.
    pub fn mask(&self, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| self.in_iris_disk(x, y) && !self.occluded(x, y))
    }
}

struct Wave {
    amp: f64,
    kx: f64,
    ky: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, x: f64, y: f64) -> f64 {
        self.amp * (self.kx * x + self.ky * y + self.phase).sin()
    }
}

struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
}

impl Blob {
    fn at(&self, x: f64, y: f64) -> f64 {
        let d2 = (x - self.x).powi(2) + (y - self.y).powi(2);
        self.amp * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

struct Arc {
    radius: f64,
    start: f64,
    span: f64,
    half_width: f64,
    level: f64,
}

/// Random appearance drawn once per image, in a fixed order.
struct Appearance {
    offset: f64,
    skin: f64,
    skin_waves: Vec<Wave>,
    sclera: f64,
    iris: f64,
    fibres: Vec<(f64, f64, f64, f64)>,
    crypts: Vec<Blob>,
    pupil: f64,
    clouds: Vec<Blob>,
    arcs: Vec<Arc>,
    highlights: Vec<(f64, f64, f64)>,
}

fn angle(x: f64, y: f64) -> f64 {
    y.atan2(x).rem_euclid(2.0 * PI)
}

fn draw_appearance(g: &EyeGeometry, condition: EyeCondition, specular: usize, rng: &mut ChaCha8Rng) -> Appearance {
    let r = g.iris_radius as f64;
    let (px, py, rp) = (g.pupil_center.0, g.pupil_center.1, g.pupil_radius);
    let offset = rng.gen_range(-12.0..12.0);
    let skin = rng.gen_range(95.0..150.0);
    let skin_waves = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..2.0 * PI);
            let k = 2.0 * PI / rng.gen_range(30.0..90.0);
            Wave { amp: rng.gen_range(4.0..12.0), kx: k * theta.cos(), ky: k * theta.sin(), phase: rng.gen_range(0.0..2.0 * PI) }
        })
        .collect();
    let sclera = rng.gen_range(170.0..215.0);
    let iris = rng.gen_range(65.0..100.0);
    let fibres = (0..5)
        .map(|_| {
            (
                rng.gen_range(3.0..7.0),
                rng.gen_range(12..48) as f64,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(-4.0..4.0),
            )
        })
        .collect();
    let crypts = (0..rng.gen_range(2..6))
        .map(|_| {
            let a = rng.gen_range(0.0..2.0 * PI);
            let d = rng.gen_range(rp + 0.2 * (r - rp)..r - 0.2 * (r - rp));
            Blob { x: px + d * a.cos(), y: py + d * a.sin(), sigma: 0.06 * r, amp: -rng.gen_range(8.0..20.0) }
        })
        .collect();
    let (pupil, clouds) = match condition {
        EyeCondition::Healthy => (rng.gen_range(12.0..30.0), Vec::new()),
        EyeCondition::PostCataract => (rng.gen_range(28.0..50.0), Vec::new()),
        EyeCondition::PreCataract => {
            let base = rng.gen_range(130.0..190.0);
            let clouds = (0..rng.gen_range(3..7))
                .map(|_| {
                    let a = rng.gen_range(0.0..2.0 * PI);
                    let d = rng.gen_range(0.0..0.7 * rp);
                    Blob {
                        x: px + d * a.cos(),
                        y: py + d * a.sin(),
                        sigma: rng.gen_range(0.15..0.35) * rp,
                        amp: rng.gen_range(-30.0..40.0),
                    }
                })
                .collect();
            (base, clouds)
        }
    };
    let arcs = if condition == EyeCondition::PostCataract {
        (0..rng.gen_range(1..=3))
            .map(|_| Arc {
                radius: rp + rng.gen_range(0.3..0.7) * (r - rp),
                start: rng.gen_range(0.0..2.0 * PI),
                span: rng.gen_range(25.0f64..60.0).to_radians(),
                half_width: (r / 40.0).max(1.0),
                level: rng.gen_range(200.0..240.0),
            })
            .collect()
    } else {
        Vec::new()
    };
    let highlights = (0..specular)
        .map(|_| {
            let a = rng.gen_range(0.0..2.0 * PI);
            let d = rng.gen_range(0.3..1.2) * rp;
            (px + d * a.cos(), py + d * a.sin(), rng.gen_range(0.04..0.08) * r)
        })
        .collect();
    Appearance { offset, skin, skin_waves, sclera, iris, fibres, crypts, pupil, clouds, arcs, highlights }
}

fn shade(g: &EyeGeometry, a: &Appearance, x: f64, y: f64, xi: usize, yi: usize) -> f64 {
    let r = g.iris_radius as f64;
    let (cx, cy) = (g.iris_center.0 as f64, g.iris_center.1 as f64);
    if g.occluded(xi, yi) {
        return a.skin + a.skin_waves.iter().map(|w| w.at(x, y)).sum::<f64>();
    }
    let mut v = if g.in_iris_disk(xi, yi) {
        let (dx, dy) = (x - g.pupil_center.0, y - g.pupil_center.1);
        let d = (dx * dx + dy * dy).sqrt();
        if g.in_pupil(x, y) {
            a.pupil + a.clouds.iter().map(|b| b.at(x, y)).sum::<f64>()
        } else {
            let rho = ((d - g.pupil_radius) / (r - g.pupil_radius)).clamp(0.0, 1.0);
            let theta = angle(dx, dy);
            let mut t = a.iris;
            t += a.fibres.iter().map(|&(amp, k, ph, twist)| amp * (k * theta + ph + twist * rho).sin()).sum::<f64>();
            t += 14.0 * (-((rho - 0.3) / 0.08).powi(2)).exp();
            t -= 22.0 * ((rho - 0.85) / 0.15).clamp(0.0, 1.0);
            t += a.crypts.iter().map(|b| b.at(x, y)).sum::<f64>();
            for arc in &a.arcs {
                let along = (theta - arc.start).rem_euclid(2.0 * PI);
                if along <= arc.span && (d - arc.radius).abs() <= arc.half_width {
                    t = arc.level;
                }
            }
            t
        }
    } else {
        let u = (x - cx) / (1.6 * r);
        a.sclera - 30.0 * u * u
    };
    for &(hx, hy, hr) in &a.highlights {
        let d = ((x - hx).powi(2) + (y - hy).powi(2)).sqrt();
        if d <= hr {
            v = 250.0;
        } else if d <= hr + 1.0 {
            v = 0.5 * (v + 250.0);
        }
    }
    // Soft shadow under the upper lid.
    let below = y - g.upper_lid_y(x);
    v *= 1.0 - 0.25 * (-below / 3.0).exp();
    let _ = cy;
    v
}

/// Renders one eye and returns its geometry alongside.
pub fn generate_eye_with_geometry(params: &EyeGenParams) -> Result<(EyeSample, EyeGeometry)> {
    params.validate()?;
    let (h, w) = params.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let r = params.iris_radius_px as f64;
    let iris_center = (
        (w as f64 / 2.0 + rng.gen_range(-0.06..0.06) * w as f64).round() as i64,
        (h as f64 / 2.0 + rng.gen_range(-0.06..0.06) * h as f64).round() as i64,
    );
    let pupil_radius = r * params.pupil_radius_fraction * (0.85 + 0.3 * params.dilation_level);
    let shift = 0.04 * r * rng.gen_range(0.0..1.0);
    let dir = rng.gen_range(0.0..2.0 * PI);
    let pupil_center = (iris_center.0 as f64 + shift * dir.cos(), iris_center.1 as f64 + shift * dir.sin());
    // Keep a one-pixel margin so every pupil pixel lies in the iris raster.
    if pupil_radius + shift >= r - 1.0 {
        return Err(Error::Param(format!(
            "pupil (radius {pupil_radius:.2}, offset {shift:.2}) does not fit strictly inside iris radius {r}"
        )));
    }
    let geometry = EyeGeometry {
        iris_center,
        iris_radius: params.iris_radius_px as i64,
        pupil_center,
        pupil_radius,
        upper_apex: r * (1.15 - 1.3 * params.eyelid_droop),
        lower_apex: 1.2 * r,
        curvature: 0.5 / r,
    };
    let appearance = draw_appearance(&geometry, params.condition, params.specular_count, &mut rng);
    let noise = Normal::new(0.0, 3.0).expect("finite sigma");
    let mut pixels = Vec::with_capacity(w * h);
    for yi in 0..h {
        for xi in 0..w {
            let v = shade(&geometry, &appearance, xi as f64, yi as f64, xi, yi);
            let v = v + appearance.offset + noise.sample(&mut rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let image = GrayImage::from_raw(w as u32, h as u32, pixels).expect("canvas dimensions");
    let label_t2 = params.condition.label_t2();
    let sample = EyeSample {
        image,
        mask: Some(geometry.mask(w, h)),
        label_t1: Some(label_t2.health()),
        label_t2: Some(label_t2),
        sample_id: format!("{}-{:016x}", params.condition.name(), params.rng_seed),
    };
    Ok((sample, geometry))
}

pub fn generate_eye(params: &EyeGenParams) -> Result<EyeSample> {
    generate_eye_with_geometry(params).map(|(s, _)| s)
}
