//! Seeded two-domain glyph benchmark.
//!
//! Every class is a parametric shape family rendered with per-sample jitter
//! (position, scale, rotation, colour). The source domain uses the base
//! rendering; the target domain blends each image towards a shifted rendering
//! of the same geometry by `shift_magnitude`.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const GENERATOR_ID: &str = "gdcan-glyphs/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Dim striped background behind a washed-out complementary-hue glyph.
    Style,
    /// Solid glyphs thin into outlines.
    Morphology,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainPairSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// `[channels, height, width]`; channels must be 3.
    pub image_size: [usize; 3],
    pub shift_kind: ShiftKind,
    pub shift_magnitude: f64,
    pub seed: u64,
}

impl Default for DomainPairSpec {
    fn default() -> Self {
        DomainPairSpec::bundled()
    }
}

impl DomainPairSpec {
    /// The benchmark used by the acceptance suite: six classes, 200 samples
    /// per class and domain, style shift at 0.8, seed 7.
    pub fn bundled() -> Self {
        DomainPairSpec {
            classes: 6,
            samples_per_class: 200,
            image_size: [3, 32, 32],
            shift_kind: ShiftKind::Style,
            shift_magnitude: 0.8,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidArgument("at least one class".into()));
        }
        if self.classes > Glyph::ALL.len() {
            return Err(Error::TooManyClasses {
                requested: self.classes,
                available: Glyph::ALL.len(),
            });
        }
        if self.image_size[0] != 3 || self.image_size[1] < 8 || self.image_size[2] < 8 {
            return Err(Error::InvalidArgument(alloc::format!(
                "image size {:?}: need 3 channels and at least 8x8 pixels",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.shift_magnitude) {
            return Err(Error::InvalidArgument("shift_magnitude must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Provenance stored alongside a generated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator: String,
    pub domain: Domain,
    pub spec: DomainPairSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    /// `N×3×H×W`, values in `[0, 1]`, exactly representable as `f32`.
    pub images: Tensor,
    /// Class indices in `0..classes`.
    pub labels: Vec<usize>,
    pub classes: usize,
    pub manifest: Option<Manifest>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, manifest: Option<Manifest>) -> Result<Self> {
        if images.rank() != 4 || images.rows() != labels.len() {
            return Err(Error::shape(
                "labeled_image_set",
                alloc::format!("images {:?}, {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(LabeledImageSet {
            images,
            labels,
            classes,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = alloc::vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Images and labels at the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Circle,
    Square,
    Triangle,
    Plus,
    Star,
    Crescent,
    Arrow,
    Hourglass,
    Bar,
    Ell,
}

impl Glyph {
    pub const ALL: [Glyph; 10] = [
        Glyph::Circle,
        Glyph::Square,
        Glyph::Triangle,
        Glyph::Plus,
        Glyph::Star,
        Glyph::Crescent,
        Glyph::Arrow,
        Glyph::Hourglass,
        Glyph::Bar,
        Glyph::Ell,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Glyph::Circle => "circle",
            Glyph::Square => "square",
            Glyph::Triangle => "triangle",
            Glyph::Plus => "plus",
            Glyph::Star => "star",
            Glyph::Crescent => "crescent",
            Glyph::Arrow => "arrow",
            Glyph::Hourglass => "hourglass",
            Glyph::Bar => "bar",
            Glyph::Ell => "ell",
        }
    }

    /// Signed distance in glyph units (negative inside); glyphs span roughly
    /// `[-1, 1]²`.
    fn sdf(self, x: f64, y: f64) -> f64 {
        match self {
            Glyph::Circle => math::sqrt(x * x + y * y) - 0.85,
            Glyph::Square => sd_box(x, y, 0.75, 0.75),
            Glyph::Triangle => sd_polygon(x, y, &[(0.0, -0.95), (0.9, 0.7), (-0.9, 0.7)]),
            Glyph::Plus => sd_box(x, y, 0.95, 0.3).min(sd_box(x, y, 0.3, 0.95)),
            Glyph::Star => {
                let mut pts = [(0.0, 0.0); 10];
                for (i, p) in pts.iter_mut().enumerate() {
                    let r = if i % 2 == 0 { 1.0 } else { 0.42 };
                    let a = -PI / 2.0 + i as f64 * PI / 5.0;
                    *p = (r * math::cos(a), r * math::sin(a));
                }
                sd_polygon(x, y, &pts)
            }
            Glyph::Crescent => {
                let outer = math::sqrt(x * x + y * y) - 0.85;
                let inner = math::sqrt((x - 0.45) * (x - 0.45) + y * y) - 0.7;
                outer.max(-inner)
            }
            Glyph::Arrow => sd_polygon(
                x,
                y,
                &[
                    (-0.95, -0.25),
                    (0.15, -0.25),
                    (0.15, -0.7),
                    (0.95, 0.0),
                    (0.15, 0.7),
                    (0.15, 0.25),
                    (-0.95, 0.25),
                ],
            ),
            Glyph::Hourglass => sd_polygon(
                x,
                y,
                &[(-0.8, -0.9), (0.8, -0.9), (0.0, 0.0), (0.8, 0.9), (-0.8, 0.9), (0.0, 0.0)],
            ),
            Glyph::Bar => sd_box(x, y, 0.95, 0.32),
            Glyph::Ell => sd_polygon(
                x,
                y,
                &[(-0.7, -0.95), (-0.2, -0.95), (-0.2, 0.45), (0.75, 0.45), (0.75, 0.95), (-0.7, 0.95)],
            ),
        }
    }
}

fn sd_box(x: f64, y: f64, hx: f64, hy: f64) -> f64 {
    let (dx, dy) = (x.abs() - hx, y.abs() - hy);
    let (ox, oy) = (dx.max(0.0), dy.max(0.0));
    math::sqrt(ox * ox + oy * oy) + dx.max(dy).min(0.0)
}

fn sd_polygon(x: f64, y: f64, v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    let mut d = (x - v[0].0) * (x - v[0].0) + (y - v[0].1) * (y - v[0].1);
    let mut sign = 1.0;
    let mut j = n - 1;
    for i in 0..n {
        let (ex, ey) = (v[j].0 - v[i].0, v[j].1 - v[i].1);
        let (wx, wy) = (x - v[i].0, y - v[i].1);
        let t = ((wx * ex + wy * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        let (bx, by) = (wx - ex * t, wy - ey * t);
        d = d.min(bx * bx + by * by);
        let c1 = y >= v[i].1;
        let c2 = y < v[j].1;
        let c3 = ex * wy > ey * wx;
        if (c1 && c2 && c3) || (!c1 && !c2 && !c3) {
            sign = -sign;
        }
        j = i;
    }
    sign * math::sqrt(d)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - math::floor(h)) * 6.0;
    let i = math::floor(h6) as usize % 6;
    let f = h6 - math::floor(h6);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, domain: Domain, class: usize, index: usize) -> u64 {
    let tag = match domain {
        Domain::Source => 0x5eed_0001,
        Domain::Target => 0x5eed_0002,
    };
    splitmix(splitmix(splitmix(seed ^ tag) ^ class as u64) ^ index as u64)
}

/// Everything random about one image, drawn before rendering so that the
/// base and shifted renderings share geometry and colour.
struct Draw {
    cx: f64,
    cy: f64,
    scale: f64,
    angle: f64,
    hue: f64,
    sat: f64,
    val: f64,
    bg_hue: f64,
    bg_freq: f64,
    bg_angle: f64,
    bg_phase: f64,
}

impl Draw {
    fn sample<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        let size = h.min(w) as f64;
        Draw {
            cx: w as f64 / 2.0 + rng.random_range(-0.12..0.12) * size,
            cy: h as f64 / 2.0 + rng.random_range(-0.12..0.12) * size,
            scale: size * rng.random_range(0.26..0.34),
            angle: rng.random_range(-0.26..0.26),
            hue: rng.random::<f64>(),
            sat: rng.random_range(0.7..1.0),
            val: rng.random_range(0.75..1.0),
            bg_hue: rng.random::<f64>(),
            bg_freq: rng.random_range(0.5..1.3),
            bg_angle: rng.random_range(0.0..PI),
            bg_phase: rng.random_range(0.0..2.0 * PI),
        }
    }
}

const NOISE_STD: f64 = 0.02;
const STROKE_PX: f64 = 1.6;
/// Brightness of the textured target background.
const BG_GAIN: f64 = 0.4;

#[allow(clippy::too_many_arguments)]
fn render(glyph: Glyph, d: &Draw, kind: ShiftKind, magnitude: f64, h: usize, w: usize, noise: &[f64], out: &mut [f64]) {
    let plane = h * w;
    let base_color = hsv_to_rgb(d.hue, d.sat, d.val);
    // Target style: complementary hue, washed out and dimmer.
    let styled_color = hsv_to_rgb(d.hue + 0.5, 0.5 * d.sat, 0.75 * d.val);
    let bg_a = hsv_to_rgb(d.bg_hue, 0.35, 0.9);
    let bg_b = hsv_to_rgb(d.bg_hue + 0.25, 0.45, 0.6);
    let (ca, sa) = (math::cos(d.angle), math::sin(d.angle));
    let (cb, sb) = (math::cos(d.bg_angle), math::sin(d.bg_angle));
    for py in 0..h {
        for px in 0..w {
            let (dx, dy) = (px as f64 + 0.5 - d.cx, py as f64 + 0.5 - d.cy);
            let (gx, gy) = ((ca * dx + sa * dy) / d.scale, (-sa * dx + ca * dy) / d.scale);
            let sd_px = glyph.sdf(gx, gy) * d.scale;
            let fill = (0.5 - sd_px).clamp(0.0, 1.0);
            let idx = py * w + px;
            for c in 0..3 {
                let base = fill * base_color[c];
                let value = match kind {
                    ShiftKind::None => base,
                    ShiftKind::Morphology => {
                        // Inner band whose width shrinks from a solid fill to a thin stroke.
                        let band = STROKE_PX / magnitude.max(f64::MIN_POSITIVE);
                        fill * (0.5 + sd_px + band).clamp(0.0, 1.0) * base_color[c]
                    }
                    ShiftKind::Style => {
                        let stripe = 0.5 + 0.5 * math::sin(d.bg_freq * (cb * px as f64 + sb * py as f64) + d.bg_phase);
                        let bg = BG_GAIN * (stripe * bg_a[c] + (1.0 - stripe) * bg_b[c]);
                        let styled = (1.0 - fill) * bg + fill * styled_color[c];
                        (1.0 - magnitude) * base + magnitude * styled
                    }
                };
                let v = (value + noise[c * plane + idx]).clamp(0.0, 1.0);
                out[c * plane + idx] = v as f32 as f64;
            }
        }
    }
}

fn generate_domain(spec: &DomainPairSpec, domain: Domain) -> Result<LabeledImageSet> {
    let [ch, h, w] = spec.image_size;
    let n = spec.classes * spec.samples_per_class;
    let per_image = ch * h * w;
    let mut images = alloc::vec![0.0; n * per_image];
    let mut labels = Vec::with_capacity(n);
    let (kind, magnitude) = match domain {
        Domain::Source => (ShiftKind::None, 0.0),
        Domain::Target => (spec.shift_kind, spec.shift_magnitude),
    };
    let normal = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut noise = alloc::vec![0.0; per_image];
    for class in 0..spec.classes {
        let glyph = Glyph::ALL[class];
        for j in 0..spec.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, domain, class, j));
            let draw = Draw::sample(&mut rng, h, w);
            noise.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            let i = labels.len();
            render(glyph, &draw, kind, magnitude, h, w, &noise, &mut images[i * per_image..(i + 1) * per_image]);
            labels.push(class);
        }
    }
    let images = Tensor::new(alloc::vec![n, ch, h, w], images)?;
    let manifest = Manifest {
        generator: GENERATOR_ID.into(),
        domain,
        spec: spec.clone(),
    };
    LabeledImageSet::new(images, labels, spec.classes, Some(manifest))
}

/// Source and target sets for a spec; deterministic in `spec.seed`.
pub fn generate(spec: &DomainPairSpec) -> Result<(LabeledImageSet, LabeledImageSet)> {
    spec.validate()?;
    Ok((generate_domain(spec, Domain::Source)?, generate_domain(spec, Domain::Target)?))
}
