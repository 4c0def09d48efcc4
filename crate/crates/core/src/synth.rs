//! Deterministic synthetic postmortem eye captures.
//!
//! Each identity owns a texture made of seeded radial/angular sinusoids plus
//! a coarse low-pass noise field, drawn in polar coordinates inside the iris
//! annulus. Samples add capture jitter, Gaussian sensor noise and
//! PMI-dependent decomposition artifacts (dark wrinkle strokes, saturated
//! highlight blobs) whose ground-truth masks are recorded exactly.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{save_image, save_mask, write_manifest, EyeImage, Eye, MaskSet, SampleRecord};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const DEFAULT_PMI_SCHEDULE: [f64; 7] = [4.0, 24.0, 72.0, 120.0, 336.0, 672.0, 1000.0];

const PUPIL_LEVEL: f64 = 25.0;
const SCLERA_LEVEL: f64 = 175.0;
const NOISE_SIGMA: f64 = 4.0;
const WRINKLE_DARKENING: f64 = 0.45;
const IRIS_RADIUS_FRACTION: f64 = 0.36;
const NOISE_GRID: (usize, usize) = (6, 24);

/// Artifact extent as a function of PMI. Counts and sizes scale with the
/// saturating severity `s = pmi / (pmi + half_saturation_hours)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSeverity {
    pub half_saturation_hours: f64,
    pub max_wrinkles: usize,
    pub max_wrinkle_width: f64,
    pub max_highlights: usize,
    pub max_highlight_radius: f64,
}

impl Default for ArtifactSeverity {
    fn default() -> Self {
        Self {
            half_saturation_hours: 200.0,
            max_wrinkles: 10,
            max_wrinkle_width: 3.0,
            max_highlights: 4,
            max_highlight_radius: 5.0,
        }
    }
}

impl ArtifactSeverity {
    pub fn level(&self, pmi_hours: f64) -> f64 {
        if pmi_hours <= 0.0 {
            0.0
        } else {
            pmi_hours / (pmi_hours + self.half_saturation_hours)
        }
    }

    pub fn wrinkle_count(&self, pmi_hours: f64) -> usize {
        (self.max_wrinkles as f64 * self.level(pmi_hours)).ceil() as usize
    }

    pub fn wrinkle_width(&self, pmi_hours: f64) -> f64 {
        1.0 + (self.max_wrinkle_width - 1.0) * self.level(pmi_hours)
    }

    pub fn highlight_count(&self, pmi_hours: f64) -> usize {
        (self.max_highlights as f64 * self.level(pmi_hours)).ceil() as usize
    }

    /// Multiplier on each blob's base radius.
    pub fn highlight_scale(&self, pmi_hours: f64) -> f64 {
        0.5 + 0.5 * self.level(pmi_hours)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    /// PMI of sample `k` is `pmi_schedule[k % len]`.
    pub pmi_schedule: Vec<f64>,
    pub image_size: usize,
    pub severity: ArtifactSeverity,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 20,
            samples_per_identity: 6,
            pmi_schedule: DEFAULT_PMI_SCHEDULE.to_vec(),
            image_size: 96,
            severity: ArtifactSeverity::default(),
            seed: 0,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Debug, PartialEq)]
struct Component {
    amplitude: f64,
    radial_freq: f64,
    angular_freq: f64,
    phase: f64,
}

/// Identity-specific iris pattern in normalized polar coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTexture {
    base_level: f64,
    pupil_ratio: f64,
    components: Vec<Component>,
    /// Coarse field over (radial, angular) cells, interpolated bilinearly and
    /// periodic in angle.
    noise: Vec<f64>,
}

impl IdentityTexture {
    /// Intensity at normalized radius `rho` in `[0, 1]` and angle `theta`.
    pub fn sample(&self, rho: f64, theta: f64) -> f64 {
        let mut value = self.base_level;
        for c in &self.components {
            value += c.amplitude * (TAU * c.radial_freq * rho + c.angular_freq * theta + c.phase).cos();
        }
        let (nr, na) = NOISE_GRID;
        let r = (rho.clamp(0.0, 1.0) * (nr - 1) as f64).min((nr - 1) as f64 - 1e-9);
        let a = theta.rem_euclid(TAU) / TAU * na as f64;
        let (r0, a0) = (r.floor() as usize, a.floor() as usize % na);
        let (fr, fa) = (r - r0 as f64, a - a.floor());
        let a1 = (a0 + 1) % na;
        let at = |ri: usize, ai: usize| self.noise[ri * na + ai];
        let top = at(r0, a0) * (1.0 - fa) + at(r0, a1) * fa;
        let bottom = at(r0 + 1, a0) * (1.0 - fa) + at(r0 + 1, a1) * fa;
        value + top * (1.0 - fr) + bottom * fr
    }

    pub fn pupil_ratio(&self) -> f64 {
        self.pupil_ratio
    }
}

pub fn generate_identity_texture(seed: u64, identity_index: usize) -> IdentityTexture {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1, identity_index as u64]));
    let components = (0..6)
        .map(|_| Component {
            amplitude: rng.gen_range(8.0..20.0),
            radial_freq: rng.gen_range(1.0..5.0),
            angular_freq: rng.gen_range(2..=16) as f64,
            phase: rng.gen_range(0.0..TAU),
        })
        .collect();
    let (nr, na) = NOISE_GRID;
    IdentityTexture {
        base_level: rng.gen_range(90.0..140.0),
        pupil_ratio: rng.gen_range(0.35..0.45),
        components,
        noise: (0..nr * na).map(|_| rng.gen_range(-15.0..15.0)).collect(),
    }
}

#[derive(Clone, Copy, Debug)]
struct EyeGeometry {
    cx: f64,
    cy: f64,
    iris_radius: f64,
    pupil_radius: f64,
}

impl EyeGeometry {
    fn centered(size: usize, pupil_ratio: f64) -> Self {
        let iris_radius = IRIS_RADIUS_FRACTION * size as f64;
        Self {
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            iris_radius,
            pupil_radius: pupil_ratio * iris_radius,
        }
    }

    /// `(r, theta)` of the center of pixel `(x, y)`.
    fn polar(&self, x: usize, y: usize) -> (f64, f64) {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        (dx.hypot(dy), dy.atan2(dx))
    }

    fn in_annulus(&self, r: f64) -> bool {
        r >= self.pupil_radius && r < self.iris_radius
    }

    fn rho(&self, r: f64) -> f64 {
        (r - self.pupil_radius) / (self.iris_radius - self.pupil_radius)
    }

    fn point(&self, rho: f64, theta: f64) -> (f64, f64) {
        let r = self.pupil_radius + rho * (self.iris_radius - self.pupil_radius);
        (self.cx + r * theta.cos(), self.cy + r * theta.sin())
    }
}

/// Pixel values of the texture with no capture effects, and the annulus mask.
fn render_base(texture: &IdentityTexture, size: usize, geo: &EyeGeometry) -> (EyeImage, BinaryMask) {
    let mut image = EyeImage::filled(size, size, 0);
    let mut iris = BinaryMask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (r, theta) = geo.polar(x, y);
            let value = if r < geo.pupil_radius {
                PUPIL_LEVEL
            } else if geo.in_annulus(r) {
                iris.set(x, y, true);
                texture.sample(geo.rho(r), theta)
            } else {
                SCLERA_LEVEL
            };
            image.set(x, y, value.round().clamp(0.0, 255.0) as u8);
        }
    }
    (image, iris)
}

/// Noise-free rendering of the identity pattern on a centered eye.
pub fn render_texture(texture: &IdentityTexture, size: usize) -> (EyeImage, BinaryMask) {
    render_base(texture, size, &EyeGeometry::centered(size, texture.pupil_ratio))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    pub image: EyeImage,
    pub masks: MaskSet,
}

struct Stroke {
    rho: f64,
    theta: f64,
    half_span: f64,
    bend: f64,
}

struct Blob {
    x: f64,
    y: f64,
    radius: f64,
}

fn distance_to_polyline(px: f64, py: f64, pts: &[(f64, f64)]) -> f64 {
    pts.windows(2)
        .map(|w| {
            let ((ax, ay), (bx, by)) = (w[0], w[1]);
            let (vx, vy) = (bx - ax, by - ay);
            let len2 = vx * vx + vy * vy;
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0)
            };
            (px - ax - t * vx).hypot(py - ay - t * vy)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Renders one capture. Artifact candidates are drawn from `sample_seed`
/// independently of `pmi_hours`; PMI only selects how many are active and
/// how large they are, so artifact masks grow monotonically with PMI.
pub fn render_sample(
    texture: &IdentityTexture,
    pmi_hours: f64,
    sample_seed: u64,
    image_size: usize,
    severity: &ArtifactSeverity,
) -> Result<RenderedSample> {
    if !(pmi_hours >= 0.0) {
        return Err(Error::invalid(format!("pmi_hours must be nonnegative, got {pmi_hours}")));
    }
    if image_size < 8 {
        return Err(Error::invalid("synthetic images must be at least 8 pixels wide"));
    }
    let size = image_size;
    let mut capture = ChaCha8Rng::seed_from_u64(derive_seed(&[sample_seed, 10]));
    let mut artifacts = ChaCha8Rng::seed_from_u64(derive_seed(&[sample_seed, 11]));
    let mut sensor = ChaCha8Rng::seed_from_u64(derive_seed(&[sample_seed, 12]));

    let mut geo = EyeGeometry::centered(size, texture.pupil_ratio);
    geo.cx += capture.gen_range(-2.0..2.0);
    geo.cy += capture.gen_range(-2.0..2.0);
    geo.pupil_radius *= capture.gen_range(0.97..1.03);
    let (base, iris) = render_base(texture, size, &geo);

    let strokes: Vec<Stroke> = (0..severity.max_wrinkles)
        .map(|_| Stroke {
            rho: artifacts.gen_range(0.2..0.8),
            theta: artifacts.gen_range(0.0..TAU),
            half_span: artifacts.gen_range(0.3..0.8),
            bend: artifacts.gen_range(-0.15..0.15),
        })
        .collect();
    let blobs: Vec<Blob> = (0..severity.max_highlights)
        .map(|_| {
            let r = geo.iris_radius * artifacts.gen_range(0.0f64..1.0).sqrt();
            let theta = artifacts.gen_range(0.0..TAU);
            Blob {
                x: geo.cx + r * theta.cos(),
                y: geo.cy + r * theta.sin(),
                radius: artifacts.gen_range(0.5..1.0) * severity.max_highlight_radius,
            }
        })
        .collect();

    let half_width = severity.wrinkle_width(pmi_hours) / 2.0;
    let mut wrinkle = BinaryMask::new(size, size);
    for stroke in strokes.iter().take(severity.wrinkle_count(pmi_hours)) {
        let path: Vec<(f64, f64)> = (0..=32)
            .map(|i| {
                let t = i as f64 / 32.0;
                let rho = stroke.rho + stroke.bend * (PI * t).sin();
                geo.point(rho, stroke.theta + stroke.half_span * (2.0 * t - 1.0))
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                if iris.get(x, y) && !wrinkle.get(x, y) {
                    let d = distance_to_polyline(x as f64 + 0.5, y as f64 + 0.5, &path);
                    if d <= half_width {
                        wrinkle.set(x, y, true);
                    }
                }
            }
        }
    }

    let scale = severity.highlight_scale(pmi_hours);
    let mut highlight = BinaryMask::new(size, size);
    for blob in blobs.iter().take(severity.highlight_count(pmi_hours)) {
        let radius = blob.radius * scale;
        for y in 0..size {
            for x in 0..size {
                let d = (x as f64 + 0.5 - blob.x).hypot(y as f64 + 0.5 - blob.y);
                if d <= radius {
                    highlight.set(x, y, true);
                }
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut image = base;
    for y in 0..size {
        for x in 0..size {
            let mut v = image.get(x, y) as f64;
            if wrinkle.get(x, y) {
                v *= WRINKLE_DARKENING;
            }
            v += noise.sample(&mut sensor);
            if highlight.get(x, y) {
                v = 255.0;
            }
            image.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }

    Ok(RenderedSample {
        image,
        masks: MaskSet {
            iris,
            highlight,
            wrinkle,
        },
    })
}

fn sample_seed(seed: u64, identity: usize, k: usize) -> u64 {
    derive_seed(&[seed, 2, identity as u64, k as u64])
}

/// Subject, eye and acquisition labels of sample `k` of identity `i`.
/// Consecutive identities are the left and right eye of one subject.
pub fn sample_labels(identity: usize, k: usize) -> (String, Eye, String) {
    let subject = format!("S{:03}", identity / 2);
    let eye = if identity % 2 == 0 { Eye::L } else { Eye::R };
    let session = format!("{subject}-t{k:02}");
    (subject, eye, session)
}

/// Writes `images/`, `masks/` and `manifest.csv` under `out_dir` and returns
/// the manifest path. Output is byte-identical for identical configurations.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    if cfg.n_identities < 2 || cfg.samples_per_identity == 0 {
        return Err(Error::invalid("need at least 2 identities and 1 sample each"));
    }
    if cfg.pmi_schedule.is_empty() || cfg.pmi_schedule.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::invalid("PMI schedule must be nonempty and nonnegative"));
    }
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    for dir in [&images_dir, &masks_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let jobs: Vec<(usize, usize)> = (0..cfg.n_identities)
        .flat_map(|i| (0..cfg.samples_per_identity).map(move |k| (i, k)))
        .collect();
    let textures: Vec<IdentityTexture> = (0..cfg.n_identities)
        .map(|i| generate_identity_texture(cfg.seed, i))
        .collect();
    let rendered: Vec<RenderedSample> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let pmi = cfg.pmi_schedule[k % cfg.pmi_schedule.len()];
            render_sample(&textures[i], pmi, sample_seed(cfg.seed, i, k), cfg.image_size, &cfg.severity)
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(jobs.len());
    for (&(i, k), sample) in jobs.iter().zip(&rendered) {
        let (subject_id, eye, session_id) = sample_labels(i, k);
        let name = format!("{subject_id}_{eye}_{k:02}.png");
        let image_rel = PathBuf::from("images").join(&name);
        let mask_rel = PathBuf::from("masks").join(&name);
        save_image(&out_dir.join(&image_rel), &sample.image)?;
        save_mask(&out_dir.join(&mask_rel), &sample.masks)?;
        records.push(SampleRecord {
            image_path: image_rel,
            mask_path: mask_rel,
            subject_id,
            eye,
            session_id,
            pmi_hours: cfg.pmi_schedule[k % cfg.pmi_schedule.len()],
            dataset_tag: "synthetic".into(),
        });
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn annulus_mad(a: &EyeImage, b: &EyeImage, mask: &BinaryMask) -> f64 {
        let mut total = 0.0;
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(x, y) {
                    total += (a.get(x, y) as f64 - b.get(x, y) as f64).abs();
                }
            }
        }
        total / mask.count() as f64
    }

    #[test]
    fn textures_are_deterministic_and_distinct() {
        assert_eq!(generate_identity_texture(3, 1), generate_identity_texture(3, 1));
        let (a, mask) = render_texture(&generate_identity_texture(3, 0), 64);
        let (b, _) = render_texture(&generate_identity_texture(3, 1), 64);
        let (c, _) = render_texture(&generate_identity_texture(4, 0), 64);
        assert!(annulus_mad(&a, &b, &mask) > 0.0);
        assert!(annulus_mad(&a, &c, &mask) > 0.0);
    }

    #[test]
    fn zero_pmi_has_no_artifacts() {
        let tex = generate_identity_texture(1, 0);
        let s = render_sample(&tex, 0.0, 9, 96, &ArtifactSeverity::default()).unwrap();
        assert!(s.masks.wrinkle.is_empty());
        assert!(s.masks.highlight.is_empty());
        assert!(!s.masks.iris.is_empty());
    }

    #[test]
    fn late_pmi_covers_a_tenth_of_the_iris() {
        let tex = generate_identity_texture(1, 0);
        for seed in 0..5 {
            let s = render_sample(&tex, 1000.0, seed, 96, &ArtifactSeverity::default()).unwrap();
            let iris = &s.masks.iris;
            let covered = (0..96 * 96)
                .filter(|&i| {
                    let (x, y) = (i % 96, i / 96);
                    iris.get(x, y) && (s.masks.wrinkle.get(x, y) || s.masks.highlight.get(x, y))
                })
                .count();
            assert!(covered as f64 > 0.1 * iris.count() as f64, "seed {seed}: {covered}/{}", iris.count());
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let tex = generate_identity_texture(1, 2);
        let sev = ArtifactSeverity::default();
        assert_eq!(render_sample(&tex, 120.0, 5, 64, &sev).unwrap(), render_sample(&tex, 120.0, 5, 64, &sev).unwrap());
    }

    #[test]
    fn highlights_are_saturated() {
        let tex = generate_identity_texture(2, 3);
        let s = render_sample(&tex, 672.0, 1, 96, &ArtifactSeverity::default()).unwrap();
        assert!(!s.masks.highlight.is_empty());
        for y in 0..96 {
            for x in 0..96 {
                if s.masks.highlight.get(x, y) {
                    assert_eq!(s.image.get(x, y), 255);
                }
            }
        }
    }

    #[test]
    fn artifact_area_grows_with_pmi() {
        let tex = generate_identity_texture(5, 1);
        let sev = ArtifactSeverity::default();
        for seed in 0..4 {
            let mut last = 0;
            for pmi in [0.0, 4.0, 24.0, 72.0, 120.0, 336.0, 672.0, 1000.0, 5000.0] {
                let s = render_sample(&tex, pmi, seed, 64, &sev).unwrap();
                let area = s.masks.wrinkle.count() + s.masks.highlight.count();
                assert!(area >= last, "seed {seed} pmi {pmi}: {area} < {last}");
                last = area;
            }
        }
    }

    #[test]
    fn negative_pmi_is_rejected() {
        let tex = generate_identity_texture(0, 0);
        assert!(render_sample(&tex, -1.0, 0, 64, &ArtifactSeverity::default()).is_err());
    }

    #[test]
    fn labels_pair_eyes_per_subject() {
        assert_eq!(sample_labels(0, 1), ("S000".into(), Eye::L, "S000-t01".into()));
        assert_eq!(sample_labels(3, 0), ("S001".into(), Eye::R, "S001-t00".into()));
    }
}
