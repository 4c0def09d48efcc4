//! Examiner-facing composites: contrast-enhanced background, CAM heatmap
//! overlay and artifact contours, each independently switchable, plus
//! per-pair layer bundles.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::dataset::{EyeImage, MaskSet};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::matcher::Decision;
use crate::net::CamMap;

pub const IRIS_COLOR: [u8; 3] = [0, 0, 255];
pub const WRINKLE_COLOR: [u8; 3] = [0, 255, 0];
pub const HIGHLIGHT_COLOR: [u8; 3] = [255, 255, 0];
/// Overlay opacity at full activation.
pub const CAM_ALPHA: f64 = 0.4;

/// Global histogram equalization, `v -> floor(255 * cdf(v))`. Images with a
/// single gray level are returned unchanged.
pub fn enhance_contrast(image: &EyeImage) -> EyeImage {
    let mut hist = [0usize; 256];
    for &p in image.pixels() {
        hist[p as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return image.clone();
    }
    let total = image.pixels().len();
    let mut lut = [0u8; 256];
    let mut cumulative = 0usize;
    for (level, &count) in hist.iter().enumerate() {
        cumulative += count;
        lut[level] = (255 * cumulative / total) as u8;
    }
    let mut out = image.clone();
    for p in out.pixels_mut() {
        *p = lut[*p as usize];
    }
    out
}

/// Set pixels with at least one unset or out-of-image 4-neighbour.
pub fn extract_contours(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && (x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlags {
    pub show_background: bool,
    pub show_iris_contour: bool,
    pub show_highlight_contour: bool,
    pub show_wrinkle_contour: bool,
    pub show_cam: bool,
}

impl LayerFlags {
    pub const ALL: LayerFlags = LayerFlags {
        show_background: true,
        show_iris_contour: true,
        show_highlight_contour: true,
        show_wrinkle_contour: true,
        show_cam: true,
    };

    pub const NONE: LayerFlags = LayerFlags {
        show_background: false,
        show_iris_contour: false,
        show_highlight_contour: false,
        show_wrinkle_contour: false,
        show_cam: false,
    };

    /// Parses a comma-separated subset of
    /// `background,iris,highlight,wrinkle,cam` (or `all` / `none`).
    pub fn parse(list: &str) -> Result<Self> {
        let mut flags = Self::NONE;
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "all" => flags = Self::ALL,
                "none" => {}
                "background" => flags.show_background = true,
                "iris" => flags.show_iris_contour = true,
                "highlight" => flags.show_highlight_contour = true,
                "wrinkle" => flags.show_wrinkle_contour = true,
                "cam" => flags.show_cam = true,
                other => return Err(Error::invalid(format!("unknown layer `{other}`"))),
            }
        }
        Ok(flags)
    }

    /// Flags from the low five bits, in field order.
    pub fn from_bits(bits: u8) -> Self {
        Self {
            show_background: bits & 1 != 0,
            show_iris_contour: bits & 2 != 0,
            show_highlight_contour: bits & 4 != 0,
            show_wrinkle_contour: bits & 8 != 0,
            show_cam: bits & 16 != 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompositeImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl CompositeImage {
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }
}

/// Blue at 0, green at 0.5, red at 1, linear in between.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.5 {
        let t = 2.0 * v;
        [0.0, 255.0 * t, 255.0 * (1.0 - t)]
    } else {
        let t = 2.0 * v - 1.0;
        [255.0 * t, 255.0 * (1.0 - t), 0.0]
    }
}

fn check_aligned(crop: &EyeImage, masks: &MaskSet, cam: &CamMap) -> Result<()> {
    let dims = (crop.width(), crop.height());
    if masks.dims() != dims || cam.size != crop.width() || cam.size != crop.height() {
        return Err(Error::shape(format!(
            "layers are not aligned: crop {dims:?}, masks {:?}, cam {}x{}",
            masks.dims(),
            cam.size,
            cam.size
        )));
    }
    Ok(())
}

/// Background, then CAM blend, then opaque 1-pixel contours (iris, wrinkle,
/// highlight, later ones on top).
pub fn render_composite(crop: &EyeImage, masks: &MaskSet, cam: &CamMap, flags: LayerFlags) -> Result<CompositeImage> {
    check_aligned(crop, masks, cam)?;
    let (w, h) = (crop.width(), crop.height());
    let background = flags.show_background.then(|| enhance_contrast(crop));
    let mut pixels = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let g = background.as_ref().map_or(0, |b| b.pixels()[i]);
        let mut px = [g; 3];
        if flags.show_cam {
            let v = cam.values[i].clamp(0.0, 1.0);
            let alpha = CAM_ALPHA * v;
            let color = colormap(v);
            for c in 0..3 {
                let blended = (1.0 - alpha) * px[c] as f64 + alpha * color[c];
                px[c] = blended.round().clamp(0.0, 255.0) as u8;
            }
        }
        pixels.push(px);
    }
    let layers = [
        (flags.show_iris_contour, &masks.iris, IRIS_COLOR),
        (flags.show_wrinkle_contour, &masks.wrinkle, WRINKLE_COLOR),
        (flags.show_highlight_contour, &masks.highlight, HIGHLIGHT_COLOR),
    ];
    for (on, mask, color) in layers {
        if on {
            for (px, &edge) in pixels.iter_mut().zip(extract_contours(mask).bits()) {
                if edge {
                    *px = color;
                }
            }
        }
    }
    Ok(CompositeImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Layers exported per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Background,
    Contours,
    Cam,
    Composite,
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [
        LayerKind::Background,
        LayerKind::Contours,
        LayerKind::Cam,
        LayerKind::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Background => "background",
            LayerKind::Contours => "contours",
            LayerKind::Cam => "cam",
            LayerKind::Composite => "composite",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Crop-aligned visual evidence for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEvidence {
    pub sample_id: String,
    pub crop: EyeImage,
    pub masks: MaskSet,
    pub cam: CamMap,
    pub pmi_hours: Option<f64>,
}

fn encode_png(width: usize, height: usize, data: &[u8], color: ExtendedColorType) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(data, width as u32, height as u32, color)
        .expect("in-memory PNG encoding");
    out
}

/// PNG bytes of one layer. Background and composite are opaque RGB;
/// contours and CAM are RGBA with transparency for client-side stacking.
pub fn render_layer_png(evidence: &SampleEvidence, kind: LayerKind, flags: LayerFlags) -> Result<Vec<u8>> {
    let (crop, masks, cam) = (&evidence.crop, &evidence.masks, &evidence.cam);
    check_aligned(crop, masks, cam)?;
    let (w, h) = (crop.width(), crop.height());
    let png = match kind {
        LayerKind::Background => {
            let only = LayerFlags {
                show_background: true,
                ..LayerFlags::NONE
            };
            let img = render_composite(crop, masks, cam, only)?;
            encode_png(w, h, img.pixels.as_flattened(), ExtendedColorType::Rgb8)
        }
        LayerKind::Composite => {
            let img = render_composite(crop, masks, cam, flags)?;
            encode_png(w, h, img.pixels.as_flattened(), ExtendedColorType::Rgb8)
        }
        LayerKind::Contours => {
            let mut rgba = vec![[0u8; 4]; w * h];
            for (mask, color) in [
                (&masks.iris, IRIS_COLOR),
                (&masks.wrinkle, WRINKLE_COLOR),
                (&masks.highlight, HIGHLIGHT_COLOR),
            ] {
                for (px, &edge) in rgba.iter_mut().zip(extract_contours(mask).bits()) {
                    if edge {
                        *px = [color[0], color[1], color[2], 255];
                    }
                }
            }
            encode_png(w, h, rgba.as_flattened(), ExtendedColorType::Rgba8)
        }
        LayerKind::Cam => {
            let rgba: Vec<[u8; 4]> = cam
                .values
                .iter()
                .map(|&v| {
                    let v = v.clamp(0.0, 1.0);
                    let c = colormap(v);
                    let a = (255.0 * CAM_ALPHA * v).round() as u8;
                    [c[0].round() as u8, c[1].round() as u8, c[2].round() as u8, a]
                })
                .collect();
            encode_png(w, h, rgba.as_flattened(), ExtendedColorType::Rgba8)
        }
    };
    Ok(png)
}

/// Bundle file name of a sample's layer, `a` being the probe and `b` the reference.
pub fn layer_file_name(sample: char, kind: LayerKind) -> String {
    format!("{sample}_{}.png", kind.name())
}

/// A decided pair with the evidence for both samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEvidence {
    pub pair_id: String,
    pub probe: SampleEvidence,
    pub reference: SampleEvidence,
    pub similarity: f64,
    pub decision: Decision,
}

impl PairEvidence {
    pub fn sample(&self, which: char) -> Option<&SampleEvidence> {
        match which {
            'a' => Some(&self.probe),
            'b' => Some(&self.reference),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleIndex {
    pub pair_id: String,
    pub similarity: f64,
    pub decision: Decision,
    /// `green` for a match, `red` for a non-match.
    pub border: String,
    pub probe_pmi: Option<f64>,
    pub reference_pmi: Option<f64>,
    pub layers: Vec<String>,
}

pub fn border_color(decision: Decision) -> &'static str {
    match decision {
        Decision::Match => "green",
        Decision::NonMatch => "red",
    }
}

/// All eight layer files of a pair as `(file name, PNG bytes)`.
pub fn render_pair_layers(pair: &PairEvidence, flags: LayerFlags) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::with_capacity(8);
    for (which, evidence) in [('a', &pair.probe), ('b', &pair.reference)] {
        for kind in LayerKind::ALL {
            files.push((layer_file_name(which, kind), render_layer_png(evidence, kind, flags)?));
        }
    }
    Ok(files)
}

/// Writes the layer PNGs and `index.json` into `out_dir`; returns the index path.
pub fn export_layer_bundle(pair: &PairEvidence, out_dir: &Path, flags: LayerFlags) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = render_pair_layers(pair, flags)?;
    for (name, bytes) in &files {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let index = BundleIndex {
        pair_id: pair.pair_id.clone(),
        similarity: pair.similarity,
        decision: pair.decision,
        border: border_color(pair.decision).into(),
        probe_pmi: pair.probe.pmi_hours,
        reference_pmi: pair.reference.pmi_hours,
        layers: files.into_iter().map(|(name, _)| name).collect(),
    };
    let path = out_dir.join("index.json");
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
