//! Mask fusion into the usable iris area, iris cropping and segmentation
//! accuracy reporting.

use serde::Serialize;

use crate::dataset::{EyeImage, MaskSet};
use crate::error::{Error, Result};

pub const DEFAULT_CROP_SIZE: usize = 256;

/// Default PMI bin edges in hours: `[0,24], (24,72], ... (672,inf)`.
pub const DEFAULT_PMI_EDGES: [f64; 6] = [0.0, 24.0, 72.0, 120.0, 336.0, 672.0];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bbox = Some(match bbox {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bbox
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// `iris AND NOT (highlight OR wrinkle)`.
pub fn fuse_usable_area(masks: &MaskSet) -> BinaryMask {
    let bits = masks
        .iris
        .bits
        .iter()
        .zip(&masks.highlight.bits)
        .zip(&masks.wrinkle.bits)
        .map(|((&iris, &hl), &wr)| iris && !(hl || wr))
        .collect();
    BinaryMask {
        width: masks.iris.width,
        height: masks.iris.height,
        bits,
    }
}

/// Intersection over union. Two empty masks agree perfectly (1.0).
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "iou of {:?} and {:?} masks",
            pred.dims(),
            gt.dims()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.bits.iter().zip(&gt.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Placement of a square crop window in source-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub origin_x: i64,
    pub origin_y: i64,
    /// Side of the square window in source pixels.
    pub side: usize,
    /// Side of the resampled crop in crop pixels.
    pub size: usize,
}

impl CropGeometry {
    /// Source pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side as f64 / self.size as f64
    }

    /// Tight box of the mask expanded to a square about its center.
    pub fn around(mask: &BinaryMask, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("crop size must be positive"));
        }
        let (x0, y0, x1, y1) = mask
            .bounding_box()
            .ok_or_else(|| Error::invalid("cannot crop around an empty iris mask"))?;
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let side = w.max(h);
        Ok(Self {
            origin_x: x0 as i64 - ((side - w) / 2) as i64,
            origin_y: y0 as i64 - ((side - h) / 2) as i64,
            side,
            size,
        })
    }

    /// Source coordinate of the center of crop pixel `u`, in pixel-center units.
    fn source_center(&self, origin: i64, u: usize) -> f64 {
        origin as f64 + (u as f64 + 0.5) * self.scale() - 0.5
    }

    /// Bilinear resampling, zero outside the image.
    pub fn resample_image(&self, image: &EyeImage) -> EyeImage {
        let (w, h) = (image.width() as i64, image.height() as i64);
        let at = |x: i64, y: i64| -> f64 {
            if x < 0 || y < 0 || x >= w || y >= h {
                0.0
            } else {
                image.get(x as usize, y as usize) as f64
            }
        };
        let mut out = EyeImage::filled(self.size, self.size, 0);
        for v in 0..self.size {
            let sy = self.source_center(self.origin_y, v);
            let y0 = sy.floor();
            let fy = sy - y0;
            let y0 = y0 as i64;
            for u in 0..self.size {
                let sx = self.source_center(self.origin_x, u);
                let x0 = sx.floor();
                let fx = sx - x0;
                let x0 = x0 as i64;
                let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                let value = top * (1.0 - fy) + bottom * fy;
                out.set(u, v, value.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    /// Nearest-neighbour resampling, unset outside the mask.
    pub fn resample_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let nearest = |origin: i64, u: usize| (self.source_center(origin, u) + 0.5).floor() as i64;
        BinaryMask::from_fn(self.size, self.size, |u, v| {
            let (x, y) = (nearest(self.origin_x, u), nearest(self.origin_y, v));
            x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize)
        })
    }

    pub fn resample_masks(&self, masks: &MaskSet) -> MaskSet {
        MaskSet {
            iris: self.resample_mask(&masks.iris),
            highlight: self.resample_mask(&masks.highlight),
            wrinkle: self.resample_mask(&masks.wrinkle),
        }
    }
}

/// Square crop of the iris region, resampled to `size x size`.
#[derive(Clone, Debug, PartialEq)]
pub struct IrisCrop {
    pub image: EyeImage,
    pub geometry: CropGeometry,
}

impl IrisCrop {
    pub fn size(&self) -> usize {
        self.geometry.size
    }

    pub fn origin(&self) -> (i64, i64) {
        (self.geometry.origin_x, self.geometry.origin_y)
    }

    pub fn scale(&self) -> f64 {
        self.geometry.scale()
    }
}

pub fn crop_iris(image: &EyeImage, iris: &BinaryMask, size: usize) -> Result<IrisCrop> {
    if iris.dims() != (image.width(), image.height()) {
        return Err(Error::shape(format!(
            "iris mask {:?} does not match image {}x{}",
            iris.dims(),
            image.width(),
            image.height()
        )));
    }
    let geometry = CropGeometry::around(iris, size)?;
    Ok(IrisCrop {
        image: geometry.resample_image(image),
        geometry,
    })
}

/// Ascending PMI bin edges. Bin 0 is closed `[e0, e1]`; later bins are
/// half-open `(e_i, e_{i+1}]`; the last bin is unbounded above.
#[derive(Clone, Debug, PartialEq)]
pub struct PmiBins {
    edges: Vec<f64>,
}

impl Default for PmiBins {
    fn default() -> Self {
        Self {
            edges: DEFAULT_PMI_EDGES.to_vec(),
        }
    }
}

impl PmiBins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::invalid("at least one PMI bin edge is required"));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| e.is_nan()) {
            return Err(Error::invalid("PMI bin edges must be strictly ascending"));
        }
        Ok(Self { edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(lower, upper)` of bin `i`; the last upper bound is infinite.
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        let upper = self.edges.get(i + 1).copied().unwrap_or(f64::INFINITY);
        (self.edges[i], upper)
    }

    /// Values below the first edge fall into bin 0.
    pub fn bin_of(&self, pmi: f64) -> usize {
        (0..self.len())
            .find(|&i| pmi <= self.bounds(i).1)
            .unwrap_or(self.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean: Option<f64>,
    pub stddev: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegReport {
    pub ious: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
    pub bins: Vec<BinStats>,
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// IoU of the iris class, overall and per PMI bin.
pub fn segmentation_report(samples: &[(MaskSet, MaskSet, f64)], bins: &PmiBins) -> Result<SegReport> {
    if samples.is_empty() {
        return Err(Error::invalid("segmentation report over zero samples"));
    }
    let ious = samples
        .iter()
        .map(|(pred, gt, _)| iou(&pred.iris, &gt.iris))
        .collect::<Result<Vec<_>>>()?;
    let (mean, stddev) = mean_std(&ious);

    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); bins.len()];
    for ((_, _, pmi), &value) in samples.iter().zip(&ious) {
        per_bin[bins.bin_of(*pmi)].push(value);
    }
    let bins = per_bin
        .iter()
        .enumerate()
        .map(|(i, values)| {
            let (lower, upper) = bins.bounds(i);
            let (mean, stddev) = if values.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(values);
                (Some(m), Some(s))
            };
            BinStats {
                lower,
                upper,
                count: values.len(),
                mean,
                stddev,
            }
        })
        .collect();

    Ok(SegReport {
        ious,
        mean,
        stddev,
        bins,
    })
}
