//! Eye images, multi-class masks, sample manifests and identity-disjoint splits.
//!
//! Manifests are CSV files with the exact header
//! `image_path,mask_path,subject_id,eye,session_id,pmi_hours,dataset_tag`.
//! Masks are RGB PNGs: red is iris, green is wrinkle, blue is highlight, and a
//! pixel belongs to a class when its channel value is at least 128.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, ImageReader, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const MANIFEST_HEADER: [&str; 7] = [
    "image_path",
    "mask_path",
    "subject_id",
    "eye",
    "session_id",
    "pmi_hours",
    "dataset_tag",
];

/// Channel value at or above which a mask pixel is considered set.
pub const MASK_THRESHOLD: u8 = 128;

/// 8-bit grayscale capture, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EyeImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl EyeImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image dimensions must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0);
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }
}

/// The three annotation classes of a capture. Masks may overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub iris: BinaryMask,
    pub highlight: BinaryMask,
    pub wrinkle: BinaryMask,
}

impl MaskSet {
    pub fn new(iris: BinaryMask, highlight: BinaryMask, wrinkle: BinaryMask) -> Result<Self> {
        let dims = iris.dims();
        if highlight.dims() != dims || wrinkle.dims() != dims {
            return Err(Error::shape("mask classes differ in dimensions"));
        }
        Ok(Self {
            iris,
            highlight,
            wrinkle,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            iris: BinaryMask::new(width, height),
            highlight: BinaryMask::new(width, height),
            wrinkle: BinaryMask::new(width, height),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.iris.dims()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Eye {
    L,
    R,
}

impl fmt::Display for Eye {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Eye::L => "L",
            Eye::R => "R",
        })
    }
}

/// The identity class used for matching: one iris of one subject.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Identity {
    pub subject_id: String,
    pub eye: Eye,
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.subject_id, self.eye)
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub subject_id: String,
    pub eye: Eye,
    pub session_id: String,
    pub pmi_hours: f64,
    pub dataset_tag: String,
}

impl SampleRecord {
    pub fn identity(&self) -> Identity {
        Identity {
            subject_id: self.subject_id.clone(),
            eye: self.eye,
        }
    }

    /// Stable sample identifier: the image file stem.
    pub fn sample_id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.to_string_lossy().into_owned())
    }

    pub fn image_path_in(&self, base: &Path) -> PathBuf {
        base.join(&self.image_path)
    }

    pub fn mask_path_in(&self, base: &Path) -> PathBuf {
        base.join(&self.mask_path)
    }
}

/// Directory against which a manifest's relative paths are resolved.
pub fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(file);

    let header_err = |message: String| Error::Manifest {
        path: path.to_path_buf(),
        row: 1,
        message,
    };
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(header_err(e.to_string())),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(header_err("missing header".into()));
    }
    if headers.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(header_err(format!(
            "expected header `{}`",
            MANIFEST_HEADER.join(",")
        )));
    }

    let mut records = Vec::new();
    for (index, row) in reader.deserialize::<SampleRecord>().enumerate() {
        // Line 1 is the header.
        let row_number = index + 2;
        let record = row.map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            row: row_number,
            message: e.to_string(),
        })?;
        if !(record.pmi_hours >= 0.0 && record.pmi_hours.is_finite()) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                row: row_number,
                message: format!("pmi_hours must be nonnegative, got {}", record.pmi_hours),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{other:?}")),
    };
    writer.write_record(MANIFEST_HEADER).map_err(to_err)?;
    for record in records {
        writer.serialize(record).map_err(to_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: "not a PNG file".into(),
        });
    }
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

fn write_png(path: &Path, save: impl FnOnce(&mut BufWriter<File>) -> image::ImageResult<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    save(&mut out).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

pub fn load_image(path: &Path) -> Result<EyeImage> {
    let gray = read_png(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    EyeImage::new(w as usize, h as usize, gray.into_raw())
}

pub fn save_image(path: &Path, image: &EyeImage) -> Result<()> {
    let buf = GrayImage::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.pixels().to_vec(),
    )
    .expect("pixel count checked at construction");
    write_png(path, |out| buf.write_to(out, ImageFormat::Png))
}

pub fn load_mask(path: &Path) -> Result<MaskSet> {
    let rgb = read_png(path)?.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut masks = MaskSet::empty(w, h);
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        masks.iris.set(x, y, px[0] >= MASK_THRESHOLD);
        masks.wrinkle.set(x, y, px[1] >= MASK_THRESHOLD);
        masks.highlight.set(x, y, px[2] >= MASK_THRESHOLD);
    }
    Ok(masks)
}

pub fn save_mask(path: &Path, masks: &MaskSet) -> Result<()> {
    let (w, h) = masks.dims();
    let mut rgb = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in rgb.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        let on = |m: &BinaryMask| if m.get(x, y) { 255 } else { 0 };
        *px = image::Rgb([on(&masks.iris), on(&masks.wrinkle), on(&masks.highlight)]);
    }
    write_png(path, |out| rgb.write_to(out, ImageFormat::Png))
}

/// Partitions records so that no identity appears on both sides.
///
/// Identities are sorted, shuffled with the seed, and the first
/// `round(train_fraction * n)` go to train (halves round toward train). The
/// count is clamped so that both partitions hold at least one identity.
/// Records keep their input order within each partition.
pub fn split_subject_disjoint(
    records: &[SampleRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let identities: BTreeSet<Identity> = records.iter().map(SampleRecord::identity).collect();
    let n = identities.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "a split needs at least 2 identities, found {n}"
        )));
    }

    let mut order: Vec<Identity> = identities.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train_ids: BTreeSet<&Identity> = order[..n_train].iter().collect();

    let (train, test) = records
        .iter()
        .cloned()
        .partition(|r| train_ids.contains(&r.identity()));
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(subject: &str, eye: Eye, session: &str) -> SampleRecord {
        SampleRecord {
            image_path: format!("img/{subject}_{eye}_{session}.png").into(),
            mask_path: format!("mask/{subject}_{eye}_{session}.png").into(),
            subject_id: subject.into(),
            eye,
            session_id: session.into(),
            pmi_hours: 12.0,
            dataset_tag: "t".into(),
        }
    }

    fn write_file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    const HEADER: &str = "image_path,mask_path,subject_id,eye,session_id,pmi_hours,dataset_tag\n";

    #[test]
    fn header_only_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "m.csv", HEADER);
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn single_row_is_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}a/b.png,a/c.png,subj 1,R,sess-x,36.5,warsaw\n");
        let path = write_file(dir.path(), "m.csv", &body);
        let records = load_manifest(&path).unwrap();
        assert_eq!(
            records,
            vec![SampleRecord {
                image_path: "a/b.png".into(),
                mask_path: "a/c.png".into(),
                subject_id: "subj 1".into(),
                eye: Eye::R,
                session_id: "sess-x".into(),
                pmi_hours: 36.5,
                dataset_tag: "warsaw".into(),
            }]
        );
    }

    #[test]
    fn negative_pmi_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}a.png,b.png,s,L,x,1,t\na.png,b.png,s,L,y,-3,t\n");
        let path = write_file(dir.path(), "m.csv", &body);
        match load_manifest(&path).unwrap_err() {
            Error::Manifest { row, message, .. } => {
                assert_eq!(row, 3);
                assert!(message.contains("-3"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let bad_eye = write_file(dir.path(), "a.csv", &format!("{HEADER}a.png,b.png,s,X,x,1,t\n"));
        assert!(matches!(load_manifest(&bad_eye), Err(Error::Manifest { row: 2, .. })));
        let short = write_file(dir.path(), "b.csv", &format!("{HEADER}a.png,b.png,s\n"));
        assert!(matches!(load_manifest(&short), Err(Error::Manifest { row: 2, .. })));
        let header = write_file(dir.path(), "c.csv", "image,mask\n");
        assert!(matches!(load_manifest(&header), Err(Error::Manifest { row: 1, .. })));
    }

    #[test]
    fn missing_manifest_is_io() {
        let err = load_manifest(Path::new("/definitely/not/here.csv")).unwrap_err();
        assert!(err.is_io());
        assert!(err.to_string().contains("/definitely/not/here.csv"));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record("a", Eye::L, "1"), record("b,c", Eye::R, "2")];
        let path = dir.path().join("m.csv");
        write_manifest(&path, &records).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), records);
    }

    fn write_rgb(path: &Path, w: u32, h: u32, set: &[(u32, u32, [u8; 3])]) {
        let mut img = RgbImage::new(w, h);
        for &(x, y, px) in set {
            img.put_pixel(x, y, image::Rgb(px));
        }
        img.save(path).unwrap();
    }

    #[test]
    fn mask_channel_mapping_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("black.png");
        write_rgb(&black, 16, 16, &[]);
        let m = load_mask(&black).unwrap();
        assert_eq!(m.iris.count() + m.highlight.count() + m.wrinkle.count(), 0);

        let red = dir.path().join("red.png");
        write_rgb(&red, 16, 16, &[(10, 10, [255, 0, 0])]);
        let m = load_mask(&red).unwrap();
        assert!(m.iris.get(10, 10));
        assert_eq!(m.iris.count(), 1);
        assert_eq!(m.highlight.count() + m.wrinkle.count(), 0);

        let mixed = dir.path().join("mixed.png");
        write_rgb(&mixed, 4, 4, &[(1, 2, [127, 128, 255])]);
        let m = load_mask(&mixed).unwrap();
        assert!(!m.iris.get(1, 2));
        assert!(m.wrinkle.get(1, 2));
        assert!(m.highlight.get(1, 2));
    }

    #[test]
    fn non_png_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "fake.png", "definitely not an image");
        assert!(matches!(load_mask(&path), Err(Error::Image { .. })));
    }

    #[test]
    fn split_ten_identities() {
        let records: Vec<_> = (0..5)
            .flat_map(|s| [Eye::L, Eye::R].map(|e| record(&format!("s{s}"), e, "1")))
            .collect();
        let (train, test) = split_subject_disjoint(&records, 0.8, 3).unwrap();
        let ids = |v: &[SampleRecord]| v.iter().map(|r| r.identity()).collect::<BTreeSet<_>>();
        assert_eq!(ids(&train).len(), 8);
        assert_eq!(ids(&test).len(), 2);
        assert!(ids(&train).is_disjoint(&ids(&test)));

        let again = split_subject_disjoint(&records, 0.8, 3).unwrap();
        assert_eq!((train, test), again);
    }

    #[test]
    fn split_unbalanced_identities_is_disjoint() {
        let mut records = Vec::new();
        for (s, count) in [("a", 1), ("b", 5), ("c", 2), ("d", 7), ("e", 3)] {
            for k in 0..count {
                records.push(record(s, Eye::L, &k.to_string()));
            }
        }
        for seed in 0..20 {
            let (train, test) = split_subject_disjoint(&records, 0.6, seed).unwrap();
            assert_eq!(train.len() + test.len(), records.len());
            for a in &train {
                for b in &test {
                    assert_ne!(a.identity(), b.identity());
                }
            }
        }
    }

    #[test]
    fn split_rejects_degenerate_input() {
        let one = vec![record("a", Eye::L, "1"), record("a", Eye::L, "2")];
        assert!(split_subject_disjoint(&one, 0.8, 0).is_err());
        let two = vec![record("a", Eye::L, "1"), record("a", Eye::R, "1")];
        assert!(split_subject_disjoint(&two, 0.0, 0).is_err());
        assert!(split_subject_disjoint(&two, 1.0, 0).is_err());
        let (train, test) = split_subject_disjoint(&two, 0.8, 0).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
    }

    #[test]
    fn split_rounds_half_toward_train() {
        let records: Vec<_> = (0..4).map(|s| record(&format!("s{s}"), Eye::L, "1")).collect();
        // 0.625 * 4 = 2.5
        let (train, _) = split_subject_disjoint(&records, 0.625, 1).unwrap();
        assert_eq!(train.len(), 3);
    }
}
