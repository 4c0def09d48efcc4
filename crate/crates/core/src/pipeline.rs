//! Glue from manifest rows to crops, embeddings, scored pairs and visual
//! evidence.

use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{load_image, load_mask, EyeImage, MaskSet, SampleRecord};
use crate::error::{Error, Result};
use crate::mask::{crop_iris, BinaryMask, CropGeometry};
use crate::matcher::{cross_session_pairs, orient_pair, MatchRecord};
use crate::net::{Embedding, EmbeddingNet};
use crate::train::TrainSample;
use crate::visual::SampleEvidence;

/// A sample cropped to the network input, with crop-aligned masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub sample_id: String,
    pub crop: EyeImage,
    pub masks: MaskSet,
    pub geometry: CropGeometry,
    pub pmi_hours: Option<f64>,
}

/// Crops `image` around the iris in `masks`. Without masks the full frame is
/// treated as iris.
pub fn prepare_image(
    sample_id: impl Into<String>,
    image: &EyeImage,
    masks: Option<&MaskSet>,
    size: usize,
) -> Result<PreparedSample> {
    let full;
    let masks = match masks {
        Some(m) => m,
        None => {
            let (w, h) = (image.width(), image.height());
            full = MaskSet::new(BinaryMask::full(w, h), BinaryMask::new(w, h), BinaryMask::new(w, h))?;
            &full
        }
    };
    if masks.dims() != (image.width(), image.height()) {
        return Err(Error::shape(format!(
            "mask {:?} does not match image {}x{}",
            masks.dims(),
            image.width(),
            image.height()
        )));
    }
    let crop = crop_iris(image, &masks.iris, size)?;
    Ok(PreparedSample {
        sample_id: sample_id.into(),
        masks: crop.geometry.resample_masks(masks),
        crop: crop.image,
        geometry: crop.geometry,
        pmi_hours: None,
    })
}

pub fn prepare_record(record: &SampleRecord, base_dir: &Path, size: usize) -> Result<PreparedSample> {
    let image = load_image(&record.image_path_in(base_dir))?;
    let masks = load_mask(&record.mask_path_in(base_dir))?;
    let mut prepared = prepare_image(record.sample_id(), &image, Some(&masks), size)?;
    prepared.pmi_hours = Some(record.pmi_hours);
    Ok(prepared)
}

/// Prepares all records in parallel, preserving order.
pub fn prepare_records(records: &[SampleRecord], base_dir: &Path, size: usize) -> Result<Vec<PreparedSample>> {
    records
        .par_iter()
        .map(|r| prepare_record(r, base_dir, size))
        .collect()
}

pub fn train_samples(records: &[SampleRecord], base_dir: &Path, size: usize) -> Result<Vec<TrainSample>> {
    let prepared = prepare_records(records, base_dir, size)?;
    Ok(records
        .iter()
        .zip(prepared)
        .map(|(r, p)| TrainSample {
            crop: p.crop,
            identity: r.identity(),
            session_id: r.session_id.clone(),
        })
        .collect())
}

pub fn embed_crops(net: &EmbeddingNet, crops: &[&EyeImage]) -> Result<Vec<Embedding>> {
    crops.par_iter().map(|c| net.forward(c).map(|(e, _)| e)).collect()
}

/// Scores every cross-session pair of the manifest; the lower-PMI sample of
/// a pair is the reference.
pub fn score_cross_session(
    records: &[SampleRecord],
    embeddings: &[Embedding],
    threshold: f64,
) -> Result<Vec<MatchRecord>> {
    if records.len() != embeddings.len() {
        return Err(Error::shape("one embedding per record is required"));
    }
    let sessions: Vec<&str> = records.iter().map(|r| r.session_id.as_str()).collect();
    cross_session_pairs(&sessions)
        .into_iter()
        .map(|(i, j)| {
            let (r, p) = orient_pair(i, j, records[i].pmi_hours, records[j].pmi_hours);
            let mut m = MatchRecord::score(
                records[p].sample_id(),
                records[r].sample_id(),
                &embeddings[p],
                &embeddings[r],
                threshold,
            )?;
            m.is_genuine = Some(records[p].identity() == records[r].identity());
            m.probe_pmi = Some(records[p].pmi_hours);
            m.reference_pmi = Some(records[r].pmi_hours);
            Ok(m)
        })
        .collect()
}

/// Embedding plus CAM evidence for a prepared sample.
pub fn sample_evidence(net: &EmbeddingNet, sample: &PreparedSample) -> Result<(Embedding, SampleEvidence)> {
    let (embedding, cache) = net.forward(&sample.crop)?;
    let cam = net.compute_cam(&cache, &embedding);
    let evidence = SampleEvidence {
        sample_id: sample.sample_id.clone(),
        crop: sample.crop.clone(),
        masks: sample.masks.clone(),
        cam,
        pmi_hours: sample.pmi_hours,
    };
    Ok((embedding, evidence))
}
