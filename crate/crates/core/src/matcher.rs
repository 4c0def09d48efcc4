//! Embedding distances, similarity scores, decisions and verification metrics.

use std::fmt;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Embedding;

/// Euclidean distance.
pub fn distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    Ok(squared(a, b)?.sqrt())
}

fn squared(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "embeddings of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(crate::train::squared_distance(a.as_slice(), b.as_slice()))
}

/// `1 - ||a - b||^2 / D`, clamped to `[0, 1]`.
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    let d2 = squared(a, b)?;
    Ok((1.0 - d2 / a.dim() as f64).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Match,
    #[serde(rename = "nonmatch")]
    NonMatch,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Match => "match",
            Decision::NonMatch => "nonmatch",
        })
    }
}

/// Match iff `similarity >= threshold`.
pub fn decide(similarity: f64, threshold: f64) -> Decision {
    if similarity >= threshold {
        Decision::Match
    } else {
        Decision::NonMatch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(false accept rate, true accept rate)` from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    pub auroc: f64,
}

fn check_nonempty(genuine: &[f64], impostor: &[f64]) -> Result<()> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::invalid("genuine and impostor score lists must be nonempty"));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::invalid("scores must not be NaN"));
    }
    Ok(())
}

/// ROC by sweeping every distinct score as a threshold (descending). The
/// area counts ties as one half, so it equals
/// `P(genuine > impostor) + P(tie) / 2` exactly.
pub fn roc_auc(genuine: &[f64], impostor: &[f64]) -> Result<RocCurve> {
    check_nonempty(genuine, impostor)?;
    let mut scored: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (pos, neg) = (genuine.len() as u128, impostor.len() as u128);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u128, 0u128);
    // Twice the number of correctly ordered genuine/impostor pairs.
    let mut doubled_area = 0u128;
    let mut i = 0;
    while i < scored.len() {
        let score = scored[i].0;
        let (mut g, mut n) = (0u128, 0u128);
        while i < scored.len() && scored[i].0 == score {
            if scored[i].1 {
                g += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        doubled_area += n * (2 * tp + g);
        tp += g;
        fp += n;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        auroc: doubled_area as f64 / (2 * pos * neg) as f64,
    })
}

/// Similarity threshold minimizing `|FAR - FRR|` over midpoints between
/// adjacent distinct scores (the lone score itself when there is only one).
/// Ties go to the lower threshold.
pub fn choose_threshold_eer(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    check_nonempty(genuine, impostor)?;
    let mut distinct: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let candidates: Vec<f64> = if distinct.len() == 1 {
        distinct
    } else {
        distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    };

    let (p, n) = (genuine.len() as i128, impostor.len() as i128);
    let mut best: Option<(i128, f64)> = None;
    for t in candidates {
        let false_accepts = impostor.iter().filter(|&&s| s >= t).count() as i128;
        let false_rejects = genuine.iter().filter(|&&s| s < t).count() as i128;
        // |FAR - FRR| scaled by P * N
        let gap = (false_accepts * p - false_rejects * n).abs();
        if best.map_or(true, |(g, _)| gap < g) {
            best = Some((gap, t));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Index pairs `(i, j)`, `i < j`, whose session ids differ.
pub fn cross_session_pairs<S: AsRef<str>>(sessions: &[S]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..sessions.len() {
        for j in i + 1..sessions.len() {
            if sessions[i].as_ref() != sessions[j].as_ref() {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Orders a pair as `(reference, probe)`: the sample with the lower PMI is
/// the reference, ties keep index order.
pub fn orient_pair(i: usize, j: usize, pmi_i: f64, pmi_j: f64) -> (usize, usize) {
    if pmi_j < pmi_i {
        (j, i)
    } else {
        (i, j)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub probe_id: String,
    pub reference_id: String,
    pub distance: f64,
    pub similarity: f64,
    pub decision: Decision,
    pub is_genuine: Option<bool>,
    pub probe_pmi: Option<f64>,
    pub reference_pmi: Option<f64>,
}

impl MatchRecord {
    pub const CSV_HEADER: &'static str =
        "probe_id,reference_id,distance,similarity,decision,is_genuine,probe_pmi,reference_pmi";

    pub fn score(
        probe_id: impl Into<String>,
        reference_id: impl Into<String>,
        probe: &Embedding,
        reference: &Embedding,
        threshold: f64,
    ) -> Result<Self> {
        let similarity = similarity(probe, reference)?;
        Ok(Self {
            probe_id: probe_id.into(),
            reference_id: reference_id.into(),
            distance: distance(probe, reference)?,
            similarity,
            decision: decide(similarity, threshold),
            is_genuine: None,
            probe_pmi: None,
            reference_pmi: None,
        })
    }
}

pub fn write_match_records<W: std::io::Write>(out: W, records: &[MatchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    if records.is_empty() {
        w.write_record(MatchRecord::CSV_HEADER.split(','))
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<match report>", e))
}

pub fn read_match_records(path: &Path) -> Result<Vec<MatchRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                row: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmiEvalConfig {
    pub reference_max_pmi: f64,
    /// Strictly ascending probe PMI caps; may end in infinity.
    pub probe_caps: Vec<f64>,
}

impl Default for PmiEvalConfig {
    fn default() -> Self {
        Self {
            reference_max_pmi: 24.0,
            probe_caps: vec![24.0, 72.0, 120.0, 336.0, 672.0, f64::INFINITY],
        }
    }
}

impl PmiEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reference_max_pmi > 0.0) {
            return Err(Error::invalid("reference PMI cap must be positive"));
        }
        if self.probe_caps.is_empty() || self.probe_caps.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("probe PMI caps must be strictly ascending"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CapResult {
    pub cap: f64,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    /// `None` when the cap admits no genuine or no impostor pair.
    pub auroc: Option<f64>,
}

/// AUROC over pairs whose reference PMI is within `reference_max_pmi` and
/// whose probe PMI is within each cumulative cap. Pairs lacking PMI or
/// ground truth are ignored.
pub fn eval_by_pmi(pairs: &[MatchRecord], cfg: &PmiEvalConfig) -> Result<Vec<CapResult>> {
    cfg.validate()?;
    cfg.probe_caps
        .iter()
        .map(|&cap| {
            let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
            for r in pairs {
                let (Some(is_genuine), Some(probe), Some(reference)) =
                    (r.is_genuine, r.probe_pmi, r.reference_pmi)
                else {
                    continue;
                };
                if reference <= cfg.reference_max_pmi && probe <= cap {
                    if is_genuine {
                        genuine.push(r.similarity);
                    } else {
                        impostor.push(r.similarity);
                    }
                }
            }
            let auroc = if genuine.is_empty() || impostor.is_empty() {
                None
            } else {
                Some(roc_auc(&genuine, &impostor)?.auroc)
            };
            Ok(CapResult {
                cap,
                genuine_pairs: genuine.len(),
                impostor_pairs: impostor.len(),
                auroc,
            })
        })
        .collect()
}

pub fn format_cap(cap: f64) -> String {
    if cap.is_infinite() {
        "inf".into()
    } else {
        cap.to_string()
    }
}

/// `cap,genuine_pairs,impostor_pairs,auroc`; undefined AUROC is left blank.
pub fn cap_results_csv(results: &[CapResult]) -> String {
    let mut out = String::from("cap,genuine_pairs,impostor_pairs,auroc\n");
    for r in results {
        let auroc = r.auroc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            format_cap(r.cap),
            r.genuine_pairs,
            r.impostor_pairs,
            auroc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: Vec<f64>) -> Embedding {
        Embedding(v)
    }

    #[test]
    fn distance_examples() {
        let a = e(vec![0.3, 0.9, 0.1]);
        assert_eq!(distance(&a, &a).unwrap(), 0.0);
        let zeros = e(vec![0.0; 128]);
        let ones = e(vec![1.0; 128]);
        assert!((distance(&zeros, &ones).unwrap() - 11.3137).abs() < 1e-4);
        let b = e(vec![0.5, 0.2, 0.4]);
        assert_eq!(distance(&a, &b).unwrap(), distance(&b, &a).unwrap());
        assert!(distance(&a, &zeros).is_err());
    }

    #[test]
    fn similarity_examples() {
        let a = e(vec![0.25, 0.75, 0.5, 0.5]);
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(similarity(&e(vec![0.0; 4]), &e(vec![1.0; 4])).unwrap(), 0.0);
        // squared distance 1 = D / 4
        let b = e(vec![0.0, 0.0, 0.0, 0.0]);
        let c = e(vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(similarity(&b, &c).unwrap(), 0.75);
    }

    #[test]
    fn decision_examples() {
        assert_eq!(decide(0.9903, 0.5), Decision::Match);
        assert_eq!(decide(0.2558, 0.5), Decision::NonMatch);
        assert_eq!(decide(0.5, 0.5), Decision::Match);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap().auroc, 1.0);
        assert_eq!(roc_auc(&[0.6, 0.4], &[0.5, 0.3]).unwrap().auroc, 0.75);
        assert_eq!(roc_auc(&[0.5], &[0.5]).unwrap().auroc, 0.5);
        assert!(roc_auc(&[], &[0.5]).is_err());
    }

    #[test]
    fn roc_curve_endpoints_and_monotonicity() {
        let curve = roc_auc(&[0.6, 0.4, 0.4, 0.9], &[0.5, 0.3, 0.4]).unwrap();
        assert_eq!(curve.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));
        for w in curve.points.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn eer_examples() {
        assert_eq!(choose_threshold_eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 0.5);
        assert_eq!(choose_threshold_eer(&[1.0], &[0.0]).unwrap(), 0.5);
        // Identical distributions: FAR = FRR = 1/2 at the middle midpoint.
        assert_eq!(choose_threshold_eer(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.5);
        assert_eq!(choose_threshold_eer(&[0.5], &[0.5]).unwrap(), 0.5);
        assert!(choose_threshold_eer(&[0.5], &[]).is_err());
    }

    #[test]
    fn eer_ties_take_the_lower_threshold() {
        // candidates 0.2, 0.4, 0.6: |FAR-FRR| = 1/2, 0, 1/2
        // then candidates 0.2, 0.4 both at 1/2
        assert_eq!(choose_threshold_eer(&[0.5, 0.7], &[0.1, 0.3]).unwrap(), 0.4);
        assert_eq!(choose_threshold_eer(&[0.3], &[0.1, 0.5]).unwrap(), 0.2);
    }

    #[test]
    fn cross_session_pairing() {
        assert!(cross_session_pairs(&["a"]).is_empty());
        assert_eq!(cross_session_pairs(&["a", "a", "b", "b"]).len(), 4);
        assert_eq!(cross_session_pairs(&["a", "b"]), vec![(0, 1)]);
        assert_eq!(orient_pair(0, 1, 72.0, 4.0), (1, 0));
        assert_eq!(orient_pair(0, 1, 4.0, 4.0), (0, 1));
    }

    fn record(sim: f64, genuine: bool, reference: f64, probe: f64) -> MatchRecord {
        MatchRecord {
            probe_id: "p".into(),
            reference_id: "r".into(),
            distance: 0.0,
            similarity: sim,
            decision: decide(sim, 0.5),
            is_genuine: Some(genuine),
            probe_pmi: Some(probe),
            reference_pmi: Some(reference),
        }
    }

    #[test]
    fn pmi_caps_are_cumulative() {
        let pairs = vec![
            record(0.9, true, 4.0, 10.0),
            record(0.3, false, 4.0, 20.0),
            record(0.2, true, 10.0, 300.0),
            record(0.6, false, 12.0, 500.0),
            record(0.99, true, 100.0, 100.0),
        ];
        let cfg = PmiEvalConfig {
            reference_max_pmi: 24.0,
            probe_caps: vec![24.0, 336.0, f64::INFINITY],
        };
        let out = eval_by_pmi(&pairs, &cfg).unwrap();
        assert_eq!(out[0].auroc, Some(1.0));
        assert_eq!((out[1].genuine_pairs, out[1].impostor_pairs), (2, 1));
        assert_eq!(out[1].auroc, Some(0.5));
        assert_eq!((out[2].genuine_pairs, out[2].impostor_pairs), (2, 2));
        assert_eq!(out[2].auroc, Some(0.5));
    }

    #[test]
    fn single_cap_equals_plain_auroc() {
        let pairs = vec![record(0.9, true, 4.0, 10.0), record(0.95, false, 4.0, 20.0), record(0.7, true, 1.0, 2.0)];
        let cfg = PmiEvalConfig {
            reference_max_pmi: 24.0,
            probe_caps: vec![24.0],
        };
        let out = eval_by_pmi(&pairs, &cfg).unwrap();
        assert_eq!(out[0].auroc, Some(roc_auc(&[0.9, 0.7], &[0.95]).unwrap().auroc));
    }

    #[test]
    fn impostor_only_cap_is_undefined() {
        let pairs = vec![record(0.3, false, 4.0, 10.0), record(0.9, true, 4.0, 100.0)];
        let cfg = PmiEvalConfig {
            reference_max_pmi: 24.0,
            probe_caps: vec![24.0, f64::INFINITY],
        };
        let out = eval_by_pmi(&pairs, &cfg).unwrap();
        assert_eq!(out[0].auroc, None);
        assert_eq!(out[1].auroc, Some(1.0));
        assert_eq!(
            cap_results_csv(&out),
            "cap,genuine_pairs,impostor_pairs,auroc\n24,0,1,\ninf,1,1,1\n"
        );
    }

    #[test]
    fn match_record_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        let mut ad_hoc = record(0.4, false, 1.0, 2.0);
        ad_hoc.is_genuine = None;
        ad_hoc.probe_pmi = None;
        let records = vec![record(0.8, true, 3.0, 70.5), ad_hoc];
        write_match_records(File::create(&path).unwrap(), &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(MatchRecord::CSV_HEADER));
        assert!(text.contains(",nonmatch,,,"), "{text}");
        assert_eq!(read_match_records(&path).unwrap(), records);
    }
}
