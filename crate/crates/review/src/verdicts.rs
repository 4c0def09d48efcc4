//! Examiner verdicts: append-only JSON-lines log, replayed state, CSV export.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use tlpim_core::matcher::Decision;

use crate::error::{ReviewError, ReviewResult};
use crate::queue::{PairCase, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "match")]
    Match,
    #[serde(rename = "nonmatch")]
    NonMatch,
    #[serde(rename = "inconclusive")]
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Match => "match",
            Verdict::NonMatch => "nonmatch",
            Verdict::Inconclusive => "inconclusive",
        }
    }

    /// Whether the examiner agrees with the algorithm; `None` when inconclusive.
    pub fn agrees_with(self, decision: Decision) -> Option<bool> {
        match self {
            Verdict::Match => Some(decision == Decision::Match),
            Verdict::NonMatch => Some(decision == Decision::NonMatch),
            Verdict::Inconclusive => None,
        }
    }
}

/// Request body of a verdict submission.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub verdict: Verdict,
    #[serde(default)]
    pub notes: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub pair_id: String,
    pub verdict: Verdict,
    pub notes: String,
    pub recorded_at: DateTime<Utc>,
}

/// Verdict history and the latest verdict per pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReviewState {
    history: Vec<VerdictRecord>,
    latest: HashMap<String, usize>,
}

impl ReviewState {
    pub fn apply(&mut self, record: VerdictRecord) {
        self.latest.insert(record.pair_id.clone(), self.history.len());
        self.history.push(record);
    }

    pub fn history(&self) -> &[VerdictRecord] {
        &self.history
    }

    pub fn history_of<'a>(&'a self, pair_id: &'a str) -> impl Iterator<Item = &'a VerdictRecord> + 'a {
        self.history.iter().filter(move |r| r.pair_id == pair_id)
    }

    pub fn effective(&self, pair_id: &str) -> Option<&VerdictRecord> {
        self.latest.get(pair_id).map(|&i| &self.history[i])
    }

    pub fn status(&self, pair_id: &str) -> Status {
        if self.latest.contains_key(pair_id) {
            Status::Reviewed
        } else {
            Status::Pending
        }
    }
}

/// Single appender over the verdict file. Each record is one `write` of a
/// complete line, synced before returning.
pub struct VerdictLog {
    path: PathBuf,
    file: File,
}

impl VerdictLog {
    pub fn open(path: &Path) -> ReviewResult<Self> {
        let io = |source| ReviewError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &VerdictRecord) -> ReviewResult<()> {
        let mut line = serde_json::to_string(record).map_err(|e| ReviewError::Invalid(e.to_string()))?;
        line.push('\n');
        let io = |source| ReviewError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}

/// Rebuilds state from a verdict log. A missing file is an empty log; an
/// unterminated final line (interrupted write) is ignored.
pub fn replay(path: &Path, known: impl Fn(&str) -> bool) -> ReviewResult<ReviewState> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ReviewState::default()),
        Err(source) => {
            return Err(ReviewError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    let mut state = ReviewState::default();
    for (n, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| ReviewError::Log {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let record: VerdictRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if !known(&record.pair_id) {
            return Err(fail(format!("verdict for unknown pair `{}`", record.pair_id)));
        }
        state.apply(record);
    }
    Ok(state)
}

pub const EXPORT_HEADER: [&str; 7] = [
    "pair_id",
    "verdict",
    "similarity",
    "algorithm_decision",
    "agrees",
    "notes",
    "recorded_at",
];

/// One row per effective verdict, in queue order.
pub fn export_verdicts(cases: &[PairCase], state: &ReviewState) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EXPORT_HEADER).expect("in-memory write");
    for case in cases {
        if let Some(v) = state.effective(&case.pair_id) {
            let agrees = match v.verdict.agrees_with(case.algorithm_decision) {
                Some(a) => a.to_string(),
                None => String::new(),
            };
            w.write_record([
                case.pair_id.as_str(),
                v.verdict.as_str(),
                &case.similarity.to_string(),
                &case.algorithm_decision.to_string(),
                &agrees,
                &v.notes,
                &v.recorded_at.to_rfc3339_opts(SecondsFormat::Micros, true),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use tlpim_core::dataset::{Eye, SampleRecord};

    fn case(id: &str, decision: Decision) -> PairCase {
        let r = SampleRecord {
            image_path: "i.png".into(),
            mask_path: "m.png".into(),
            subject_id: "S".into(),
            eye: Eye::L,
            session_id: "s".into(),
            pmi_hours: 1.0,
            dataset_tag: "t".into(),
        };
        PairCase {
            pair_id: id.into(),
            probe: r.clone(),
            reference: r,
            similarity: 0.75,
            algorithm_decision: decision,
        }
    }

    fn verdict(id: &str, v: Verdict, secs: i64) -> VerdictRecord {
        VerdictRecord {
            pair_id: id.into(),
            verdict: v,
            notes: String::new(),
            recorded_at: Utc.timestamp_opt(secs, 0).unwrap(),
        }
    }

    #[test]
    fn empty_log_exports_header_only() {
        let csv = export_verdicts(&[case("p", Decision::Match)], &ReviewState::default());
        assert_eq!(csv, "pair_id,verdict,similarity,algorithm_decision,agrees,notes,recorded_at\n");
    }

    #[test]
    fn agreement_rule() {
        let cases = [case("p", Decision::NonMatch), case("q", Decision::Match)];
        let mut state = ReviewState::default();
        state.apply(verdict("p", Verdict::Match, 0));
        state.apply(verdict("q", Verdict::Inconclusive, 1));
        let csv = export_verdicts(&cases, &state);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows[0], "p,match,0.75,nonmatch,false,,1970-01-01T00:00:00.000000Z");
        assert_eq!(rows[1], "q,inconclusive,0.75,match,,,1970-01-01T00:00:01.000000Z");
    }

    #[test]
    fn latest_verdict_wins_and_history_is_kept() {
        let mut state = ReviewState::default();
        state.apply(verdict("p", Verdict::Match, 0));
        state.apply(verdict("p", Verdict::NonMatch, 5));
        assert_eq!(state.effective("p").unwrap().verdict, Verdict::NonMatch);
        assert_eq!(state.history_of("p").count(), 2);
        assert_eq!(state.status("p"), Status::Reviewed);
        assert_eq!(state.status("q"), Status::Pending);
    }

    #[test]
    fn log_round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        {
            let mut log = VerdictLog::open(&path).unwrap();
            log.append(&verdict("p", Verdict::Match, 3)).unwrap();
            log.append(&verdict("q", Verdict::NonMatch, 4)).unwrap();
        }
        let mut raw = fs::read_to_string(&path).unwrap();
        raw.push_str("{\"pair_id\":\"p\",\"verd");
        fs::write(&path, raw).unwrap();
        let state = replay(&path, |_| true).unwrap();
        assert_eq!(state.history().len(), 2);
        assert_eq!(state.effective("q").unwrap().verdict, Verdict::NonMatch);
        assert!(replay(&path, |id| id == "p").is_err());
        assert!(replay(&dir.path().join("none.jsonl"), |_| true).unwrap().history().is_empty());
    }

    #[test]
    fn verdict_wire_names() {
        let s: Submission = serde_json::from_str(r#"{"verdict":"nonmatch"}"#).unwrap();
        assert_eq!(s.verdict, Verdict::NonMatch);
        assert!(s.notes.is_empty());
        assert!(serde_json::from_str::<Submission>(r#"{"verdict":"maybe"}"#).is_err());
    }
}
