use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

/// Severity scores run 0..=4 (normal .. severe).
pub const SCORE_MIN: i64 = 0;
pub const SCORE_MAX: i64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
    Fold(u32),
}

impl SplitTag {
    fn parse(s: &str) -> std::result::Result<Option<SplitTag>, String> {
        match s {
            "" => Ok(None),
            "train" => Ok(Some(SplitTag::Train)),
            "test" => Ok(Some(SplitTag::Test)),
            _ => match s.strip_prefix("fold").and_then(|n| n.parse::<u32>().ok()) {
                Some(n) => Ok(Some(SplitTag::Fold(n))),
                None => Err(format!("bad split value {s:?} (expected train/test/foldN/empty)")),
            },
        }
    }

    fn render(tag: Option<SplitTag>) -> String {
        match tag {
            None => String::new(),
            Some(SplitTag::Train) => "train".into(),
            Some(SplitTag::Test) => "test".into(),
            Some(SplitTag::Fold(n)) => format!("fold{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub video_path: String,
    pub task: String,
    pub score: i64,
    pub subject_id: String,
    pub frame_count: usize,
    pub split: Option<SplitTag>,
}

const HEADER: [&str; 6] = ["video_path", "task", "score", "subject_id", "frame_count", "split"];

/// Load and validate a manifest. Line numbers in errors are 1-based file
/// lines (header is line 1).
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(raw.as_bytes());
    {
        let headers = reader.headers().map_err(|e| Error::data(format!("manifest header: {e}")))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != HEADER {
            return Err(Error::data(format!(
                "manifest header mismatch: expected {HEADER:?}, got {got:?}"
            )));
        }
    }

    let mut records = Vec::new();
    let mut seen_paths = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::data(format!("manifest line {line}: {e}")))?;
        if row.len() != HEADER.len() {
            return Err(Error::data(format!(
                "manifest line {line}: expected {} fields, got {}",
                HEADER.len(),
                row.len()
            )));
        }
        let field = |idx: usize| row.get(idx).unwrap().trim().to_string();
        let score: i64 = field(2)
            .parse()
            .map_err(|_| Error::data(format!("manifest line {line}: score {:?} is not an integer", field(2))))?;
        if !(SCORE_MIN..=SCORE_MAX).contains(&score) {
            return Err(Error::data(format!(
                "manifest line {line}: score {score} outside [{SCORE_MIN}, {SCORE_MAX}]"
            )));
        }
        let frame_count: usize = field(4)
            .parse()
            .map_err(|_| Error::data(format!("manifest line {line}: bad frame_count {:?}", field(4))))?;
        if frame_count == 0 {
            return Err(Error::data(format!("manifest line {line}: frame_count must be >= 1")));
        }
        let split = SplitTag::parse(&field(5)).map_err(|m| Error::data(format!("manifest line {line}: {m}")))?;
        let video_path = field(0);
        if video_path.is_empty() || field(1).is_empty() || field(3).is_empty() {
            return Err(Error::data(format!(
                "manifest line {line}: video_path, task and subject_id must be nonempty"
            )));
        }
        if !seen_paths.insert(video_path.clone()) {
            return Err(Error::data(format!("manifest line {line}: duplicate video_path {video_path:?}")));
        }
        records.push(ManifestRecord { video_path, task: field(1), score, subject_id: field(3), frame_count, split });
    }
    Ok(records)
}

pub fn save_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).map_err(|e| Error::data(format!("manifest write: {e}")))?;
    for r in records {
        w.write_record([
            r.video_path.as_str(),
            r.task.as_str(),
            &r.score.to_string(),
            r.subject_id.as_str(),
            &r.frame_count.to_string(),
            &SplitTag::render(r.split),
        ])
        .map_err(|e| Error::data(format!("manifest write: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(format!("manifest write: {e}")))?;
    super::video::write_then_rename(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellStats {
    pub count: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

/// Per-(task, score) video counts and frame-count ranges, reproducible from
/// the records alone.
pub fn manifest_summary(records: &[ManifestRecord]) -> BTreeMap<(String, i64), CellStats> {
    let mut out: BTreeMap<(String, i64), CellStats> = BTreeMap::new();
    for r in records {
        let cell = out
            .entry((r.task.clone(), r.score))
            .or_insert(CellStats { count: 0, min_frames: usize::MAX, max_frames: 0 });
        cell.count += 1;
        cell.min_frames = cell.min_frames.min(r.frame_count);
        cell.max_frames = cell.max_frames.max(r.frame_count);
    }
    out
}
