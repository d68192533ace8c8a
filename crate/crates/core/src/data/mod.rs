//! Dataset layer: raw-frame video storage, manifest ingestion with
//! per-record validation, subject-level splits, and a synthetic video
//! generator whose ground-truth quality score is a quantized motion rate.

mod manifest;
mod splits;
mod synth;
mod video;

pub use manifest::{load_manifest, manifest_summary, save_manifest, CellStats, ManifestRecord, SplitTag};
pub use splits::{make_splits, SplitAssignment, SplitOutcome, SplitPolicy};
pub use synth::{
    generate_synthetic_dataset, render_video, score_for_rate, DomainStyle, Motif, SynthDatasetConfig,
    SyntheticVideoSpec, NUM_SCORE_BANDS,
};
pub use video::{write_then_rename, Video};

use crate::error::{Error, Result};
use std::path::{Path, PathBuf};

/// A manifest plus every referenced video preloaded into memory. Videos at
/// desk scale are small enough that keeping them resident beats re-reading
/// files every epoch.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
    videos: Vec<Video>,
}

impl Dataset {
    /// Load a manifest and all videos it references; paths in the manifest
    /// are resolved relative to the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let records = load_manifest(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut videos = Vec::with_capacity(records.len());
        for rec in &records {
            let v = Video::load(&root.join(&rec.video_path))?;
            if v.num_frames() != rec.frame_count {
                return Err(Error::data(format!(
                    "{}: manifest says {} frames but file has {}",
                    rec.video_path,
                    rec.frame_count,
                    v.num_frames()
                )));
            }
            videos.push(v);
        }
        Ok(Dataset { records, root, videos })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn video(&self, idx: usize) -> &Video {
        &self.videos[idx]
    }

    pub fn indices_with_tag(&self, tag: SplitTag) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Some(tag))
            .map(|(i, _)| i)
            .collect()
    }

    /// Sorted unique task names.
    pub fn tasks(&self) -> Vec<String> {
        let mut tasks: Vec<String> = self.records.iter().map(|r| r.task.clone()).collect();
        tasks.sort();
        tasks.dedup();
        tasks
    }
}
