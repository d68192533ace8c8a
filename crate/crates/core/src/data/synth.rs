//! Synthetic videos whose severity score is a quantized motion rate.
//!
//! Each video shows one moving blob; how fast it moves determines the
//! ground-truth score, so a model must read motion (not appearance) to
//! rate it. Two visual domains share the same motion statistics but look
//! different, giving a controlled appearance shift between a "general"
//! corpus and a "target" corpus.

use super::manifest::{save_manifest, ManifestRecord, SplitTag};
use super::video::Video;
use crate::error::{Error, Result};
use crate::util::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::path::Path;

pub const NUM_SCORE_BANDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motif {
    /// Blob position follows a sinusoid; the rate is its frequency in
    /// cycles per frame.
    Oscillator,
    /// Blob drifts in a straight line, reflecting off the walls; the rate
    /// is its speed in pixels per frame.
    Translation,
}

impl Motif {
    pub fn task_name(self) -> &'static str {
        match self {
            Motif::Oscillator => "oscillation",
            Motif::Translation => "translation",
        }
    }

    /// Default (lo, hi) rate range. Oscillator frequencies stay below
    /// 0.125 cycles/frame so that sampling every 4th frame is still well
    /// under the aliasing limit.
    pub fn default_rate_range(self) -> (f64, f64) {
        match self {
            Motif::Oscillator => (0.02, 0.12),
            Motif::Translation => (0.5, 3.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainStyle {
    /// Flat dark background, bright warm blob.
    General,
    /// Striped background, dark cool blob (inverted polarity).
    Target,
}

/// Quantize a rate into one of [`NUM_SCORE_BANDS`] equal-width score bands
/// over [lo, hi]. Rates at or beyond the ends clamp to the extreme bands.
pub fn score_for_rate(rate: f64, lo: f64, hi: f64) -> i64 {
    let width = (hi - lo) / NUM_SCORE_BANDS as f64;
    let band = ((rate - lo) / width).floor();
    (band.max(0.0) as i64).min(NUM_SCORE_BANDS as i64 - 1)
}

/// Everything needed to render one video deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideoSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub motif: Motif,
    pub domain: DomainStyle,
    pub rate: f64,
    pub noise_level: f64,
    /// Seeds the blob's start position, heading, phase and pixel noise.
    pub seed: u64,
}

fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let range = hi - lo;
    if range <= 0.0 {
        return lo;
    }
    let period = 2.0 * range;
    let mut q = (p - lo).rem_euclid(period);
    if q > range {
        q = period - q;
    }
    lo + q
}

pub fn render_video(spec: &SyntheticVideoSpec) -> Result<Video> {
    if spec.frames == 0 || spec.height < 8 || spec.width < 8 {
        return Err(Error::config(format!(
            "video extents too small: {} frames, {}x{}",
            spec.frames, spec.height, spec.width
        )));
    }
    if !(spec.rate.is_finite() && spec.rate > 0.0) {
        return Err(Error::config(format!("motion rate must be positive, got {}", spec.rate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let sigma = (spec.height.min(spec.width) as f64 / 10.0).max(1.5);
    let margin = 2.0 * sigma;

    // Per-frame blob center.
    let centers: Vec<(f64, f64)> = match spec.motif {
        Motif::Translation => {
            let x0 = rng.random_range(margin..w - margin);
            let y0 = rng.random_range(margin..h - margin);
            let angle = rng.random_range(0.0..TAU);
            let (vx, vy) = (spec.rate * angle.cos(), spec.rate * angle.sin());
            (0..spec.frames)
                .map(|t| {
                    let t = t as f64;
                    (reflect(x0 + vx * t, margin, w - margin), reflect(y0 + vy * t, margin, h - margin))
                })
                .collect()
        }
        Motif::Oscillator => {
            let cx = w / 2.0 + rng.random_range(-2.0..2.0);
            let cy = h / 2.0 + rng.random_range(-2.0..2.0);
            let angle = rng.random_range(0.0..TAU);
            let amp = 0.35 * (w.min(h) / 2.0 - margin).max(2.0);
            let phase = rng.random_range(0.0..TAU);
            (0..spec.frames)
                .map(|t| {
                    let s = amp * (TAU * spec.rate * t as f64 + phase).sin();
                    (cx + s * angle.cos(), cy + s * angle.sin())
                })
                .collect()
        }
    };

    let (blob_rgb, stripe) = match spec.domain {
        DomainStyle::General => ([0.95, 0.80, 0.60], None),
        DomainStyle::Target => ([0.05, 0.10, 0.20], Some((0.35, 0.60))),
    };
    let stripe_period = (spec.height / 8).max(2);

    let plane = spec.height * spec.width;
    let mut data = vec![0u8; spec.frames * 3 * plane];
    for (t, &(cx, cy)) in centers.iter().enumerate() {
        let frame = &mut data[t * 3 * plane..(t + 1) * 3 * plane];
        for y in 0..spec.height {
            for x in 0..spec.width {
                let bg = match stripe {
                    None => [0.15, 0.15, 0.15],
                    Some((a, b)) => {
                        let v = if (y / stripe_period) % 2 == 0 { a } else { b };
                        [v, v * 0.95, v * 1.05]
                    }
                };
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let wgt = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    let mut v = bg[c] * (1.0 - wgt) + blob_rgb[c] * wgt;
                    if spec.noise_level > 0.0 {
                        v += rng.random_range(-spec.noise_level..spec.noise_level);
                    }
                    frame[c * plane + y * spec.width + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Ok(Video::new(spec.height, spec.width, data))
}

#[derive(Debug, Clone)]
pub struct SynthDatasetConfig {
    pub num_videos: usize,
    /// Shortest video length; lengths cycle through {frames, frames+8,
    /// frames+16} so downstream code cannot assume a fixed length.
    pub frames: usize,
    pub size: usize,
    pub motifs: Vec<Motif>,
    pub noise_level: f64,
    pub domain: DomainStyle,
    pub num_subjects: usize,
    /// How many subjects (the last ones by index) are held out as test.
    pub test_subjects: usize,
    /// Overrides the per-motif default rate range when set.
    pub rate_range: Option<(f64, f64)>,
}

impl SynthDatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.num_videos == 0 {
            return Err(Error::config("num_videos must be >= 1"));
        }
        if self.frames == 0 {
            return Err(Error::config("frames must be >= 1"));
        }
        if self.size < 8 {
            return Err(Error::config(format!("size must be >= 8, got {}", self.size)));
        }
        if self.motifs.is_empty() {
            return Err(Error::config("at least one motif is required"));
        }
        if self.num_subjects == 0 {
            return Err(Error::config("num_subjects must be >= 1"));
        }
        if self.test_subjects >= self.num_subjects {
            return Err(Error::config(format!(
                "test_subjects ({}) must leave at least one training subject (num_subjects {})",
                self.test_subjects, self.num_subjects
            )));
        }
        if !(0.0..0.5).contains(&self.noise_level) {
            return Err(Error::config(format!("noise_level must be in [0, 0.5), got {}", self.noise_level)));
        }
        if let Some((lo, hi)) = self.rate_range {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo) {
                return Err(Error::config(format!("rate_range ({lo}, {hi}) must satisfy 0 < lo < hi")));
            }
        }
        Ok(())
    }
}

/// Render `cfg.num_videos` videos under `out_dir/videos/` and write
/// `out_dir/manifest.csv` describing them. Returns the manifest records.
///
/// Assignment is arranged so nothing trivially leaks the label: score
/// bands cycle per video, each subject covers every band, and motifs fill
/// contiguous blocks so each motif sees the full band histogram.
pub fn generate_synthetic_dataset(cfg: &SynthDatasetConfig, seed: u64, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let videos_dir = out_dir.join("videos");
    std::fs::create_dir_all(&videos_dir)?;

    let block = cfg.num_videos.div_ceil(cfg.motifs.len());
    let mut records = Vec::with_capacity(cfg.num_videos);
    for i in 0..cfg.num_videos {
        let motif = cfg.motifs[(i / block).min(cfg.motifs.len() - 1)];
        let (lo, hi) = cfg.rate_range.unwrap_or_else(|| motif.default_rate_range());
        let band = i % NUM_SCORE_BANDS;
        let subject = (i / NUM_SCORE_BANDS) % cfg.num_subjects;
        let frames = cfg.frames + 8 * (i % 3);

        let video_seed = derive_seed(seed, &[0x5652, i as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5254, i as u64]));
        // Keep the rate inside the central 70% of its band so quantizing
        // it back always recovers `band` exactly.
        let band_width = (hi - lo) / NUM_SCORE_BANDS as f64;
        let rate = lo + (band as f64 + rng.random_range(0.15..0.85)) * band_width;
        debug_assert_eq!(score_for_rate(rate, lo, hi), band as i64);

        let spec = SyntheticVideoSpec {
            frames,
            height: cfg.size,
            width: cfg.size,
            motif,
            domain: cfg.domain,
            rate,
            noise_level: cfg.noise_level,
            seed: video_seed,
        };
        let video = render_video(&spec)?;
        let rel_path = format!("videos/v{i:04}.pvid");
        video.save(&out_dir.join(&rel_path))?;

        let split = if subject >= cfg.num_subjects - cfg.test_subjects {
            Some(SplitTag::Test)
        } else {
            Some(SplitTag::Train)
        };
        records.push(ManifestRecord {
            video_path: rel_path,
            task: motif.task_name().to_string(),
            score: band as i64,
            subject_id: format!("subj{subject:02}"),
            frame_count: frames,
            split,
        });
    }
    save_manifest(&out_dir.join("manifest.csv"), &records)?;
    Ok(records)
}
