//! Self-supervised pace pretexts. A clip is resampled from a video so that
//! either one segment (segment-pace) or the whole clip (clip-pace) plays at
//! a faster stride; the labels — which segment, and how fast — come from
//! the resampling itself, so no annotations are needed.

use crate::error::{Error, Result};
use crate::nn::cross_entropy_grad;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaceConfig {
    /// Frames per sampled clip.
    pub clip_len: usize,
    /// Equal-length segments the clip is divided into (segment-pace only).
    pub num_segments: usize,
    /// Candidate frame strides; index 0 is the base pace and must be 1.
    pub speeds: Vec<usize>,
}

impl Default for PaceConfig {
    fn default() -> Self {
        PaceConfig { clip_len: 32, num_segments: 4, speeds: vec![1, 2, 3, 4] }
    }
}

impl PaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_segments == 0 || self.clip_len % self.num_segments != 0 {
            return Err(Error::config(format!(
                "clip_len {} must divide into num_segments {}",
                self.clip_len, self.num_segments
            )));
        }
        if self.seg_len() < 2 {
            return Err(Error::config(format!(
                "segments of {} frame(s) are too short to carry a pace; use fewer segments",
                self.seg_len()
            )));
        }
        if self.speeds.len() < 2 {
            return Err(Error::config("at least two speed classes are required"));
        }
        if self.speeds[0] != 1 {
            return Err(Error::config(format!("speeds must start at the base stride 1, got {:?}", self.speeds)));
        }
        if self.speeds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(format!("speeds must be strictly increasing, got {:?}", self.speeds)));
        }
        Ok(())
    }

    pub fn seg_len(&self) -> usize {
        self.clip_len / self.num_segments.max(1)
    }

    pub fn max_stride(&self) -> usize {
        *self.speeds.last().unwrap_or(&1)
    }

    /// Shortest video the segment-pace sampler accepts, for any draw.
    pub fn min_video_len(&self) -> usize {
        self.clip_len * self.max_stride()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPaceSample {
    pub frame_ids: Vec<usize>,
    /// Which segment was sped up.
    pub segment_label: usize,
    /// Index into `speeds` of the stride used there (never 0).
    pub speed_label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPaceSample {
    pub frame_ids: Vec<usize>,
    /// Index into `speeds` of the whole-clip stride.
    pub speed_label: usize,
}

/// Draw one segment-pace sample: pick a segment, a non-base speed and a
/// start frame, then walk a cursor through the video advancing by the
/// stride of whichever segment the clip position falls in.
pub fn make_segment_pace_sample(
    cfg: &PaceConfig,
    video_len: usize,
    rng: &mut impl Rng,
) -> Result<SegmentPaceSample> {
    cfg.validate()?;
    if cfg.num_segments < 2 {
        return Err(Error::config("segment-pace needs at least two segments"));
    }
    if video_len < cfg.min_video_len() {
        return Err(Error::data(format!(
            "video has {video_len} frames but segment-pace sampling needs at least {} \
             (clip {} x max stride {})",
            cfg.min_video_len(),
            cfg.clip_len,
            cfg.max_stride()
        )));
    }
    let segment_label = rng.random_range(0..cfg.num_segments);
    let speed_label = rng.random_range(1..cfg.speeds.len());
    let stride_at = |t: usize| {
        if t / cfg.seg_len() == segment_label {
            cfg.speeds[speed_label]
        } else {
            cfg.speeds[0]
        }
    };
    let span: usize = (0..cfg.clip_len - 1).map(stride_at).sum();
    let start = rng.random_range(0..=video_len - 1 - span);

    let mut frame_ids = Vec::with_capacity(cfg.clip_len);
    let mut cursor = start;
    for t in 0..cfg.clip_len {
        frame_ids.push(cursor);
        cursor += stride_at(t);
    }
    Ok(SegmentPaceSample { frame_ids, segment_label, speed_label })
}

/// Draw one whole-clip pace sample. The stride is uniform over all speed
/// classes (including the base pace) and the clip always starts at frame 0
/// so the sample is identified by its stride alone.
pub fn make_clip_pace_sample(cfg: &PaceConfig, video_len: usize, rng: &mut impl Rng) -> Result<ClipPaceSample> {
    cfg.validate()?;
    let required = (cfg.clip_len - 1) * cfg.max_stride() + 1;
    if video_len < required {
        return Err(Error::data(format!(
            "video has {video_len} frames but clip-pace sampling needs at least {required}"
        )));
    }
    let speed_label = rng.random_range(0..cfg.speeds.len());
    let stride = cfg.speeds[speed_label];
    let frame_ids = (0..cfg.clip_len).map(|t| t * stride).collect();
    Ok(ClipPaceSample { frame_ids, speed_label })
}

fn check_rows(name: &str, logits: &Tensor, n: usize) -> Result<usize> {
    let (rows, classes) = logits.dims2()?;
    if rows != n {
        return Err(Error::shape(format!("{name}: {rows} logit rows for {n} samples")));
    }
    Ok(classes)
}

/// Mean cross-entropy over both heads; returns (loss, d speed logits,
/// d segment logits) with gradients already divided by the batch size.
pub fn segment_pace_loss(
    speed_logits: &Tensor,
    index_logits: &Tensor,
    samples: &[SegmentPaceSample],
) -> Result<(f64, Tensor, Tensor)> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::shape("segment-pace loss over an empty batch"));
    }
    let s = check_rows("speed head", speed_logits, n)?;
    let g = check_rows("segment head", index_logits, n)?;
    let mut dspeed = Tensor::zeros(&[n, s]);
    let mut dindex = Tensor::zeros(&[n, g]);
    let mut total = 0.0;
    for (i, sample) in samples.iter().enumerate() {
        if sample.speed_label >= s || sample.segment_label >= g {
            return Err(Error::data(format!(
                "sample {i} labels (speed {}, segment {}) exceed head sizes ({s}, {g})",
                sample.speed_label, sample.segment_label
            )));
        }
        let (l1, g1) = cross_entropy_grad(&speed_logits.data()[i * s..(i + 1) * s], sample.speed_label);
        let (l2, g2) = cross_entropy_grad(&index_logits.data()[i * g..(i + 1) * g], sample.segment_label);
        total += l1 + l2;
        for (j, v) in g1.iter().enumerate() {
            dspeed.data_mut()[i * s + j] = v / n as f64;
        }
        for (j, v) in g2.iter().enumerate() {
            dindex.data_mut()[i * g + j] = v / n as f64;
        }
    }
    Ok((total / n as f64, dspeed, dindex))
}

/// Mean cross-entropy for the single-head clip-pace task.
pub fn clip_pace_loss(speed_logits: &Tensor, samples: &[ClipPaceSample]) -> Result<(f64, Tensor)> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::shape("clip-pace loss over an empty batch"));
    }
    let s = check_rows("speed head", speed_logits, n)?;
    let mut dspeed = Tensor::zeros(&[n, s]);
    let mut total = 0.0;
    for (i, sample) in samples.iter().enumerate() {
        if sample.speed_label >= s {
            return Err(Error::data(format!("sample {i} speed label {} exceeds head size {s}", sample.speed_label)));
        }
        let (l, gr) = cross_entropy_grad(&speed_logits.data()[i * s..(i + 1) * s], sample.speed_label);
        total += l;
        for (j, v) in gr.iter().enumerate() {
            dspeed.data_mut()[i * s + j] = v / n as f64;
        }
    }
    Ok((total / n as f64, dspeed))
}

// ── Spatial augmentation ─────────────────────────────────────────────────
//
// Only spatial: the temporal structure *is* the label, so time is never
// touched.

fn crop_dims(clip: &Tensor, crop: usize) -> Result<(usize, usize, usize, usize)> {
    let shape = clip.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("expected a (C, L, H, W) clip, got {shape:?}")));
    }
    let (c, l, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if crop == 0 || crop > h || crop > w {
        return Err(Error::shape(format!("crop {crop} does not fit in {h}x{w} frames")));
    }
    Ok((c, l, h, w))
}

fn crop_clip(clip: &Tensor, y0: usize, x0: usize, crop: usize, flip: bool) -> Tensor {
    let shape = clip.shape();
    let (c, l, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let _ = h;
    let mut out = Tensor::zeros(&[c, l, crop, crop]);
    for ci in 0..c {
        for t in 0..l {
            for y in 0..crop {
                let src_row = ((ci * l + t) * shape[2] + y0 + y) * w + x0;
                let dst_row = ((ci * l + t) * crop + y) * crop;
                for x in 0..crop {
                    let sx = if flip { crop - 1 - x } else { x };
                    out.data_mut()[dst_row + x] = clip.data()[src_row + sx];
                }
            }
        }
    }
    out
}

/// Random spatial crop + horizontal flip + brightness / per-channel gain,
/// clamped back to [0, 1].
pub fn augment_clip(clip: &Tensor, crop: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (c, _, h, w) = crop_dims(clip, crop)?;
    let y0 = rng.random_range(0..=h - crop);
    let x0 = rng.random_range(0..=w - crop);
    let flip = rng.random_bool(0.5);
    let scale: f64 = rng.random_range(0.8..1.2);
    let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.9..1.1)).collect();

    let mut out = crop_clip(clip, y0, x0, crop, flip);
    let plane = out.numel() / c;
    for ci in 0..c {
        let g = scale * gains[ci];
        for v in &mut out.data_mut()[ci * plane..(ci + 1) * plane] {
            *v = (*v * g).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Deterministic center crop used at evaluation time.
pub fn center_crop(clip: &Tensor, crop: usize) -> Result<Tensor> {
    let (_, _, h, w) = crop_dims(clip, crop)?;
    Ok(crop_clip(clip, (h - crop) / 2, (w - crop) / 2, crop, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, Family, HeadKind, Model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn cfg() -> PaceConfig {
        PaceConfig::default()
    }

    #[test]
    fn bad_configs_are_rejected() {
        let reject = |c: PaceConfig| assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        reject(PaceConfig { clip_len: 30, ..cfg() }); // 30 % 4 != 0
        reject(PaceConfig { num_segments: 32, ..cfg() }); // one-frame segments
        reject(PaceConfig { speeds: vec![1], ..cfg() });
        reject(PaceConfig { speeds: vec![2, 3], ..cfg() });
        reject(PaceConfig { speeds: vec![1, 3, 2], ..cfg() });
        reject(PaceConfig { speeds: vec![1, 2, 2], ..cfg() });
        cfg().validate().unwrap();
    }

    /// With clip 32 in 4 segments and the third segment running at stride
    /// 4, the cursor advances by 4 exactly while inside positions 16..24
    /// and by 1 elsewhere.
    #[test]
    fn cursor_walk_strides_only_inside_the_chosen_segment() {
        let c = cfg();
        let mut found = false;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = make_segment_pace_sample(&c, 128, &mut rng).unwrap();
            if s.segment_label != 2 || c.speeds[s.speed_label] != 4 {
                continue;
            }
            found = true;
            assert_eq!(s.frame_ids.len(), 32);
            for t in 0..31 {
                let diff = s.frame_ids[t + 1] - s.frame_ids[t];
                let expected = if (16..24).contains(&t) { 4 } else { 1 };
                assert_eq!(diff, expected, "position {t}");
            }
            assert!(*s.frame_ids.last().unwrap() <= 127);
            break;
        }
        assert!(found, "no seed in 0..200 drew (segment 2, stride 4)");
    }

    #[test]
    fn video_one_frame_too_short_is_rejected_with_the_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = make_segment_pace_sample(&cfg(), 127, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("128"), "{err}");
        make_segment_pace_sample(&cfg(), 128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    }

    /// Labels must be recoverable from the frame indices alone, and the
    /// draw should cover all (segment, speed) pairs about uniformly.
    #[test]
    fn labels_are_recoverable_and_jointly_uniform() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let n = 1000;
        for _ in 0..n {
            let s = make_segment_pace_sample(&c, 200, &mut rng).unwrap();
            // Independent recovery: the stride is the largest frame step,
            // and the sped-up segment is where that step first appears.
            let diffs: Vec<usize> = s.frame_ids.windows(2).map(|w| w[1] - w[0]).collect();
            let stride = *diffs.iter().max().unwrap();
            let first = diffs.iter().position(|&d| d == stride).unwrap();
            assert_eq!(stride, c.speeds[s.speed_label]);
            assert_eq!(first / c.seg_len(), s.segment_label);
            *joint.entry((s.segment_label, s.speed_label)).or_default() += 1;
        }
        assert_eq!(joint.len(), 12, "4 segments x 3 non-base speeds");
        let expected = n as f64 / 12.0;
        let chi2: f64 = joint.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 24.725, "chi-square {chi2:.2} exceeds the 1% critical value for 11 dof");
    }

    #[test]
    fn clip_pace_starts_at_zero_and_covers_all_speeds() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hist = vec![0usize; c.speeds.len()];
        let n = 1000;
        for _ in 0..n {
            let s = make_clip_pace_sample(&c, 125, &mut rng).unwrap();
            assert_eq!(s.frame_ids[0], 0);
            let diffs: Vec<usize> = s.frame_ids.windows(2).map(|w| w[1] - w[0]).collect();
            assert!(diffs.windows(2).all(|w| w[0] == w[1]), "stride must be constant");
            assert_eq!(diffs[0], c.speeds[s.speed_label]);
            hist[s.speed_label] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 11.345, "chi-square {chi2:.2} exceeds the 1% critical value for 3 dof");
        let err = make_clip_pace_sample(&c, 124, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn sampling_is_deterministic_in_the_rng() {
        let c = cfg();
        let a = make_segment_pace_sample(&c, 200, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_segment_pace_sample(&c, 200, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_logits_give_ln16_and_ideal_logits_give_zero() {
        let samples = vec![SegmentPaceSample { frame_ids: vec![], segment_label: 3, speed_label: 1 }];
        let (loss, _, _) = segment_pace_loss(&Tensor::zeros(&[1, 4]), &Tensor::zeros(&[1, 4]), &samples).unwrap();
        assert!((loss - 2.772588722239781).abs() < 1e-12, "got {loss}");

        // One-hot at the labels via -inf elsewhere: exactly zero loss.
        let mut speed = Tensor::full(&[1, 4], f64::NEG_INFINITY);
        speed.data_mut()[1] = 0.0;
        let mut index = Tensor::full(&[1, 4], f64::NEG_INFINITY);
        index.data_mut()[3] = 0.0;
        let (loss, dspeed, _) = segment_pace_loss(&speed, &index, &samples).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dspeed.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let samples = vec![SegmentPaceSample { frame_ids: vec![], segment_label: 4, speed_label: 1 }];
        let err = segment_pace_loss(&Tensor::zeros(&[1, 4]), &Tensor::zeros(&[1, 4]), &samples).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let samples = vec![ClipPaceSample { frame_ids: vec![], speed_label: 7 }];
        assert!(clip_pace_loss(&Tensor::zeros(&[1, 4]), &samples).is_err());
    }

    #[test]
    fn augment_crops_flips_and_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clip = Tensor::rand_uniform(&[3, 4, 12, 12], 0.0, 1.0, &mut rng);
        let a = augment_clip(&clip, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = augment_clip(&clip, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.shape(), &[3, 4, 8, 8]);
        assert_eq!(a.data(), b.data(), "same rng stream must give the same augmentation");
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(matches!(augment_clip(&clip, 13, &mut rng), Err(Error::Shape(_))));
    }

    #[test]
    fn center_crop_picks_the_middle_window() {
        // 1 channel, 1 frame, 4x4 with distinct values 0..16.
        let clip = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(f64::from).collect());
        let c = center_crop(&clip, 2).unwrap();
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    /// End to end: logits from a tiny model, one hand-applied SGD step on
    /// every trainable parameter, loss goes down.
    #[test]
    fn one_gradient_step_reduces_the_loss() {
        let spec = BackboneSpec {
            family: Family::Residual3d,
            stage_channels: vec![4],
            blocks_per_stage: vec![1],
            input_frames: 8,
            input_size: 8,
            adapter_lambda: 2,
        };
        let mut model =
            Model::build(&spec, None, HeadKind::SegmentPace { num_speeds: 4, num_segments: 4 }, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform(&[2, 3, 8, 8, 8], 0.0, 1.0, &mut rng);
        let samples = vec![
            SegmentPaceSample { frame_ids: vec![], segment_label: 1, speed_label: 2 },
            SegmentPaceSample { frame_ids: vec![], segment_label: 3, speed_label: 1 },
        ];

        let step = |model: &mut Model, apply: bool| -> f64 {
            let feat = model.forward_features(&x, true).unwrap();
            let Head::SegmentPace { speed, index } = &mut model.head else { panic!() };
            let speed_logits = speed.forward(&feat, true);
            let index_logits = index.forward(&feat, true);
            let (loss, dspeed, dindex) = segment_pace_loss(&speed_logits, &index_logits, &samples).unwrap();
            if apply {
                let mut dfeat = speed.backward(&dspeed);
                dfeat.add_assign(&index.backward(&dindex));
                model.backward_features(&dfeat).unwrap();
                model.visit_params(&mut |p| {
                    if let Some(g) = p.grad.as_ref() {
                        let g = g.clone();
                        for (w, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                            *w -= 0.2 * gv;
                        }
                    }
                });
                model.zero_grads();
            }
            loss
        };
        use crate::backbone::Head;
        let before = step(&mut model, true);
        let after = step(&mut model, false);
        assert!(after < before, "loss should drop: before {before:.4}, after {after:.4}");
    }
}
