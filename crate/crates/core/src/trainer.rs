//! The three-stage training loop: supervised pretraining on the general
//! synthetic domain, self-supervised continual pretraining of the adapters
//! on the target domain, and supervised fine-tuning of the scoring head.
//!
//! Every stage derives its per-epoch RNG from (seed, stage name, epoch), so
//! a rerun with the same config, seed and data reproduces the exact loss
//! trajectory and checkpoint bytes.

use crate::backbone::{apply_freeze_policy, FreezePolicy, Head, Model};
use crate::checkpoint::{load_checkpoint, overlay_checkpoint, save_checkpoint, IncludedParams};
use crate::config::{HeadChoice, PretextKind, RunConfig};
use crate::data::{write_then_rename, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::heads::{
    gaussian_target, pair_input_batch, pairwise_diff_loss, score_distribution_loss, ScoreSupport, ScoreTarget,
};
use crate::nn::{cross_entropy_grad, Param};
use crate::pretext::{
    augment_clip, clip_pace_loss, make_clip_pace_sample, make_segment_pace_sample, segment_pace_loss,
    ClipPaceSample, SegmentPaceSample,
};
use crate::tensor::Tensor;
use crate::util::{derive_seed, fnv1a};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const STAGE_GENERAL: &str = "pretrain_general";
pub const STAGE_CONTINUAL: &str = "continual_pretrain";
pub const STAGE_FINETUNE: &str = "finetune";

// ── Optimizer ────────────────────────────────────────────────────────────

/// SGD with classical momentum: v <- mu*v + g, p <- p - lr*v. Velocity is
/// keyed by parameter name so it survives freeze-policy changes.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Sgd {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }

    fn apply(lr: f64, momentum: f64, velocity: &mut BTreeMap<String, Vec<f64>>, p: &mut Param) {
        if !p.trainable {
            return;
        }
        let Some(g) = &p.grad else { return };
        let v = velocity.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.value.numel()]);
        debug_assert_eq!(v.len(), p.value.numel(), "velocity shape drift for {}", p.name);
        let pv = p.value.data_mut();
        for ((vi, gi), pi) in v.iter_mut().zip(g.data()).zip(pv.iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }

    /// Apply one update to a single parameter; frozen or gradient-free
    /// parameters are left alone.
    pub fn update(&mut self, p: &mut Param) {
        Self::apply(self.lr, self.momentum, &mut self.velocity, p);
    }

    pub fn step(&mut self, model: &mut Model) {
        let (lr, momentum) = (self.lr, self.momentum);
        let velocity = &mut self.velocity;
        model.visit_params(&mut |p| Self::apply(lr, momentum, velocity, p));
    }
}

// ── Step log ─────────────────────────────────────────────────────────────

/// One optimizer step. Deliberately carries no wall-clock fields: reruns of
/// the same pipeline must produce byte-identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Line-delimited JSON, one record per step, written atomically.
pub fn write_metrics_log(path: &Path, records: &[TrainLogRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("log record serializes"));
        out.push('\n');
    }
    write_then_rename(path, out.as_bytes())
}

/// What a stage hands back: the trained model, the written checkpoint, and
/// the per-step loss log.
#[derive(Debug)]
pub struct StageResult {
    pub model: Model,
    pub checkpoint_path: PathBuf,
    pub records: Vec<TrainLogRecord>,
}

impl StageResult {
    /// Mean loss of one epoch's steps.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self.records.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
        if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }
}

// ── Shared plumbing ──────────────────────────────────────────────────────

fn stage_rng(seed: u64, stage: &str, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[fnv1a(stage.as_bytes()), epoch as u64]))
}

fn name_record(ds: &Dataset, idx: usize, e: Error) -> Error {
    match e {
        Error::Data(m) => Error::data(format!("{}: {m}", ds.records[idx].video_path)),
        other => other,
    }
}

/// Each epoch visits every video `samples_per_video` times in a freshly
/// shuffled order.
fn epoch_items(indices: &[usize], samples_per_video: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut items = Vec::with_capacity(indices.len() * samples_per_video);
    for _ in 0..samples_per_video {
        items.extend_from_slice(indices);
    }
    items.shuffle(rng);
    items
}

pub fn stack_clips(clips: &[Tensor]) -> Result<Tensor> {
    let first = clips.first().ok_or_else(|| Error::shape("cannot stack an empty clip batch"))?;
    let mut shape = vec![clips.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(clips.len() * first.numel());
    for c in clips {
        if c.shape() != first.shape() {
            return Err(Error::shape(format!("clip shape {:?} != {:?} in one batch", c.shape(), first.shape())));
        }
        data.extend_from_slice(c.data());
    }
    Ok(Tensor::from_vec(&shape, data))
}

/// Random contiguous window of `clip_len` frames at native pace, augmented.
fn sample_training_clip(ds: &Dataset, idx: usize, clip_len: usize, crop: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let rec = &ds.records[idx];
    if rec.frame_count < clip_len {
        return Err(Error::data(format!(
            "{}: {} frames is shorter than the {clip_len}-frame training clip",
            rec.video_path, rec.frame_count
        )));
    }
    let start = rng.random_range(0..=rec.frame_count - clip_len);
    let ids: Vec<usize> = (start..start + clip_len).collect();
    augment_clip(&ds.video(idx).gather_clip(&ids), crop, rng).map_err(|e| name_record(ds, idx, e))
}

fn require_nonempty(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::data("dataset is empty"));
    }
    Ok(())
}

fn require_trainable(model: &mut Model) -> Result<()> {
    let mut any = false;
    model.visit_params(&mut |p| any |= p.trainable);
    if !any {
        return Err(Error::config("freeze policy leaves nothing to optimize"));
    }
    Ok(())
}

fn mean_ce_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = logits.dims2()?;
    if n != labels.len() || n == 0 {
        return Err(Error::shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    let mut grad = Tensor::zeros(&[n, c]);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::data(format!("class label {label} out of range for {c} classes")));
        }
        let (l, g) = cross_entropy_grad(&logits.data()[i * c..(i + 1) * c], label);
        total += l;
        for (j, v) in g.iter().enumerate() {
            grad.data_mut()[i * c + j] = v / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

// ── Head-specific train/eval steps ───────────────────────────────────────
//
// Each step computes the batch loss and, when `backward` is set, pushes
// gradients all the way into the parameters. The loss-only path reuses the
// very same code, which is what the finite-difference tests lean on.

pub fn distribution_step(model: &mut Model, x: &Tensor, targets: &[ScoreTarget], backward: bool) -> Result<f64> {
    let feats = model.forward_features(x, backward)?;
    let logits = {
        let Head::ScoreBins(l) = &mut model.head else {
            return Err(Error::config("score-distribution training needs a score-bins head"));
        };
        l.forward(&feats, backward)
    };
    let (loss, dlogits) = score_distribution_loss(&logits, targets)?;
    if backward {
        let dfeats = {
            let Head::ScoreBins(l) = &mut model.head else { unreachable!() };
            l.backward(&dlogits)
        };
        model.backward_features(&dfeats)?;
    }
    Ok(loss)
}

/// Pairwise difference step over a combined batch: rows 0..n are query
/// clips, rows n..2n their exemplars. One forward serves both halves —
/// running queries and exemplars as two forwards would overwrite the layer
/// caches the backward pass needs.
pub fn pairwise_step(model: &mut Model, x: &Tensor, query_scores: &[f64], exemplar_scores: &[f64], backward: bool) -> Result<f64> {
    let n = query_scores.len();
    let (rows, _, _, _, _) = x.dims5()?;
    if rows != 2 * n || n != exemplar_scores.len() {
        return Err(Error::shape(format!(
            "pairwise batch holds {rows} clips for {n} queries / {} exemplars",
            exemplar_scores.len()
        )));
    }
    let feats = model.forward_features(x, backward)?;
    let (_, e) = feats.dims2()?;
    let query = Tensor::from_vec(&[n, e], feats.data()[..n * e].to_vec());
    let exemplar = Tensor::from_vec(&[n, e], feats.data()[n * e..].to_vec());
    let xpair = pair_input_batch(&query, &exemplar, exemplar_scores)?;
    let pred = {
        let Head::PairDiff(l) = &mut model.head else {
            return Err(Error::config("pairwise training needs a pair-difference head"));
        };
        l.forward(&xpair, backward)
    };
    let (loss, dpred) = pairwise_diff_loss(&pred, query_scores, exemplar_scores)?;
    if backward {
        let dx = {
            let Head::PairDiff(l) = &mut model.head else { unreachable!() };
            l.backward(&dpred)
        };
        // Scatter the pair-input gradient back onto the two feature halves;
        // the exemplar-score column is an input, not a parameter.
        let width = 2 * e + 1;
        let mut dfeats = Tensor::zeros(&[2 * n, e]);
        for i in 0..n {
            let row = &dx.data()[i * width..(i + 1) * width];
            dfeats.data_mut()[i * e..(i + 1) * e].copy_from_slice(&row[..e]);
            dfeats.data_mut()[(n + i) * e..(n + i + 1) * e].copy_from_slice(&row[e..2 * e]);
        }
        model.backward_features(&dfeats)?;
    }
    Ok(loss)
}

pub fn segment_pace_step(model: &mut Model, x: &Tensor, samples: &[SegmentPaceSample], backward: bool) -> Result<f64> {
    let feats = model.forward_features(x, backward)?;
    let (speed_logits, index_logits) = {
        let Head::SegmentPace { speed, index } = &mut model.head else {
            return Err(Error::config("segment-pace training needs the two-headed pace head"));
        };
        (speed.forward(&feats, backward), index.forward(&feats, backward))
    };
    let (loss, dspeed, dindex) = segment_pace_loss(&speed_logits, &index_logits, samples)?;
    if backward {
        let dfeats = {
            let Head::SegmentPace { speed, index } = &mut model.head else { unreachable!() };
            let mut d = speed.backward(&dspeed);
            d.add_assign(&index.backward(&dindex));
            d
        };
        model.backward_features(&dfeats)?;
    }
    Ok(loss)
}

pub fn clip_pace_step(model: &mut Model, x: &Tensor, samples: &[ClipPaceSample], backward: bool) -> Result<f64> {
    let feats = model.forward_features(x, backward)?;
    let logits = {
        let Head::Pace(l) = &mut model.head else {
            return Err(Error::config("clip-pace training needs the single pace head"));
        };
        l.forward(&feats, backward)
    };
    let (loss, dlogits) = clip_pace_loss(&logits, samples)?;
    if backward {
        let dfeats = {
            let Head::Pace(l) = &mut model.head else { unreachable!() };
            l.backward(&dlogits)
        };
        model.backward_features(&dfeats)?;
    }
    Ok(loss)
}

// ── Stage 1: supervised pretraining on the general domain ────────────────

/// Train a bare (adapter-free) backbone plus classifier on the general
/// synthetic dataset. The classification target folds task and score into
/// one label, `task_index * 5 + score`, standing in for large-scale action
/// classification. Saves a full checkpoint.
pub fn run_pretrain_general(cfg: &RunConfig, ds: &Dataset, out_dir: &Path) -> Result<StageResult> {
    cfg.validate()?;
    require_nonempty(ds)?;
    let tasks = ds.tasks();
    let classes = tasks.len() * 5;
    let task_index: BTreeMap<&str, usize> = tasks.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut model = Model::build(&cfg.backbone, None, crate::backbone::HeadKind::Classifier { classes }, cfg.seed)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut records = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut rng = stage_rng(cfg.seed, STAGE_GENERAL, epoch);
        let items = epoch_items(&indices, cfg.samples_per_video, &mut rng);
        for (step, chunk) in items.chunks(cfg.batch_size).enumerate() {
            let mut clips = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                clips.push(sample_training_clip(ds, i, cfg.clip_len, cfg.crop, &mut rng)?);
                let rec = &ds.records[i];
                labels.push(task_index[rec.task.as_str()] * 5 + rec.score as usize);
            }
            let x = stack_clips(&clips)?;
            model.zero_grads();
            let feats = model.forward_features(&x, true)?;
            let logits = {
                let Head::Classifier(l) = &mut model.head else { unreachable!() };
                l.forward(&feats, true)
            };
            let (loss, dlogits) = mean_ce_loss(&logits, &labels)?;
            let dfeats = {
                let Head::Classifier(l) = &mut model.head else { unreachable!() };
                l.backward(&dlogits)
            };
            model.backward_features(&dfeats)?;
            opt.step(&mut model);
            records.push(TrainLogRecord { stage: STAGE_GENERAL.into(), epoch, step, loss });
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("general.ckpt");
    save_checkpoint(&checkpoint_path, &mut model, STAGE_GENERAL, cfg.epochs as u64, cfg.seed, IncludedParams::All)?;
    Ok(StageResult { model, checkpoint_path, records })
}

// ── Stage 2: self-supervised continual pretraining ───────────────────────

/// Insert adapters into the pretrained backbone and train them (plus the
/// pretext head) on pace self-supervision over the target-domain videos.
/// Labels are never touched; if the manifest carries a train split, only
/// those videos are used. Saves a trainable-only checkpoint — the whole
/// point is that this file stays a small fraction of the full model.
pub fn run_continual_pretrain(cfg: &RunConfig, ds: &Dataset, base_ckpt: &Path, out_dir: &Path) -> Result<StageResult> {
    cfg.validate()?;
    require_nonempty(ds)?;
    let mut model = Model::build(&cfg.backbone, Some(cfg.adapter_init), cfg.pretext_head_kind(), cfg.seed)?;
    load_checkpoint(base_ckpt, &mut model)?;
    apply_freeze_policy(&mut model, &cfg.freeze);
    require_trainable(&mut model)?;

    let tagged = ds.indices_with_tag(SplitTag::Train);
    let indices: Vec<usize> = if tagged.is_empty() { (0..ds.len()).collect() } else { tagged };
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut records = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut rng = stage_rng(cfg.seed, STAGE_CONTINUAL, epoch);
        let items = epoch_items(&indices, cfg.samples_per_video, &mut rng);
        for (step, chunk) in items.chunks(cfg.batch_size).enumerate() {
            model.zero_grads();
            let loss = match cfg.pretext {
                PretextKind::SegmentPace => {
                    let mut samples = Vec::with_capacity(chunk.len());
                    let mut clips = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let s = make_segment_pace_sample(&cfg.pace, ds.records[i].frame_count, &mut rng)
                            .map_err(|e| name_record(ds, i, e))?;
                        clips.push(
                            augment_clip(&ds.video(i).gather_clip(&s.frame_ids), cfg.crop, &mut rng)
                                .map_err(|e| name_record(ds, i, e))?,
                        );
                        samples.push(s);
                    }
                    segment_pace_step(&mut model, &stack_clips(&clips)?, &samples, true)?
                }
                PretextKind::ClipPace => {
                    let mut samples = Vec::with_capacity(chunk.len());
                    let mut clips = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let s = make_clip_pace_sample(&cfg.pace, ds.records[i].frame_count, &mut rng)
                            .map_err(|e| name_record(ds, i, e))?;
                        clips.push(
                            augment_clip(&ds.video(i).gather_clip(&s.frame_ids), cfg.crop, &mut rng)
                                .map_err(|e| name_record(ds, i, e))?,
                        );
                        samples.push(s);
                    }
                    clip_pace_step(&mut model, &stack_clips(&clips)?, &samples, true)?
                }
            };
            opt.step(&mut model);
            records.push(TrainLogRecord { stage: STAGE_CONTINUAL.into(), epoch, step, loss });
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("continual.ckpt");
    save_checkpoint(
        &checkpoint_path,
        &mut model,
        STAGE_CONTINUAL,
        cfg.epochs as u64,
        cfg.seed,
        IncludedParams::TrainableOnly,
    )?;
    Ok(StageResult { model, checkpoint_path, records })
}

// ── Stage 3: supervised fine-tuning ──────────────────────────────────────

/// Assemble the fine-tuning model: adapters + scoring head on top of the
/// base checkpoint, with the continual-stage adapter weights overlaid when
/// given.
pub fn build_finetune_model(cfg: &RunConfig, base_ckpt: &Path, overlay: Option<&Path>) -> Result<Model> {
    let mut model = Model::build(&cfg.backbone, Some(cfg.adapter_init), cfg.finetune_head_kind(), cfg.seed)?;
    load_checkpoint(base_ckpt, &mut model)?;
    if let Some(p) = overlay {
        overlay_checkpoint(p, &mut model)?;
    }
    Ok(model)
}

/// Every training label must sit inside the score support the head models.
pub fn check_labels_in_support(ds: &Dataset, indices: &[usize], support: &ScoreSupport) -> Result<()> {
    for &i in indices {
        let rec = &ds.records[i];
        let score = rec.score as f64;
        if score < support.min_score || score > support.max_score {
            return Err(Error::data(format!(
                "{}: score {} outside the head's support [{}, {}]",
                rec.video_path, rec.score, support.min_score, support.max_score
            )));
        }
    }
    Ok(())
}

/// Supervised fine-tuning on labeled target-domain videos. All layers are
/// unfrozen by default; `finetune.mode` can freeze the backbone down to
/// adapters+heads (`adapters_only`), BN affine (`bn_affine_only`), or heads
/// alone (`none_trainable`, a linear probe). Saves a full checkpoint ready
/// for evaluation.
pub fn run_finetune(
    cfg: &RunConfig,
    ds: &Dataset,
    train_indices: &[usize],
    base_ckpt: &Path,
    overlay: Option<&Path>,
    out_dir: &Path,
) -> Result<StageResult> {
    cfg.validate()?;
    require_nonempty(ds)?;
    if train_indices.is_empty() {
        return Err(Error::data("fine-tuning needs a non-empty training split"));
    }
    let mut model = build_finetune_model(cfg, base_ckpt, overlay)?;
    apply_freeze_policy(&mut model, &FreezePolicy::new(cfg.finetune_mode));
    require_trainable(&mut model)?;
    let support = cfg.support()?;
    check_labels_in_support(ds, train_indices, &support)?;

    // Exemplar pools for the pairwise head: training videos of the same task.
    let mut pools: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in train_indices {
        pools.entry(ds.records[i].task.as_str()).or_default().push(i);
    }

    let sigma = cfg.sigma();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut records = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut rng = stage_rng(cfg.seed, STAGE_FINETUNE, epoch);
        let items = epoch_items(train_indices, cfg.samples_per_video, &mut rng);
        for (step, chunk) in items.chunks(cfg.batch_size).enumerate() {
            model.zero_grads();
            let loss = match cfg.head {
                HeadChoice::Distribution { .. } => {
                    let mut clips = Vec::with_capacity(chunk.len());
                    let mut targets = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        clips.push(sample_training_clip(ds, i, cfg.clip_len, cfg.crop, &mut rng)?);
                        targets.push(
                            gaussian_target(ds.records[i].score as f64, &support, sigma)
                                .map_err(|e| name_record(ds, i, e))?,
                        );
                    }
                    distribution_step(&mut model, &stack_clips(&clips)?, &targets, true)?
                }
                HeadChoice::Pairwise => {
                    let n = chunk.len();
                    let mut clips = Vec::with_capacity(2 * n);
                    let mut exemplars = Vec::with_capacity(n);
                    let mut q_scores = Vec::with_capacity(n);
                    let mut e_scores = Vec::with_capacity(n);
                    for &i in chunk {
                        clips.push(sample_training_clip(ds, i, cfg.clip_len, cfg.crop, &mut rng)?);
                        q_scores.push(ds.records[i].score as f64);
                        let pool = &pools[ds.records[i].task.as_str()];
                        let mut k = rng.random_range(0..pool.len());
                        if pool[k] == i && pool.len() > 1 {
                            k = (k + 1) % pool.len();
                        }
                        exemplars.push(pool[k]);
                    }
                    for &j in &exemplars {
                        clips.push(sample_training_clip(ds, j, cfg.clip_len, cfg.crop, &mut rng)?);
                        e_scores.push(ds.records[j].score as f64);
                    }
                    pairwise_step(&mut model, &stack_clips(&clips)?, &q_scores, &e_scores, true)?
                }
            };
            opt.step(&mut model);
            records.push(TrainLogRecord { stage: STAGE_FINETUNE.into(), epoch, step, loss });
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("finetuned.ckpt");
    save_checkpoint(&checkpoint_path, &mut model, STAGE_FINETUNE, cfg.epochs as u64, cfg.seed, IncludedParams::All)?;
    Ok(StageResult { model, checkpoint_path, records })
}
