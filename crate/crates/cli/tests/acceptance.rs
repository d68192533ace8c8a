//! Acceptance gate: ten end-to-end properties the toolkit must hold, each
//! printing one `ACCEPTANCE <n> PASS` line (visible with --nocapture).
//! Everything is seeded, so every number below reproduces bit-for-bit.
//!
//! The tests share one mutex: the heavy pipelines are budgeted for a single
//! core and would skew each other's timings if interleaved.

use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use vidadapt::adapter::{build_adapter, AdapterConfig, AdapterInit};
use vidadapt::backbone::{
    apply_freeze_policy, trainability_report, BackboneSpec, Family, FreezeMode, FreezePolicy,
    HeadKind, Model,
};
use vidadapt::checkpoint::{load_checkpoint, save_checkpoint, IncludedParams};
use vidadapt::config::{parse_config_str, RunConfig};
use vidadapt::data::{
    generate_synthetic_dataset, Dataset, DomainStyle, Motif, SplitTag, SynthDatasetConfig,
};
use vidadapt::heads::gaussian_target;
use vidadapt::metrics::{evaluate_model, spearman, EvalConfig};
use vidadapt::nn::ParamKind;
use vidadapt::pretext::{make_segment_pace_sample, PaceConfig};
use vidadapt::tensor::Tensor;
use vidadapt::trainer::{
    distribution_step, run_continual_pretrain, run_finetune, run_pretrain_general,
    segment_pace_step,
};

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn passed(n: usize, detail: &str) {
    println!("ACCEPTANCE {n} PASS — {detail}");
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gen_dataset(
    dir: &Path,
    num_videos: usize,
    subjects: usize,
    test_subjects: usize,
    motif: Motif,
    domain: DomainStyle,
    noise: f64,
    seed: u64,
) -> Dataset {
    let cfg = SynthDatasetConfig {
        num_videos,
        frames: 48,
        size: 32,
        motifs: vec![motif],
        noise_level: noise,
        domain,
        num_subjects: subjects,
        test_subjects,
        rate_range: None,
    };
    generate_synthetic_dataset(&cfg, seed, dir).expect("dataset generation");
    Dataset::load(&dir.join("manifest.csv")).expect("dataset load")
}

fn split_indices(ds: &Dataset, tag: SplitTag) -> Vec<usize> {
    ds.records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Some(tag))
        .map(|(i, _)| i)
        .collect()
}

// ── 1. identity-initialised adapters change nothing ──────────────────────

#[test]
fn criterion_01_identity_preservation() {
    let _g = gate();
    let start = Instant::now();
    let specs = [
        BackboneSpec {
            family: Family::Residual3d,
            stage_channels: vec![4],
            blocks_per_stage: vec![1],
            input_frames: 8,
            input_size: 12,
            adapter_lambda: 2,
        },
        BackboneSpec {
            family: Family::Inception3d,
            stage_channels: vec![8],
            blocks_per_stage: vec![1],
            input_frames: 8,
            input_size: 12,
            adapter_lambda: 4,
        },
    ];
    let tmp = TempDir::new().unwrap();
    let mut worst: f64 = 0.0;
    for (si, spec) in specs.iter().enumerate() {
        let ckpt = tmp.path().join(format!("base{si}.ckpt"));
        let mut plain = Model::build(spec, None, HeadKind::None, 5).unwrap();
        save_checkpoint(&ckpt, &mut plain, "base", 0, 5, IncludedParams::All).unwrap();

        // Different build seed: every restored weight must come from the
        // checkpoint, and the adapters must stay at their identity init.
        let mut equipped = Model::build(spec, Some(AdapterInit::Identity), HeadKind::None, 77).unwrap();
        load_checkpoint(&ckpt, &mut equipped).unwrap();

        for k in 0..20 {
            let x = random_input(&[1, 3, 8, 12, 12], 1000 + 20 * si as u64 + k);
            let a = plain.forward_features(&x, false).unwrap();
            let b = equipped.forward_features(&x, false).unwrap();
            worst = worst.max(max_abs_diff(&a, &b));
        }
    }
    assert!(worst < 1e-5, "ACCEPTANCE 1 FAIL — outputs diverge, max |diff| = {worst:e}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "ACCEPTANCE 1 FAIL — took {secs:.1}s, budget is 60s");
    passed(1, &format!("max |diff| = {worst:.2e} over both families, {secs:.1}s"));
}

// ── 2. adapters_only really isolates gradients ───────────────────────────

#[test]
fn criterion_02_gradient_isolation() {
    let _g = gate();
    let spec = BackboneSpec {
        family: Family::Residual3d,
        stage_channels: vec![4, 8],
        blocks_per_stage: vec![1, 1],
        input_frames: 8,
        input_size: 12,
        adapter_lambda: 2,
    };
    let pace = PaceConfig { clip_len: 8, num_segments: 4, speeds: vec![1, 2] };
    let mut model = Model::build(
        &spec,
        Some(AdapterInit::Random),
        HeadKind::SegmentPace { num_speeds: 2, num_segments: 4 },
        31,
    )
    .unwrap();
    apply_freeze_policy(&mut model, &FreezePolicy::new(FreezeMode::AdaptersOnly));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples: Vec<_> =
        (0..2).map(|_| make_segment_pace_sample(&pace, 24, &mut rng).unwrap()).collect();
    let x = random_input(&[2, 3, 8, 12, 12], 99);
    model.zero_grads();
    segment_pace_step(&mut model, &x, &samples, true).unwrap();

    let (mut backbone_seen, mut backbone_dirty, mut adapter_nonzero) = (0usize, 0usize, 0usize);
    model.visit_params(&mut |p| {
        let nonzero = p.grad.as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
        match p.kind {
            ParamKind::BackboneConv | ParamKind::BnAffine => {
                backbone_seen += 1;
                if nonzero {
                    backbone_dirty += 1;
                }
            }
            ParamKind::Adapter => {
                if nonzero {
                    adapter_nonzero += 1;
                }
            }
            ParamKind::Head => {}
        }
    });
    assert!(backbone_seen > 0, "ACCEPTANCE 2 FAIL — no backbone parameters visited");
    assert_eq!(
        backbone_dirty, 0,
        "ACCEPTANCE 2 FAIL — {backbone_dirty}/{backbone_seen} backbone parameters got gradients"
    );
    assert!(adapter_nonzero >= 1, "ACCEPTANCE 2 FAIL — no adapter gradient is nonzero");
    passed(
        2,
        &format!(
            "{backbone_seen}/{backbone_seen} backbone params gradient-free, {adapter_nonzero} adapter params updated"
        ),
    );
}

// ── 3. the adapter forward matches a nested-loop oracle ──────────────────

#[test]
fn criterion_03_adapter_conv_oracle() {
    let _g = gate();
    let (c, lambda, k) = (32usize, 4usize, 3usize);
    let hidden = c / lambda;
    let cfg = AdapterConfig { c_in: c, c_out: c, lambda, kernel: k, init: AdapterInit::Random };
    let adapter = build_adapter(&cfg, 17).unwrap();
    let (d, h, w) = (4usize, 8usize, 8usize);
    let x = random_input(&[1, c, d, h, w], 555);

    // Grouped down conv, written with bare index loops against the
    // (out_ch, in_per_group, k, k, k) weight layout.
    let down_w = adapter.theta_down.weight.value.data();
    let pad = (k - 1) / 2;
    let plane = d * h * w;
    let mut mid = vec![0.0f64; hidden * plane];
    for oc in 0..hidden {
        // One output channel per group: group oc mixes inputs oc*lambda..
        for od in 0..d {
            for oh in 0..h {
                for ow in 0..w {
                    let mut acc = 0.0;
                    for icg in 0..lambda {
                        let ic = oc * lambda + icg;
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let id = od as isize + kd as isize - pad as isize;
                                    let ih = oh as isize + kh as isize - pad as isize;
                                    let iw = ow as isize + kw as isize - pad as isize;
                                    if id < 0 || ih < 0 || iw < 0 {
                                        continue;
                                    }
                                    let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                    if id >= d || ih >= h || iw >= w {
                                        continue;
                                    }
                                    let xv = x.data()[ic * plane + id * h * w + ih * w + iw];
                                    let wv = down_w
                                        [(((oc * lambda + icg) * k + kd) * k + kh) * k + kw];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    mid[oc * plane + od * h * w + oh * w + ow] = acc.max(0.0);
                }
            }
        }
    }
    // Pointwise up conv, per-channel scale, residual skip.
    let up_w = adapter.theta_up.weight.value.data();
    let alpha = adapter.alpha.value.data();
    let mut want = vec![0.0f64; c * plane];
    for oc in 0..c {
        for p in 0..plane {
            let mut acc = 0.0;
            for ic in 0..hidden {
                acc += up_w[oc * hidden + ic] * mid[ic * plane + p];
            }
            want[oc * plane + p] = alpha[oc] * acc + x.data()[oc * plane + p];
        }
    }

    let got = adapter.apply(&x).unwrap();
    let worst = got
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "ACCEPTANCE 3 FAIL — max |diff| vs oracle = {worst:e}");
    passed(3, &format!("max |diff| vs nested-loop oracle = {worst:.2e} on {c}ch {d}x{h}x{w}"));
}

// ── 4. analytic adapter gradients match finite differences ───────────────

#[test]
fn criterion_04_adapter_gradient_finite_difference() {
    let _g = gate();
    let spec = BackboneSpec {
        family: Family::Residual3d,
        stage_channels: vec![4],
        blocks_per_stage: vec![1],
        input_frames: 4,
        input_size: 8,
        adapter_lambda: 2,
    };
    let mut model =
        Model::build(&spec, Some(AdapterInit::Random), HeadKind::ScoreBins { bins: 5 }, 13).unwrap();
    // Frozen backbone keeps batch-norm on its running stats, so the loss is
    // a deterministic function of the parameters and finite differences are
    // meaningful.
    apply_freeze_policy(&mut model, &FreezePolicy::new(FreezeMode::AdaptersOnly));

    let support = vidadapt::heads::ScoreSupport::new(0.0, 4.0, 5).unwrap();
    let targets = vec![gaussian_target(2.0, &support, 1.0).unwrap()];
    let x = random_input(&[1, 3, 4, 8, 8], 4242); // 768 elements

    model.zero_grads();
    distribution_step(&mut model, &x, &targets, true).unwrap();
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p| {
        if p.kind == ParamKind::Adapter {
            let g = p.grad.as_ref().map(|g| g.data().to_vec()).unwrap_or_default();
            grads.push((p.name.clone(), g));
        }
    });
    assert!(!grads.is_empty(), "ACCEPTANCE 4 FAIL — no adapter parameters found");

    let h = 1e-5;
    let mut checked = 0usize;
    let mut worst_rel: f64 = 0.0;
    for (name, g) in &grads {
        if g.is_empty() {
            continue;
        }
        for &idx in &[0usize, g.len() - 1] {
            let mut loss_at = |delta: f64| {
                model.visit_params(&mut |p| {
                    if &p.name == name {
                        p.value.data_mut()[idx] += delta;
                    }
                });
                let l = distribution_step(&mut model, &x, &targets, false).unwrap();
                model.visit_params(&mut |p| {
                    if &p.name == name {
                        p.value.data_mut()[idx] -= delta;
                    }
                });
                l
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let analytic = g[idx];
            if fd.abs() < 1e-8 && analytic.abs() < 1e-8 {
                continue; // both sides agree the slope is ~0
            }
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs());
            worst_rel = worst_rel.max(rel);
            checked += 1;
            assert!(
                rel < 1e-3,
                "ACCEPTANCE 4 FAIL — {name}[{idx}]: analytic {analytic:e} vs fd {fd:e} (rel {rel:e})"
            );
        }
    }
    assert!(checked >= 4, "ACCEPTANCE 4 FAIL — only {checked} finite-difference probes were usable");
    passed(4, &format!("{checked} probes across adapter tensors, worst rel err {worst_rel:.2e}"));
}

// ── 5. adapters carry a small fraction of the reference-scale model ──────

#[test]
fn criterion_05_parameter_and_checkpoint_efficiency() {
    let _g = gate();
    let spec = BackboneSpec::reference_scale();
    let mut model =
        Model::build(&spec, Some(AdapterInit::Identity), HeadKind::ScoreBins { bins: 5 }, 3).unwrap();

    apply_freeze_policy(&mut model, &FreezePolicy::new(FreezeMode::Full));
    let full = trainability_report(&mut model);
    apply_freeze_policy(&mut model, &FreezePolicy::new(FreezeMode::AdaptersOnly));
    let adapters = trainability_report(&mut model);

    let param_ratio = adapters.trainable_params as f64 / full.trainable_params as f64;
    assert!(
        param_ratio < 0.10,
        "ACCEPTANCE 5 FAIL — adapters train {} of {} params ({:.1}%), bound is 10%",
        adapters.trainable_params,
        full.trainable_params,
        100.0 * param_ratio
    );

    let tmp = TempDir::new().unwrap();
    let thin_path = tmp.path().join("thin.ckpt");
    let all_path = tmp.path().join("all.ckpt");
    // Saved under the adapters_only policy, so the thin file is exactly what
    // the continual-pretraining stage writes at this scale.
    save_checkpoint(&thin_path, &mut model, "x", 0, 3, IncludedParams::TrainableOnly).unwrap();
    save_checkpoint(&all_path, &mut model, "x", 0, 3, IncludedParams::All).unwrap();
    let thin = std::fs::metadata(&thin_path).unwrap().len();
    let all = std::fs::metadata(&all_path).unwrap().len();
    let byte_ratio = thin as f64 / all as f64;
    assert!(
        byte_ratio < 0.15,
        "ACCEPTANCE 5 FAIL — thin checkpoint {thin}B vs full {all}B ({:.1}%), bound is 15%",
        100.0 * byte_ratio
    );
    passed(
        5,
        &format!(
            "trainable {}/{} params ({:.2}%), checkpoint {:.1}MB/{:.1}MB ({:.2}%)",
            adapters.trainable_params,
            full.trainable_params,
            100.0 * param_ratio,
            thin as f64 / 1e6,
            all as f64 / 1e6,
            100.0 * byte_ratio
        ),
    );
}

// ── 6. pace labels are recoverable from frame provenance and uniform ─────

#[test]
fn criterion_06_pace_label_oracle() {
    let _g = gate();
    let cfg = PaceConfig { clip_len: 32, num_segments: 4, speeds: vec![1, 2, 3, 4] };
    let seg_len = cfg.clip_len / cfg.num_segments;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cells = cfg.num_segments * (cfg.speeds.len() - 1);
    let mut counts = vec![0usize; cells];
    let n = 1000;
    for _ in 0..n {
        let s = make_segment_pace_sample(&cfg, 160, &mut rng).unwrap();
        // A frame-id difference is the stride in force at that clip position;
        // the one segment whose strides exceed the base pace is the answer.
        let diffs: Vec<usize> = s.frame_ids.windows(2).map(|w| w[1] - w[0]).collect();
        let base = cfg.speeds[0];
        let odd: Vec<usize> =
            (0..diffs.len()).filter(|&t| diffs[t] != base).collect();
        assert!(!odd.is_empty(), "ACCEPTANCE 6 FAIL — no sped-up segment visible in the clip");
        let segment = odd[0] / seg_len;
        assert!(
            odd.iter().all(|&t| t / seg_len == segment),
            "ACCEPTANCE 6 FAIL — sped-up frames span several segments"
        );
        let stride = diffs[odd[0]];
        assert!(
            odd.iter().all(|&t| diffs[t] == stride),
            "ACCEPTANCE 6 FAIL — mixed strides inside the sped-up segment"
        );
        let speed = cfg
            .speeds
            .iter()
            .position(|&v| v == stride)
            .expect("stride is one of the configured speeds");
        assert_eq!(
            (segment, speed),
            (s.segment_label, s.speed_label),
            "ACCEPTANCE 6 FAIL — recovered labels disagree with the sampler"
        );
        counts[segment * (cfg.speeds.len() - 1) + (speed - 1)] += 1;
    }
    // Chi-squared against the uniform joint distribution over 12 cells;
    // 24.725 is the 99th percentile at 11 degrees of freedom.
    let expect = n as f64 / cells as f64;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
    assert!(
        chi2 < 24.725,
        "ACCEPTANCE 6 FAIL — chi-squared {chi2:.2} exceeds 24.725 (p < 0.01), counts {counts:?}"
    );
    passed(6, &format!("1000/1000 labels recovered, chi-squared {chi2:.2} < 24.725"));
}

// ── 7. rank correlation matches a rank-then-correlate brute force ────────

#[test]
fn criterion_07_spearman_oracle() {
    let _g = gate();
    // Counting-based fractional ranks: rank_i = |{j: x_j < x_i}| + (ties+1)/2.
    fn brute(pred: &[f64], truth: &[f64]) -> Option<f64> {
        let ranks = |x: &[f64]| -> Vec<f64> {
            x.iter()
                .map(|&v| {
                    let less = x.iter().filter(|&&u| u < v).count() as f64;
                    let equal = x.iter().filter(|&&u| u == v).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (ra, rb) = (ranks(pred), ranks(truth));
        let n = ra.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(a, b)| (a - ma) * (b - mb)).sum();
        let va: f64 = ra.iter().map(|a| (a - ma) * (a - ma)).sum();
        let vb: f64 = rb.iter().map(|b| (b - mb) * (b - mb)).sum();
        if va == 0.0 || vb == 0.0 {
            return None;
        }
        Some(cov / (va * vb).sqrt())
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7117);
    let mut compared = 0usize;
    let mut degenerate = 0usize;
    for _ in 0..1000 {
        let len = rng.random_range(2..=8);
        let a: Vec<f64> = (0..len).map(|_| rng.random_range(0..5) as f64).collect();
        let b: Vec<f64> = (0..len).map(|_| rng.random_range(0..5) as f64).collect();
        match brute(&a, &b) {
            Some(want) => {
                let got = spearman(&a, &b).unwrap_or_else(|e| {
                    panic!("ACCEPTANCE 7 FAIL — library rejected {a:?} vs {b:?}: {e}")
                });
                assert!(
                    (got - want).abs() < 1e-12,
                    "ACCEPTANCE 7 FAIL — {a:?} vs {b:?}: library {got} oracle {want}"
                );
                compared += 1;
            }
            None => {
                assert!(
                    spearman(&a, &b).is_err(),
                    "ACCEPTANCE 7 FAIL — constant input {a:?} vs {b:?} should be rejected"
                );
                degenerate += 1;
            }
        }
    }
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!(
        (rho - 0.8).abs() < 1e-12,
        "ACCEPTANCE 7 FAIL — closed-form example gave {rho}, want 0.8"
    );
    passed(7, &format!("{compared} vectors matched, {degenerate} degenerate cases rejected, example = 0.8"));
}

// ── 8. the full pipeline learns the synthetic scoring task ───────────────

const END_TO_END_CONFIG: &str = "\
backbone.family = residual3d
backbone.stage_channels = 8,16
backbone.blocks_per_stage = 1,1
backbone.input_frames = 12
backbone.input_size = 20
backbone.adapter_lambda = 4
adapter.init = identity
freeze.mode = adapters_only
pretext.kind = segment_pace
pretext.clip_len = 12
pretext.num_segments = 4
pretext.speeds = 1,2,3
head.kind = distribution
head.bins = 5
head.sigma = 1.0
optimizer.lr = 0.001
optimizer.momentum = 0.9
train.epochs = 1
train.batch_size = 16
train.samples_per_video = 10
train.clip_len = 12
train.crop = 20
seed = 7
";

fn eval_average(cfg: &RunConfig, ckpt: &Path, ds: &Dataset, indices: &[usize]) -> f64 {
    let mut model = vidadapt::trainer::build_finetune_model(cfg, ckpt, None).unwrap();
    let eval_cfg = EvalConfig {
        clip_len: cfg.clip_len,
        crop: cfg.crop,
        support: cfg.support().unwrap(),
        max_exemplars: cfg.max_exemplars,
    };
    evaluate_model(&mut model, ds, indices, &[], &eval_cfg).unwrap().average
}

#[test]
fn criterion_08_end_to_end_learnability() {
    let _g = gate();
    let start = Instant::now();
    let tmp = TempDir::new().unwrap();
    let gen_ds = gen_dataset(
        &tmp.path().join("general"),
        100,
        10,
        2,
        Motif::Translation,
        DomainStyle::General,
        0.02,
        99,
    );
    let tgt_ds = gen_dataset(
        &tmp.path().join("target"),
        200,
        10,
        2,
        Motif::Translation,
        DomainStyle::Target,
        0.02,
        100,
    );
    assert!(tgt_ds.records.len() >= 200);

    let cfg = |extra: &[&str]| -> RunConfig {
        let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        parse_config_str(END_TO_END_CONFIG, &overrides).unwrap()
    };

    let general =
        run_pretrain_general(&cfg(&[]), &gen_ds, &tmp.path().join("run_general")).unwrap();
    let continual = run_continual_pretrain(
        &cfg(&["train.epochs=8", "train.samples_per_video=8"]),
        &tgt_ds,
        &general.checkpoint_path,
        &tmp.path().join("run_continual"),
    )
    .unwrap();
    let train_idx = split_indices(&tgt_ds, SplitTag::Train);
    let finetune_cfg = cfg(&["train.epochs=6", "train.samples_per_video=8", "optimizer.lr=0.003"]);
    let finetuned = run_finetune(
        &finetune_cfg,
        &tgt_ds,
        &train_idx,
        &general.checkpoint_path,
        Some(continual.checkpoint_path.as_path()),
        &tmp.path().join("run_finetune"),
    )
    .unwrap();

    let test_idx = split_indices(&tgt_ds, SplitTag::Test);
    let average = eval_average(&finetune_cfg, &finetuned.checkpoint_path, &tgt_ds, &test_idx);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    assert!(
        average >= 80.0,
        "ACCEPTANCE 8 FAIL — test Spearman {average:.2} below 80 ({} test videos, {minutes:.1} min)",
        test_idx.len()
    );
    assert!(
        minutes <= 15.0,
        "ACCEPTANCE 8 FAIL — pipeline took {minutes:.1} min, budget is 15"
    );
    passed(
        8,
        &format!("test Spearman {average:.2} on {} videos in {minutes:.1} min", test_idx.len()),
    );
}

// ── 9. continual pretraining beats skipping it under domain shift ────────

const DOMAIN_SHIFT_CONFIG: &str = "\
backbone.family = residual3d
backbone.stage_channels = 8,16
backbone.blocks_per_stage = 1,1
backbone.input_frames = 16
backbone.input_size = 24
backbone.adapter_lambda = 4
adapter.init = identity
freeze.mode = adapters_only
pretext.kind = segment_pace
pretext.clip_len = 16
pretext.num_segments = 4
pretext.speeds = 1,2,3
head.kind = distribution
head.bins = 5
head.sigma = 1.0
optimizer.lr = 0.001
optimizer.momentum = 0.9
train.epochs = 1
train.batch_size = 16
train.samples_per_video = 10
train.clip_len = 16
train.crop = 24
seed = 7
";

#[test]
fn criterion_09_continual_pretraining_benefit() {
    let _g = gate();
    let tmp = TempDir::new().unwrap();
    // The shift knob: the general corpus is translating light-on-dark blobs,
    // the target corpus is oscillating dark-on-striped blobs whose score is
    // their oscillation rate. Rating the target needs temporal features the
    // general stage never had a reason to learn.
    let gen_ds = gen_dataset(
        &tmp.path().join("general"),
        100,
        10,
        2,
        Motif::Translation,
        DomainStyle::General,
        0.02,
        99,
    );
    let tgt_ds = gen_dataset(
        &tmp.path().join("target"),
        100,
        3,
        1,
        Motif::Oscillator,
        DomainStyle::Target,
        0.03,
        101,
    );

    let cfg = |extra: &[String]| -> RunConfig {
        parse_config_str(DOMAIN_SHIFT_CONFIG, extra).unwrap()
    };
    let s = |v: &[&str]| -> Vec<String> { v.iter().map(|x| x.to_string()).collect() };

    let general = run_pretrain_general(
        &cfg(&s(&["train.epochs=3"])),
        &gen_ds,
        &tmp.path().join("run_general"),
    )
    .unwrap();

    // Scarce labels: only the first 20 training videos are scored.
    let labeled: Vec<usize> =
        split_indices(&tgt_ds, SplitTag::Train).into_iter().take(20).collect();
    let test_idx = split_indices(&tgt_ds, SplitTag::Test);

    let mut margins = Vec::new();
    for seed in [21u64, 22, 23] {
        let continual = run_continual_pretrain(
            &cfg(&s(&[
                "pretext.speeds=1,3",
                "train.epochs=12",
                "train.samples_per_video=8",
                "optimizer.lr=0.005",
                &format!("seed={seed}"),
            ])),
            &tgt_ds,
            &general.checkpoint_path,
            &tmp.path().join(format!("run_continual_{seed}")),
        )
        .unwrap();

        let ft_cfg = cfg(&s(&[
            "finetune.mode=adapters_only",
            "train.epochs=10",
            "train.samples_per_video=8",
            "optimizer.lr=0.005",
            &format!("seed={seed}"),
        ]));
        let arm = |overlay: Option<&Path>, name: &str| -> f64 {
            let r = run_finetune(
                &ft_cfg,
                &tgt_ds,
                &labeled,
                &general.checkpoint_path,
                overlay,
                &tmp.path().join(format!("run_{name}_{seed}")),
            )
            .unwrap();
            eval_average(&ft_cfg, &r.checkpoint_path, &tgt_ds, &test_idx)
        };
        let direct = arm(None, "direct");
        let warm = arm(Some(continual.checkpoint_path.as_path()), "warm");
        println!("  seed {seed}: direct {direct:.2}, with continual {warm:.2}, margin {:+.2}", warm - direct);
        margins.push(warm - direct);
    }

    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    let positive = margins.iter().filter(|&&m| m > 0.0).count();
    assert!(
        positive >= 2,
        "ACCEPTANCE 9 FAIL — margin positive on only {positive}/3 seeds: {margins:?}"
    );
    assert!(
        mean > 0.0,
        "ACCEPTANCE 9 FAIL — mean margin {mean:.2} is not positive: {margins:?}"
    );
    passed(
        9,
        &format!("mean margin {mean:+.2} Spearman points, positive on {positive}/3 seeds"),
    );
}

// ── 10. the CLI pipeline replays byte-for-byte ───────────────────────────

#[test]
fn criterion_10_determinism_replay() {
    let _g = gate();
    let bin = env!("CARGO_BIN_EXE_vidadapt");
    let tmp = TempDir::new().unwrap();

    let tiny: Vec<String> = [
        "backbone.stage_channels=4",
        "backbone.blocks_per_stage=1",
        "backbone.input_frames=8",
        "backbone.input_size=12",
        "backbone.adapter_lambda=2",
        "pretext.clip_len=8",
        "pretext.num_segments=4",
        "pretext.speeds=1,2",
        "train.epochs=1",
        "train.batch_size=4",
        "train.samples_per_video=2",
        "train.clip_len=8",
        "train.crop=12",
        "seed=3",
    ]
    .iter()
    .flat_map(|kv| ["--set".to_string(), kv.to_string()])
    .collect();

    let run = |root: &Path| {
        let ok = |out: std::process::Output, what: &str| {
            assert!(
                out.status.success(),
                "ACCEPTANCE 10 FAIL — {what}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        };
        let data = root.join("data");
        ok(
            Command::new(bin)
                .args(["gen-data", "--out"])
                .arg(&data)
                .args(["--videos", "20", "--frames", "16", "--size", "16"])
                .args(["--subjects", "4", "--test-subjects", "1", "--seed", "5"])
                .output()
                .unwrap(),
            "gen-data",
        );
        let manifest = data.join("manifest.csv");
        let stage = |verb: &str, dir: &str, extra: &[&str]| {
            let mut c = Command::new(bin);
            c.arg(verb).args(&tiny).arg("--data").arg(&manifest).arg("--out").arg(root.join(dir));
            for a in extra {
                if let Some(rest) = a.strip_prefix('@') {
                    c.arg(root.join(rest));
                } else {
                    c.arg(a);
                }
            }
            ok(c.output().unwrap(), verb);
        };
        stage("pretrain-general", "general", &[]);
        stage("continual-pretrain", "continual", &["--base", "@general/general.ckpt"]);
        stage(
            "finetune",
            "finetune",
            &["--base", "@general/general.ckpt", "--overlay", "@continual/continual.ckpt"],
        );
        stage("evaluate", "eval", &["--checkpoint", "@finetune/finetuned.ckpt"]);
    };

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);

    let mut compared = 0usize;
    for rel in [
        "general/metrics.jsonl",
        "continual/metrics.jsonl",
        "finetune/metrics.jsonl",
        "eval/eval.json",
        "finetune/finetuned.ckpt",
    ] {
        let (x, y) = (std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap());
        assert!(!x.is_empty(), "ACCEPTANCE 10 FAIL — {rel} is empty");
        assert_eq!(x, y, "ACCEPTANCE 10 FAIL — {rel} differs between identical replays");
        compared += 1;
    }
    passed(10, &format!("{compared} artifacts byte-identical across two full CLI replays"));
}
