//! Rank-correlation evaluation and run comparison reporting.

use crate::backbone::{Head, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{expected_score_from_logits, pairwise_predict, ScoreSupport};
use crate::pretext::center_crop;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Spearman rank correlation in [-1, 1]: Pearson correlation of the
/// fractional (tie-averaged) ranks.
pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    if pred.len() < 2 {
        return Err(Error::numeric("rank correlation needs at least two values"));
    }
    for v in pred.iter().chain(truth) {
        if !v.is_finite() {
            return Err(Error::numeric(format!("non-finite value {v} in correlation input")));
        }
    }
    let constant = |x: &[f64]| x.iter().all(|&v| v == x[0]);
    if constant(pred) || constant(truth) {
        return Err(Error::numeric("rank correlation undefined for a constant vector"));
    }
    Ok(pearson(&fractional_ranks(pred), &fractional_ranks(truth)))
}

fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < x.len() {
        let mut j = i;
        while j + 1 < x.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Spearman per task, as percentages.
    pub per_task: BTreeMap<String, f64>,
    /// Unweighted mean over the tasks present in `per_task`.
    pub average: f64,
    pub n_videos: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

/// Turn per-task (prediction, label) lists into percentage correlations.
/// Tasks where the correlation is undefined — fewer than two videos, or a
/// constant vector — are skipped with a warning and left out of the average.
pub fn aggregate_task_scores(task_scores: &BTreeMap<String, (Vec<f64>, Vec<f64>)>) -> Result<EvalResult> {
    let mut result = EvalResult {
        per_task: BTreeMap::new(),
        average: 0.0,
        n_videos: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for (task, (pred, truth)) in task_scores {
        result.n_videos.insert(task.clone(), truth.len());
        match spearman(pred, truth) {
            Ok(s) => {
                result.per_task.insert(task.clone(), 100.0 * s);
            }
            Err(Error::Numeric(msg)) => {
                result.warnings.push(format!("task {task}: skipped ({msg})"));
            }
            Err(e) => return Err(e),
        }
    }
    if result.per_task.is_empty() {
        return Err(Error::numeric("no task produced a defined rank correlation"));
    }
    result.average = result.per_task.values().sum::<f64>() / result.per_task.len() as f64;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub clip_len: usize,
    /// Spatial center-crop applied to each clip.
    pub crop: usize,
    pub support: ScoreSupport,
    /// Exemplars per query for the pairwise head; 0 means all available.
    pub max_exemplars: usize,
}

/// Centered contiguous clip of `clip_len` frames at the video's native
/// pace, center-cropped, as a 1-clip batch.
fn eval_clip(ds: &Dataset, idx: usize, cfg: &EvalConfig) -> Result<Tensor> {
    let rec = &ds.records[idx];
    if rec.frame_count < cfg.clip_len {
        return Err(Error::data(format!(
            "{}: {} frames is shorter than the {}-frame evaluation clip",
            rec.video_path, rec.frame_count, cfg.clip_len
        )));
    }
    let start = (rec.frame_count - cfg.clip_len) / 2;
    let ids: Vec<usize> = (start..start + cfg.clip_len).collect();
    let clip = center_crop(&ds.video(idx).gather_clip(&ids), cfg.crop)?;
    let mut shape = vec![1];
    shape.extend_from_slice(clip.shape());
    Ok(Tensor::from_vec(&shape, clip.into_data()))
}

fn embed(model: &mut Model, ds: &Dataset, idx: usize, cfg: &EvalConfig) -> Result<Tensor> {
    let x = eval_clip(ds, idx, cfg)?;
    model.forward_features(&x, false)
}

/// Score every `eval_indices` video with the model's head and correlate
/// against the labels, task by task. The pairwise head scores a query
/// against exemplars drawn from `exemplar_indices` of the same task;
/// the distribution head ignores `exemplar_indices`.
pub fn evaluate_model(
    model: &mut Model,
    ds: &Dataset,
    eval_indices: &[usize],
    exemplar_indices: &[usize],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    if eval_indices.is_empty() {
        return Err(Error::data("nothing to evaluate: empty index list"));
    }
    let pairwise = match model.head {
        Head::ScoreBins(_) => false,
        Head::PairDiff(_) => true,
        _ => return Err(Error::config("model head does not produce scores; evaluation needs a fine-tuned head")),
    };

    // For the pairwise head, embed the exemplars once up front.
    let mut exemplars: BTreeMap<String, (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
    if pairwise {
        if exemplar_indices.is_empty() {
            return Err(Error::data("pairwise evaluation needs exemplar videos with known scores"));
        }
        for &i in exemplar_indices {
            let feat = embed(model, ds, i, cfg)?;
            let rec = &ds.records[i];
            let entry = exemplars.entry(rec.task.clone()).or_default();
            if cfg.max_exemplars == 0 || entry.1.len() < cfg.max_exemplars {
                entry.0.push(feat.into_data());
                entry.1.push(rec.score as f64);
            }
        }
    }

    let mut task_scores: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for &i in eval_indices {
        let rec_task = ds.records[i].task.clone();
        let rec_score = ds.records[i].score as f64;
        let feat = embed(model, ds, i, cfg)?;
        let pred = if pairwise {
            let (feats, scores) = exemplars.get(&rec_task).ok_or_else(|| {
                Error::data(format!("no exemplars available for task {rec_task:?}"))
            })?;
            let e = feats[0].len();
            let mut bank = Tensor::zeros(&[feats.len(), e]);
            for (r, f) in feats.iter().enumerate() {
                bank.data_mut()[r * e..(r + 1) * e].copy_from_slice(f);
            }
            let Head::PairDiff(reg) = &mut model.head else { unreachable!() };
            pairwise_predict(reg, feat.data(), &bank, scores)?
        } else {
            let Head::ScoreBins(head) = &mut model.head else { unreachable!() };
            let logits = head.forward(&feat, false);
            expected_score_from_logits(logits.data(), &cfg.support)?
        };
        let entry = task_scores.entry(rec_task).or_default();
        entry.0.push(pred);
        entry.1.push(rec_score);
    }
    aggregate_task_scores(&task_scores)
}

// ── Run comparison ───────────────────────────────────────────────────────

/// One row of the comparison: a labelled run with its parameter/storage
/// accounting and final evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub epochs: usize,
    /// Bytes a checkpoint of the trainable parameters occupies.
    pub checkpoint_bytes: u64,
    pub eval: EvalResult,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    /// Aligned plain-text table.
    pub table: String,
    /// One JSON record per run, newline-delimited.
    pub jsonl: String,
}

pub fn comparison_report(runs: &[RunSummary]) -> Result<ComparisonReport> {
    if runs.is_empty() {
        return Err(Error::config("comparison report needs at least one run"));
    }
    let mut tasks: Vec<String> = runs.iter().flat_map(|r| r.eval.per_task.keys().cloned()).collect();
    tasks.sort();
    tasks.dedup();

    let mut header: Vec<String> =
        ["run", "trainable", "total", "epochs", "ckpt_bytes"].iter().map(|s| s.to_string()).collect();
    header.extend(tasks.iter().map(|t| format!("S:{t}")));
    header.push("avg_S".into());

    let mut rows: Vec<Vec<String>> = vec![header];
    for r in runs {
        let mut row = vec![
            r.label.clone(),
            r.trainable_params.to_string(),
            r.total_params.to_string(),
            r.epochs.to_string(),
            r.checkpoint_bytes.to_string(),
        ];
        for t in &tasks {
            row.push(match r.eval.per_task.get(t) {
                Some(s) => format!("{s:.2}"),
                None => "-".into(),
            });
        }
        row.push(format!("{:.2}", r.eval.average));
        rows.push(row);
    }

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut table = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                line.push_str(&format!("{cell:<w$}", w = widths[0]));
            } else {
                line.push_str(&format!("  {cell:>w$}", w = widths[c]));
            }
        }
        table.push_str(line.trim_end());
        table.push('\n');
    }

    let mut jsonl = String::new();
    for r in runs {
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| Error::numeric(format!("report encoding: {e}")))?);
        jsonl.push('\n');
    }
    Ok(ComparisonReport { table, jsonl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, Family, HeadKind, Model};
    use crate::data::{generate_synthetic_dataset, DomainStyle, Motif, SplitTag, SynthDatasetConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_and_reversed_rankings_hit_the_extremes() {
        let a = [0.5, 1.0, 2.5, 3.0, 7.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = a.iter().rev().cloned().collect();
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_swap_gives_point_eight() {
        // d^2 sums to 2, so 1 - 6*2/(4*15) = 0.8.
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((s - 0.8).abs() < 1e-12, "got {s}");
    }

    #[test]
    fn spearman_is_symmetric() {
        let a = [1.0, 4.0, 2.0, 2.0, 5.0];
        let b = [0.0, 1.0, 3.0, 2.0, 2.0];
        assert_eq!(spearman(&a, &b).unwrap(), spearman(&b, &a).unwrap());
    }

    #[test]
    fn undefined_inputs_are_numeric_errors() {
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::Numeric(_))));
        assert!(matches!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::Numeric(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[f64::NAN, 0.0]), Err(Error::Numeric(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::Shape(_))));
    }

    /// Independent oracle: counting-based fractional ranks (no sorting)
    /// fed through the textbook Pearson formula.
    fn oracle(pred: &[f64], truth: &[f64]) -> Option<f64> {
        let n = pred.len();
        if n < 2 {
            return None;
        }
        let rank = |x: &[f64]| -> Vec<f64> {
            x.iter()
                .map(|&v| {
                    let less = x.iter().filter(|&&u| u < v).count() as f64;
                    let equal = x.iter().filter(|&&u| u == v).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (ra, rb) = (rank(pred), rank(truth));
        let nf = n as f64;
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        let sxy: f64 = ra.iter().zip(&rb).map(|(a, b)| a * b).sum();
        let sxx: f64 = ra.iter().map(|a| a * a).sum();
        let syy: f64 = rb.iter().map(|b| b * b).sum();
        let num = nf * sxy - sum(&ra) * sum(&rb);
        let den = ((nf * sxx - sum(&ra).powi(2)) * (nf * syy - sum(&rb).powi(2))).sqrt();
        if den == 0.0 {
            None
        } else {
            Some(num / den)
        }
    }

    #[test]
    fn matches_counting_oracle_on_random_tied_integer_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut checked = 0;
        for _ in 0..1000 {
            let n = rng.random_range(2..=8);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            match (spearman(&a, &b), oracle(&a, &b)) {
                (Ok(s), Some(o)) => {
                    assert!((s - o).abs() < 1e-12, "{a:?} vs {b:?}: {s} != {o}");
                    checked += 1;
                }
                (Err(Error::Numeric(_)), None) => {}
                (got, want) => panic!("{a:?} vs {b:?}: {got:?} but oracle {want:?}"),
            }
        }
        assert!(checked > 500, "too few defined cases ({checked}) to be meaningful");
    }

    proptest! {
        /// Strictly increasing transforms of either side never change the
        /// correlation.
        #[test]
        fn invariant_under_strictly_increasing_transforms(
            values in proptest::collection::vec(-3.0f64..3.0, 3..12),
            other in proptest::collection::vec(0u8..5, 3..12),
            which in 0usize..3,
        ) {
            let n = values.len().min(other.len());
            let a = &values[..n];
            let b: Vec<f64> = other[..n].iter().map(|&v| v as f64).collect();
            if let Ok(base) = spearman(a, &b) {
                let f = |x: f64| match which {
                    0 => x.exp(),
                    1 => 3.0 * x + 7.0,
                    _ => x * x * x,
                };
                let ta: Vec<f64> = a.iter().map(|&x| f(x)).collect();
                let tb: Vec<f64> = b.iter().map(|&x| f(x)).collect();
                prop_assert!((spearman(&ta, &b).unwrap() - base).abs() < 1e-9);
                prop_assert!((spearman(a, &tb).unwrap() - base).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aggregation_averages_tasks_and_skips_thin_ones() {
        let mut scores = BTreeMap::new();
        // 0.8 correlation -> 80.
        scores.insert("gait".to_string(), (vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 3.0, 2.0, 4.0]));
        // Perfect -> 100.
        scores.insert("tapping".to_string(), (vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0]));
        // One video: skipped with a warning.
        scores.insert("thin".to_string(), (vec![2.0], vec![2.0]));
        let r = aggregate_task_scores(&scores).unwrap();
        assert!((r.per_task["gait"] - 80.0).abs() < 1e-9);
        assert!((r.per_task["tapping"] - 100.0).abs() < 1e-9);
        assert!(!r.per_task.contains_key("thin"));
        assert!((r.average - 90.0).abs() < 1e-9);
        assert_eq!(r.n_videos["thin"], 1);
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].contains("thin"));
    }

    #[test]
    fn perfect_predictions_score_one_hundred_everywhere() {
        let mut scores = BTreeMap::new();
        for task in ["a", "b"] {
            let labels = vec![0.0, 3.0, 1.0, 4.0, 2.0];
            scores.insert(task.to_string(), (labels.clone(), labels));
        }
        let r = aggregate_task_scores(&scores).unwrap();
        assert!(r.per_task.values().all(|&s| (s - 100.0).abs() < 1e-9));
        assert!((r.average - 100.0).abs() < 1e-9);
    }

    #[test]
    fn all_tasks_undefined_is_an_error() {
        let mut scores = BTreeMap::new();
        scores.insert("only".to_string(), (vec![1.0], vec![1.0]));
        assert!(matches!(aggregate_task_scores(&scores), Err(Error::Numeric(_))));
    }

    fn tiny_eval_fixture(head: HeadKind) -> (Model, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthDatasetConfig {
            num_videos: 20,
            frames: 12,
            size: 16,
            motifs: vec![Motif::Translation],
            noise_level: 0.01,
            domain: DomainStyle::General,
            num_subjects: 4,
            test_subjects: 2,
            rate_range: None,
        };
        generate_synthetic_dataset(&cfg, 3, dir.path()).unwrap();
        let ds = Dataset::load(&dir.path().join("manifest.csv")).unwrap();
        let spec = BackboneSpec {
            family: Family::Residual3d,
            stage_channels: vec![4],
            blocks_per_stage: vec![1],
            input_frames: 8,
            input_size: 12,
            adapter_lambda: 2,
        };
        (Model::build(&spec, None, head, 17).unwrap(), ds)
    }

    #[test]
    fn distribution_head_evaluation_is_deterministic_and_bounded() {
        let (mut model, ds) = tiny_eval_fixture(HeadKind::ScoreBins { bins: 5 });
        let cfg = EvalConfig { clip_len: 8, crop: 12, support: ScoreSupport::severity_0_to_4(), max_exemplars: 0 };
        let test_idx = ds.indices_with_tag(SplitTag::Test);
        let r1 = evaluate_model(&mut model, &ds, &test_idx, &[], &cfg).unwrap();
        let r2 = evaluate_model(&mut model, &ds, &test_idx, &[], &cfg).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.per_task.values().all(|s| (-100.0..=100.0).contains(s)));
        assert_eq!(r1.n_videos.values().sum::<usize>(), test_idx.len());
    }

    #[test]
    fn pairwise_head_evaluation_uses_exemplars() {
        let (mut model, ds) = tiny_eval_fixture(HeadKind::PairDiff);
        let cfg = EvalConfig { clip_len: 8, crop: 12, support: ScoreSupport::severity_0_to_4(), max_exemplars: 4 };
        let test_idx = ds.indices_with_tag(SplitTag::Test);
        let train_idx = ds.indices_with_tag(SplitTag::Train);
        let r = evaluate_model(&mut model, &ds, &test_idx, &train_idx, &cfg).unwrap();
        assert!(r.per_task.values().all(|s| (-100.0..=100.0).contains(s)));
        // Without exemplars the pairwise head cannot score anything.
        assert!(matches!(evaluate_model(&mut model, &ds, &test_idx, &[], &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn featureless_heads_cannot_be_evaluated() {
        let (mut model, ds) = tiny_eval_fixture(HeadKind::None);
        let cfg = EvalConfig { clip_len: 8, crop: 12, support: ScoreSupport::severity_0_to_4(), max_exemplars: 0 };
        let idx: Vec<usize> = (0..ds.len()).collect();
        assert!(matches!(evaluate_model(&mut model, &ds, &idx, &[], &cfg), Err(Error::Config(_))));
    }

    fn summary(label: &str, trainable: usize, tasks: &[(&str, f64)]) -> RunSummary {
        let per_task: BTreeMap<String, f64> = tasks.iter().map(|(t, s)| (t.to_string(), *s)).collect();
        let average = if per_task.is_empty() {
            0.0
        } else {
            per_task.values().sum::<f64>() / per_task.len() as f64
        };
        RunSummary {
            label: label.to_string(),
            trainable_params: trainable,
            total_params: 1_000_000,
            epochs: 8,
            checkpoint_bytes: 8 * trainable as u64,
            eval: EvalResult {
                per_task,
                average,
                n_videos: BTreeMap::new(),
                warnings: Vec::new(),
            },
        }
    }

    #[test]
    fn report_renders_rows_and_machine_records() {
        let runs = vec![
            summary("adapters", 50_000, &[("gait", 71.5), ("tapping", 60.0)]),
            summary("full", 1_000_000, &[("gait", 70.0)]),
        ];
        let rep = comparison_report(&runs).unwrap();
        assert!(rep.table.contains("adapters") && rep.table.contains("full"));
        assert!(rep.table.contains("S:gait") && rep.table.contains("S:tapping"));
        assert!(rep.table.contains("71.50"));
        // The run without a task shows a dash, not a number.
        let full_row = rep.table.lines().find(|l| l.starts_with("full")).unwrap();
        assert!(full_row.contains('-'));
        // Every jsonl line parses back.
        let lines: Vec<_> = rep.jsonl.lines().collect();
        assert_eq!(lines.len(), 2);
        for l in lines {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert!(v["trainable_params"].is_u64());
        }
    }

    #[test]
    fn report_handles_single_run_and_empty_task_maps() {
        let rep = comparison_report(&[summary("lonely", 10, &[])]).unwrap();
        assert_eq!(rep.table.lines().count(), 2, "header + one row");
        assert!(rep.table.contains("avg_S"));
        assert!(!rep.table.contains("S:"));
        assert!(comparison_report(&[]).is_err());
    }
}
