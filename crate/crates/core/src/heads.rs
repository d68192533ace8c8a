//! Fine-tuning heads. Two ways to turn a clip embedding into a score:
//! a distribution head trained with KL divergence against a discretized
//! Gaussian centered on the true score, and a pairwise regressor that
//! predicts the score *difference* between a query and an exemplar clip
//! whose score is known.

use crate::error::{Error, Result};
use crate::nn::{kl_target_grad, softmax, Linear};
use crate::tensor::Tensor;

/// Evenly spaced score bin centers over [min_score, max_score].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSupport {
    pub min_score: f64,
    pub max_score: f64,
    centers: Vec<f64>,
}

impl ScoreSupport {
    pub fn new(min_score: f64, max_score: f64, num_bins: usize) -> Result<ScoreSupport> {
        if !(min_score.is_finite() && max_score.is_finite() && min_score < max_score) {
            return Err(Error::config(format!("score support needs min < max, got [{min_score}, {max_score}]")));
        }
        if num_bins < 2 {
            return Err(Error::config(format!("score support needs at least 2 bins, got {num_bins}")));
        }
        let step = (max_score - min_score) / (num_bins - 1) as f64;
        let centers = (0..num_bins).map(|i| min_score + step * i as f64).collect();
        Ok(ScoreSupport { min_score, max_score, centers })
    }

    /// The 0..=4 severity scale: five integer bins.
    pub fn severity_0_to_4() -> ScoreSupport {
        ScoreSupport::new(0.0, 4.0, 5).unwrap()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn num_bins(&self) -> usize {
        self.centers.len()
    }

    /// One bin width; the default Gaussian sigma.
    pub fn bin_width(&self) -> f64 {
        self.centers[1] - self.centers[0]
    }
}

/// A normalized target distribution over score bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTarget {
    pub probs: Vec<f64>,
    pub source_score: f64,
    pub sigma: f64,
}

/// Discretize a Gaussian N(score, sigma^2) onto the support's bin centers.
/// The largest weight is pulled to 1 before normalizing so that tiny sigmas
/// collapse to a one-hot at the nearest bin instead of underflowing.
pub fn gaussian_target(score: f64, support: &ScoreSupport, sigma: f64) -> Result<ScoreTarget> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::config(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if !score.is_finite() || score < support.min_score || score > support.max_score {
        return Err(Error::data(format!(
            "score {score} outside the support [{}, {}]",
            support.min_score, support.max_score
        )));
    }
    let d2: Vec<f64> = support.centers.iter().map(|c| (c - score) * (c - score)).collect();
    let d2_min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = d2.iter().map(|v| (-(v - d2_min) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = weights.iter().sum();
    Ok(ScoreTarget { probs: weights.iter().map(|w| w / sum).collect(), source_score: score, sigma })
}

/// Mean KL(target || softmax(logits)) over a batch, with d loss / d logits
/// already divided by the batch size.
pub fn score_distribution_loss(logits: &Tensor, targets: &[ScoreTarget]) -> Result<(f64, Tensor)> {
    let (n, bins) = logits.dims2()?;
    if n != targets.len() {
        return Err(Error::shape(format!("{n} logit rows for {} targets", targets.len())));
    }
    if n == 0 {
        return Err(Error::shape("score-distribution loss over an empty batch"));
    }
    let mut grad = Tensor::zeros(&[n, bins]);
    let mut total = 0.0;
    for (i, target) in targets.iter().enumerate() {
        if target.probs.len() != bins {
            return Err(Error::shape(format!(
                "target {i} has {} bins but the head produces {bins}",
                target.probs.len()
            )));
        }
        let (kl, g) = kl_target_grad(&logits.data()[i * bins..(i + 1) * bins], &target.probs);
        total += kl;
        for (j, v) in g.iter().enumerate() {
            grad.data_mut()[i * bins + j] = v / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Expected score under a normalized distribution over the bin centers.
pub fn expected_score(probs: &[f64], support: &ScoreSupport) -> Result<f64> {
    if probs.len() != support.num_bins() {
        return Err(Error::shape(format!(
            "{} probabilities for a {}-bin support",
            probs.len(),
            support.num_bins()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::data(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(probs.iter().zip(support.centers()).map(|(p, c)| p * c).sum())
}

/// Softmax the logits and decode their expected score.
pub fn expected_score_from_logits(logits_row: &[f64], support: &ScoreSupport) -> Result<f64> {
    expected_score(&softmax(logits_row), support)
}

// ── Pairwise relative scoring ────────────────────────────────────────────

/// Rows of concat(query_embedding, exemplar_embedding, exemplar_score),
/// the input the difference regressor sees.
pub fn pair_input_batch(query: &Tensor, exemplar: &Tensor, exemplar_scores: &[f64]) -> Result<Tensor> {
    let (n, e) = query.dims2()?;
    let (n2, e2) = exemplar.dims2()?;
    if n != n2 || e != e2 || n != exemplar_scores.len() {
        return Err(Error::shape(format!(
            "pair batch mismatch: query {:?}, exemplar {:?}, {} scores",
            query.shape(),
            exemplar.shape(),
            exemplar_scores.len()
        )));
    }
    let width = 2 * e + 1;
    let mut out = Tensor::zeros(&[n, width]);
    for i in 0..n {
        let row = &mut out.data_mut()[i * width..(i + 1) * width];
        row[..e].copy_from_slice(&query.data()[i * e..(i + 1) * e]);
        row[e..2 * e].copy_from_slice(&exemplar.data()[i * e..(i + 1) * e]);
        row[2 * e] = exemplar_scores[i];
    }
    Ok(out)
}

/// Mean squared error between predicted differences (an (N, 1) column) and
/// query_score - exemplar_score, plus d loss / d predictions.
pub fn pairwise_diff_loss(pred: &Tensor, query_scores: &[f64], exemplar_scores: &[f64]) -> Result<(f64, Tensor)> {
    let (n, one) = pred.dims2()?;
    if one != 1 {
        return Err(Error::shape(format!("difference regressor must output one value per row, got {one}")));
    }
    if n == 0 || n != query_scores.len() || n != exemplar_scores.len() {
        return Err(Error::shape(format!(
            "pairwise loss mismatch: {n} predictions, {} query scores, {} exemplar scores",
            query_scores.len(),
            exemplar_scores.len()
        )));
    }
    let mut grad = Tensor::zeros(&[n, 1]);
    let mut total = 0.0;
    for i in 0..n {
        let diff = pred.data()[i] - (query_scores[i] - exemplar_scores[i]);
        total += diff * diff;
        grad.data_mut()[i] = 2.0 * diff / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Squared error for a single (query, exemplar) pair under the given
/// regressor; the worked-example form of [`pairwise_diff_loss`].
pub fn pairwise_relative_loss(
    regressor: &mut Linear,
    query_feature: &[f64],
    exemplar_feature: &[f64],
    exemplar_score: f64,
    query_score: f64,
) -> Result<f64> {
    if query_feature.len() != exemplar_feature.len() {
        return Err(Error::shape(format!(
            "query feature has {} dims but exemplar has {}",
            query_feature.len(),
            exemplar_feature.len()
        )));
    }
    let q = Tensor::from_vec(&[1, query_feature.len()], query_feature.to_vec());
    let ex = Tensor::from_vec(&[1, exemplar_feature.len()], exemplar_feature.to_vec());
    let x = pair_input_batch(&q, &ex, &[exemplar_score])?;
    let pred = regressor.forward(&x, false);
    let (loss, _) = pairwise_diff_loss(&pred, &[query_score], &[exemplar_score])?;
    Ok(loss)
}

/// Score a query by averaging exemplar_score + predicted difference over a
/// set of exemplars with known scores.
pub fn pairwise_predict(
    regressor: &mut Linear,
    query_feature: &[f64],
    exemplar_features: &Tensor,
    exemplar_scores: &[f64],
) -> Result<f64> {
    let (m, e) = exemplar_features.dims2()?;
    if m == 0 {
        return Err(Error::data("pairwise prediction needs at least one exemplar"));
    }
    if e != query_feature.len() || m != exemplar_scores.len() {
        return Err(Error::shape(format!(
            "exemplar batch {:?} incompatible with query dim {} / {} scores",
            exemplar_features.shape(),
            query_feature.len(),
            exemplar_scores.len()
        )));
    }
    let mut q = Tensor::zeros(&[m, e]);
    for i in 0..m {
        q.data_mut()[i * e..(i + 1) * e].copy_from_slice(query_feature);
    }
    let x = pair_input_batch(&q, exemplar_features, exemplar_scores)?;
    let pred = regressor.forward(&x, false);
    let mean = (0..m).map(|i| exemplar_scores[i] + pred.data()[i]).sum::<f64>() / m as f64;
    Ok(mean)
}
