//! Probabilistic uncertainty of pseudo labels.
//!
//! A sample's embedding is classified by a cosine classifier whose weights
//! are the cluster centroids; the uncertainty of its pseudo label is the KL
//! divergence from a smoothed one-hot distribution peaked at that label to
//! the classifier output. Two alternative criteria (distance to centroid and
//! teacher/student prediction consistency) are provided for comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clusterer::ClusterModel;
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, squared_distance, Matrix};

/// Tolerance used when validating that a distribution sums to one.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDistribution(Vec<f64>);

impl ProbDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("empty distribution".into()));
        }
        if let Some(i) = probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Input(format!("probability {i} is {}", probs[i])));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Input(format!("probabilities sum to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreCriterion {
    KlIdeal,
    L2Centroid,
    Consistency,
}

impl ScoreCriterion {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreCriterion::KlIdeal => "kl_ideal",
            ScoreCriterion::L2Centroid => "l2_centroid",
            ScoreCriterion::Consistency => "consistency",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub sample_index: usize,
    pub score: f64,
    pub criterion: ScoreCriterion,
}

/// Classifier weights normalized once, with the normalization errors
/// reported against the centroid index.
#[derive(Debug, Clone)]
pub struct CosineClassifier {
    unit: Matrix,
    norms: Vec<f64>,
}

impl CosineClassifier {
    pub fn new(centroids: &Matrix) -> Result<Self> {
        centroids.ensure_finite("centroids")?;
        let mut unit = centroids.clone();
        let mut norms = Vec::with_capacity(centroids.rows());
        for j in 0..centroids.rows() {
            let n = norm(centroids.row(j));
            if n == 0.0 {
                return Err(Error::SingularNormalization {
                    what: "centroid",
                    index: j,
                });
            }
            norms.push(n);
            for v in unit.row_mut(j) {
                *v /= n;
            }
        }
        Ok(Self { unit, norms })
    }

    pub fn classes(&self) -> usize {
        self.unit.rows()
    }

    pub fn unit_weights(&self) -> &Matrix {
        &self.unit
    }

    pub fn weight_norms(&self) -> &[f64] {
        &self.norms
    }

    /// `alpha · cos(centroid_j, f)` for every class. `index` only labels errors.
    pub fn logits(&self, f: &[f64], alpha: f64, index: usize) -> Result<Vec<f64>> {
        if f.len() != self.unit.cols() {
            return Err(Error::Input(format!(
                "feature {index} has d={}, classifier expects d={}",
                f.len(),
                self.unit.cols()
            )));
        }
        let n = norm(f);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::SingularNormalization {
                what: "feature",
                index,
            });
        }
        Ok(self
            .unit
            .iter_rows()
            .map(|w| alpha * dot(w, f) / n)
            .collect())
    }
}

/// Numerically stable `ln softmax(z)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over cosine similarities between `f` and each centroid, scaled by `alpha`.
pub fn centroid_classifier_probs(f: &[f64], centroids: &Matrix, alpha: f64) -> Result<ProbDistribution> {
    check_alpha(alpha)?;
    let clf = CosineClassifier::new(centroids)?;
    let logits = clf.logits(f, alpha, 0)?;
    Ok(ProbDistribution(softmax(&logits)))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("alpha", "temperature must be finite and > 0"));
    }
    Ok(())
}

pub(crate) fn check_epsilon(c: usize, epsilon: f64) -> Result<()> {
    if c < 2 {
        return Err(Error::config("c", "need at least 2 classes"));
    }
    if !(epsilon > 1.0 / c as f64 && epsilon <= 1.0) {
        return Err(Error::config(
            "epsilon",
            format!("must lie in (1/c, 1] = ({}, 1], got {epsilon}", 1.0 / c as f64),
        ));
    }
    Ok(())
}

/// Smoothed one-hot: `epsilon` on `label`, `(1 - epsilon)/(c - 1)` elsewhere.
pub fn ideal_distribution(c: usize, label: usize, epsilon: f64) -> Result<ProbDistribution> {
    check_epsilon(c, epsilon)?;
    if label >= c {
        return Err(Error::Input(format!("label {label} outside [0, {c})")));
    }
    let off = (1.0 - epsilon) / (c - 1) as f64;
    let mut probs = vec![off; c];
    probs[label] = epsilon;
    Ok(ProbDistribution(probs))
}

/// `KL(q ‖ p)` in nats, with `0 · ln(0/p) = 0`.
pub fn kl_uncertainty(q: &ProbDistribution, p: &ProbDistribution) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::Input(format!(
            "distribution lengths differ: {} vs {}",
            q.len(),
            p.len()
        )));
    }
    let mut total = 0.0;
    for (j, (&qj, &pj)) in q.0.iter().zip(&p.0).enumerate() {
        if qj == 0.0 {
            continue;
        }
        if pj == 0.0 {
            return Err(Error::InfiniteDivergence { index: j });
        }
        total += qj * (qj.ln() - pj.ln());
    }
    Ok(total.max(0.0))
}

/// `KL(q ‖ softmax(logits))` evaluated in log space.
pub(crate) fn kl_to_logits(q: &[f64], logits: &[f64]) -> f64 {
    let logp = log_softmax(logits);
    let mut total = 0.0;
    for (&qj, lp) in q.iter().zip(logp) {
        if qj > 0.0 {
            total += qj * (qj.ln() - lp);
        }
    }
    total.max(0.0)
}

fn check_alignment(features: &Matrix, cluster: &ClusterModel) -> Result<()> {
    if features.rows() != cluster.assignments.len() {
        return Err(Error::Input(format!(
            "{} features but {} assignments",
            features.rows(),
            cluster.assignments.len()
        )));
    }
    if features.cols() != cluster.centroids.cols() {
        return Err(Error::Input("feature and centroid dimensions differ".into()));
    }
    if let Some(i) = cluster.assignments.iter().position(|&a| a >= cluster.k()) {
        return Err(Error::Input(format!(
            "pseudo label {} of sample {i} has no centroid",
            cluster.assignments[i]
        )));
    }
    Ok(())
}

/// KL-to-ideal uncertainty of every sample against `classifier_weights`,
/// with pseudo labels taken from `pseudo_labels`.
pub fn score_with_classifier(
    features: &Matrix,
    classifier_weights: &Matrix,
    pseudo_labels: &[usize],
    alpha: f64,
    epsilon: f64,
) -> Result<Vec<UncertaintyRecord>> {
    let cluster = ClusterModel {
        centroids: classifier_weights.clone(),
        assignments: pseudo_labels.to_vec(),
        inertia: 0.0,
        iterations: 0,
    };
    score_all(features, &cluster, alpha, epsilon)
}

/// KL-to-ideal uncertainty of every sample's pseudo label.
pub fn score_all(features: &Matrix, cluster: &ClusterModel, alpha: f64, epsilon: f64) -> Result<Vec<UncertaintyRecord>> {
    check_alignment(features, cluster)?;
    check_alpha(alpha)?;
    let c = cluster.k();
    check_epsilon(c, epsilon)?;
    let clf = CosineClassifier::new(&cluster.centroids)?;
    let off = (1.0 - epsilon) / (c - 1) as f64;
    (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let label = cluster.assignments[i];
            let mut q = vec![off; c];
            q[label] = epsilon;
            let logits = clf.logits(features.row(i), alpha, i)?;
            Ok(UncertaintyRecord {
                sample_index: i,
                score: kl_to_logits(&q, &logits),
                criterion: ScoreCriterion::KlIdeal,
            })
        })
        .collect()
}

/// Euclidean distance of each sample to its assigned centroid.
pub fn l2_uncertainty(features: &Matrix, cluster: &ClusterModel) -> Result<Vec<UncertaintyRecord>> {
    check_alignment(features, cluster)?;
    Ok((0..features.rows())
        .map(|i| UncertaintyRecord {
            sample_index: i,
            score: squared_distance(features.row(i), cluster.centroids.row(cluster.assignments[i])).sqrt(),
            criterion: ScoreCriterion::L2Centroid,
        })
        .collect())
}

/// Symmetrized KL between teacher and student classifier outputs.
pub fn consistency_uncertainty(
    teacher_feats: &Matrix,
    student_feats: &Matrix,
    cluster: &ClusterModel,
    alpha: f64,
) -> Result<Vec<UncertaintyRecord>> {
    check_alignment(teacher_feats, cluster)?;
    check_alignment(student_feats, cluster)?;
    check_alpha(alpha)?;
    let clf = CosineClassifier::new(&cluster.centroids)?;
    (0..teacher_feats.rows())
        .into_par_iter()
        .map(|i| {
            let lt = log_softmax(&clf.logits(teacher_feats.row(i), alpha, i)?);
            let ls = log_softmax(&clf.logits(student_feats.row(i), alpha, i)?);
            let mut score = 0.0;
            for (a, b) in lt.iter().zip(&ls) {
                // ½[Σ pt(ln pt − ln ps) + Σ ps(ln ps − ln pt)] = ½ Σ (pt − ps)(ln pt − ln ps)
                score += (a.exp() - b.exp()) * (a - b);
            }
            Ok(UncertaintyRecord {
                sample_index: i,
                score: (0.5 * score).max(0.0),
                criterion: ScoreCriterion::Consistency,
            })
        })
        .collect()
}

pub fn scores(records: &[UncertaintyRecord]) -> Vec<f64> {
    records.iter().map(|r| r.score).collect()
}
