//! Lloyd's k-means with k-means++ seeding.
//!
//! Centroids double as the weights of the external classifier used for
//! uncertainty scoring. Assignment runs in parallel over samples; every
//! reduction (centroid sums, inertia) is accumulated in ascending sample
//! order so results do not depend on the worker count.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::synthgen::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// `c × d`; row `j` is the classifier weight of pseudo label `j`.
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

/// Nearest centroid per sample; ties go to the smallest centroid index.
pub fn assign(features: &Matrix, centroids: &Matrix) -> Result<Vec<usize>> {
    if features.cols() != centroids.cols() {
        return Err(Error::Input(format!(
            "features have d={} but centroids have d={}",
            features.cols(),
            centroids.cols()
        )));
    }
    if centroids.rows() == 0 {
        return Err(Error::Input("no centroids".into()));
    }
    features.ensure_finite("features")?;
    centroids.ensure_finite("centroids")?;
    Ok(assign_unchecked(features, centroids))
}

fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_unchecked(features: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..features.rows())
        .into_par_iter()
        .map(|i| nearest(features.row(i), centroids).0)
        .collect()
}

pub fn inertia(features: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    let per_sample: Vec<f64> = (0..features.rows())
        .into_par_iter()
        .map(|i| squared_distance(features.row(i), centroids.row(assignments[i])))
        .collect();
    per_sample.iter().sum()
}

fn kmeans_plus_plus(features: &Matrix, k: usize, seed: u64) -> Matrix {
    let n = features.rows();
    let mut rng = rng_for(seed);
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..n));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(features.row(i), features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(&mut rng),
            // every remaining point coincides with a chosen one
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.gen_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(squared_distance(features.row(i), features.row(next)));
        }
    }
    features.select_rows(&chosen)
}

/// Moves the sample farthest from its own centroid into each empty cluster.
/// Clusters are visited in index order; donors must keep at least one member.
fn repair_empty(features: &Matrix, centroids: &Matrix, assignments: &mut [usize], k: usize) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &a) in assignments.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(features.row(i), centroids.row(a));
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            counts[assignments[i]] -= 1;
            assignments[i] = empty;
            counts[empty] = 1;
        }
    }
}

fn cluster_means(features: &Matrix, assignments: &[usize], k: usize) -> Matrix {
    let d = features.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in sums.row_mut(a).iter_mut().zip(features.row(i)) {
            *s += x;
        }
    }
    for (j, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            for s in sums.row_mut(j) {
                *s /= cnt as f64;
            }
        }
    }
    sums
}

/// Runs k-means and also returns the inertia after every Lloyd iteration.
pub fn kmeans_with_trace(features: &Matrix, params: KMeansParams) -> Result<(ClusterModel, Vec<f64>)> {
    validate(features, params)?;
    let init = kmeans_plus_plus(features, params.k, params.seed);
    lloyd(features, init, params)
}

pub fn kmeans(features: &Matrix, params: KMeansParams) -> Result<ClusterModel> {
    kmeans_with_trace(features, params).map(|(m, _)| m)
}

/// Lloyd iterations starting from the given centroids instead of k-means++.
pub fn kmeans_warm(features: &Matrix, init: &Matrix, params: KMeansParams) -> Result<ClusterModel> {
    let params = KMeansParams {
        k: init.rows(),
        ..params
    };
    validate(features, params)?;
    if init.cols() != features.cols() {
        return Err(Error::Input("warm-start centroids have wrong dimension".into()));
    }
    init.ensure_finite("warm-start centroids")?;
    lloyd(features, init.clone(), params).map(|(m, _)| m)
}

fn validate(features: &Matrix, params: KMeansParams) -> Result<()> {
    if params.k == 0 || params.k > features.rows() {
        return Err(Error::Input(format!(
            "k={} must lie in [1, N={}]",
            params.k,
            features.rows()
        )));
    }
    if params.max_iters == 0 {
        return Err(Error::config("max_iters", "must be at least 1"));
    }
    if !(params.tol >= 0.0) {
        return Err(Error::config("tol", "must be >= 0"));
    }
    features.ensure_finite("features")
}

fn lloyd(features: &Matrix, mut centroids: Matrix, params: KMeansParams) -> Result<(ClusterModel, Vec<f64>)> {
    let k = params.k;
    let mut trace = Vec::new();
    let mut assignments: Vec<usize> = Vec::new();
    let mut current = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        iterations += 1;
        let mut next = assign_unchecked(features, &centroids);
        repair_empty(features, &centroids, &mut next, k);
        let unchanged = next == assignments;
        assignments = next;
        centroids = cluster_means(features, &assignments, k);
        let value = inertia(features, &centroids, &assignments);
        trace.push(value);
        let improvement = current - value;
        current = value;
        if unchanged || improvement < params.tol {
            break;
        }
    }
    Ok((
        ClusterModel {
            centroids,
            assignments,
            inertia: current,
            iterations,
        },
        trace,
    ))
}

/// Majority identity of every cluster id present in `assignments`; ties go to
/// the smaller identity.
pub fn majority_identities(assignments: &[usize], hidden_labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&a, &y) in assignments.iter().zip(hidden_labels) {
        *counts.entry(a).or_default().entry(y).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(cluster, ids)| {
            let mut best = (usize::MAX, 0usize);
            for (id, cnt) in ids {
                if cnt > best.1 {
                    best = (id, cnt);
                }
            }
            (cluster, best.0)
        })
        .collect()
}

/// Fraction of samples whose identity is the majority identity of their cluster.
pub fn cluster_purity(assignments: &[usize], hidden_labels: &[usize]) -> Result<f64> {
    if assignments.len() != hidden_labels.len() {
        return Err(Error::Input(format!(
            "{} assignments vs {} labels",
            assignments.len(),
            hidden_labels.len()
        )));
    }
    if assignments.is_empty() {
        return Ok(1.0);
    }
    let majority = majority_identities(assignments, hidden_labels);
    let correct = assignments
        .iter()
        .zip(hidden_labels)
        .filter(|(a, y)| majority[a] == **y)
        .count();
    Ok(correct as f64 / assignments.len() as f64)
}

/// `true` where the pseudo label is wrong: the sample's identity differs from
/// the majority identity of the cluster its pseudo label points at. The
/// majority map comes from `reference` (usually the clean clustering); labels
/// pointing at clusters absent from it count as wrong.
pub fn wrong_label_mask(
    pseudo_labels: &[usize],
    reference: &[usize],
    hidden_labels: &[usize],
) -> Vec<bool> {
    let majority = majority_identities(reference, hidden_labels);
    pseudo_labels
        .iter()
        .zip(hidden_labels)
        .map(|(p, y)| majority.get(p) != Some(y))
        .collect()
}
