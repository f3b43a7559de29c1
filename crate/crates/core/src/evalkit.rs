//! Ground-truth evaluation: wrong-label detection and retrieval metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::synthgen::rng_for;

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub precision: f64,
    /// `None` when there are no wrong labels.
    pub recall: Option<f64>,
    /// `None` when either class is empty.
    pub auroc: Option<f64>,
    pub top_fraction: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc.get(&1).copied().unwrap_or(0.0)
    }
}

/// Midranks (1-based) of `scores`, averaging tied positions.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mid;
        }
        start = end;
    }
    ranks
}

/// Area under the ROC curve of `scores` as a detector of `positive`, via the
/// rank-sum statistic with midranks for ties.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Flags the top `round(N · top_fraction)` scores as wrong and compares with
/// `wrong_mask`.
pub fn detection_metrics(scores: &[f64], wrong_mask: &[bool], top_fraction: f64) -> Result<DetectionOutcome> {
    if scores.len() != wrong_mask.len() {
        return Err(Error::Input(format!(
            "{} scores vs {} mask entries",
            scores.len(),
            wrong_mask.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Input("no scores".into()));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::config("top_fraction", "must lie in (0, 1]"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Input(format!("score {i} is not finite")));
    }
    let n = scores.len();
    let flagged = ((n as f64 * top_fraction).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let hits = order[..flagged].iter().filter(|&&i| wrong_mask[i]).count();
    let n_wrong = wrong_mask.iter().filter(|&&w| w).count();
    let recall = (n_wrong > 0).then(|| hits as f64 / n_wrong as f64);
    let auroc = auroc(scores, wrong_mask);
    Ok(DetectionOutcome {
        precision: hits as f64 / flagged as f64,
        recall,
        degenerate: recall.is_none() || auroc.is_none(),
        auroc,
        top_fraction,
    })
}

/// Seeded query/gallery split with every identity on both sides.
pub fn split_query_gallery(identities: &[usize], query_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(query_fraction > 0.0 && query_fraction < 1.0) {
        return Err(Error::config("query_fraction", "must lie in (0, 1)"));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in identities.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let mut rng = rng_for(seed);
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for (id, mut members) in by_id {
        if members.len() < 2 {
            return Err(Error::Split { identity: id });
        }
        members.shuffle(&mut rng);
        let nq = ((members.len() as f64 * query_fraction).round() as usize).clamp(1, members.len() - 1);
        query.extend_from_slice(&members[..nq]);
        gallery.extend_from_slice(&members[nq..]);
    }
    query.sort_unstable();
    gallery.sort_unstable();
    Ok((query, gallery))
}

fn unit_rows(embeddings: &Matrix) -> Result<Matrix> {
    let mut out = embeddings.clone();
    for i in 0..out.rows() {
        let n = norm(out.row(i));
        if n == 0.0 {
            return Err(Error::SingularNormalization {
                what: "embedding",
                index: i,
            });
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Average precision and first-hit position (0-based) of one query given its
/// gallery ranking.
fn rank_query(relevant: impl Fn(usize) -> bool, ranking: &[usize]) -> (f64, Option<usize>) {
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (pos, &g) in ranking.iter().enumerate() {
        if relevant(g) {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos);
        }
    }
    let ap = if hits == 0 { 0.0 } else { precision_sum / hits as f64 };
    (ap, first)
}

/// mAP and CMC at `ranks` for an explicit query/gallery split, ranking the
/// gallery by cosine distance with ties broken by gallery order.
pub fn evaluate_split(
    embeddings: &Matrix,
    identities: &[usize],
    query: &[usize],
    gallery: &[usize],
    ranks: &[usize],
) -> Result<RetrievalResult> {
    if embeddings.rows() != identities.len() {
        return Err(Error::Input("embeddings and identities differ in length".into()));
    }
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Input("empty query or gallery".into()));
    }
    embeddings.ensure_finite("embeddings")?;
    let unit = unit_rows(embeddings)?;
    let per_query: Vec<(f64, Option<usize>)> = query
        .par_iter()
        .map(|&q| {
            let qv = unit.row(q);
            let sims: Vec<f64> = gallery.iter().map(|&g| dot(qv, unit.row(g))).collect();
            let mut order: Vec<usize> = (0..gallery.len()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            rank_query(|pos| identities[gallery[pos]] == identities[q], &order)
        })
        .collect();
    let nq = query.len() as f64;
    let map = per_query.iter().map(|(ap, _)| ap).sum::<f64>() / nq;
    let cmc = ranks
        .iter()
        .map(|&r| {
            let hit = per_query.iter().filter(|(_, f)| f.is_some_and(|p| p < r)).count();
            (r, hit as f64 / nq)
        })
        .collect();
    Ok(RetrievalResult { map, cmc })
}

pub fn retrieval_eval(embeddings: &Matrix, identities: &[usize], query_fraction: f64, seed: u64) -> Result<RetrievalResult> {
    let (query, gallery) = split_query_gallery(identities, query_fraction, seed)?;
    evaluate_split(embeddings, identities, &query, &gallery, &CMC_RANKS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pair_count_auroc(scores: &[f64], pos: &[bool]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    total += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total / pairs
    }

    #[test]
    fn perfect_separation() {
        let scores = [0.1, 0.9, 0.2, 0.8, 0.3];
        let wrong = [false, true, false, true, false];
        let out = detection_metrics(&scores, &wrong, 0.4).unwrap();
        assert_eq!(out.precision, 1.0);
        assert_eq!(out.recall, Some(1.0));
        assert_eq!(out.auroc, Some(1.0));
        assert!(!out.degenerate);
    }

    #[test]
    fn constant_scores_give_half() {
        let out = detection_metrics(&[0.4; 6], &[true, false, false, true, false, false], 0.5).unwrap();
        assert_eq!(out.auroc, Some(0.5));
    }

    #[test]
    fn no_wrong_labels_is_degenerate() {
        let out = detection_metrics(&[0.1, 0.2, 0.3], &[false; 3], 0.3).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.recall, None);
        assert_eq!(out.precision, 0.0);
    }

    #[test]
    fn auroc_matches_pair_counting() {
        let mut rng = rng_for(31);
        for _ in 0..20 {
            let n = rng.gen_range(5..60);
            // coarse values to force ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) * 0.25).collect();
            let mut pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            pos[0] = true;
            pos[1] = false;
            let fast = auroc(&scores, &pos).unwrap();
            assert!((fast - pair_count_auroc(&scores, &pos)).abs() <= 1e-12);
        }
    }

    #[test]
    fn perfect_embedding_retrieval() {
        let ids: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let mut emb = Matrix::zeros(40, 4);
        for (i, &id) in ids.iter().enumerate() {
            emb[(i, id)] = 1.0;
        }
        let r = retrieval_eval(&emb, &ids, 0.25, 0).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank1(), 1.0);
    }

    #[test]
    fn hand_computed_average_precision() {
        // gallery rows 3..6, query rows 0..3 in 2-d
        let emb = Matrix::from_rows(&[
            vec![1.0, 0.0],  // q0, id 0
            vec![0.0, 1.0],  // q1, id 1
            vec![1.0, 0.8],  // q2, id 0
            vec![1.0, 0.1],  // g0, id 0
            vec![0.1, 1.0],  // g1, id 1
            vec![1.0, -0.5], // g2, id 1
        ])
        .unwrap();
        let ids = [0, 1, 0, 0, 1, 1];
        let r = evaluate_split(&emb, &ids, &[0, 1, 2], &[3, 4, 5], &[1, 2, 3]).unwrap();
        // q0 ranks g0, g2, g1 → AP = 1
        // q1 ranks g1, g0, g2 → hits at 1 and 3 → (1 + 2/3)/2 = 5/6
        // q2 ranks g0, g1, g2 → AP = 1
        let expected = (1.0 + 5.0 / 6.0 + 1.0) / 3.0;
        assert!((r.map - expected).abs() < 1e-12);
        assert_eq!(r.cmc[&1], 1.0);
    }

    #[test]
    fn random_embeddings_map_near_chance() {
        // chance AP for 1 of c relevant classes in a balanced gallery is
        // roughly the class share; check the average over seeds stays close
        let c = 10;
        let ids: Vec<usize> = (0..200).map(|i| i % c).collect();
        let mut maps = Vec::new();
        for seed in 0..10 {
            let mut rng = rng_for(100 + seed);
            let data = (0..200 * 8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let emb = Matrix::from_vec(200, 8, data).unwrap();
            maps.push(retrieval_eval(&emb, &ids, 0.2, seed).unwrap().map);
        }
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        // expected AP of random ranking with 16 relevant of 160 ≈ 0.12
        assert!((mean - 0.12).abs() < 0.03, "mean mAP {mean}");
    }

    #[test]
    fn cmc_reaches_one_at_full_gallery() {
        let mut rng = rng_for(2);
        let ids: Vec<usize> = (0..30).map(|i| i % 5).collect();
        let data = (0..30 * 3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let emb = Matrix::from_vec(30, 3, data).unwrap();
        let (q, g) = split_query_gallery(&ids, 0.3, 1).unwrap();
        let ranks: Vec<usize> = (1..=g.len()).collect();
        let r = evaluate_split(&emb, &ids, &q, &g, &ranks).unwrap();
        let vals: Vec<f64> = r.cmc.values().copied().collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r.cmc[&g.len()], 1.0);
    }

    #[test]
    fn singleton_identity_rejected() {
        let err = split_query_gallery(&[0, 0, 1, 2, 2], 0.5, 0).unwrap_err();
        assert!(matches!(err, Error::Split { identity: 1 }));
    }
}
